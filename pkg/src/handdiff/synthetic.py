"""Procedural capsule hand: forward kinematics, depth rendering and the
on-disk dataset format.

Dataset directory layout::

    meta.txt            key=value lines: joints, width, height, fx, fy, cx, cy,
                        count, units=mm
    depth_000000.pgm    16-bit binary PGM (big-endian), depth in mm, 0 = invalid
    joints.csv          frame,joint,x_mm,y_mm,z_mm  (camera space)
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from handdiff import kernels
from handdiff.geometry import CameraIntrinsics, DepthFrame, EmptyFrameError, FrameSample, \
    cloud_from_frame

FINGERS = ("thumb", "index", "middle", "ring", "little")
# skeleton index of each finger's 4 joints (base, then distal towards the tip)
FINGER_JOINTS = [[1 + 4 * f + k for k in range(4)] for f in range(5)]
# 16-joint layout: palm/wrist, then base, middle and tip of each finger
JOINTS_16 = [0] + [j for f in FINGER_JOINTS for j in (f[0], f[1], f[3])]
SKELETON_BONES = [(0, f[0]) for f in FINGER_JOINTS] + \
    [(f[k], f[k + 1]) for f in FINGER_JOINTS for k in range(3)]

DEFAULT_CAMERA = CameraIntrinsics(240.0, 240.0, 64.0, 64.0)


class DatasetError(ValueError):
    pass


class EmptyDatasetError(DatasetError):
    pass


@dataclass
class HandModel:
    n_joints: int = 21
    # wrist -> finger base offsets in the hand frame (mm); fingers point along +y
    base_offsets: np.ndarray = field(default_factory=lambda: np.array([
        [24.0, 22.0, 0.0], [22.0, 86.0, 0.0], [4.0, 89.0, 0.0], [-14.0, 83.0, 0.0], [-30.0, 72.0, 0.0],
    ]))
    # proximal, middle, distal phalanx per finger (mm)
    phalanges: np.ndarray = field(default_factory=lambda: np.array([
        [34.0, 30.0, 26.0], [40.0, 24.0, 20.0], [44.0, 28.0, 22.0], [41.0, 27.0, 21.0], [33.0, 20.0, 18.0],
    ]))
    # (low, high) radians: abduction, then flexion at the three finger joints
    abduction: tuple = (-0.25, 0.25)
    flexion: tuple = ((-0.2, 1.3), (0.0, 1.5), (0.0, 1.1))
    thumb_flexion: tuple = ((-0.2, 0.6), (0.0, 0.9), (0.0, 1.0))
    finger_radius: tuple = (8.5, 7.5, 6.5)
    palm_radius: float = 12.0

    def __post_init__(self):
        if self.n_joints not in (21, 16):
            raise ValueError(f"hand model supports 21 or 16 joints, got {self.n_joints}")
        self.base_offsets = np.asarray(self.base_offsets, dtype=np.float64)
        self.phalanges = np.asarray(self.phalanges, dtype=np.float64)
        if np.any(self.phalanges <= 0) or np.any(np.linalg.norm(self.base_offsets, axis=1) <= 0):
            raise ValueError("bone lengths must be positive")
        for lo, hi in (self.abduction, *self.flexion, *self.thumb_flexion):
            if not lo <= hi:
                raise ValueError(f"empty angle interval [{lo}, {hi}]")

    def scaled(self, factor):
        return HandModel(self.n_joints, self.base_offsets * factor, self.phalanges * factor,
                         self.abduction, self.flexion, self.thumb_flexion,
                         tuple(r * factor for r in self.finger_radius), self.palm_radius * factor)

    def select(self, skeleton):
        """Output joints (J, 3) from the 21-point skeleton."""
        return skeleton if self.n_joints == 21 else skeleton[JOINTS_16]

    def capsules(self, skeleton):
        """(starts, ends, radii) of the skin capsules for a 21-point skeleton."""
        starts, ends, radii = [], [], []
        for a, b in SKELETON_BONES:
            starts.append(skeleton[a])
            ends.append(skeleton[b])
            if a == 0:
                radii.append(self.palm_radius if b != FINGER_JOINTS[0][0] else self.finger_radius[0] + 2)
            else:
                radii.append(self.finger_radius[min((b - 1) % 4 - 1, 2)])
        bases = [f[0] for f in FINGER_JOINTS[1:]]
        for a, b in zip(bases, bases[1:]):
            starts.append(skeleton[a])
            ends.append(skeleton[b])
            radii.append(self.palm_radius)
        # palm centre fill
        starts.append(skeleton[0])
        ends.append(0.5 * (skeleton[bases[1]] + skeleton[bases[2]]))
        radii.append(self.palm_radius * 1.6)
        return np.array(starts), np.array(ends), np.array(radii)


@dataclass
class HandPose:
    angles: np.ndarray  # (5, 4): abduction + three flexions per finger
    rotation: np.ndarray  # (3, 3) hand frame -> camera
    translation: np.ndarray  # (3,) wrist position, camera mm
    skeleton: np.ndarray  # (21, 3) camera mm
    joints: np.ndarray  # (J, 3) camera mm


def _axis_rotation(axis, angle):
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def forward_kinematics(model, angles):
    """21-point skeleton in the hand frame (wrist at the origin, palm facing -z)."""
    palm_normal = np.array([0.0, 0.0, -1.0])
    out = np.zeros((21, 3))
    for f in range(5):
        base = model.base_offsets[f]
        d0 = base / np.linalg.norm(base)
        bend = palm_normal if f else _unit(palm_normal + np.array([-0.7, 0.0, 0.0]))
        d = _axis_rotation(bend, angles[f, 0]) @ d0
        bend = bend - (bend @ d) * d
        bend = bend / np.linalg.norm(bend)
        idx = FINGER_JOINTS[f]
        out[idx[0]] = pos = base
        phi = 0.0
        for k in range(3):
            phi += angles[f, 1 + k]
            pos = pos + model.phalanges[f, k] * (math.cos(phi) * d + math.sin(phi) * bend)
            out[idx[k + 1]] = pos
    return out


def _unit(v):
    return v / np.linalg.norm(v)


def _euler(roll, pitch, yaw):
    return _axis_rotation(np.array([0.0, 0.0, 1.0]), roll) @ \
        _axis_rotation(np.array([1.0, 0.0, 0.0]), pitch) @ \
        _axis_rotation(np.array([0.0, 1.0, 0.0]), yaw)


def sample_pose(model, rng, depth_range=(400.0, 600.0), roll_deg=60.0, tilt_deg=30.0,
                lateral_mm=15.0):
    """Random articulation within the model's limits plus a random global
    placement; deterministic given the generator state."""
    angles = np.zeros((5, 4))
    for f in range(5):
        angles[f, 0] = rng.uniform(*model.abduction)
        limits = model.thumb_flexion if f == 0 else model.flexion
        for k in range(3):
            angles[f, 1 + k] = rng.uniform(*limits[k])
    local = forward_kinematics(model, angles)
    rot = _euler(math.pi + math.radians(rng.uniform(-roll_deg, roll_deg)),
                 math.radians(rng.uniform(-tilt_deg, tilt_deg)),
                 math.radians(rng.uniform(-tilt_deg, tilt_deg)))
    centre = local.mean(axis=0)
    target = np.array([rng.uniform(-lateral_mm, lateral_mm), rng.uniform(-lateral_mm, lateral_mm),
                       rng.uniform(*depth_range)])
    trans = target - rot @ centre
    skeleton = local @ rot.T + trans
    return HandPose(angles, rot, trans, skeleton, model.select(skeleton))


def render_depth(skeleton, model, intrinsics=DEFAULT_CAMERA, resolution=(128, 128), occluder=None):
    """Z-buffered capsule rendering of a 21-point camera-space skeleton;
    ``occluder`` is an optional extra ``(start, end, radius)`` capsule."""
    starts, ends, radii = model.capsules(np.asarray(skeleton, dtype=np.float64))
    if occluder is not None:
        starts = np.vstack([starts, occluder[0]])
        ends = np.vstack([ends, occluder[1]])
        radii = np.append(radii, occluder[2])
    w, h = resolution
    k = intrinsics
    depth = kernels.render_capsules(starts, ends, radii, k.fx, k.fy, k.cx, k.cy, w, h)
    if not np.any(depth > 0):
        raise EmptyFrameError("hand is entirely outside the view frustum")
    return DepthFrame(depth, intrinsics)


def _random_occluder(pose, rng):
    centre = pose.skeleton.mean(axis=0) + rng.uniform(-25, 25, 3)
    centre[2] = pose.skeleton[:, 2].min() - rng.uniform(20, 40)
    direction = _unit(rng.normal(size=3) * np.array([1.0, 1.0, 0.2]))
    half = rng.uniform(20, 40)
    return centre - half * direction, centre + half * direction, rng.uniform(8, 14)


def _in_frustum(joints, intrinsics, resolution, margin=4):
    u = joints[:, 0] * intrinsics.fx / joints[:, 2] + intrinsics.cx
    v = joints[:, 1] * intrinsics.fy / joints[:, 2] + intrinsics.cy
    return bool(np.all((u >= margin) & (u < resolution[0] - margin) & (v >= margin)
                       & (v < resolution[1] - margin) & (joints[:, 2] > 0)))


def generate_frame(model, rng, frame_id=0, intrinsics=DEFAULT_CAMERA, resolution=(128, 128),
                   n_points=1024, occluder=False):
    """One rendered sample; depth is quantised to whole millimetres so that the
    on-disk round trip is exact."""
    for _ in range(100):
        pose = sample_pose(model, rng)
        if _in_frustum(pose.skeleton, intrinsics, resolution):
            break
    else:
        raise EmptyFrameError("could not place the hand inside the frustum")
    occ = _random_occluder(pose, rng) if occluder else None
    frame = render_depth(pose.skeleton, model, intrinsics, resolution, occ)
    frame = DepthFrame(np.round(frame.depth), intrinsics)
    cloud = cloud_from_frame(frame, n_points, rng)
    return FrameSample(frame, cloud, pose.joints, frame_id)


def frame_rngs(seed, count):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def generate_dataset(seed, count, model=None, intrinsics=DEFAULT_CAMERA, resolution=(128, 128),
                     n_points=1024, occluder=False):
    model = model or HandModel()
    return [generate_frame(model, r, i, intrinsics, resolution, n_points, occluder)
            for i, r in enumerate(frame_rngs(seed, count))]


# ------------------------------------------------------------------ file I/O


def _write_pgm(path, depth):
    d = np.round(depth)
    if d.min() < 0 or d.max() > 65535:
        raise DatasetError(f"{path}: depth outside the 16-bit range")
    h, w = d.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + d.astype(">u2").tobytes())


def _read_pgm(path):
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: byte {start}: truncated PGM header")
        tokens.append((buf[start:pos], start))
    magic, (w, h, maxval) = tokens[0], tokens[1:]
    if magic[0] != b"P5":
        raise DatasetError(f"{path}: byte {magic[1]}: expected P5 magic, got {magic[0]!r}")
    try:
        w, h, maxval = int(w[0]), int(h[0]), int(maxval[0])
    except ValueError:
        raise DatasetError(f"{path}: byte {tokens[1][1]}: non-integer PGM header field") from None
    if maxval != 65535:
        raise DatasetError(f"{path}: byte {tokens[3][1]}: expected maxval 65535, got {maxval}")
    pos += 1
    need = w * h * 2
    if len(buf) - pos != need:
        raise DatasetError(f"{path}: byte {pos}: expected {need} bytes of pixel data, "
                           f"found {len(buf) - pos}")
    return np.frombuffer(buf, dtype=">u2", count=w * h, offset=pos).reshape(h, w).astype(np.float64)


def write_dataset(samples, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not samples:
        raise EmptyDatasetError("refusing to write an empty dataset")
    first = samples[0].frame
    k = first.intrinsics
    n_joints = samples[0].joints_mm.shape[0]
    meta = {"joints": n_joints, "width": first.width, "height": first.height, "fx": repr(k.fx),
            "fy": repr(k.fy), "cx": repr(k.cx), "cy": repr(k.cy), "count": len(samples),
            "units": "mm"}
    (directory / "meta.txt").write_text("".join(f"{a}={b}\n" for a, b in meta.items()))
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["frame", "joint", "x_mm", "y_mm", "z_mm"])
    for i, s in enumerate(samples):
        if s.frame.intrinsics != k or s.frame.depth.shape != first.depth.shape:
            raise DatasetError(f"frame {i}: camera or resolution differs from frame 0")
        _write_pgm(directory / f"depth_{i:06d}.pgm", s.frame.depth)
        for j, p in enumerate(s.joints_mm):
            w.writerow([i, j] + [repr(float(c)) for c in p])
    (directory / "joints.csv").write_text(out.getvalue())


def _read_meta(path):
    meta, offset = {}, 0
    raw = path.read_bytes()
    for line in raw.splitlines(keepends=True):
        text = line.decode("utf-8").strip()
        if text and not text.startswith("#"):
            if "=" not in text:
                raise DatasetError(f"{path}: byte {offset}: expected key=value, got {text!r}")
            key, value = (s.strip() for s in text.split("=", 1))
            meta[key] = (value, offset)
        offset += len(line)
    required = ("joints", "width", "height", "fx", "fy", "cx", "cy", "count")
    missing = [k for k in required if k not in meta]
    if missing:
        raise DatasetError(f"{path}: byte {len(raw)}: missing keys {missing}")
    if meta.get("units", ("mm", 0))[0] != "mm":
        raise DatasetError(f"{path}: byte {meta['units'][1]}: units must be mm")
    parsed = {}
    for key in required:
        value, off = meta[key]
        try:
            parsed[key] = float(value) if key in ("fx", "fy", "cx", "cy") else int(value)
        except ValueError:
            raise DatasetError(f"{path}: byte {off}: bad value for {key}: {value!r}") from None
    return parsed


def read_dataset(directory, n_points=1024, seed=0):
    """Load a dataset written by :func:`write_dataset` as FrameSamples; point
    clouds are resampled deterministically from ``(seed, frame index)``."""
    directory = Path(directory)
    if not directory.is_dir() or not any(directory.iterdir()):
        raise EmptyDatasetError(f"{directory}: no dataset files")
    meta_path = directory / "meta.txt"
    if not meta_path.exists():
        raise DatasetError(f"{meta_path}: missing")
    meta = _read_meta(meta_path)
    count, n_joints = meta["count"], meta["joints"]
    if count <= 0:
        raise EmptyDatasetError(f"{meta_path}: count is {count}")
    intr = CameraIntrinsics(meta["fx"], meta["fy"], meta["cx"], meta["cy"])
    joints = np.full((count, n_joints, 3), np.nan)
    jpath = directory / "joints.csv"
    raw = jpath.read_bytes()
    lines = raw.splitlines(keepends=True)
    if not lines or lines[0].decode().strip() != "frame,joint,x_mm,y_mm,z_mm":
        raise DatasetError(f"{jpath}: byte 0: bad header")
    offset = len(lines[0])
    for line in lines[1:]:
        text = line.decode("utf-8").strip()
        if text:
            parts = text.split(",")
            try:
                if len(parts) != 5:
                    raise ValueError(f"expected 5 fields, got {len(parts)}")
                f, j = int(parts[0]), int(parts[1])
                if not 0 <= f < count:
                    raise ValueError(f"frame {f} outside [0, {count})")
                if not 0 <= j < n_joints:
                    raise ValueError(f"joint {j} outside [0, {n_joints}) declared in meta")
                joints[f, j] = [float(p) for p in parts[2:]]
            except ValueError as exc:
                raise DatasetError(f"{jpath}: byte {offset}: {exc}") from None
        offset += len(line)
    missing = np.argwhere(np.isnan(joints[:, :, 0]))
    if missing.size:
        f, j = missing[0]
        raise DatasetError(f"{jpath}: byte {len(raw)}: no row for frame {f} joint {j} "
                           f"(meta declares {n_joints} joints)")
    samples = []
    for i in range(count):
        ppath = directory / f"depth_{i:06d}.pgm"
        if not ppath.exists():
            raise DatasetError(f"{ppath}: missing")
        depth = _read_pgm(ppath)
        if depth.shape != (meta["height"], meta["width"]):
            raise DatasetError(f"{ppath}: byte 0: size {depth.shape[::-1]} differs from meta")
        frame = DepthFrame(depth, intr)
        cloud = cloud_from_frame(frame, n_points, np.random.default_rng([seed, i]))
        samples.append(FrameSample(frame, cloud, joints[i], i))
    return samples


def list_frames(directory):
    return sorted(p for p in os.listdir(directory) if p.startswith("depth_"))
