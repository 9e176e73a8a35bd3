"""Inference, metrics, baselines, sweeps and ablations."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from handdiff import autodiff as ad
from handdiff import conditioning, denoiser
from handdiff import diffusion as dif
from handdiff.kernels import farthest_point_sample

DEFAULT_THRESHOLDS = tuple(float(x) for x in range(0, 81, 5))

# component combinations for ablations, as flags (JC, LC, JI, KC, MH)
ABLATION_ROWS = {
    "JI": dict(use_jc=False, use_lc=False, use_ji=True, use_kc=False, use_mh=False),
    "LC": dict(use_jc=False, use_lc=True, use_ji=False, use_kc=False, use_mh=False),
    "JC": dict(use_jc=True, use_lc=False, use_ji=False, use_kc=False, use_mh=False),
    "JC+LC": dict(use_jc=True, use_lc=True, use_ji=False, use_kc=False, use_mh=False),
    "LC+JI": dict(use_jc=False, use_lc=True, use_ji=True, use_kc=False, use_mh=False),
    "JC+LC+JI": dict(use_jc=True, use_lc=True, use_ji=True, use_kc=False, use_mh=False),
    "LC+JI+KC": dict(use_jc=False, use_lc=True, use_ji=True, use_kc=True, use_mh=False),
    "JC+LC+JI+KC": dict(use_jc=True, use_lc=True, use_ji=True, use_kc=True, use_mh=False),
    "full": dict(use_jc=True, use_lc=True, use_ji=True, use_kc=True, use_mh=True),
}


@dataclass
class MetricsReport:
    mean_error: float  # mm
    per_joint: np.ndarray  # (J,) mm
    thresholds: np.ndarray  # mm
    success: np.ndarray  # fraction of frames with mean error <= threshold
    frame_errors: np.ndarray  # (F,) per-frame mean joint error, mm


def joint_errors(pred_mm, gt_mm):
    """Euclidean distance per frame and joint, ``(F, J)``."""
    pred_mm, gt_mm = np.asarray(pred_mm, dtype=np.float64), np.asarray(gt_mm, dtype=np.float64)
    if pred_mm.shape != gt_mm.shape or pred_mm.ndim != 3 or pred_mm.shape[2] != 3:
        raise ValueError(f"prediction {pred_mm.shape} and ground truth {gt_mm.shape} must be (F, J, 3)")
    if pred_mm.shape[0] == 0:
        raise ValueError("cannot score an empty dataset")
    return np.sqrt(((pred_mm - gt_mm) ** 2).sum(axis=2))


def success_rate(frame_errors, thresholds):
    """Fraction of frames whose mean joint error is at most each threshold."""
    fe = np.sort(np.asarray(frame_errors, dtype=np.float64))
    return np.searchsorted(fe, np.asarray(thresholds, dtype=np.float64), side="right") / len(fe)


def _mean(rows):
    # correctly rounded sums, so the result does not depend on summation order
    return np.array([math.fsum(r) / len(r) for r in rows])


def compute_metrics(pred_mm, gt_mm, thresholds=DEFAULT_THRESHOLDS):
    err = joint_errors(pred_mm, gt_mm)
    frame = _mean(err)
    thr = np.asarray(thresholds, dtype=np.float64)
    return MetricsReport(float(_mean([frame])[0]), _mean(err.T), thr, success_rate(frame, thr), frame)


# ------------------------------------------------------------------ inference


class _FrameNoise:
    """Stands in for a generator: each frame draws from its own stream keyed
    on ``(seed, frame index)``, so a frame's noise ignores batching."""

    def __init__(self, seed, frames):
        self.gens = [np.random.default_rng([seed, f]) for f in frames]

    def standard_normal(self, shape):
        return np.stack([g.standard_normal(shape[1:]) for g in self.gens])


def predict(model, samples, timesteps=None, hypotheses=None, seed=0, batch=None):
    """Mean-over-hypotheses poses in camera millimetres, ``(F, J, 3)``.

    Every frame draws its noise from a stream keyed on ``(seed, frame index)``
    so the batch size only affects speed.
    """
    cfg, params = model.cfg, model.params
    if not samples:
        raise ValueError("cannot run inference on an empty dataset")
    n_steps = cfg.timesteps if timesteps is None else timesteps
    H = (cfg.hypotheses if hypotheses is None else hypotheses) if cfg.use_mh else 1
    if H < 1:
        raise ValueError(f"hypotheses must be >= 1, got {H}")
    schedule = dif.build_schedule(cfg.schedule, cfg.T)
    batch = batch or cfg.batch
    out = []
    with ad.no_grad():
        for start in range(0, len(samples), batch):
            chunk = samples[start:start + batch]
            cond = conditioning.encode(params, cfg, chunk)
            rng = _FrameNoise(seed, range(start, start + len(chunk)))

            def fn(jt, t):
                return denoiser.denoise(params, cfg, jt, cond, t).data

            est = dif.reverse_chain(fn, (len(chunk), H, cfg.joints, 3), schedule, n_steps, rng)
            pose = est.mean(axis=1)
            out.extend(s.cloud.denormalize(p) for s, p in zip(chunk, pose))
    return np.stack(out)


def evaluate(model, samples, timesteps=None, hypotheses=None, seed=0, thresholds=DEFAULT_THRESHOLDS):
    pred = predict(model, samples, timesteps, hypotheses, seed)
    return compute_metrics(pred, np.stack([s.joints_mm for s in samples]), thresholds), pred


def sweep(model, samples, axis, values, seed=0):
    """``(value, mean error mm)`` per value of ``timesteps`` or ``hypotheses``."""
    if axis not in ("timesteps", "hypotheses"):
        raise ValueError(f"sweep axis must be timesteps or hypotheses, got {axis!r}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    rows = []
    for v in values:
        kw = {axis: int(v)}
        if axis == "timesteps":
            kw["hypotheses"] = 1
        rows.append((int(v), evaluate(model, samples, seed=seed, **kw)[0].mean_error))
    return rows


def ablate(train_samples, test_samples, cfg, seed, rows=None, log=None):
    """Train and evaluate each named component combination with the same budget."""
    from handdiff.training import train

    rows = list(ABLATION_ROWS) if rows is None else list(rows)
    out = {}
    for name in rows:
        if name not in ABLATION_ROWS:
            raise ValueError(f"unknown ablation row {name!r}; choose from {list(ABLATION_ROWS)}")
        variant = cfg.replace(**ABLATION_ROWS[name]).validate()
        model, _ = train(train_samples, variant, seed, log=log)
        out[name] = evaluate(model, test_samples, seed=seed)[0]
        if log:
            log(f"{name}: {out[name].mean_error:.3f} mm")
    return out


# ------------------------------------------------------------------ baselines


def mean_pose_baseline(train_samples, test_samples):
    """Training-set mean of the normalised pose, mapped into each test frame."""
    mean = np.mean([s.joints_norm for s in train_samples], axis=0)
    return np.stack([s.cloud.denormalize(mean) for s in test_samples])


def _descriptor(points, m):
    return points[farthest_point_sample(points, m, 0)]


def nearest_neighbour_baseline(train_samples, test_samples, m=128):
    """Pose of the training frame whose normalised cloud is nearest in
    symmetric Chamfer distance (over ``m`` FPS points), mapped into the test
    frame."""
    m = min(m, min(len(s.cloud.points) for s in train_samples + test_samples))
    train_desc = np.stack([_descriptor(s.cloud.points, m) for s in train_samples])
    flat = train_desc.reshape(-1, 3)
    flat_sq = (flat * flat).sum(axis=1)
    out = []
    for s in test_samples:
        q = _descriptor(s.cloud.points, m)
        # squared distances from every training point to every query point
        d = flat_sq[:, None] + (q * q).sum(axis=1)[None] - 2.0 * (flat @ q.T)
        d = d.reshape(len(train_desc), m, m)
        score = d.min(axis=2).mean(axis=1) + d.min(axis=1).mean(axis=1)
        best = int(np.argmin(score))
        out.append(s.cloud.denormalize(train_samples[best].joints_norm))
    return np.stack(out)


# ------------------------------------------------------------------ CSV output


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def write_metrics_csv(report, path):
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(["metric", "joint", "value"])
        w.writerow(["mean_error_mm", "", repr(report.mean_error)])
        for j, e in enumerate(report.per_joint):
            w.writerow(["joint_error_mm", j, repr(float(e))])
        for thr, s in zip(report.thresholds, report.success):
            w.writerow([f"success_rate@{thr:g}mm", "", repr(float(s))])


def write_sweep_csv(axis, rows, path):
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(["axis", "value", "mean_error_mm"])
        for v, e in rows:
            w.writerow([axis, v, repr(float(e))])


def write_predictions_csv(pred_mm, path, frame_ids=None):
    pred_mm = np.asarray(pred_mm)
    ids = range(len(pred_mm)) if frame_ids is None else frame_ids
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(["frame", "joint", "x_mm", "y_mm", "z_mm"])
        for f, pose in zip(ids, pred_mm):
            for j, p in enumerate(pose):
                w.writerow([f, j] + [repr(float(c)) for c in p])


def read_predictions_csv(path):
    rows = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        if next(r) != ["frame", "joint", "x_mm", "y_mm", "z_mm"]:
            raise ValueError(f"{path}: unexpected header")
        for f, j, *xyz in r:
            rows.setdefault(int(f), {})[int(j)] = [float(c) for c in xyz]
    return np.array([[rows[f][j] for j in sorted(rows[f])] for f in sorted(rows)])
