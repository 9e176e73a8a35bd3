"""Flat configuration shared by the model, trainer and CLI.

Every tunable is a top-level field so that config files can be plain
``key = value`` lines.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields


class ConfigError(ValueError):
    pass


class UnknownKeyError(ConfigError):
    def __init__(self, key):
        super().__init__(f"unknown config key: {key}")
        self.key = key


@dataclass
class Config:
    profile: str = "fast"
    seed: int = 0
    # data
    joints: int = 21
    frames: int = 2000
    image_size: int = 128
    render_size: int = 128
    n_points: int = 1024
    occluder: bool = False
    augment: bool = True
    aug_rotation: float = 180.0
    aug_scale_lo: float = 0.8
    aug_scale_hi: float = 1.2
    aug_translation: float = 20.0
    # diffusion
    schedule: str = "cosine"
    T: int = 500
    timesteps: int = 10  # T' at inference
    hypotheses: int = 10  # H at inference
    # network widths
    d2d: int = 128
    d3d: int = 128
    dc: int = 512
    dpe: int = 32
    conv1: int = 16
    conv2: int = 32
    k3: int = 32
    k2: int = 32
    sa_k: int = 32
    # ablation switches
    use_jc: bool = True
    use_lc: bool = True
    use_ji: bool = True
    use_kc: bool = True
    use_mh: bool = True
    requery_per_block: bool = False  # neighbours depend only on Jt, so this only costs time
    # optimisation
    lr: float = 0.001
    beta1: float = 0.5
    beta2: float = 0.999
    weight_decay: float = 0.01
    epochs: int = 30
    batch: int = 64
    lr_decay: float = 0.1
    lr_decay_every: int = 10
    aux_weight: float = 1.0

    def validate(self):
        checks = [
            (self.joints >= 1, "joints must be positive"),
            (self.n_points >= 8, "n_points must be at least 8"),
            (self.image_size >= 8 and self.image_size % 4 == 0, "image_size must be a multiple of 4"),
            (self.render_size % self.image_size == 0, "render_size must be a multiple of image_size"),
            (self.schedule in ("cosine", "linear"), "schedule must be cosine or linear"),
            (self.T >= 2, "T must be at least 2"),
            (1 <= self.timesteps <= self.T, "timesteps must lie in [1, T]"),
            (self.hypotheses >= 1, "hypotheses must be >= 1"),
            (min(self.d2d, self.d3d, self.dc, self.dpe, self.conv1, self.conv2) > 0, "widths must be positive"),
            (self.dpe % 2 == 0, "dpe must be even"),
            (1 <= self.k3 <= self.n_points // 2, "k3 must lie in [1, n_points/2]"),
            (self.k2 >= 1, "k2 must be >= 1"),
            (1 <= self.sa_k <= self.n_points // 2, "sa_k must lie in [1, n_points/2]"),
            (not (self.use_kc and not self.use_lc), "KC requires LC"),
            (self.lr > 0, "lr must be positive"),
            (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "betas must lie in [0, 1)"),
            (self.epochs >= 0 and self.batch >= 1, "epochs/batch must be positive"),
            (self.frames >= 1, "frames must be >= 1"),
            (0 <= self.aug_rotation <= 180, "aug_rotation must lie in [0, 180]"),
            (0.8 <= self.aug_scale_lo <= self.aug_scale_hi <= 1.2, "augmentation scale must lie in [0.8, 1.2]"),
            (0 <= self.aug_translation <= 20, "aug_translation must lie in [0, 20]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def to_dict(self):
        return asdict(self)

    def replace(self, **kw):
        return apply_overrides(self, kw)


FIELDS = {f.name: f for f in fields(Config)}

# desk-scale defaults used by tests and the acceptance suite
FAST = dict(profile="fast", frames=2000, T=100, d2d=32, d3d=32, dc=64, dpe=32, image_size=64,
            n_points=512, k3=16, k2=16, sa_k=16, conv1=16, conv2=32, batch=16, epochs=30, augment=False)
PAPER = dict(profile="paper", frames=2000, T=500, d2d=128, d3d=128, dc=512, image_size=128,
             n_points=1024, k3=32, k2=32, sa_k=32, batch=64, epochs=30)
PROFILES = {"fast": FAST, "paper": PAPER}


def _coerce(key, value):
    f = FIELDS[key]
    kind = type(getattr(Config(), key))
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {f.name}: {value!r}") from None


def apply_overrides(cfg, overrides):
    data = cfg.to_dict()
    for key, value in overrides.items():
        if key not in FIELDS:
            raise UnknownKeyError(key)
        data[key] = _coerce(key, value)
    return Config(**data)


def make_config(profile="fast", **overrides):
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    cfg = apply_overrides(Config(), PROFILES[profile])
    return apply_overrides(cfg, overrides).validate()


def parse_config_text(text):
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in FIELDS:
            raise UnknownKeyError(key)
        out[key] = value
    return out


def dump_config(cfg):
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
