"""Run configuration: flat ``key = value`` files with CLI overrides."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    """Unknown key, duplicate key, or unparseable value."""


@dataclass
class RunConfig:
    # encoder
    img_size: int = 64
    patch: int = 8
    dim: int = 32
    depth: int = 4
    heads: int = 4
    window: int = 0                 # 0 means the full grid (global attention)
    scale: str = "tiny"
    # head
    head: str = "autosam"
    num_classes: int = 3
    cnn_depth: int = 4
    twoway_layers: int = 2
    # training
    lr: float = 5e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 4
    epochs: int = 120
    w_ce: float = 1.0
    w_dice: float = 1.0
    seed: int = 0
    freeze: bool = True
    labeled: int = 0                # 0 means all training volumes
    dice_loss_background: bool = True
    # augmentation
    augment: bool = True
    noise_sigma: float = 0.05
    brightness_delta: float = 0.1
    rotation_degrees: float = 15.0
    elastic_alpha: float = 10.0
    elastic_sigma: float = 4.0
    augment_prob: float = 0.5
    # dataset generation
    n_patients: int = 16
    slices_per_volume: int = 6
    data_seed: int = 1234
    pretrain_patients: int = 24
    # splits
    split_seeds: list = field(default_factory=lambda: [0, 1, 2, 3])
    # pretraining
    pretrain_epochs: int = 150
    pretrain_dice_target: float = 0.92
    # evaluation
    zeroshot_overlap: str = "logit"
    assd_mode: str = "slice"
    # paths
    data_dir: str = ""
    source_data_dir: str = ""
    checkpoint: str = ""
    out_dir: str = "runs/out"
    # labeled-data sweep
    curve_labeled: list = field(default_factory=lambda: [1, 2, 5, 10, 0])
    curve_methods: list = field(default_factory=lambda: ["autosam", "scratch"])
    # bookkeeping: which keys were given explicitly (file or CLI)
    explicit: set = field(default_factory=set, repr=False, compare=False)


_LIST_INT_KEYS = {"split_seeds", "curve_labeled"}
_LIST_STR_KEYS = {"curve_methods"}
_SKIP_KEYS = {"explicit"}

_BASE_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def _field_types() -> dict[str, type]:
    out = {}
    for f in fields(RunConfig):
        if f.name in _SKIP_KEYS:
            continue
        if f.name in _LIST_INT_KEYS or f.name in _LIST_STR_KEYS:
            out[f.name] = list
        else:
            out[f.name] = f.type if isinstance(f.type, type) else _BASE_TYPES[f.type]
    return out


_TYPES = _field_types()


def _parse_value(key: str, raw: str, where: str):
    typ = _TYPES[key]
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError("expected true or false")
            return low == "true"
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is list:
            items = [part.strip() for part in raw.split(",") if part.strip()]
            if key in _LIST_INT_KEYS:
                return [int(p) for p in items]
            return items
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {key!r} = {raw!r} ({exc})") from None


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``key = value`` lines; '#' starts a comment, duplicates and
    unknown keys are rejected; absent keys keep their defaults."""
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in cfg.explicit:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        cfg.explicit.add(key)
        setattr(cfg, key, _parse_value(key, raw, f"{source}:{lineno}"))
    return cfg


def parse_config(path) -> RunConfig:
    path = Path(path)
    return parse_config_text(path.read_text(), source=str(path))


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply CLI values (already typed) on top of file values."""
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in _TYPES:
            raise ConfigError(f"unknown override {key!r}")
        setattr(cfg, key, value)
        cfg.explicit.add(key)
    return cfg


def resolve_encoder(cfg: RunConfig):
    """Materialize the encoder description; the scale preset supplies
    width/depth unless they were given explicitly."""
    from .encoder import SCALE_PRESETS, EncoderConfig

    dim, depth = cfg.dim, cfg.depth
    if cfg.scale in SCALE_PRESETS and not {"dim", "depth"} & cfg.explicit:
        dim, depth = SCALE_PRESETS[cfg.scale]
    window = cfg.window if cfg.window > 0 else cfg.img_size // cfg.patch
    return EncoderConfig(img_size=cfg.img_size, patch=cfg.patch, dim=dim,
                         depth=depth, heads=cfg.heads, window=window,
                         scale_tag=cfg.scale)


def resolved_copy(cfg: RunConfig) -> RunConfig:
    """Copy with encoder extents materialized (for snapshots/checkpoints)."""
    import copy

    enc = resolve_encoder(cfg)
    out = copy.deepcopy(cfg)
    out.dim, out.depth, out.window = enc.dim, enc.depth, enc.window
    out.explicit = set(out.explicit) | {"dim", "depth", "window"}
    return out


def snapshot(cfg: RunConfig) -> str:
    """Canonical text form, parseable by parse_config_text."""
    lines = []
    for f in fields(RunConfig):
        if f.name in _SKIP_KEYS:
            continue
        value = getattr(cfg, f.name)
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def train_config(cfg: RunConfig):
    from .training import TrainConfig

    return TrainConfig(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                       batch=cfg.batch, epochs=cfg.epochs, w_ce=cfg.w_ce,
                       w_dice=cfg.w_dice, seed=cfg.seed,
                       freeze_encoder=cfg.freeze, labeled_volumes=cfg.labeled,
                       dice_loss_background=cfg.dice_loss_background)


def augment_config(cfg: RunConfig):
    from .data import AugmentConfig

    if not cfg.augment:
        return None
    return AugmentConfig(noise_sigma=cfg.noise_sigma,
                         brightness_delta_range=cfg.brightness_delta,
                         rotation_degree_range=cfg.rotation_degrees,
                         elastic_alpha=cfg.elastic_alpha,
                         elastic_sigma=cfg.elastic_sigma,
                         prob=cfg.augment_prob)
