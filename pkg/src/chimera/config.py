"""Flat key-value training configuration.

Config files are plain text, one `key = value` per line, `#` comments.
Every key maps to one TrainConfig field; unknown keys are hard errors so
typos cannot silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .pseudo_supervision import ZSSplit  # noqa: F401  (re-export convenience)
from .selective_distillation import DECAY_MODES
from .semantic_head import NORM_CHOICES


class ConfigError(Exception):
    """Raised for unknown keys, malformed lines, or invalid values."""


@dataclass
class TrainConfig:
    data_manifest: str = ""
    clip_bundle: str = ""
    out_dir: str = "runs/default"
    iterations: int = 500
    batch_size: int = 16
    lr: float = 6e-5
    weight_decay: float = 1e-2
    warmup_frac: float = 0.1
    seed: int = 0
    mode: str = "inductive"
    checkpoint_every: int = 100
    backbone_channels: int = 64
    csh_blocks: int = 1
    csh_norm: str = "bn"
    csh_gn_groups: int = 8
    sgd_k0: int = 9000
    sgd_rate: float = 0.1
    sgd_k_min: int = 1
    sgd_mode: str = "decrease"
    sgd_tau: float = 0.07
    sgd_noise: bool = True
    sam_tau_f: float = 0.07
    sam_tau_c: float = 0.01
    lambda_sam: float = 0.5
    pseudo_k_clusters: int = 8
    pseudo_theta: float = 0.7
    pseudo_min_area: int = 4
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    infer_gamma: float = 0.5

    def validate(self) -> None:
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mode not in ("inductive", "transductive"):
            raise ConfigError(f"mode must be inductive or transductive, got {self.mode!r}")
        if self.csh_norm not in NORM_CHOICES:
            raise ConfigError(f"csh.norm must be one of {NORM_CHOICES}, got {self.csh_norm!r}")
        if self.sgd_mode not in DECAY_MODES:
            raise ConfigError(f"sgd.mode must be one of {DECAY_MODES}, got {self.sgd_mode!r}")
        for key in ("sgd_tau", "sam_tau_f", "sam_tau_c"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{KEY_FOR_FIELD[key]} must be > 0")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ConfigError(f"warmup_frac must be in [0, 1], got {self.warmup_frac}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")


KEY_TABLE = {
    "data.manifest": "data_manifest",
    "clip.bundle": "clip_bundle",
    "out.dir": "out_dir",
    "iterations": "iterations",
    "batch_size": "batch_size",
    "lr": "lr",
    "weight_decay": "weight_decay",
    "warmup_frac": "warmup_frac",
    "seed": "seed",
    "mode": "mode",
    "checkpoint_every": "checkpoint_every",
    "backbone.channels": "backbone_channels",
    "csh.blocks": "csh_blocks",
    "csh.norm": "csh_norm",
    "csh.gn_groups": "csh_gn_groups",
    "sgd.k0": "sgd_k0",
    "sgd.rate": "sgd_rate",
    "sgd.k_min": "sgd_k_min",
    "sgd.mode": "sgd_mode",
    "sgd.tau": "sgd_tau",
    "sgd.noise": "sgd_noise",
    "sam.tau_f": "sam_tau_f",
    "sam.tau_c": "sam_tau_c",
    "sam.lambda": "lambda_sam",
    "loss.lambda_sam": "lambda_sam",
    "pseudo.k_clusters": "pseudo_k_clusters",
    "pseudo.theta": "pseudo_theta",
    "pseudo.min_area": "pseudo_min_area",
    "loss.focal_gamma": "focal_gamma",
    "loss.focal_alpha": "focal_alpha",
    "infer.gamma": "infer_gamma",
}

# Canonical key per field, for round-trip serialization (first table entry wins).
KEY_FOR_FIELD: dict[str, str] = {}
for _k, _f in KEY_TABLE.items():
    KEY_FOR_FIELD.setdefault(_f, _k)

_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _parse_value(key: str, raw: str, type_name: str):
    raw = raw.strip()
    if type_name == "str":
        return raw
    if type_name == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected integer, got {raw!r}") from None
    if type_name == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected number, got {raw!r}") from None
    if type_name == "bool":
        low = raw.lower()
        if low in ("true", "on", "1", "yes"):
            return True
        if low in ("false", "off", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected boolean, got {raw!r}")
    raise ConfigError(f"{key}: unsupported field type {type_name}")


def parse_config(text: str) -> TrainConfig:
    cfg = TrainConfig()
    assigned: dict[str, tuple[str, object]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in KEY_TABLE:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        field_name = KEY_TABLE[key]
        value = _parse_value(key, raw, _FIELD_TYPES[field_name])
        if field_name in assigned:
            prev_key, prev_value = assigned[field_name]
            if prev_value != value:
                raise ConfigError(
                    f"line {lineno}: {key!r} conflicts with earlier {prev_key!r} "
                    f"({prev_value!r} vs {value!r})")
        assigned[field_name] = (key, value)
        setattr(cfg, field_name, value)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def config_to_text(cfg: TrainConfig) -> str:
    """Canonical flat rendering; parse_config(config_to_text(c)) == c."""
    lines = []
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{KEY_FOR_FIELD[f.name]} = {value}")
    return "\n".join(lines) + "\n"
