"""Run configuration: hyperparameters, config-file parsing, fingerprints.

The config file format is flat ``key = value`` text, one setting per line,
``#`` starts a comment. Keys are the field names of :class:`TrainConfig`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import ConfigError

# Channel statistics the pretrained backbones were trained with. Features
# from the teachers are only meaningful for inputs normalized this way.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class TrainConfig:
    """All knobs for the two training stages and evaluation.

    Defaults follow the reference training recipe: SGD with momentum 0.9,
    learning rate 0.4 and weight decay 1e-4 for the distillation stage
    (100 epochs, batch 32), Adam at 1e-4 for the discriminator stage
    (300 epochs).
    """

    category: str = "bottle"
    data_root: str = ""
    image_size: int = 256

    # stage 1: feature-pyramid distillation
    stpm_epochs: int = 100
    stpm_lr: float = 0.4
    stpm_momentum: float = 0.9
    stpm_weight_decay: float = 1e-4
    batch_size: int = 32
    lr_schedule: str = "constant"  # or "cosine"

    # stage 2: discriminative head
    disc_epochs: int = 300
    disc_lr: float = 1e-4
    focal_gamma: float = 2.0
    # Symmetric focal loss penalizes confident false positives on normal
    # pixels as well; the one-sided variant is kept for ablation.
    focal_symmetric: bool = True
    focal_normal_weight: float = 1.0

    # backbones
    teacher1: str = "resnet18"
    teacher2: str = "resnet50"
    weights_source: str = "imagenet"

    # pseudo-anomaly synthesis
    perlin_periods: tuple[int, ...] = (2, 4, 8, 16)
    mask_threshold_scale: float = 0.5
    beta_min: float = 0.1
    beta_max: float = 1.0
    texture_dir: str = ""
    anomaly_ratio: float = 0.5

    # scoring / evaluation
    image_score_reducer: str = "max"  # or "topk_mean"
    image_score_topk: int = 64
    smooth_sigma: float = 0.0
    pro_fpr_limit: float = 0.3

    seed: int = 0
    device: str = "auto"

    def __post_init__(self) -> None:
        positive = (
            "image_size", "stpm_epochs", "stpm_lr", "stpm_momentum",
            "stpm_weight_decay", "batch_size", "disc_epochs", "disc_lr",
            "image_score_topk",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.focal_gamma < 0:
            raise ConfigError(f"focal_gamma must be >= 0, got {self.focal_gamma!r}")
        if not (0.1 <= self.beta_min <= self.beta_max <= 1.0):
            raise ConfigError(
                f"beta range must satisfy 0.1 <= beta_min <= beta_max <= 1.0, "
                f"got [{self.beta_min}, {self.beta_max}]"
            )
        if self.image_size % 32 != 0:
            raise ConfigError(f"image_size must be divisible by 32, got {self.image_size}")
        if not (0.0 < self.pro_fpr_limit <= 1.0):
            raise ConfigError(f"pro_fpr_limit must be in (0, 1], got {self.pro_fpr_limit}")
        if not (0.0 <= self.anomaly_ratio <= 1.0):
            raise ConfigError(f"anomaly_ratio must be in [0, 1], got {self.anomaly_ratio}")
        if self.image_score_reducer not in ("max", "topk_mean"):
            raise ConfigError(f"unknown image_score_reducer {self.image_score_reducer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["perlin_periods"] = list(self.perlin_periods)
        return d


def config_fingerprint(cfg: TrainConfig) -> str:
    """Stable hash of the full configuration, stored inside checkpoints."""
    payload = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _coerce(name: str, raw: str, target_type: type) -> Any:
    raw = raw.strip()
    try:
        if target_type is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is tuple or target_type == tuple[int, ...]:
            return tuple(int(tok) for tok in raw.replace(",", " ").split())
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse config key {name!r} from {raw!r}") from exc


_RUNTIME_TYPES: dict[str, type] = {
    f.name: (type(f.default) if f.default is not dataclasses.MISSING else str)
    for f in dataclasses.fields(TrainConfig)
}


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse flat ``key = value`` text into typed values.

    Unknown keys raise :class:`ConfigError` so typos do not silently
    fall back to defaults.
    """
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _RUNTIME_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw, _RUNTIME_TYPES[key])
    return values


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> TrainConfig:
    """Build a :class:`TrainConfig` from an optional file plus overrides."""
    values: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text()))
    for key, val in (overrides or {}).items():
        if key not in _RUNTIME_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(val, str):
            val = _coerce(key, val, _RUNTIME_TYPES[key])
        values[key] = val
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
