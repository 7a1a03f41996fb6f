"""Per-site anomaly maps and their composition into a final score field.

At test time each of the six distillation sites yields a map of per-pixel
feature discrepancies. Maps that share a resolution are summed in pairs
(sites 1+6, 2+5, 3+4), the three pair sums are upsampled bilinearly to the
input resolution and multiplied elementwise. The discriminative head's
probability map multiplies in as a seventh factor.

Because the composition is a product, zeroing any one resolution pair
annihilates the whole composite; that multiplicative failure mode is a
tested invariant, not an accident.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import PairingError, RangeError, ShapeError
from .losses import normalize_features, pixel_loss

# (site, site) pairs that live at the same stride: 1+6 at stride 4,
# 2+5 at stride 8, 3+4 at stride 16.
SITE_PAIRS = ((1, 6), (2, 5), (3, 4))
PAIR_STRIDES = (4, 8, 16)


@dataclass
class AnomalyMap:
    """Non-negative per-pixel score field.

    ``values`` is ``... x h x w`` (a leading batch axis is allowed),
    ``resolution`` is the feature stride or ``"full"``, ``site`` is 1..7
    or ``"composite"``.
    """

    values: Tensor
    resolution: int | str
    site: int | str

    def __post_init__(self) -> None:
        if self.values.dim() not in (2, 3):
            raise ShapeError(f"anomaly map must be (h, w) or (B, h, w), got {self.values.dim()} dims")

    @property
    def spatial_size(self) -> tuple[int, int]:
        return int(self.values.shape[-2]), int(self.values.shape[-1])


def site_anomaly_map(ft: Tensor, fs: Tensor, *, stride: int, site: int) -> AnomalyMap:
    """Per-location distillation discrepancy of one (teacher, student) pair.

    Shares the exact code path of the training pixel loss on normalized
    features, so train-time and test-time scores cannot drift apart.
    """
    with torch.no_grad():
        field = pixel_loss(normalize_features(ft), normalize_features(fs))
    return AnomalyMap(values=field, resolution=stride, site=site)


def upsample_map(amap: AnomalyMap, target: int) -> AnomalyMap:
    """Bilinear upsampling to ``target x target``; preserves non-negativity."""
    h, w = amap.spatial_size
    if target < max(h, w):
        raise ShapeError(f"target {target} smaller than map size {(h, w)}")
    values = amap.values
    if values.dim() == 2:
        out = F.interpolate(values[None, None], size=(target, target), mode="bilinear",
                            align_corners=False, antialias=False)[0, 0]
    else:
        out = F.interpolate(values[:, None], size=(target, target), mode="bilinear",
                            align_corners=False, antialias=False)[:, 0]
    return AnomalyMap(values=out, resolution="full", site=amap.site)


def _by_site(maps: Sequence[AnomalyMap]) -> dict[int, AnomalyMap]:
    table = {}
    for amap in maps:
        try:
            table[int(amap.site)] = amap
        except (TypeError, ValueError):
            raise PairingError(f"expected site-numbered maps, got site tag {amap.site!r}")
    return table


def pair_sums(maps: Sequence[AnomalyMap]) -> list[AnomalyMap]:
    """Sum same-resolution site maps: 1+6, 2+5, 3+4, in stride order 4/8/16."""
    if len(maps) != 6:
        raise PairingError(f"expected the six site maps, got {len(maps)}")
    table = _by_site(maps)
    if sorted(table) != [1, 2, 3, 4, 5, 6]:
        raise PairingError(f"need sites 1..6 exactly, got {sorted(table)}")
    sums = []
    for (a, b), stride in zip(SITE_PAIRS, PAIR_STRIDES):
        ma, mb = table[a], table[b]
        if ma.resolution != mb.resolution or ma.spatial_size != mb.spatial_size:
            raise PairingError(
                f"sites {a} and {b} must share a resolution, got "
                f"{ma.resolution}@{ma.spatial_size} vs {mb.resolution}@{mb.spatial_size}"
            )
        sums.append(AnomalyMap(values=ma.values + mb.values, resolution=stride, site=f"pair{a}{b}"))
    return sums


def compose_stpm(maps: Sequence[AnomalyMap], image_size: int) -> AnomalyMap:
    """Sum same-resolution maps, upsample, and multiply across resolutions."""
    product = None
    for pair_map in pair_sums(maps):
        full = upsample_map(pair_map, image_size).values.to(torch.float32)
        product = full if product is None else product * full
    return AnomalyMap(values=product, resolution="full", site="composite")


def compose_final(maps: Sequence[AnomalyMap], disc: AnomalyMap, image_size: int) -> AnomalyMap:
    """Multiply the distillation composite with the discriminator map.

    The discriminator map must already be at full resolution with values
    in [0, 1].
    """
    if disc.spatial_size != (image_size, image_size):
        raise ShapeError(f"discriminator map is {disc.spatial_size}, expected {(image_size, image_size)}")
    vmin, vmax = float(disc.values.min()), float(disc.values.max())
    if vmin < 0.0 or vmax > 1.0:
        raise RangeError(f"discriminator map values must lie in [0, 1], got [{vmin}, {vmax}]")
    base = compose_stpm(maps, image_size)
    return AnomalyMap(values=base.values * disc.values.to(torch.float32),
                      resolution="full", site="composite")


def image_score(amap: AnomalyMap, reducer: str = "max", topk: int = 64) -> float | Tensor:
    """Reduce a composite map to one score per image (default: max pixel)."""
    values = amap.values
    flat = values.reshape(*values.shape[:-2], -1)
    if reducer == "max":
        scores = flat.max(dim=-1).values
    elif reducer == "topk_mean":
        k = min(topk, flat.shape[-1])
        scores = flat.topk(k, dim=-1).values.mean(dim=-1)
    else:
        raise ValueError(f"unknown reducer {reducer!r}")
    return float(scores) if scores.dim() == 0 else scores


def to_heatmap_uint8(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Min-max normalize one map to uint8; returns (bytes, vmin, vmax)."""
    vmin = float(values.min())
    vmax = float(values.max())
    if vmax > vmin:
        scaled = (values - vmin) / (vmax - vmin)
    else:
        scaled = np.zeros_like(values)
    return (scaled * 255.0).round().astype(np.uint8), vmin, vmax


# Compact blue->cyan->yellow->red ramp, enough for visual inspection
# without pulling in a plotting dependency.
_RAMP = np.array(
    [(0, 0, 128), (0, 96, 255), (0, 212, 255), (120, 255, 135),
     (255, 229, 0), (255, 122, 0), (178, 0, 0)],
    dtype=np.float64,
)


def colorize(heat_uint8: np.ndarray) -> np.ndarray:
    """Map a uint8 heatmap to an RGB uint8 image."""
    pos = heat_uint8.astype(np.float64) / 255.0 * (len(_RAMP) - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, len(_RAMP) - 1)
    frac = (pos - lo)[..., None]
    rgb = _RAMP[lo] * (1.0 - frac) + _RAMP[hi] * frac
    return rgb.round().astype(np.uint8)


def overlay(image_rgb: np.ndarray, heat_rgb: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend a colorized heatmap over an RGB uint8 image."""
    if image_rgb.shape != heat_rgb.shape:
        raise ShapeError(f"overlay shapes differ: {image_rgb.shape} vs {heat_rgb.shape}")
    blended = (1.0 - alpha) * image_rgb.astype(np.float64) + alpha * heat_rgb.astype(np.float64)
    return blended.round().astype(np.uint8)
