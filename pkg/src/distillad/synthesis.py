"""Pseudo-anomaly synthesis: Perlin masks plus opacity blending.

Defect shapes come from thresholded gradient noise; defect appearance comes
from an augmented copy of the source image (or an external texture
directory). Inside the mask the output is ``beta * texture +
(1 - beta) * source``; outside it is bit-identical to the source. Every
sample is a pure function of (source, seed, parameters).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor
from torchvision.transforms import functional as TF

from .data import IMAGE_SUFFIXES, load_images
from .errors import DegenerateMaskError, DimensionError, ParameterError

DEFAULT_PERIODS = (2, 4, 8, 16)
DEFAULT_AUG_OPS = ("color_jitter", "posterize", "sharpness", "solarize", "equalize", "rotation")
MASK_FRACTION_MAX = 0.5


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin_field(h: int, w: int, period: tuple[int, int], seed: int) -> np.ndarray:
    """Smooth gradient-noise field in [-1, 1].

    ``period`` is the number of lattice cells per (vertical, horizontal)
    axis; powers of two that divide the field size give the classic tiling.
    Deterministic for a fixed seed.
    """
    if h <= 0 or w <= 0:
        raise DimensionError(f"field dimensions must be positive, got {(h, w)}")
    py, px = int(period[0]), int(period[1])
    if py <= 0 or px <= 0:
        raise DimensionError(f"period must be positive, got {period}")

    rng = np.random.default_rng(seed)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(py + 1, px + 1))
    grad_y = np.sin(angles)
    grad_x = np.cos(angles)

    ys = (np.arange(h, dtype=np.float64) + 0.5) / h * py
    xs = (np.arange(w, dtype=np.float64) + 0.5) / w * px
    cell_y = np.minimum(ys.astype(int), py - 1)
    cell_x = np.minimum(xs.astype(int), px - 1)
    fy = (ys - cell_y)[:, None]
    fx = (xs - cell_x)[None, :]

    def dot(dy: int, dx: int) -> np.ndarray:
        gy = grad_y[np.ix_(cell_y + dy, cell_x + dx)]
        gx = grad_x[np.ix_(cell_y + dy, cell_x + dx)]
        return gy * (fy - dy) + gx * (fx - dx)

    uy = _fade(fy)
    ux = _fade(fx)
    top = dot(0, 0) * (1.0 - ux) + dot(0, 1) * ux
    bottom = dot(1, 0) * (1.0 - ux) + dot(1, 1) * ux
    field = (top * (1.0 - uy) + bottom * uy) * np.sqrt(2.0)
    return field.astype(np.float32)


def generate_mask(
    field: np.ndarray,
    threshold: float,
    resample: Callable[[], np.ndarray] | None = None,
    max_retries: int = 8,
) -> np.ndarray:
    """Binarize ``|field| > threshold`` into a defect mask.

    The anomalous fraction must land in (0, 0.5): an empty mask asks
    ``resample`` for a fresh field, an overfull one retries with a higher
    threshold. Exhausting the retry budget raises
    :class:`DegenerateMaskError`.
    """
    for _ in range(max_retries + 1):
        mask = (np.abs(field) > threshold).astype(np.float32)
        fraction = float(mask.mean())
        if 0.0 < fraction < MASK_FRACTION_MAX:
            return mask
        if fraction == 0.0:
            if resample is None:
                raise DegenerateMaskError(
                    f"empty mask at threshold {threshold} and no resampler given"
                )
            field = resample()
        else:
            # bisect toward the field's peak so the retry always shrinks the mask
            threshold = 0.5 * (threshold + float(np.abs(field).max()))
    raise DegenerateMaskError(f"mask stayed degenerate after {max_retries} retries")


def _to_uint8(image: Tensor) -> Tensor:
    return (image.clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)


def _apply_aug(name: str, image_u8: Tensor, rng: np.random.Generator) -> Tensor:
    if name == "color_jitter":
        image_u8 = TF.adjust_brightness(image_u8, float(rng.uniform(0.7, 1.3)))
        image_u8 = TF.adjust_contrast(image_u8, float(rng.uniform(0.7, 1.3)))
        image_u8 = TF.adjust_saturation(image_u8, float(rng.uniform(0.7, 1.3)))
        return TF.adjust_hue(image_u8, float(rng.uniform(-0.1, 0.1)))
    if name == "posterize":
        return TF.posterize(image_u8, int(rng.integers(3, 7)))
    if name == "sharpness":
        return TF.adjust_sharpness(image_u8, float(rng.uniform(0.5, 3.0)))
    if name == "solarize":
        return TF.solarize(image_u8, int(rng.integers(32, 197)))
    if name == "equalize":
        return TF.equalize(image_u8)
    if name == "rotation":
        angle = float(rng.uniform(-45.0, 45.0))
        return TF.rotate(image_u8, angle, interpolation=TF.InterpolationMode.BILINEAR)
    raise ParameterError(f"unknown augmentation {name!r}")


def texture_source(
    source: Tensor,
    seed: int,
    ops: Sequence[str] | None = None,
    texture_dir: str | Path | None = None,
) -> Tensor:
    """Produce the defect texture for one sample, deterministically per seed.

    By default a copy of the source run through a random composition of
    three augmentations; with ``texture_dir`` set, a randomly chosen
    external image (resized to the source) is augmented instead. An empty
    ``ops`` sequence returns the input unchanged.
    """
    rng = np.random.default_rng(seed)
    base = source
    if texture_dir:
        files = sorted(
            p for p in Path(texture_dir).iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
        )
        if not files:
            raise ParameterError(f"no usable texture images under {texture_dir}")
        pick = files[int(rng.integers(0, len(files)))]
        base = load_images([pick], source.shape[-1])[0]
    if ops is None:
        chosen = list(rng.choice(np.array(DEFAULT_AUG_OPS, dtype=object), size=3, replace=False))
    else:
        chosen = list(ops)
    if not chosen:
        return base.clone()
    out = _to_uint8(base)
    for name in chosen:
        out = _apply_aug(str(name), out, rng)
    return out.float() / 255.0


def blend(source: Tensor, texture: Tensor, mask: Tensor, beta: float) -> Tensor:
    """Opacity-blend the texture into the source inside the mask.

    ``out = (1 - M) * source + M * (beta * texture + (1 - beta) * source)``.
    ``torch.where`` on the mask keeps the outside bit-identical to the
    source. ``beta`` must lie in [0.1, 1.0].
    """
    if not 0.1 <= beta <= 1.0:
        raise ParameterError(f"beta must lie in [0.1, 1.0], got {beta}")
    if source.shape != texture.shape:
        raise ParameterError(f"source/texture shapes differ: {source.shape} vs {texture.shape}")
    if mask.shape != source.shape[-2:]:
        raise ParameterError(f"mask shape {mask.shape} does not match image {source.shape}")
    inside = beta * texture + (1.0 - beta) * source
    return torch.where(mask.bool().expand_as(source), inside, source)


@dataclass
class PseudoAnomalySample:
    """One synthesized training sample for the discriminative head."""

    image: Tensor          # 3 x H x W in [0, 1]
    mask: Tensor           # H x W in {0, 1}; all-zero for normal samples
    beta: float
    noise_period: tuple[int, int]
    seed: int


class PseudoAnomalyGenerator:
    """Seeded factory of pseudo-anomalous and unmodified normal samples.

    Parameters mirror the training config: Perlin periods are drawn per
    axis from ``periods``, the binarization threshold is
    ``threshold_scale`` times the field's peak amplitude, and the blend
    opacity is uniform in ``beta_range``.
    """

    def __init__(
        self,
        periods: Sequence[int] = DEFAULT_PERIODS,
        threshold_scale: float = 0.5,
        beta_range: tuple[float, float] = (0.1, 1.0),
        texture_dir: str | Path | None = None,
        max_retries: int = 8,
    ) -> None:
        if not periods:
            raise ParameterError("periods must be non-empty")
        if not 0.0 < threshold_scale < 1.0:
            raise ParameterError(f"threshold_scale must be in (0, 1), got {threshold_scale}")
        self.periods = tuple(int(p) for p in periods)
        self.threshold_scale = float(threshold_scale)
        self.beta_range = (float(beta_range[0]), float(beta_range[1]))
        self.texture_dir = texture_dir
        self.max_retries = max_retries

    def sample_mask(self, h: int, w: int, seed: int) -> tuple[np.ndarray, tuple[int, int]]:
        """Draw a defect mask with anomalous fraction in (0, 0.5)."""
        rng = np.random.default_rng(seed)
        period = (
            int(rng.choice(self.periods)),
            int(rng.choice(self.periods)),
        )
        subseeds = iter(rng.integers(0, 2**31 - 1, size=self.max_retries + 2))

        def fresh_field() -> np.ndarray:
            return perlin_field(h, w, period, int(next(subseeds)))

        field = fresh_field()
        threshold = self.threshold_scale * float(np.abs(field).max())
        mask = generate_mask(field, threshold, resample=fresh_field, max_retries=self.max_retries)
        return mask, period

    def sample(self, source: Tensor, seed: int, anomalous: bool = True) -> PseudoAnomalySample:
        """Synthesize one sample from a [0, 1] image tensor."""
        h, w = int(source.shape[-2]), int(source.shape[-1])
        if not anomalous:
            return PseudoAnomalySample(
                image=source.clone(), mask=torch.zeros(h, w), beta=0.0,
                noise_period=(0, 0), seed=seed,
            )
        mask_np, period = self.sample_mask(h, w, seed)
        rng = np.random.default_rng((seed << 1) + 1)
        beta = float(rng.uniform(*self.beta_range))
        texture = texture_source(source, int(rng.integers(0, 2**31 - 1)), texture_dir=self.texture_dir)
        mask = torch.from_numpy(mask_np)
        image = blend(source, texture, mask, beta)
        return PseudoAnomalySample(image=image, mask=mask, beta=beta, noise_period=period, seed=seed)

    def sample_batch(
        self, sources: Tensor, base_seed: int, anomaly_ratio: float = 0.5
    ) -> list[PseudoAnomalySample]:
        """One sample per source image with an exact anomalous share.

        ``anomaly_ratio`` of the batch (rounded up, assignment shuffled by
        the seed) is synthesized as anomalous; the rest pass through
        unmodified with all-zero masks.
        """
        n = int(sources.shape[0])
        rng = np.random.default_rng(base_seed)
        n_anom = int(np.ceil(anomaly_ratio * n))
        flags = np.zeros(n, dtype=bool)
        flags[rng.permutation(n)[:n_anom]] = True
        return [
            self.sample(sources[i], seed=base_seed + 7919 * (i + 1), anomalous=bool(flags[i]))
            for i in range(n)
        ]
