"""U-Net discriminative head re-scoring the distillation anomaly maps.

The head consumes the three same-resolution pair sums (upsampled to the
input size and stacked channel-wise) and emits a per-pixel anomaly
probability. It trains on pseudo-anomalies with a focal loss while the
whole distillation stage stays frozen.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ArityError, ParameterError, ShapeError
from .maps import AnomalyMap, upsample_map

_PROB_EPS = 1e-6


@dataclass
class FocalLossConfig:
    """Focusing exponent and optional weight on the normal-pixel term.

    ``symmetric=False`` drops the normal-pixel term entirely (one-sided
    variant, kept for ablation; it offers no penalty against scoring
    normal pixels as anomalous).
    """

    gamma: float = 2.0
    normal_weight: float = 1.0
    symmetric: bool = True

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ParameterError(f"gamma must be >= 0, got {self.gamma}")
        if self.normal_weight < 0:
            raise ParameterError(f"normal_weight must be >= 0, got {self.normal_weight}")


def focal_loss(p: Tensor, t: Tensor, cfg: FocalLossConfig = FocalLossConfig()) -> Tensor:
    """Mean focal loss of a probability map against a binary mask.

    ``-[T (1-P)^g log P + w (1-T) P^g log(1-P)]`` averaged over pixels,
    with P clamped away from the log singularities.
    """
    if p.shape != t.shape:
        raise ShapeError(f"probability/mask shapes differ: {tuple(p.shape)} vs {tuple(t.shape)}")
    p = p.clamp(_PROB_EPS, 1.0 - _PROB_EPS)
    t = t.to(p.dtype)
    anomalous = t * (1.0 - p).pow(cfg.gamma) * torch.log(p)
    loss = -anomalous
    if cfg.symmetric:
        normal = (1.0 - t) * p.pow(cfg.gamma) * torch.log(1.0 - p)
        loss = loss - cfg.normal_weight * normal
    return loss.mean()


def stack_inputs(pair_maps: Sequence[AnomalyMap], image_size: int) -> Tensor:
    """Upsample the three pair-sum maps and stack them as channels.

    Channel order is fixed by stride (4, 8, 16) so the head always sees
    resolutions in the same slots.
    """
    if len(pair_maps) != 3:
        raise ArityError(f"expected 3 pair-sum maps, got {len(pair_maps)}")
    ordered = sorted(pair_maps, key=lambda m: m.resolution if isinstance(m.resolution, int) else 0)
    channels = []
    for amap in ordered:
        full = upsample_map(amap, image_size).values
        if full.dim() == 2:
            full = full[None]
        channels.append(full)
    return torch.stack(channels, dim=1)


class _ConvPair(nn.Module):
    # GroupNorm rather than BatchNorm: discriminator batches are small and
    # mixed-class, and inference must not depend on training statistics.
    def __init__(self, in_channels: int, out_channels: int) -> None:
        super().__init__()
        groups = min(8, out_channels)
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
            nn.GroupNorm(groups, out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.GroupNorm(groups, out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.body(x)


class UNetDiscriminator(nn.Module):
    """Encoder-decoder with skip connections and a sigmoid output head.

    Four pooling levels with channel doubling from ``base_width``. Output
    is one channel in (0, 1) at the input resolution.
    """

    def __init__(self, in_channels: int = 3, base_width: int = 32, depth: int = 4) -> None:
        super().__init__()
        self.depth = depth
        widths = [base_width * (2 ** i) for i in range(depth + 1)]
        self.encoders = nn.ModuleList()
        enc_in = in_channels
        for w in widths[:-1]:
            self.encoders.append(_ConvPair(enc_in, w))
            enc_in = w
        self.pool = nn.MaxPool2d(2)
        self.bottom = _ConvPair(widths[-2], widths[-1])
        self.decoders = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.decoders.append(_ConvPair(w * 2 + w, w))
        self.head = nn.Conv2d(widths[0], 1, kernel_size=1)

    def forward(self, x: Tensor) -> Tensor:
        skips = []
        for encoder in self.encoders:
            x = encoder(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottom(x)
        for decoder, skip in zip(self.decoders, reversed(skips)):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = decoder(torch.cat([x, skip], dim=1))
        return torch.sigmoid(self.head(x))


_DISCRIMINATOR_SALT = 0x51D3


def init_discriminator(seed: int, in_channels: int = 3, base_width: int = 32) -> UNetDiscriminator:
    """Fresh discriminator, deterministic for a fixed seed."""
    with torch.random.fork_rng():
        torch.manual_seed(seed * 1_000_003 + _DISCRIMINATOR_SALT)
        net = UNetDiscriminator(in_channels=in_channels, base_width=base_width)
        for m in net.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.GroupNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
    return net


def discriminator_forward(net: UNetDiscriminator, stacked: Tensor) -> AnomalyMap:
    """Score a stacked 3-channel input into the probability anomaly map.

    Inference-only: gradients are not tracked. Training loops call the
    network directly.
    """
    if stacked.dim() != 4:
        raise ShapeError(f"expected B x 3 x H x W, got {tuple(stacked.shape)}")
    with torch.no_grad():
        prob = net(stacked)[:, 0]
    return AnomalyMap(values=prob, resolution="full", site=7)
