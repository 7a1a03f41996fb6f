"""Frozen pretrained backbones exposing multi-resolution feature pyramids.

Two residual backbones serve as teachers: an 18-layer one (also providing
the stride-32 bottleneck that feeds the reconstruction student) and a
50-layer one. Both are frozen: parameters never receive gradients,
batch-norm runs in inference mode, and checksums make the frozenness
testable.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor, nn
from torchvision.models import resnet18, resnet50

from .errors import ShapeError, WeightsError

WEIGHTS_CACHE_ENV = "DISTILLAD_WEIGHTS_DIR"

# Channel widths of the tap points at strides 4/8/16 (and 32 for resnet18).
PYRAMID_CHANNELS = {
    "resnet18": (64, 128, 256),
    "resnet50": (256, 512, 1024),
}
BOTTLENECK_CHANNELS = 512  # resnet18 stride-32 output


@dataclass
class FeaturePyramid:
    """Ordered feature tensors, stride ascending (4, 8, 16[, 32]).

    Each level is ``B x C_l x h_l x w_l`` with spatial sizes halving from
    one level to the next.
    """

    levels: list[Tensor]
    source: str

    def __post_init__(self) -> None:
        for a, b in zip(self.levels, self.levels[1:]):
            if (a.shape[-2] != 2 * b.shape[-2]) or (a.shape[-1] != 2 * b.shape[-1]):
                raise ShapeError(
                    f"pyramid levels must halve spatially, got {a.shape} then {b.shape}"
                )

    def __len__(self) -> int:
        return len(self.levels)


class TeacherNetwork(nn.Module):
    """Residual backbone truncated to its tap points, permanently frozen.

    ``forward`` returns the stride-4/8/16 features; for the 18-layer
    variant the stride-32 bottleneck is appended as a fourth level.
    """

    def __init__(self, variant: str, backbone: nn.Module, include_bottleneck: bool) -> None:
        super().__init__()
        self.variant = variant
        self.include_bottleneck = include_bottleneck
        self.stem = nn.Sequential(backbone.conv1, backbone.bn1, backbone.relu, backbone.maxpool)
        self.layer1 = backbone.layer1
        self.layer2 = backbone.layer2
        self.layer3 = backbone.layer3
        self.layer4 = backbone.layer4 if include_bottleneck else None
        for param in self.parameters():
            param.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True) -> "TeacherNetwork":
        # Frozen semantics: ignore train-mode requests so batch-norm
        # statistics can never drift.
        return super().train(False)

    def forward(self, x: Tensor) -> list[Tensor]:
        x = self.stem(x)
        f1 = self.layer1(x)
        f2 = self.layer2(f1)
        f3 = self.layer3(f2)
        levels = [f1, f2, f3]
        if self.layer4 is not None:
            levels.append(self.layer4(f3))
        return levels


def _build_backbone(variant: str) -> nn.Module:
    if variant == "resnet18":
        return resnet18(weights=None)
    if variant == "resnet50":
        return resnet50(weights=None)
    raise WeightsError(f"unknown teacher variant {variant!r}")


def _load_imagenet_weights(variant: str, backbone: nn.Module) -> None:
    cache_dir = os.environ.get(WEIGHTS_CACHE_ENV, "")
    if cache_dir:
        local = Path(cache_dir) / f"{variant}-imagenet.pth"
        if local.is_file():
            _load_state_file(local, backbone)
            return
    try:
        from torchvision.models import ResNet18_Weights, ResNet50_Weights

        weights = ResNet18_Weights.IMAGENET1K_V1 if variant == "resnet18" else ResNet50_Weights.IMAGENET1K_V1
        backbone.load_state_dict(weights.get_state_dict(progress=False))
    except Exception as exc:
        raise WeightsError(
            f"pretrained weights for {variant} unavailable "
            f"(no cache, download failed): {exc}"
        ) from exc


def _load_state_file(path: Path, backbone: nn.Module) -> None:
    if not path.is_file():
        raise WeightsError(f"weights file not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
        backbone.load_state_dict(state)
    except Exception as exc:
        raise WeightsError(f"cannot load weights from {path}: {exc}") from exc


def load_teacher(variant: str, weights_source: str = "imagenet") -> TeacherNetwork:
    """Build a frozen teacher from one of three weight sources.

    ``weights_source`` is ``"imagenet"`` (published pretrained weights via
    the torchvision cache, honoring ``DISTILLAD_WEIGHTS_DIR``), a path to a
    ``.pth`` state dict, or ``"random[:seed]"`` for a deterministic seeded
    initialization (useful offline and in tests; detection quality needs
    pretrained features).
    """
    if weights_source.startswith("random"):
        _, _, seed_text = weights_source.partition(":")
        seed = int(seed_text) if seed_text else 0
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            backbone = _build_backbone(variant)
    else:
        backbone = _build_backbone(variant)
        if weights_source == "imagenet":
            _load_imagenet_weights(variant, backbone)
        else:
            _load_state_file(Path(weights_source), backbone)
    return TeacherNetwork(variant, backbone, include_bottleneck=variant == "resnet18")


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over all parameters and buffers, in deterministic name order."""
    digest = hashlib.sha256()
    items = list(module.state_dict().items())
    for name, tensor in sorted(items, key=lambda kv: kv[0]):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def extract_pyramid(net: TeacherNetwork, batch: Tensor) -> FeaturePyramid:
    """Run a normalized image batch through a frozen teacher.

    Output tensors carry no autograd history, so downstream losses treat
    them as constants.
    """
    if batch.dim() != 4 or batch.shape[1] != 3:
        raise ShapeError(f"expected B x 3 x H x W batch, got {tuple(batch.shape)}")
    if batch.shape[-2] % 32 or batch.shape[-1] % 32:
        raise ShapeError(f"input size must be divisible by 32, got {tuple(batch.shape[-2:])}")
    with torch.no_grad():
        levels = net(batch)
    return FeaturePyramid(levels=levels, source=f"teacher:{net.variant}")
