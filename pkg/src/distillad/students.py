"""Trainable student networks and the one-channel attention bridge.

Student 1 clones the 18-layer teacher's topology through stride 16 and is
trained from scratch against it. Student 2 is a decoder: starting from the
teacher-1 stride-32 bottleneck it reconstructs features back up to stride
4, with per-level multiplicative attention gates computed from detached
teacher-2 features and 1x1 adapters that project its widths onto
teacher 2's channel counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn
from torchvision.models import resnet18

from .errors import ShapeError
from .teachers import BOTTLENECK_CHANNELS, FeaturePyramid

STUDENT2_DECODER_CHANNELS = (256, 128, 64)   # decode order: stride 16, 8, 4
STUDENT2_ADAPTER_CHANNELS = (1024, 512, 256)  # teacher-2 widths at those strides
ATTENTION_INPUT_CHANNELS = (1024, 512, 256)


@dataclass
class AttentionMap:
    """One-channel spatial gate in [0, 1], tagged with its stride."""

    values: Tensor  # B x 1 x h x w
    level: int

    def __post_init__(self) -> None:
        if self.values.dim() != 4 or self.values.shape[1] != 1:
            raise ShapeError(f"attention map must be B x 1 x h x w, got {tuple(self.values.shape)}")


class Student1Network(nn.Module):
    """Randomly initialized 18-layer residual network through stride 16."""

    def __init__(self) -> None:
        super().__init__()
        backbone = resnet18(weights=None)
        self.stem = nn.Sequential(backbone.conv1, backbone.bn1, backbone.relu, backbone.maxpool)
        self.layer1 = backbone.layer1
        self.layer2 = backbone.layer2
        self.layer3 = backbone.layer3

    def forward(self, x: Tensor) -> FeaturePyramid:
        x = self.stem(x)
        f1 = self.layer1(x)
        f2 = self.layer2(f1)
        f3 = self.layer3(f2)
        return FeaturePyramid(levels=[f1, f2, f3], source="student1")


# Per-module seed salts keep initialization streams independent, so a
# student can never silently clone a seeded-random teacher.
_STUDENT1_SALT = 0x51D1
_STUDENT2_SALT = 0x51D2


def init_student1(seed: int) -> Student1Network:
    """Fresh student 1, deterministic for a fixed seed."""
    with torch.random.fork_rng():
        torch.manual_seed(seed * 1_000_003 + _STUDENT1_SALT)
        return Student1Network()


class AttentionGate(nn.Module):
    """Aggregate a teacher feature map into a single [0, 1] channel.

    A learned 1x1 projection across channels followed by a sigmoid. The
    projection belongs to the student side; inputs are detached so no
    gradient can reach the teacher.
    """

    def __init__(self, in_channels: int) -> None:
        super().__init__()
        self.project = nn.Conv2d(in_channels, 1, kernel_size=1)

    def forward(self, teacher_feature: Tensor) -> Tensor:
        return torch.sigmoid(self.project(teacher_feature.detach()))


class _UpBlock(nn.Module):
    """Nearest x2 upsampling followed by a residual convolution block."""

    def __init__(self, in_channels: int, out_channels: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.skip = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels),
        )
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: Tensor) -> Tensor:
        x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.skip(x))


class Student2Network(nn.Module):
    """Feature-reconstruction decoder with attention gates and adapters.

    Consumes the teacher-1 stride-32 bottleneck and emits an adapted
    pyramid matching teacher 2 at strides 16, 8 and 4. After each decoder
    block the feature is gated as ``feature * (1 + attention)``; the gated
    feature both feeds the next block and, through a 1x1 adapter, the
    distillation loss at that level.
    """

    def __init__(self) -> None:
        super().__init__()
        widths = (BOTTLENECK_CHANNELS,) + STUDENT2_DECODER_CHANNELS
        self.blocks = nn.ModuleList(
            _UpBlock(widths[i], widths[i + 1]) for i in range(3)
        )
        self.adapters = nn.ModuleList(
            nn.Conv2d(dec, out, kernel_size=1)
            for dec, out in zip(STUDENT2_DECODER_CHANNELS, STUDENT2_ADAPTER_CHANNELS)
        )
        self.gates = nn.ModuleList(
            AttentionGate(c) for c in ATTENTION_INPUT_CHANNELS
        )

    def compute_attentions(self, teacher2_levels: Sequence[Tensor]) -> list[AttentionMap]:
        """Gate maps from stride-ascending teacher-2 features, in decode order.

        Returns maps for strides 16, 8, 4, matching the decoder's pass.
        """
        if len(teacher2_levels) != 3:
            raise ShapeError(f"expected 3 teacher-2 levels, got {len(teacher2_levels)}")
        strides = (16, 8, 4)
        descending = list(reversed(list(teacher2_levels)))
        return [
            AttentionMap(values=gate(feat), level=stride)
            for gate, feat, stride in zip(self.gates, descending, strides)
        ]

    def forward(self, bottleneck: Tensor, attentions: Sequence[AttentionMap | Tensor] | None = None) -> FeaturePyramid:
        """Decode the bottleneck into an adapted three-level pyramid.

        ``attentions`` holds one map per decoder level in decode order
        (stride 16, 8, 4); ``None`` runs the ungated decoder.
        """
        if bottleneck.dim() != 4 or bottleneck.shape[1] != BOTTLENECK_CHANNELS:
            raise ShapeError(
                f"bottleneck must be B x {BOTTLENECK_CHANNELS} x h x w, got {tuple(bottleneck.shape)}"
            )
        gate_values: list[Tensor | None]
        if attentions is None:
            gate_values = [None, None, None]
        else:
            if len(attentions) != 3:
                raise ShapeError(f"expected 3 attention maps, got {len(attentions)}")
            gate_values = [a.values if isinstance(a, AttentionMap) else a for a in attentions]

        x = bottleneck
        adapted: list[Tensor] = []
        for block, adapter, gate in zip(self.blocks, self.adapters, gate_values):
            x = block(x)
            if gate is not None:
                if gate.shape[-2:] != x.shape[-2:]:
                    raise ShapeError(
                        f"attention size {tuple(gate.shape[-2:])} does not match "
                        f"feature size {tuple(x.shape[-2:])}"
                    )
                x = x * (1.0 + gate)
            adapted.append(adapter(x))
        # decode order is stride 16 -> 4; pyramids are stored stride ascending
        return FeaturePyramid(levels=list(reversed(adapted)), source="student2")


def _init_decoder_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    for m in module.modules():
        if isinstance(m, AttentionGate):
            # fan-in scaling for the wide-to-one projection: under fan-out
            # the initial logits are huge and the sigmoid starts dead
            nn.init.kaiming_normal_(m.project.weight, mode="fan_in", nonlinearity="linear")
            nn.init.zeros_(m.project.bias)


def init_student2(seed: int) -> Student2Network:
    """Fresh student 2, deterministic for a fixed seed.

    Convolutions use fan-out-scaled random init; attention projection
    biases start at zero so initial gates sit at 0.5 everywhere.
    """
    with torch.random.fork_rng():
        torch.manual_seed(seed * 1_000_003 + _STUDENT2_SALT)
        net = Student2Network()
        _init_decoder_weights(net)
    return net
