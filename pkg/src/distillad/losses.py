"""Normalized feature-matching loss across the six distillation sites.

Per spatial location the channel vectors of teacher and student are scaled
to unit Euclidean length, the pixel loss is half the squared distance
between them, the per-site loss is the spatial mean, and the total is the
plain sum over the six sites. For unit vectors every pixel loss lies in
[0, 2], so each site loss is in [0, 2] and the total in [0, 12].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor

from .errors import ArityError, ShapeError

NUM_SITES = 6
_NORM_EPS = 1e-8


@dataclass
class LossBreakdown:
    """Per-site loss values plus their sum.

    ``per_site`` is a detached length-6 tensor for logging; ``total``
    keeps the autograd graph for the backward pass.
    """

    per_site: Tensor
    total: Tensor


def normalize_features(features: Tensor, eps: float = _NORM_EPS) -> Tensor:
    """Scale each location's channel vector to unit length.

    ``eps`` in the denominator keeps zero vectors (which would otherwise be
    undefined) at zero with a bounded gradient.
    """
    norm = torch.linalg.vector_norm(features, dim=-3, keepdim=True)
    return features / (norm + eps)


def pixel_loss(ft_hat: Tensor, fs_hat: Tensor) -> Tensor:
    """Half squared distance between normalized features, per location.

    Inputs are ``... x C x h x w``; the result drops the channel axis.
    """
    if ft_hat.shape != fs_hat.shape:
        raise ShapeError(f"feature shapes differ: {tuple(ft_hat.shape)} vs {tuple(fs_hat.shape)}")
    return 0.5 * (ft_hat - fs_hat).pow(2).sum(dim=-3)


def map_loss(field: Tensor) -> Tensor:
    """Mean of a per-location loss field over all locations (and batch)."""
    if field.numel() == 0:
        raise ShapeError("empty loss field")
    return field.mean()


def total_loss(pairs: Sequence[tuple[Tensor, Tensor]]) -> LossBreakdown:
    """Sum the per-site losses over the six (teacher, student) pairs.

    Sites 1-3 are the first student-teacher pair at strides 4/8/16, sites
    4-6 the reconstruction pair at strides 16/8/4. Gradients flow only into
    tensors that require grad, i.e. the student side.
    """
    if len(pairs) != NUM_SITES:
        raise ArityError(f"expected {NUM_SITES} feature pairs, got {len(pairs)}")
    site_losses = []
    for teacher_feat, student_feat in pairs:
        field = pixel_loss(normalize_features(teacher_feat), normalize_features(student_feat))
        site_losses.append(map_loss(field))
    stacked = torch.stack(site_losses)
    return LossBreakdown(per_site=stacked.detach().clone(), total=stacked.sum())
