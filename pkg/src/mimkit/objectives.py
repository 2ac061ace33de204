"""Target normalization and regression losses, plus the masked objective.

The objective averages a pairwise loss between head outputs and normalized
teacher targets over the masked positions only; everything outside the mask
(including the cls row) is structurally absent, so it cannot contribute to the
value or to any gradient. The knowledge-distillation variant averages over all
patch positions instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import EmptyMask, ShapeMismatch
from .patches import MaskSet
from .teachers import TargetFeatures
from .tensor import Tensor

NORM_KINDS = ("identity", "ln", "l2", "bn")
LOSS_KINDS = ("mse", "l1", "smooth_l1", "cosine")


@dataclass(frozen=True)
class NormKind:
    variant: str = "ln"
    eps: float = 1e-6

    def __post_init__(self):
        if self.variant not in NORM_KINDS:
            raise ValueError(f"unknown normalization {self.variant!r}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass(frozen=True)
class LossKind:
    variant: str = "smooth_l1"
    beta: float = 1.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.variant not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.variant!r}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


def normalize_targets(targets: TargetFeatures, kind: NormKind) -> TargetFeatures:
    """Apply the target normalization axis: identity, affine-free layer norm per
    row, l2 per row, or batch standardization per dimension over the rows."""
    t = targets.t
    v = kind.variant
    if v == "identity":
        return targets
    if v == "ln":
        mu = t.mean(axis=-1, keepdims=True)
        var = t.var(axis=-1, keepdims=True)
        out = (t - mu) / np.sqrt(var + kind.eps)
    elif v == "l2":
        norms = np.linalg.norm(t, axis=-1, keepdims=True)
        out = t / (norms + kind.eps)
    else:  # bn: stats over the rows of the current batch, no affine, no history
        mu = t.mean(axis=0, keepdims=True)
        var = t.var(axis=0, keepdims=True)
        out = (t - mu) / np.sqrt(var + kind.eps)
    return TargetFeatures(out, targets.source_kind)


def _batch_loss(o_rows: Tensor, t_rows: np.ndarray, kind: LossKind) -> Tensor:
    """Mean over rows of the per-row loss between predictions and constants."""
    if o_rows.shape != t_rows.shape:
        raise ShapeMismatch(f"predictions {o_rows.shape} vs targets {t_rows.shape}")
    t = Tensor(t_rows.astype(o_rows.dtype, copy=False))
    v = kind.variant
    if v == "mse":
        d = T.sub(o_rows, t)
        return T.reduce_mean(T.mul(d, d))
    if v == "l1":
        return T.reduce_mean(T.absolute(T.sub(o_rows, t)))
    if v == "smooth_l1":
        return T.reduce_mean(T.huber(T.sub(o_rows, t), kind.beta))
    # cosine: 1 - <o, t> / (|o| |t| + eps), averaged over rows
    dots = T.reduce_sum(T.mul(o_rows, t), axis=1)
    o_norm = T.sqrt(T.reduce_sum(T.mul(o_rows, o_rows), axis=1))
    t_norm = Tensor(np.linalg.norm(t_rows, axis=1).astype(o_rows.dtype, copy=False))
    cos = T.div(dots, T.add(T.mul(o_norm, t_norm), kind.eps))
    return T.reduce_mean(T.add(T.scale(cos, -1.0), 1.0))


def pairwise_loss(o, t, kind: LossKind) -> Tensor:
    """Loss between one prediction vector and one target vector."""
    if not isinstance(o, Tensor):
        o = Tensor(o)
    t = np.asarray(t)
    if o.data.ndim != 1 or t.ndim != 1 or o.shape[0] != t.shape[0]:
        raise ShapeMismatch(f"pairwise loss needs equal-length vectors, got {o.shape} and {t.shape}")
    return _batch_loss(T.reshape(o, (1, o.shape[0])), t.reshape(1, -1), kind)


def _check_output(o: Tensor, targets: TargetFeatures) -> int:
    n, d = targets.t.shape
    if o.data.ndim != 2 or o.shape[0] != n + 1 or o.shape[1] != d:
        raise ShapeMismatch(
            f"head output {o.shape} incompatible with {n} patches of dim {d}")
    return n


def mim_objective(output: Tensor, targets: TargetFeatures, mask: MaskSet,
                  norm: NormKind, loss: LossKind) -> Tensor:
    """Mean pairwise loss over masked positions; cls row (index 0) excluded."""
    n = _check_output(output, targets)
    if mask.n_total != n:
        raise ShapeMismatch(f"mask covers {mask.n_total} patches, targets have {n}")
    if len(mask) == 0:
        raise EmptyMask("masked objective needs at least one masked position")
    normalized = normalize_targets(targets, norm).t
    patch_rows = T.slice_axis(output, 0, 1, n + 1)
    o_rows = T.gather_rows(patch_rows, mask.as_array())
    return _batch_loss(o_rows, normalized[mask.as_array()], kind=loss)


def kd_objective(output: Tensor, targets: TargetFeatures,
                 norm: NormKind, loss: LossKind) -> Tensor:
    """Knowledge-distillation degenerate mode: average over all patch positions."""
    n = _check_output(output, targets)
    normalized = normalize_targets(targets, norm).t
    o_rows = T.slice_axis(output, 0, 1, n + 1)
    return _batch_loss(o_rows, normalized, kind=loss)
