"""Teacher plugins: pixel targets, a frozen ViT, or an EMA copy of the student.

Teachers always consume the full, uncorrupted image; the mask is never an
input on this side of the pipeline. Target features leave the autodiff graph
as plain arrays, so no gradient can reach teacher parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatch, ShapeMismatch
from .patches import MaskSet, PatchSequence, patchify
from .tensor import Tensor
from .vit import ViTConfig, ViTParams, embed_and_mask, vit_forward

TEACHER_KINDS = ("pixel", "frozen", "ema")
TARGET_LAYER_MODES = ("last", "mean_last_k")


@dataclass(frozen=True)
class TeacherSpec:
    """Which teacher produces targets and how its layers are pooled.

    Kind-specific knobs must be present exactly when the kind uses them:
    ``per_patch_ln`` for pixel, ``checkpoint_ref`` for frozen, ``ema_momentum``
    for ema.
    """

    kind: str
    target_layers: str = "last"
    target_last_k: int = 1
    ema_momentum: float | None = None
    checkpoint_ref: str | None = None
    per_patch_ln: bool | None = None

    def __post_init__(self):
        if self.kind not in TEACHER_KINDS:
            raise ValueError(f"unknown teacher kind {self.kind!r}")
        if self.target_layers not in TARGET_LAYER_MODES:
            raise ValueError(f"unknown target_layers {self.target_layers!r}")
        if self.target_last_k < 1:
            raise ValueError("target_last_k must be >= 1")
        requirements = {
            "pixel": ("per_patch_ln",),
            "frozen": ("checkpoint_ref",),
            "ema": ("ema_momentum",),
        }
        needed = requirements[self.kind]
        for name in ("per_patch_ln", "checkpoint_ref", "ema_momentum"):
            value = getattr(self, name)
            if name in needed and value is None:
                raise ValueError(f"teacher kind {self.kind!r} requires {name}")
            if name not in needed and value is not None:
                raise ValueError(f"{name} is not a field of teacher kind {self.kind!r}")
        if self.kind == "ema" and not 0.0 < self.ema_momentum < 1.0:
            raise ValueError(f"ema_momentum {self.ema_momentum} outside (0, 1)")


@dataclass(frozen=True)
class TargetFeatures:
    """Per-patch teacher outputs, one row per student patch."""

    t: np.ndarray  # (n_patches, target_dim)
    source_kind: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.t)):
            raise ShapeMismatch("teacher produced non-finite target features")

    @property
    def dim(self) -> int:
        return self.t.shape[1]


def _affine_free_ln(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def pixel_teacher(patches: PatchSequence, per_patch_ln: bool) -> TargetFeatures:
    """Raw (or per-patch standardized) pixels as the regression target."""
    t = np.array(patches.patches, dtype=np.float64)
    if per_patch_ln:
        t = _affine_free_ln(t)
    return TargetFeatures(t, "pixel")


def frozen_teacher(image: np.ndarray, teacher_params: ViTParams,
                   teacher_config: ViTConfig, target_layers: str = "last",
                   last_k: int = 1) -> TargetFeatures:
    """Full-image forward through a frozen ViT; per-patch features of the last
    layer or the elementwise mean of the last ``last_k`` layers."""
    seq = patchify(image, teacher_config.patch_size)
    if seq.grid != teacher_config.grid:
        raise GridMismatch(
            f"teacher expects grid {teacher_config.grid}, image gives {seq.grid}")
    empty = MaskSet((), seq.count, 0.0)
    embedded = embed_and_mask(seq, empty, teacher_params)
    _, captured = vit_forward(embedded, teacher_params, teacher_config,
                              mode="eval", collect_layers=True)
    if target_layers == "last":
        last_k = 1
    max_k = max(teacher_config.layers, 1)
    if last_k > max_k:
        raise ValueError(f"cannot pool last {last_k} layers of a {teacher_config.layers}-layer teacher")
    stack = np.stack([c.data for c in captured[len(captured) - last_k:]])
    feats = stack.mean(axis=0)
    return TargetFeatures(np.array(feats[1:], dtype=np.float64), "frozen")


def ema_update(teacher_params: ViTParams, student_params: ViTParams,
               momentum: float) -> ViTParams:
    """theta_T <- m * theta_T + (1 - m) * theta_S for every parameter."""
    if not 0.0 < momentum < 1.0:
        raise ValueError(f"momentum {momentum} outside (0, 1)")
    if set(teacher_params.names()) != set(student_params.names()):
        raise ShapeMismatch("teacher and student parameter names differ")
    updated = {}
    for name, t in teacher_params.items():
        s = student_params[name]
        if t.shape != s.shape:
            raise ShapeMismatch(f"shape mismatch for {name}: {t.shape} vs {s.shape}")
        # incremental form keeps theta_T == theta_S an exact fixed point
        updated[name] = Tensor(t.data + (1.0 - momentum) * (s.data - t.data),
                               requires_grad=False)
    return ViTParams(updated, teacher_params.config)


def get_targets(spec: TeacherSpec, image: np.ndarray, patches: PatchSequence,
                state: ViTParams | None) -> TargetFeatures:
    """Dispatch to the configured teacher. The mask is never visible here;
    targets are a pure function of the full image and teacher state."""
    if spec.kind == "pixel":
        return pixel_teacher(patches, spec.per_patch_ln)
    if state is None:
        raise ShapeMismatch(f"teacher kind {spec.kind!r} needs teacher parameters")
    if state.config.grid != patches.grid:
        raise GridMismatch(
            f"teacher grid {state.config.grid} != student grid {patches.grid}")
    feats = frozen_teacher(image, state, state.config,
                           target_layers=spec.target_layers, last_k=spec.target_last_k)
    return TargetFeatures(feats.t, spec.kind)
