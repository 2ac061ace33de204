"""Scikit-learn style estimators wrapping the pretraining pipeline.

``MaskDistillPretrainer`` is a transformer: ``fit(X)`` pretrains the student on
a batch of images, ``transform(X)`` returns frozen per-image features.
``LinearProbe`` is a plain multinomial-logistic classifier over those features.
Both follow the sklearn parameter conventions, so they compose with
``Pipeline``, ``clone``, and grid-search tooling.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .checkpoint import load_teacher_checkpoint
from .errors import ShapeMismatch
from .evaluate import ProbeConfig, extract_features, fit_logreg, predict_logreg
from .objectives import LossKind, NormKind
from .teachers import TeacherSpec
from .train import TrainConfig, run_pretraining
from .vit import ViTConfig, ViTParams


def check_images(X, patch_size: int | None = None) -> np.ndarray:
    """Validate a (batch, height, width, channels) float image array."""
    X = np.asarray(X)
    if X.ndim != 4:
        raise ShapeMismatch(f"expected (batch, H, W, C) images, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ShapeMismatch("need at least one image")
    if X.shape[1] != X.shape[2]:
        raise ShapeMismatch(f"images must be square, got {X.shape[1]}x{X.shape[2]}")
    if not np.issubdtype(X.dtype, np.floating):
        X = X.astype(np.float32)
    if not np.all(np.isfinite(X)):
        raise ShapeMismatch("images contain non-finite values")
    if patch_size is not None and X.shape[1] % patch_size:
        raise ShapeMismatch(
            f"image size {X.shape[1]} not divisible by patch size {patch_size}")
    return X


class MaskDistillPretrainer(BaseEstimator, TransformerMixin):
    """Self-supervised representation learner: fit pretrains, transform embeds.

    ``teacher`` selects the target producer: "pixel", "ema", a ViTParams
    instance (frozen), or a path to a teacher checkpoint.
    """

    def __init__(self, layers=4, hidden=64, ffn_hidden=256, heads=4, patch_size=8,
                 target_dim=None, steps=300, batch_size=16, peak_lr=1.5e-3,
                 min_lr=1e-5, warmup_steps=30, weight_decay=0.05,
                 grad_clip_norm=3.0, mask_ratio=0.4, mask_strategy="blockwise",
                 teacher="pixel", per_patch_ln=True, teacher_momentum=0.999,
                 norm="ln", loss="smooth_l1", smooth_l1_beta=1.0, kd_mode=False,
                 drop_path_rate=0.1, layer_scale_init=0.1, seed=0,
                 feature_source="mean_patches"):
        self.layers = layers
        self.hidden = hidden
        self.ffn_hidden = ffn_hidden
        self.heads = heads
        self.patch_size = patch_size
        self.target_dim = target_dim
        self.steps = steps
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.min_lr = min_lr
        self.warmup_steps = warmup_steps
        self.weight_decay = weight_decay
        self.grad_clip_norm = grad_clip_norm
        self.mask_ratio = mask_ratio
        self.mask_strategy = mask_strategy
        self.teacher = teacher
        self.per_patch_ln = per_patch_ln
        self.teacher_momentum = teacher_momentum
        self.norm = norm
        self.loss = loss
        self.smooth_l1_beta = smooth_l1_beta
        self.kd_mode = kd_mode
        self.drop_path_rate = drop_path_rate
        self.layer_scale_init = layer_scale_init
        self.seed = seed
        self.feature_source = feature_source

    def _teacher_setup(self, grid) -> tuple[TeacherSpec, ViTParams | None, int]:
        teacher = self.teacher
        if isinstance(teacher, str) and teacher == "pixel":
            spec = TeacherSpec(kind="pixel", per_patch_ln=self.per_patch_ln)
            return spec, None, self.patch_size * self.patch_size * self._channels
        if isinstance(teacher, str) and teacher == "ema":
            spec = TeacherSpec(kind="ema", ema_momentum=self.teacher_momentum)
            return spec, None, self.hidden
        if isinstance(teacher, ViTParams):
            params = teacher.frozen()
            ref = "in-memory"
        elif isinstance(teacher, str):
            params = load_teacher_checkpoint(teacher, grid)
            ref = teacher
        else:
            raise ValueError(f"unsupported teacher {teacher!r}")
        if params.config is None or params.config.grid != grid:
            raise ShapeMismatch("teacher grid does not match the input images")
        spec = TeacherSpec(kind="frozen", checkpoint_ref=ref)
        return spec, params, params.config.hidden

    def fit(self, X, y=None):
        X = check_images(X, self.patch_size)
        self._channels = X.shape[3]
        image_size = X.shape[1]
        side = image_size // self.patch_size
        teacher_spec, teacher_params, inferred_dim = self._teacher_setup((side, side))
        target_dim = self.target_dim if self.target_dim is not None else inferred_dim

        vit = ViTConfig(layers=self.layers, hidden=self.hidden,
                        ffn_hidden=self.ffn_hidden, heads=self.heads,
                        patch_size=self.patch_size, image_size=image_size,
                        target_dim=target_dim, channels=self._channels,
                        layer_scale_init=self.layer_scale_init,
                        drop_path_rate=self.drop_path_rate)
        train = TrainConfig(teacher=teacher_spec,
                            norm=NormKind(self.norm),
                            loss=LossKind(self.loss, beta=self.smooth_l1_beta),
                            total_steps=self.steps, batch_size=self.batch_size,
                            peak_lr=self.peak_lr, min_lr=self.min_lr,
                            warmup_steps=min(self.warmup_steps, self.steps),
                            weight_decay=self.weight_decay,
                            grad_clip_norm=self.grad_clip_norm,
                            mask_ratio=0.0 if self.kd_mode else self.mask_ratio,
                            mask_strategy=self.mask_strategy,
                            kd_mode=self.kd_mode, seed=self.seed)
        result = run_pretraining(X, train, vit, teacher_params=teacher_params)
        self.params_ = result.params
        self.teacher_params_ = result.teacher_params
        self.run_record_ = result.record
        self.vit_config_ = vit
        self.train_config_ = train
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "params_"):
            raise NotFittedError("MaskDistillPretrainer is not fitted yet")
        X = check_images(X, self.patch_size)
        return extract_features(self.params_, X, self.feature_source)


class LinearProbe(BaseEstimator, ClassifierMixin):
    """Multinomial logistic regression fit by full-batch gradient descent."""

    def __init__(self, learning_rate=0.5, steps=400, l2_penalty=1e-3, tol=1e-7):
        self.learning_rate = learning_rate
        self.steps = steps
        self.l2_penalty = l2_penalty
        self.tol = tol

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(X):
            raise ShapeMismatch("labels must be a vector matching the feature rows")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("LinearProbe needs at least two classes")
        config = ProbeConfig(learning_rate=self.learning_rate, steps=self.steps,
                             l2_penalty=self.l2_penalty, tol=self.tol)
        self.mu_, self.sd_, self.coef_, self.intercept_ = fit_logreg(X, encoded, config)
        return self

    def predict(self, X):
        if not hasattr(self, "coef_"):
            raise NotFittedError("LinearProbe is not fitted yet")
        X = check_array(X, dtype=np.float64)
        idx = predict_logreg(X, self.mu_, self.sd_, self.coef_, self.intercept_)
        return self.classes_[idx]
