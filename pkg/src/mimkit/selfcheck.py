"""Finite-difference verification suites: per-op checks and an end-to-end check
of the masked-distillation loss through every parameter of a toy model."""

from __future__ import annotations

import numpy as np

from .objectives import LossKind, NormKind, mim_objective
from .patches import MaskSet, patchify
from .teachers import TeacherSpec, get_targets
from .tensor import grad_check, gradcheck_suite
from .vit import ViTConfig, embed_and_mask, init_params, mim_head, vit_forward

OP_TOLERANCE = 1e-4
PIPELINE_TOLERANCE = 1e-3


def op_gradient_report(seed: int = 0, h: float = 1e-5) -> list[tuple[str, float]]:
    return gradcheck_suite(seed=seed, h=h)


def pipeline_gradient_report(seed: int = 0, h: float = 1e-5) -> list[tuple[str, float]]:
    """Check d(loss)/d(param) for every parameter of a dim-8, 2-layer model
    against central differences, through the full masked objective."""
    vit = ViTConfig(layers=2, hidden=8, ffn_hidden=16, heads=2, patch_size=4,
                    image_size=8, target_dim=8, channels=3, drop_path_rate=0.0)
    rng = np.random.default_rng(seed)
    params = init_params(vit, rng, dtype=np.float64)
    teacher = init_params(vit, rng, dtype=np.float64).frozen()
    image = rng.random((8, 8, 3))
    seq = patchify(image, vit.patch_size)
    mask = MaskSet.from_indices([1, 2], seq.count)
    spec = TeacherSpec(kind="frozen", checkpoint_ref="in-memory")
    targets = get_targets(spec, image, seq, teacher)
    norm, loss_kind = NormKind("ln"), LossKind("smooth_l1")

    def loss_with(p):
        embedded = embed_and_mask(seq, mask, p)
        feats = vit_forward(embedded, p, vit, mode="eval")
        return mim_objective(mim_head(feats, p), targets, mask, norm, loss_kind)

    report = []
    for name in params.names():
        def f(x, name=name):
            return loss_with(params.with_updates({name: x}))

        report.append((name, grad_check(f, params[name], h=h)))
    return report


def run_full_report(seed: int = 0) -> tuple[list[tuple[str, float, float]], bool]:
    """(name, error, tolerance) triples for both suites plus an overall verdict."""
    rows = [(f"op/{name}", err, OP_TOLERANCE)
            for name, err in op_gradient_report(seed=seed)]
    rows += [(f"pipeline/{name}", err, PIPELINE_TOLERANCE)
             for name, err in pipeline_gradient_report(seed=seed)]
    ok = all(err < tol for _, err, tol in rows)
    return rows, ok
