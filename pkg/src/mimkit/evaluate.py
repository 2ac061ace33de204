"""Desk-scale evaluation: masked-prediction quality, a linear probe over frozen
features, and the mask strategy-by-ratio sweep.

The probe is multinomial logistic regression fit by full-batch gradient
descent from zero weights on standardized features, so it is deterministic and
never touches the model being probed. Sweep cells all start from one shared
initialization and consume the same data order; only mask strategy, ratio, and
seed vary.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import LabeledImages
from .errors import DegenerateLabels, EmptyMask
from .objectives import NormKind, normalize_targets
from .patches import MaskSet, blockwise_mask, mask_count, patchify, random_mask
from .teachers import get_targets
from .train import MASK_STRATEGIES, TrainConfig, run_pretraining, stream_rng
from .vit import ViTConfig, ViTParams, embed_and_mask, init_params, mim_head, vit_forward

FEATURE_SOURCES = ("mean_patches", "cls")

_STREAM_EVAL = 4


def extract_features(params: ViTParams, images: np.ndarray,
                     source: str = "mean_patches") -> np.ndarray:
    """Frozen per-image feature vectors from an eval-mode full-image forward."""
    if source not in FEATURE_SOURCES:
        raise ValueError(f"unknown feature source {source!r}")
    config = params.config
    out = np.zeros((len(images), config.hidden), dtype=np.float64)
    for i, img in enumerate(images):
        seq = patchify(img, config.patch_size)
        embedded = embed_and_mask(seq, MaskSet((), seq.count, 0.0), params)
        feats = vit_forward(embedded, params, config, mode="eval").data
        out[i] = feats[0] if source == "cls" else feats[1:].mean(axis=0)
    return out


def masked_cosine_metric(params: ViTParams, teacher_spec, teacher_params,
                         images: np.ndarray, mask_ratio: float,
                         rng: np.random.Generator, norm: NormKind = NormKind("ln"),
                         mask_strategy: str = "blockwise") -> float:
    """Mean cosine similarity between head predictions and normalized teacher
    targets at masked positions, over all images."""
    if mask_strategy not in MASK_STRATEGIES:
        raise ValueError(f"unknown mask strategy {mask_strategy!r}")
    config = params.config
    cosines = []
    for img in images:
        seq = patchify(img, config.patch_size)
        if mask_strategy == "random":
            mask = random_mask(config.num_patches, mask_ratio, rng)
        else:
            mask = blockwise_mask(config.grid, mask_ratio, rng)
        if len(mask) == 0:
            raise EmptyMask("masked cosine metric needs at least one masked patch")
        targets = get_targets(teacher_spec, img, seq, teacher_params)
        normalized = normalize_targets(targets, norm).t[mask.as_array()]

        embedded = embed_and_mask(seq, mask, params)
        feats = vit_forward(embedded, params, config, mode="eval")
        preds = mim_head(feats, params).data[1:][mask.as_array()]

        num = np.sum(preds * normalized, axis=1)
        denom = (np.linalg.norm(preds, axis=1) * np.linalg.norm(normalized, axis=1) + 1e-12)
        cosines.extend(num / denom)
    return float(np.mean(cosines))


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    learning_rate: float = 0.5
    steps: int = 400
    l2_penalty: float = 1e-3
    tol: float = 1e-7
    seed: int = 0
    feature_source: str = "mean_patches"


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    per_class_accuracy: np.ndarray
    feature_source: str


def _check_labels(labels: np.ndarray) -> int:
    labels = np.asarray(labels)
    num_classes = int(labels.max()) + 1 if labels.size else 0
    if num_classes < 2:
        raise DegenerateLabels("probe needs at least two classes")
    counts = np.bincount(labels, minlength=num_classes)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise DegenerateLabels(f"classes {empty.tolist()} have zero samples")
    return num_classes


def fit_logreg(features: np.ndarray, labels: np.ndarray,
               config: ProbeConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Full-batch GD on the softmax-regression objective; returns (mu, sd, W, b)."""
    num_classes = _check_labels(labels)
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    mu = x.mean(axis=0)
    sd = x.std(axis=0) + 1e-8
    xs = (x - mu) / sd
    n, d = xs.shape
    w = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), y] = 1.0
    for _ in range(config.steps):
        logits = xs @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        p = e / e.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        gw = xs.T @ g + config.l2_penalty * w
        gb = g.sum(axis=0)
        if np.sqrt(np.sum(gw * gw) + np.sum(gb * gb)) < config.tol:
            break
        w -= config.learning_rate * gw
        b -= config.learning_rate * gb
    return mu, sd, w, b


def predict_logreg(features: np.ndarray, mu, sd, w, b) -> np.ndarray:
    xs = (np.asarray(features, dtype=np.float64) - mu) / sd
    return np.argmax(xs @ w + b, axis=1)


def linear_probe(features: np.ndarray, labels: np.ndarray,
                 config: ProbeConfig = ProbeConfig(),
                 eval_features: np.ndarray | None = None,
                 eval_labels: np.ndarray | None = None) -> ProbeResult:
    """Fit on (features, labels); report accuracy on the eval split when given,
    otherwise on the training features themselves."""
    mu, sd, w, b = fit_logreg(features, labels, config)
    if eval_features is None:
        eval_features, eval_labels = features, labels
    preds = predict_logreg(eval_features, mu, sd, w, b)
    eval_labels = np.asarray(eval_labels)
    accuracy = float(np.mean(preds == eval_labels))
    num_classes = w.shape[1]
    per_class = np.zeros(num_classes)
    for c in range(num_classes):
        sel = eval_labels == c
        per_class[c] = float(np.mean(preds[sel] == c)) if sel.any() else np.nan
    return ProbeResult(accuracy, per_class, config.feature_source)


# ---------------------------------------------------------------------------
# mask sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    strategies: tuple = ("blockwise", "random")
    ratios: tuple = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
    seeds: tuple = (0, 1, 2)
    steps_per_cell: int = 25

    def __post_init__(self):
        if not self.strategies or not self.ratios or not self.seeds:
            raise ValueError("strategies, ratios, and seeds must be nonempty")
        for s in self.strategies:
            if s not in MASK_STRATEGIES:
                raise ValueError(f"unknown strategy {s!r}")
        for r in self.ratios:
            if not 0.0 < r <= 1.0:
                raise ValueError(f"sweep ratio {r} outside (0, 1]")
        if self.steps_per_cell < 1:
            raise ValueError("steps_per_cell must be positive")


@dataclass(frozen=True)
class SweepRow:
    strategy: str
    ratio: float
    seed: int
    final_loss: float
    masked_cosine: float
    probe_accuracy: float
    realized_mask_count: int
    init_digest: str


SWEEP_CSV_HEADER = "strategy,ratio,seed,final_loss,masked_cosine,probe_accuracy"


def sweep_to_csv(rows: list[SweepRow]) -> str:
    lines = [SWEEP_CSV_HEADER]
    for r in rows:
        lines.append(f"{r.strategy},{r.ratio!r},{r.seed},"
                     f"{r.final_loss!r},{r.masked_cosine!r},{r.probe_accuracy!r}")
    return "\n".join(lines) + "\n"


def mask_sweep(spec: SweepSpec, base_config: TrainConfig, vit_config: ViTConfig,
               dataset: LabeledImages, teacher_params: ViTParams | None = None,
               probe_config: ProbeConfig = ProbeConfig()) -> list[SweepRow]:
    """One short pretraining run per (strategy, ratio, seed) cell.

    Every cell starts from the same initialization and consumes the same data
    order (pinned to the base seed); rows come back in deterministic
    (strategy, ratio, seed) iteration order.
    """
    init = init_params(vit_config, stream_rng(base_config.seed, 0))
    init_digest = init.digest()
    rows = []
    for strategy in spec.strategies:
        for ratio in spec.ratios:
            for seed in spec.seeds:
                cell = replace(base_config, mask_strategy=strategy,
                               mask_ratio=ratio, seed=seed,
                               total_steps=spec.steps_per_cell,
                               warmup_steps=min(base_config.warmup_steps,
                                                spec.steps_per_cell),
                               kd_mode=False)
                result = run_pretraining(dataset.images, cell, vit_config,
                                         teacher_params=teacher_params,
                                         init=init, data_seed=base_config.seed)
                counts = result.realized_mask_counts
                expected = mask_count(vit_config.num_patches, ratio)
                if counts != (expected,):
                    raise AssertionError(
                        f"cell {strategy}/{ratio}/{seed} saw mask counts {counts}, "
                        f"expected {expected}")
                cosine = masked_cosine_metric(
                    result.params, cell.teacher, result.teacher_params,
                    dataset.images, ratio, stream_rng(seed, _STREAM_EVAL),
                    norm=cell.norm, mask_strategy=strategy)
                feats = extract_features(result.params, dataset.images,
                                         probe_config.feature_source)
                probe = linear_probe(feats, dataset.labels, probe_config)
                rows.append(SweepRow(strategy, float(ratio), int(seed),
                                     result.record.rows[-1][2], cosine,
                                     probe.accuracy, expected, init_digest))
    return rows
