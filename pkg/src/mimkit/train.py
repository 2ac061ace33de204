"""AdamW training loop wiring mask, teacher, student, head, and objective.

One training step is a serial transaction: per-image objectives are summed in
batch order, gradients are clipped globally, AdamW updates the parameters, and
an EMA teacher (when configured) is updated after the optimizer step of the
same iteration. All randomness flows through named, seeded generator streams,
so a (config, seed) pair fully determines the run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .objectives import LossKind, NormKind, kd_objective, mim_objective
from .patches import MaskSet, blockwise_mask, patchify, random_mask
from .teachers import TeacherSpec, ema_update, get_targets
from .tensor import Tensor
from .vit import (ViTConfig, ViTParams, embed_and_mask, init_params, mim_head,
                  trunc_normal, vit_forward)

MASK_STRATEGIES = ("blockwise", "random")

# generator stream labels; seeds are SeedSequence([seed, stream])
_STREAM_INIT = 0
_STREAM_DATA = 1
_STREAM_STEP = 2
_STREAM_AUGMENT = 3


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


@dataclass(frozen=True)
class TrainConfig:
    teacher: TeacherSpec
    norm: NormKind = NormKind("ln")
    loss: LossKind = LossKind("smooth_l1")
    total_steps: int = 500
    batch_size: int = 16
    peak_lr: float = 1.5e-3
    min_lr: float = 1e-5
    warmup_steps: int = 50
    weight_decay: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 3.0
    mask_ratio: float = 0.4
    mask_strategy: str = "blockwise"
    kd_mode: bool = False
    seed: int = 0
    block_area_min: int = 16
    block_area_max: int = 48
    block_aspect_min: float = 0.3
    block_aspect_max: float = 1.0 / 0.3

    def __post_init__(self):
        if self.min_lr > self.peak_lr:
            raise ValueError("min_lr must not exceed peak_lr")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio {self.mask_ratio} outside [0, 1]")
        if self.kd_mode and self.mask_ratio != 0.0:
            raise ValueError("kd_mode requires mask_ratio == 0")
        if self.mask_strategy not in MASK_STRATEGIES:
            raise ValueError(f"unknown mask strategy {self.mask_strategy!r}")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be positive")


@dataclass(frozen=True)
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def initial(cls, params: ViTParams) -> "OptimizerState":
        return cls(m={n: np.zeros_like(t.data) for n, t in params.items()},
                   v={n: np.zeros_like(t.data) for n, t in params.items()},
                   step=0)


@dataclass
class RunRecord:
    """Per-step (step, lr, loss) trace plus a digest of the final parameters."""

    rows: list = field(default_factory=list)
    params_digest: str = ""

    def append(self, step: int, lr: float, loss: float) -> None:
        self.rows.append((step, lr, loss))

    def to_csv(self) -> str:
        lines = ["step,lr,loss"]
        for step, lr, loss in self.rows:
            lines.append(f"{step},{lr!r},{loss!r}")
        return "\n".join(lines) + "\n"


def cosine_lr(step: int, warmup_steps: int, total_steps: int,
              peak: float, min_lr: float) -> float:
    """Linear warmup to the peak, then cosine decay to the floor."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    span = total_steps - warmup_steps
    if span == 0:
        return min_lr
    progress = (step - warmup_steps) / span
    return min_lr + 0.5 * (peak - min_lr) * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale all gradients by max_norm/total when the global l2 norm exceeds it."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads, total
    factor = max_norm / total
    return {n: g * factor for n, g in grads.items()}, total


def _decayed(name: str) -> bool:
    # decoupled weight decay applies to weight matrices only, never to
    # biases, norm gains, tokens, or positional embeddings
    return name.endswith(".w")


def adamw_step(params: ViTParams, grads: dict, state: OptimizerState, lr: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> tuple[ViTParams, OptimizerState]:
    b1, b2 = betas
    t = state.step + 1
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_m, new_v, updates = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != param shape {p.data.shape} for {name}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        new_m[name] = m
        new_v[name] = v
        step_val = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        fresh = p.data - step_val
        if weight_decay and _decayed(name):
            fresh = fresh - lr * weight_decay * p.data
        updates[name] = Tensor(fresh.astype(p.data.dtype, copy=False), requires_grad=True)
    return params.with_updates(updates), OptimizerState(new_m, new_v, t)


def sample_mask(config: TrainConfig, grid: tuple[int, int],
                rng: np.random.Generator) -> MaskSet:
    n = grid[0] * grid[1]
    if config.kd_mode:
        return MaskSet((), n, 0.0)
    if config.mask_strategy == "random":
        return random_mask(n, config.mask_ratio, rng)
    return blockwise_mask(grid, config.mask_ratio, rng,
                          area_min=config.block_area_min,
                          area_max=config.block_area_max,
                          aspect_min=config.block_aspect_min,
                          aspect_max=config.block_aspect_max)


@dataclass
class TrainStepResult:
    loss: float
    params: ViTParams
    teacher_params: ViTParams | None
    opt_state: OptimizerState
    masks: list
    lr: float


def train_step(batch: np.ndarray, config: TrainConfig, params: ViTParams,
               teacher_params: ViTParams | None, opt_state: OptimizerState,
               rng: np.random.Generator, targets=None) -> TrainStepResult:
    """One optimizer update over a batch of images.

    Per image: patchify, sample a mask (skipped in kd mode), fetch teacher
    targets from the full image, run the student on the masked sequence, apply
    the head, and score the masked objective. ``targets`` may carry
    precomputed per-image TargetFeatures (valid only for frozen teachers on
    unaugmented data, where targets are constant across steps).
    """
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    vit_config = params.config
    grid = vit_config.grid

    masks = []
    per_image = []
    for i, img in enumerate(batch):
        seq = patchify(img, vit_config.patch_size)
        mask = sample_mask(config, grid, rng)
        tgt = targets[i] if targets is not None else get_targets(
            config.teacher, img, seq, teacher_params)
        masks.append(mask)
        per_image.append((seq, mask, tgt))

    tape = T.Tape()
    with tape:
        total = None
        for seq, mask, tgt in per_image:
            embedded = embed_and_mask(seq, mask, params)
            feats = vit_forward(embedded, params, vit_config, mode="train", rng=rng)
            out = mim_head(feats, params)
            if config.kd_mode:
                obj = kd_objective(out, tgt, config.norm, config.loss)
            else:
                obj = mim_objective(out, tgt, mask, config.norm, config.loss)
            total = obj if total is None else T.add(total, obj)
        loss = T.scale(total, 1.0 / len(batch))

    leaf_grads = T.backward(tape, loss)
    grads = {name: leaf_grads[t] for name, t in params.items() if t in leaf_grads}
    grads, _ = clip_grad_norm(grads, config.grad_clip_norm)

    lr = cosine_lr(opt_state.step + 1, config.warmup_steps, config.total_steps,
                   config.peak_lr, config.min_lr)
    params, opt_state = adamw_step(params, grads, opt_state, lr,
                                   betas=(config.adam_beta1, config.adam_beta2),
                                   eps=config.adam_eps,
                                   weight_decay=config.weight_decay)
    if config.teacher.kind == "ema":
        teacher_params = ema_update(teacher_params, params, config.teacher.ema_momentum)
    return TrainStepResult(loss.item(), params, teacher_params, opt_state, masks, lr)


@dataclass
class PretrainResult:
    params: ViTParams
    teacher_params: ViTParams | None
    opt_state: OptimizerState
    record: RunRecord
    realized_mask_counts: tuple


def _batches(n_images: int, batch_size: int, total_steps: int,
             rng: np.random.Generator):
    """Deterministic batch index stream: reshuffle each pass, fixed order within."""
    order: list[int] = []
    for _ in range(total_steps):
        while len(order) < batch_size:
            order.extend(int(i) for i in rng.permutation(n_images))
        yield order[:batch_size]
        order = order[batch_size:]


def run_pretraining(images: np.ndarray, train_config: TrainConfig,
                    vit_config: ViTConfig, teacher_params: ViTParams | None = None,
                    init: ViTParams | None = None, augment=None,
                    data_seed: int | None = None) -> PretrainResult:
    """Full pretraining loop from a (config, seed) pair.

    ``teacher_params`` is required for frozen teachers; an EMA teacher starts
    as an exact copy of the student. Frozen-teacher targets are cached per
    image when no augmentation is configured (they are constant by the
    teacher-constancy contract). ``data_seed`` pins the batch order
    independently of the main seed so sweep cells can share a data stream.
    """
    params = init if init is not None else init_params(
        vit_config, stream_rng(train_config.seed, _STREAM_INIT))
    data_rng = stream_rng(
        train_config.seed if data_seed is None else data_seed, _STREAM_DATA)
    step_rng = stream_rng(train_config.seed, _STREAM_STEP)
    augment_rng = stream_rng(train_config.seed, _STREAM_AUGMENT)

    if train_config.teacher.kind == "ema":
        teacher_params = params.frozen()
    if train_config.teacher.kind == "frozen" and teacher_params is None:
        raise ShapeMismatch("frozen teacher requires teacher parameters")

    cache = None
    if train_config.teacher.kind in ("frozen", "pixel") and augment is None:
        cache = {}

    opt_state = OptimizerState.initial(params)
    record = RunRecord()
    counts: set[int] = set()
    for step_index, idx in enumerate(
            _batches(len(images), train_config.batch_size, train_config.total_steps,
                     data_rng), start=1):
        batch = images[idx]
        if augment is not None:
            batch = augment(batch, augment_rng)
        targets = None
        if cache is not None:
            targets = []
            for local, image_index in enumerate(idx):
                if image_index not in cache:
                    seq = patchify(batch[local], vit_config.patch_size)
                    cache[image_index] = get_targets(
                        train_config.teacher, batch[local], seq, teacher_params)
                targets.append(cache[image_index])
        result = train_step(batch, train_config, params, teacher_params,
                            opt_state, step_rng, targets=targets)
        params, teacher_params, opt_state = (
            result.params, result.teacher_params, result.opt_state)
        record.append(step_index, result.lr, result.loss)
        counts.update(len(m) for m in result.masks)
    record.params_digest = params.digest()
    return PretrainResult(params, teacher_params, opt_state, record,
                          tuple(sorted(counts)))


# ---------------------------------------------------------------------------
# toy classifier teacher
# ---------------------------------------------------------------------------


def init_classifier_params(vit_config: ViTConfig, num_classes: int,
                           rng: np.random.Generator, dtype=np.float32) -> ViTParams:
    """Student-shaped ViT plus a cls-token classification head."""
    params = init_params(vit_config, rng, dtype=dtype)
    head_w = Tensor(trunc_normal(rng, (vit_config.hidden, num_classes), 0.02, dtype),
                    requires_grad=True)
    head_b = Tensor(np.zeros((1, num_classes), dtype=dtype), requires_grad=True)
    return params.with_entries({"cls_head.w": head_w, "cls_head.b": head_b})


def classifier_logits(image: np.ndarray, params: ViTParams,
                      mode: str = "eval", rng=None) -> Tensor:
    config = params.config
    seq = patchify(image, config.patch_size)
    embedded = embed_and_mask(seq, MaskSet((), seq.count, 0.0), params)
    feats = vit_forward(embedded, params, config, mode=mode, rng=rng)
    cls = T.slice_axis(feats, 0, 0, 1)
    return T.add(T.matmul(cls, params["cls_head.w"]), params["cls_head.b"])


def classifier_accuracy(params: ViTParams, images: np.ndarray,
                        labels: np.ndarray) -> float:
    hits = 0
    for img, label in zip(images, labels):
        logits = classifier_logits(img, params)
        hits += int(np.argmax(logits.data) == label)
    return hits / len(images)


def pretrain_teacher_toy(images: np.ndarray, labels: np.ndarray,
                         train_config: TrainConfig, vit_config: ViTConfig) -> ViTParams:
    """Train a small supervised ViT classifier to stand in for a pretrained teacher.

    Returns the full parameter set (trunk plus cls head); teacher feature
    extraction ignores the head entries.
    """
    num_classes = int(labels.max()) + 1
    params = init_classifier_params(vit_config, num_classes,
                                    stream_rng(train_config.seed, _STREAM_INIT))
    data_rng = stream_rng(train_config.seed, _STREAM_DATA)
    step_rng = stream_rng(train_config.seed, _STREAM_STEP)
    opt_state = OptimizerState.initial(params)

    for step_index, idx in enumerate(
            _batches(len(images), train_config.batch_size,
                     train_config.total_steps, data_rng), start=1):
        tape = T.Tape()
        with tape:
            total = None
            for i in idx:
                logits = classifier_logits(images[i], params, mode="train", rng=step_rng)
                logp = T.log_softmax(logits, axis=-1)
                onehot = np.zeros((1, num_classes), dtype=params.dtype)
                onehot[0, labels[i]] = 1.0
                nll = T.scale(T.reduce_sum(T.mul(logp, Tensor(onehot))), -1.0)
                total = nll if total is None else T.add(total, nll)
            loss = T.scale(total, 1.0 / len(idx))
        leaf_grads = T.backward(tape, loss)
        grads = {name: leaf_grads[t] for name, t in params.items() if t in leaf_grads}
        grads, _ = clip_grad_norm(grads, train_config.grad_clip_norm)
        lr = cosine_lr(opt_state.step + 1, train_config.warmup_steps,
                       train_config.total_steps, train_config.peak_lr,
                       train_config.min_lr)
        params, opt_state = adamw_step(
            params, grads, opt_state, lr,
            betas=(train_config.adam_beta1, train_config.adam_beta2),
            eps=train_config.adam_eps, weight_decay=train_config.weight_decay)
    return params
