"""Flat key=value experiment configuration.

``#`` starts a comment, blank lines are skipped, every key has a typed default
(so an empty file is a complete configuration), and unknown or duplicate keys
are hard errors so that typos cannot silently change an ablation grid.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data import AUGMENTATIONS, DatasetSpec
from .errors import ParseError, RangeViolation, UnknownKey
from .objectives import LOSS_KINDS, NORM_KINDS, LossKind, NormKind
from .teachers import TARGET_LAYER_MODES, TEACHER_KINDS, TeacherSpec
from .train import MASK_STRATEGIES, TrainConfig
from .vit import ViTConfig


def _bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _choice(options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return text
    return parse


# key -> (parser, default); defaults follow the published pretraining recipe
# where one exists, desk-scale choices otherwise
SCHEMA: dict = {
    # student architecture
    "layers": (int, 4),
    "hidden": (int, 64),
    "ffn_hidden": (int, 256),
    "heads": (int, 4),
    "patch_size": (int, 8),
    "image_size": (int, 32),
    "channels": (int, 3),
    "target_dim": (int, 64),
    "layer_scale_init": (float, 0.1),
    "drop_path_rate": (float, 0.1),
    # optimization
    "total_steps": (int, 500),
    "batch_size": (int, 16),
    "peak_lr": (float, 1.5e-3),
    "min_lr": (float, 1e-5),
    "warmup_steps": (int, 50),
    "weight_decay": (float, 0.05),
    "adam_beta1": (float, 0.9),
    "adam_beta2": (float, 0.999),
    "adam_eps": (float, 1e-8),
    "grad_clip_norm": (float, 3.0),
    "seed": (int, 0),
    # masking
    "mask_ratio": (float, 0.4),
    "mask_strategy": (_choice(MASK_STRATEGIES), "blockwise"),
    "kd_mode": (_bool, False),
    "block_area_min": (int, 16),
    "block_area_max": (int, 48),
    "block_aspect_min": (float, 0.3),
    "block_aspect_max": (float, 1.0 / 0.3),
    # teacher
    "teacher_kind": (_choice(TEACHER_KINDS), "frozen"),
    "teacher_checkpoint": (str, ""),
    "per_patch_ln": (_bool, False),
    "ema_momentum": (float, 0.999),
    "target_layers": (_choice(TARGET_LAYER_MODES), "last"),
    "target_last_k": (int, 1),
    # normalization and loss
    "norm": (_choice(NORM_KINDS), "ln"),
    "norm_eps": (float, 1e-6),
    "loss": (_choice(LOSS_KINDS), "smooth_l1"),
    "smooth_l1_beta": (float, 1.0),
    "cosine_eps": (float, 1e-8),
    # dataset
    "dataset_source": (_choice(("synthetic", "folder")), "synthetic"),
    "num_classes": (int, 4),
    "images_per_class": (int, 8),
    "dataset_seed": (int, 0),
    "data_dir": (str, ""),
    "augmentation": (_choice(AUGMENTATIONS), "none"),
    "jitter_pixels": (int, 2),
    "color_jitter": (float, 0.4),
}


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig
    dataset: DatasetSpec
    vit: ViTConfig
    explicit_keys: frozenset


def parse_config_text(text: str) -> dict:
    """Raw key/value map from config text; schema-typed, defaults filled in."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            raise UnknownKey(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ParseError(f"line {lineno}: duplicate key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ParseError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return values


def _teacher_spec(v: dict) -> TeacherSpec:
    kind = v["teacher_kind"]
    common = dict(target_layers=v["target_layers"], target_last_k=v["target_last_k"])
    if kind == "pixel":
        return TeacherSpec(kind="pixel", per_patch_ln=v["per_patch_ln"], **common)
    if kind == "frozen":
        return TeacherSpec(kind="frozen", checkpoint_ref=v["teacher_checkpoint"], **common)
    return TeacherSpec(kind="ema", ema_momentum=v["ema_momentum"], **common)


def assemble(values: dict, explicit: frozenset) -> ExperimentConfig:
    v = {key: values.get(key, default) for key, (_, default) in SCHEMA.items()}
    if v["kd_mode"] and "mask_ratio" not in explicit:
        v["mask_ratio"] = 0.0
    try:
        vit = ViTConfig(layers=v["layers"], hidden=v["hidden"],
                        ffn_hidden=v["ffn_hidden"], heads=v["heads"],
                        patch_size=v["patch_size"], image_size=v["image_size"],
                        target_dim=v["target_dim"], channels=v["channels"],
                        layer_scale_init=v["layer_scale_init"],
                        drop_path_rate=v["drop_path_rate"])
        train = TrainConfig(
            teacher=_teacher_spec(v),
            norm=NormKind(v["norm"], eps=v["norm_eps"]),
            loss=LossKind(v["loss"], beta=v["smooth_l1_beta"], eps=v["cosine_eps"]),
            total_steps=v["total_steps"], batch_size=v["batch_size"],
            peak_lr=v["peak_lr"], min_lr=v["min_lr"],
            warmup_steps=v["warmup_steps"], weight_decay=v["weight_decay"],
            adam_beta1=v["adam_beta1"], adam_beta2=v["adam_beta2"],
            adam_eps=v["adam_eps"], grad_clip_norm=v["grad_clip_norm"],
            mask_ratio=v["mask_ratio"], mask_strategy=v["mask_strategy"],
            kd_mode=v["kd_mode"], seed=v["seed"],
            block_area_min=v["block_area_min"], block_area_max=v["block_area_max"],
            block_aspect_min=v["block_aspect_min"],
            block_aspect_max=v["block_aspect_max"])
        dataset = DatasetSpec(source=v["dataset_source"], num_classes=v["num_classes"],
                              images_per_class=v["images_per_class"],
                              image_size=v["image_size"], seed=v["dataset_seed"],
                              path=v["data_dir"], augmentation=v["augmentation"],
                              jitter_pixels=v["jitter_pixels"],
                              color_jitter=v["color_jitter"])
    except ValueError as exc:
        raise RangeViolation(str(exc)) from exc
    return ExperimentConfig(train, dataset, vit, explicit)


def load_config_text(text: str) -> ExperimentConfig:
    values = parse_config_text(text)
    return assemble(values, frozenset(values))


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return load_config_text(fh.read())


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(config: ExperimentConfig) -> str:
    """Full key=value text; loading it reproduces the configuration exactly."""
    t, d, m = config.train, config.dataset, config.vit
    teacher = t.teacher
    values = {
        "layers": m.layers, "hidden": m.hidden, "ffn_hidden": m.ffn_hidden,
        "heads": m.heads, "patch_size": m.patch_size, "image_size": m.image_size,
        "channels": m.channels, "target_dim": m.target_dim,
        "layer_scale_init": m.layer_scale_init, "drop_path_rate": m.drop_path_rate,
        "total_steps": t.total_steps, "batch_size": t.batch_size,
        "peak_lr": t.peak_lr, "min_lr": t.min_lr, "warmup_steps": t.warmup_steps,
        "weight_decay": t.weight_decay, "adam_beta1": t.adam_beta1,
        "adam_beta2": t.adam_beta2, "adam_eps": t.adam_eps,
        "grad_clip_norm": t.grad_clip_norm, "seed": t.seed,
        "mask_ratio": t.mask_ratio, "mask_strategy": t.mask_strategy,
        "kd_mode": t.kd_mode, "block_area_min": t.block_area_min,
        "block_area_max": t.block_area_max, "block_aspect_min": t.block_aspect_min,
        "block_aspect_max": t.block_aspect_max,
        "teacher_kind": teacher.kind,
        "teacher_checkpoint": teacher.checkpoint_ref or "",
        "per_patch_ln": bool(teacher.per_patch_ln),
        "ema_momentum": teacher.ema_momentum if teacher.ema_momentum is not None else SCHEMA["ema_momentum"][1],
        "target_layers": teacher.target_layers, "target_last_k": teacher.target_last_k,
        "norm": t.norm.variant, "norm_eps": t.norm.eps,
        "loss": t.loss.variant, "smooth_l1_beta": t.loss.beta, "cosine_eps": t.loss.eps,
        "dataset_source": d.source, "num_classes": d.num_classes,
        "images_per_class": d.images_per_class, "dataset_seed": d.seed,
        "data_dir": d.path, "augmentation": d.augmentation,
        "jitter_pixels": d.jitter_pixels, "color_jitter": d.color_jitter,
    }
    lines = [f"{key}={_format_value(values[key])}" for key in SCHEMA]
    return "\n".join(lines) + "\n"
