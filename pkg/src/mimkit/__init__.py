"""mimkit: masked-image-modeling pretraining with pluggable teacher, target
normalization, masking strategy, and loss, built on a self-checking autodiff
core and wrapped in sklearn-style estimators."""

from .checkpoint import Checkpoint, load_checkpoint, load_teacher_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_config, load_config, load_config_text
from .data import (
    DatasetSpec,
    LabeledImages,
    load_image_folder,
    read_ppm,
    synthetic_dataset,
    write_ppm,
)
from .errors import MimkitError
from .estimators import LinearProbe, MaskDistillPretrainer, check_images
from .evaluate import (
    ProbeConfig,
    ProbeResult,
    SweepSpec,
    extract_features,
    linear_probe,
    mask_sweep,
    masked_cosine_metric,
    sweep_to_csv,
)
from .objectives import (
    LossKind,
    NormKind,
    kd_objective,
    mim_objective,
    normalize_targets,
    pairwise_loss,
)
from .patches import (
    MaskSet,
    PatchSequence,
    blockwise_mask,
    mask_statistics,
    patchify,
    random_mask,
    unpatchify,
)
from .teachers import TargetFeatures, TeacherSpec, ema_update, frozen_teacher, get_targets, pixel_teacher
from .tensor import Tape, Tensor, backward, grad_check
from .train import (
    OptimizerState,
    RunRecord,
    TrainConfig,
    adamw_step,
    clip_grad_norm,
    cosine_lr,
    pretrain_teacher_toy,
    run_pretraining,
    train_step,
)
from .vit import (
    ViTConfig,
    ViTParams,
    drop_path,
    embed_and_mask,
    init_params,
    mim_head,
    vit_forward,
)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "load_checkpoint", "load_teacher_checkpoint", "save_checkpoint",
    "ExperimentConfig", "dump_config", "load_config", "load_config_text",
    "DatasetSpec", "LabeledImages", "load_image_folder", "read_ppm",
    "synthetic_dataset", "write_ppm",
    "MimkitError",
    "LinearProbe", "MaskDistillPretrainer", "check_images",
    "ProbeConfig", "ProbeResult", "SweepSpec", "extract_features", "linear_probe",
    "mask_sweep", "masked_cosine_metric", "sweep_to_csv",
    "LossKind", "NormKind", "kd_objective", "mim_objective", "normalize_targets",
    "pairwise_loss",
    "MaskSet", "PatchSequence", "blockwise_mask", "mask_statistics", "patchify",
    "random_mask", "unpatchify",
    "TargetFeatures", "TeacherSpec", "ema_update", "frozen_teacher", "get_targets",
    "pixel_teacher",
    "Tape", "Tensor", "backward", "grad_check",
    "OptimizerState", "RunRecord", "TrainConfig", "adamw_step", "clip_grad_norm",
    "cosine_lr", "pretrain_teacher_toy", "run_pretraining", "train_step",
    "ViTConfig", "ViTParams", "drop_path", "embed_and_mask", "init_params",
    "mim_head", "vit_forward",
    "__version__",
]
