"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure, 2 usage error. The training seed is
resolved as: --seed flag, then an explicit seed in the config file, then the
MIMKIT_SEED environment variable, then the schema default.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .checkpoint import load_checkpoint, load_teacher_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, load_config_text
from .data import build_dataset, check_patch_divisibility, make_augment
from .errors import MimkitError, MissingCheckpoint, ParseError, ShapeMismatch
from .evaluate import (
    FEATURE_SOURCES,
    ProbeConfig,
    SweepSpec,
    extract_features,
    linear_probe,
    mask_sweep,
    sweep_to_csv,
)
from .selfcheck import run_full_report
from .train import classifier_accuracy, pretrain_teacher_toy, run_pretraining
from .vit import ViTParams


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mimkit",
        description="Masked-image-modeling pretraining kit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="seed override")

    p = sub.add_parser("pretrain", help="run masked-distillation pretraining")
    common(p)
    p.add_argument("--out", default="student.ckpt", help="checkpoint output path")
    p.add_argument("--record", default="run.csv", help="per-step CSV output path")

    p = sub.add_parser("pretrain-teacher", help="train a toy classifier teacher")
    common(p)
    p.add_argument("--out", default="teacher.ckpt")

    p = sub.add_parser("probe", help="linear probe of frozen features")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--feature-source", choices=FEATURE_SOURCES, default="mean_patches")

    p = sub.add_parser("sweep", help="mask strategy x ratio sweep")
    common(p)
    p.add_argument("--out", default="sweep.csv")
    p.add_argument("--strategies", default="blockwise,random")
    p.add_argument("--ratios", default="0.2,0.3,0.4,0.5,0.6,0.7,0.8")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--steps-per-cell", type=int, default=25)

    p = sub.add_parser("grad-check", help="finite-difference verification suite")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("inspect", help="print checkpoint metadata")
    p.add_argument("checkpoint")
    return parser


def _load_experiment(args) -> ExperimentConfig:
    if args.config is None:
        cfg = load_config_text("")
    else:
        cfg = load_config(args.config)
    seed = args.seed
    if seed is None and "seed" not in cfg.explicit_keys:
        env = os.environ.get("MIMKIT_SEED")
        if env is not None:
            try:
                seed = int(env)
            except ValueError as exc:
                raise ParseError(f"MIMKIT_SEED must be an integer, got {env!r}") from exc
    if seed is not None:
        cfg = ExperimentConfig(replace(cfg.train, seed=seed), cfg.dataset,
                               cfg.vit, cfg.explicit_keys)
    return cfg


def _resolve_teacher(cfg: ExperimentConfig) -> ViTParams | None:
    teacher = cfg.train.teacher
    if teacher.kind == "pixel":
        if cfg.vit.target_dim != cfg.vit.patch_dim:
            raise ShapeMismatch(
                f"pixel teacher emits {cfg.vit.patch_dim}-dim targets; "
                f"set target_dim={cfg.vit.patch_dim}")
        return None
    if teacher.kind == "ema":
        if cfg.vit.target_dim != cfg.vit.hidden:
            raise ShapeMismatch(
                f"ema teacher emits {cfg.vit.hidden}-dim targets; "
                f"set target_dim={cfg.vit.hidden}")
        return None
    if not teacher.checkpoint_ref:
        raise MissingCheckpoint("frozen teacher needs teacher_checkpoint in the config")
    params = load_teacher_checkpoint(teacher.checkpoint_ref, cfg.vit.grid)
    if cfg.vit.target_dim != params.config.hidden:
        raise ShapeMismatch(
            f"teacher emits {params.config.hidden}-dim features; "
            f"set target_dim={params.config.hidden}")
    return params


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _cmd_pretrain(args) -> int:
    cfg = _load_experiment(args)
    dataset = build_dataset(cfg.dataset)
    check_patch_divisibility(dataset.images, cfg.vit.patch_size)
    teacher_params = _resolve_teacher(cfg)
    result = run_pretraining(dataset.images, cfg.train, cfg.vit,
                             teacher_params=teacher_params,
                             augment=make_augment(cfg.dataset))
    _write_text(args.record, result.record.to_csv())
    save_checkpoint(args.out, result.params, opt_state=result.opt_state,
                    train_config=cfg.train, seed=cfg.train.seed,
                    step=result.opt_state.step)
    final = result.record.rows[-1]
    print(f"pretrained {cfg.train.total_steps} steps; final loss {final[2]:.6f}")
    print(f"checkpoint: {args.out}")
    print(f"record:     {args.record}")
    return 0


def _cmd_pretrain_teacher(args) -> int:
    cfg = _load_experiment(args)
    dataset = build_dataset(cfg.dataset)
    check_patch_divisibility(dataset.images, cfg.vit.patch_size)
    params = pretrain_teacher_toy(dataset.images, dataset.labels, cfg.train, cfg.vit)
    accuracy = classifier_accuracy(params, dataset.images, dataset.labels)
    save_checkpoint(args.out, params, train_config=cfg.train, seed=cfg.train.seed)
    print(f"teacher train accuracy {accuracy:.4f}")
    print(f"checkpoint: {args.out}")
    return 0


def _cmd_probe(args) -> int:
    cfg = _load_experiment(args)
    dataset = build_dataset(cfg.dataset)
    ckpt = load_checkpoint(args.checkpoint)
    feats = extract_features(ckpt.params, dataset.images, args.feature_source)
    result = linear_probe(feats, dataset.labels,
                          ProbeConfig(feature_source=args.feature_source))
    print(f"probe accuracy {result.accuracy:.4f} ({args.feature_source})")
    for c, acc in enumerate(result.per_class_accuracy):
        print(f"  class {c}: {acc:.4f}")
    return 0


def _parse_list(text: str, cast):
    return tuple(cast(tok) for tok in text.split(",") if tok)


def _cmd_sweep(args) -> int:
    cfg = _load_experiment(args)
    dataset = build_dataset(cfg.dataset)
    check_patch_divisibility(dataset.images, cfg.vit.patch_size)
    teacher_params = _resolve_teacher(cfg)
    try:
        spec = SweepSpec(strategies=_parse_list(args.strategies, str),
                         ratios=_parse_list(args.ratios, float),
                         seeds=_parse_list(args.seeds, int),
                         steps_per_cell=args.steps_per_cell)
    except ValueError as exc:
        raise ParseError(str(exc)) from exc
    rows = mask_sweep(spec, cfg.train, cfg.vit, dataset, teacher_params=teacher_params)
    _write_text(args.out, sweep_to_csv(rows))
    print(f"wrote {len(rows)} sweep rows to {args.out}")
    return 0


def _cmd_grad_check(args) -> int:
    rows, ok = run_full_report(seed=args.seed)
    for name, err, tol in rows:
        status = "PASS" if err < tol else "FAIL"
        print(f"{status} {name:40s} rel_err={err:.3e} tol={tol:.0e}")
    print(f"gradient checks: {'all passed' if ok else 'FAILURES'} ({len(rows)} checks)")
    return 0 if ok else 1


def _cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    print(f"format version: {ckpt.version}")
    print(f"seed: {ckpt.seed}  step: {ckpt.step}")
    if ckpt.params.config is not None:
        c = ckpt.params.config
        print(f"model: layers={c.layers} hidden={c.hidden} heads={c.heads} "
              f"patch={c.patch_size} image={c.image_size} target_dim={c.target_dim}")
    print(f"optimizer state: {'present' if ckpt.opt_state is not None else 'absent'}")
    print(f"parameters ({len(ckpt.params.names())}):")
    for name in ckpt.params.names():
        t = ckpt.params[name]
        print(f"  {name:24s} {str(t.shape):14s} {t.data.dtype}")
    print(f"digest: {ckpt.params.digest()}")
    return 0


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "pretrain-teacher": _cmd_pretrain_teacher,
    "probe": _cmd_probe,
    "sweep": _cmd_sweep,
    "grad-check": _cmd_grad_check,
    "inspect": _cmd_inspect,
}


def cli_dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except MimkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
