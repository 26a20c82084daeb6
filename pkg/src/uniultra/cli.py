"""Command-line entry point: data generation, the two training phases, evaluation and checks.

Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 failed check.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import LEVELS, ConfigError, RunConfig, dump_config, load_config

log = logging.getLogger("uniultra")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class DataError(RuntimeError):
    pass


def _setup_logging(verbose: bool, log_file: Path | None = None) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, mode="w"))
    for h in handlers:
        h.setFormatter(fmt)
        root.addHandler(h)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Load ``--config`` (or defaults) and apply any flag overrides."""
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = cfg.replace(output_dir=str(args.out))
    if getattr(args, "data", None) is not None:
        cfg = cfg.replace(data=dataclasses.replace(cfg.data, dir=str(args.data)))
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        if epochs < 1:
            raise ConfigError("--epochs must be positive")
        section = "distill" if args.command == "distill" else "train"
        cfg = cfg.replace(**{section: dataclasses.replace(getattr(cfg, section), epochs=epochs)})
    if getattr(args, "levels", None):
        levels = tuple(args.levels.split(","))
        cfg = cfg.replace(distill=dataclasses.replace(cfg.distill, levels=levels))
    return cfg


def _load_data(cfg: RunConfig):
    from .train import load_data

    try:
        return load_data(cfg)
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(str(exc)) from None


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .data import SplitSpec, gen_synthetic, save_dataset, split

    if args.n < 1 or args.size < 8:
        raise ConfigError("--n must be >= 1 and --size >= 8")
    pairs = gen_synthetic(args.n, args.seed, args.size, args.offset, args.jitter_max)
    splits = split([p.id for p in pairs], SplitSpec(seed=args.seed)) if args.n >= 10 else None
    manifest = save_dataset(pairs, args.out, splits)
    log.info("wrote %d image/mask pairs and %s", len(pairs), manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import select
    from .train import train_peft

    cfg = resolve_config(args)
    out = Path(cfg.output_dir)
    _setup_logging(args.verbose, out / "train.log")
    pairs, sp = _load_data(cfg)
    dump_config(cfg, out / "config.json")
    train, val = select(pairs, sp["train"]), select(pairs, sp["val"])
    log.info("phase 1 (PEFT): %d train / %d val images, %d epochs, seed %d",
             len(train), len(val), cfg.train.epochs, cfg.seed)
    t0 = time.perf_counter()

    def progress(row):
        log.info("epoch %3d lr %.3e loss %.4f train_dice %.4f val_dice %.4f",
                 row["epoch"], row["lr"], row["loss"], row["train_dice"], row["val_dice"])

    res = train_peft(cfg, train, val, out, progress)
    log.info("done in %.1fs; best val Dice %.4f; final train Dice %.4f",
             time.perf_counter() - t0, res.best_val_dice, res.final["train_dice"])
    if not res.frozen_audit_ok:
        log.error("frozen audit failed: backbone parameters changed")
        return EXIT_CHECK
    return EXIT_OK


def cmd_distill(args) -> int:
    from .data import select
    from .distill import distill_run, write_trace
    from .model import SegModel, load_checkpoint, save_checkpoint
    from .train import evaluate

    cfg = resolve_config(args)
    out = Path(cfg.output_dir)
    _setup_logging(args.verbose, out / "distill.log")
    try:
        teacher = load_checkpoint(args.teacher)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load teacher {args.teacher}: {exc}") from None
    if not isinstance(teacher, SegModel):
        raise ConfigError(f"{args.teacher} is not a teacher checkpoint")
    if teacher.config != cfg.model:
        log.warning("teacher checkpoint config differs from config.model; using the checkpoint's")
    pairs, sp = _load_data(cfg)
    dump_config(cfg, out / "config.json")
    train, val = select(pairs, sp["train"]), select(pairs, sp["val"])
    log.info("phase 2 (DSKD): levels %s, %d epochs", ",".join(cfg.distill.levels), cfg.distill.epochs)

    def progress(row):
        log.info("epoch %3d L_DSKD %.6g", row["epoch"], row["total"])

    res = distill_run(teacher, cfg.student, train, cfg.distill, cfg.seed, progress)
    write_trace(out / "loss_trace.csv", res.trace)
    save_checkpoint(out / "student.ckpt", res.student)
    t_rows, s_rows = evaluate(teacher, val), evaluate(res.student, val)
    summary = {
        "initial_loss": res.initial_loss, "final_loss": res.final_loss,
        "teacher_val_dice": float(np.mean([r["dice"] for r in t_rows])) if t_rows else None,
        "student_val_dice": float(np.mean([r["dice"] for r in s_rows])) if s_rows else None,
        "teacher_unchanged": res.teacher_digest_before == res.teacher_digest_after,
    }
    (out / "distill_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    log.info("summary: %s", summary)
    if not summary["teacher_unchanged"]:
        log.error("teacher parameters changed during distillation")
        return EXIT_CHECK
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import select
    from .metrics import write_report
    from .model import load_checkpoint
    from .nn import file_sha256
    from .train import evaluate

    cfg = resolve_config(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise DataError(f"checkpoint not found: {ckpt}")
    digest = file_sha256(ckpt)
    try:
        model = load_checkpoint(ckpt)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load {ckpt}: {exc}") from None
    if model.config.image_size != cfg.model.image_size:
        cfg = cfg.replace(model=dataclasses.replace(cfg.model, image_size=model.config.image_size))
    pairs, sp = _load_data(cfg)
    chosen = pairs if args.split == "all" else select(pairs, sp[args.split])
    if not chosen:
        raise DataError(f"split {args.split!r} is empty")
    rows = evaluate(model, chosen)
    out = Path(args.out) if args.out else ckpt.parent / f"eval_{args.split}"
    agg = write_report(rows, out / "report.csv", out / "report.json")
    print(f"{args.split}: n={agg['n']} dice={agg['dice']:.4f} miou={agg['miou']:.4f} hd={agg['hd']:.3f}")
    if file_sha256(ckpt) != digest:
        log.error("checkpoint changed during evaluation")
        return EXIT_CHECK
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    t0 = time.perf_counter()
    results = run_suite(seeds=tuple(range(args.seeds)))
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    for name, err in worst.items():
        print(f"{'ok  ' if err < TOLERANCE else 'FAIL'} {name:<20} max rel err {err:.2e}")
    bad = [r for r in results if not r.ok]
    print(f"{len(results) - len(bad)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    return EXIT_CHECK if bad else EXIT_OK


def param_table(cfg: RunConfig) -> list[dict]:
    """Trainable/total counts for each phase plus the encoder comparison."""
    from .model import SegModel, StudentModel
    from .rng import stream

    teacher = SegModel(cfg.model, stream(cfg.seed, "init", "teacher")).configure_peft()
    student = StudentModel(cfg.student, cfg.model, cfg.distill.levels, stream(cfg.seed, "init", "student"))
    student.attach_teacher_head(teacher, frozen=True)
    t_enc = sum(p.size for p in teacher.encoder.parameters())
    s_enc = sum(p.size for p in student.encoder_parameters())
    rows = [
        {"phase": "1 PEFT (teacher)", "trainable": teacher.num_parameters(trainable_only=True),
         "total": teacher.num_parameters()},
        {"phase": "2 DSKD (student + necks)", "trainable": student.num_parameters(trainable_only=True),
         "total": student.num_parameters()},
        {"phase": "encoder: student vs teacher", "trainable": s_enc, "total": t_enc},
    ]
    for r in rows:
        r["ratio"] = r["trainable"] / r["total"]
    return rows


def cmd_params(args) -> int:
    rows = param_table(resolve_config(args))
    print(f"{'phase':<30} {'TP':>10} {'total':>10} {'ratio %':>8}")
    for r in rows:
        print(f"{r['phase']:<30} {r['trainable']:>10d} {r['total']:>10d} {100 * r['ratio']:>8.2f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablate import format_table, run_study, write_table
    from .model import SegModel, load_checkpoint

    cfg = resolve_config(args)
    out = Path(cfg.output_dir)
    _setup_logging(args.verbose, out / f"ablate_{args.study}.log")
    _load_data(cfg)  # fail early on bad data
    teacher = None
    if args.teacher:
        teacher = load_checkpoint(args.teacher)
        if not isinstance(teacher, SegModel):
            raise ConfigError(f"{args.teacher} is not a teacher checkpoint")
    rows = run_study(args.study, cfg, teacher)
    write_table(rows, out / f"ablate_{args.study}.csv")
    print(format_table(rows))
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .ablate import STUDIES

    parser = argparse.ArgumentParser(prog="uniultra", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True, data=True):
        p.add_argument("--config", type=Path, help="JSON run config (defaults if omitted)")
        p.add_argument("--seed", type=int, help="override config seed")
        if out:
            p.add_argument("--out", type=Path, help="override output directory")
        if data:
            p.add_argument("--data", type=Path, help="dataset directory (images/, masks/)")

    p = sub.add_parser("gen-data", help="write a synthetic PNG dataset")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--offset", type=float, default=0.35, help="lesion intensity offset")
    p.add_argument("--jitter-max", type=int, default=20)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="phase 1: adapter fine-tuning with a frozen backbone")
    common(p)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="phase 2: distil the teacher encoder into a student")
    common(p)
    p.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--levels", help=f"comma list from {','.join(LEVELS)}")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="per-image and aggregate metrics for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="trainable/total parameter table per phase")
    common(p, out=False, data=False)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("ablate", help="paired-seed ablation sweep")
    common(p)
    p.add_argument("--study", choices=STUDIES, required=True)
    p.add_argument("--epochs", type=int, help="override training epochs")
    p.add_argument("--teacher", type=Path, help="reuse a teacher checkpoint (distill-levels only)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_USAGE
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
