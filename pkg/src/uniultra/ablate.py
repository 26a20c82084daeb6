"""Paired-seed ablation sweeps at toy scale."""

from __future__ import annotations

import csv
import dataclasses
import logging
from pathlib import Path

from .config import DIRECTIONS, RunConfig
from .data import select
from .distill import distill_run
from .model import SegModel
from .train import evaluate, load_data, mean_dice, train_peft

log = logging.getLogger(__name__)

STUDIES = ("edge-directions", "distill-levels", "adapter-dim")

LEVEL_CONFIGS = (("D1",), ("D1", "D2"), ("D1", "D3"), ("D1", "D2", "D3"))


def _summary(label: str, model, train, val) -> dict:
    rows = evaluate(model, val)
    n = max(len(rows), 1)
    return {"config": label, "train_dice": mean_dice(model, train),
            "val_dice": sum(r["dice"] for r in rows) / n,
            "val_miou": sum(r["iou"] for r in rows) / n,
            "val_hd": sum(r["hd"] for r in rows) / n}


def edge_directions(cfg: RunConfig) -> list[dict]:
    """Add Sobel directions one at a time, starting from none."""
    pairs, sp = load_data(cfg)
    train, val = select(pairs, sp["train"]), select(pairs, sp["val"])
    out = []
    for k in range(len(DIRECTIONS) + 1):
        dirs = DIRECTIONS[:k]
        run = cfg.replace(model=dataclasses.replace(cfg.model, edge_directions=dirs))
        res = train_peft(run, train, val)
        out.append(_summary("+".join(dirs) or "none", res.model, train, val) | {"directions": k})
        log.info("edge directions %d: %s", k, out[-1])
    return out


def distill_levels(cfg: RunConfig, teacher: SegModel | None = None) -> list[dict]:
    """Distill the same teacher with each level combination."""
    pairs, sp = load_data(cfg)
    train, val = select(pairs, sp["train"]), select(pairs, sp["val"])
    if teacher is None:
        res = train_peft(cfg, train, val)
        res.model.load_state_dict(res.best_state)
        teacher = res.model
    out = [_summary("teacher", teacher, train, val) | {"levels": 0, "loss_ratio": float("nan")}]
    for levels in LEVEL_CONFIGS:
        dcfg = dataclasses.replace(cfg.distill, levels=levels)
        dr = distill_run(teacher, cfg.student, train, dcfg, cfg.seed)
        row = _summary("+".join(levels), dr.student, train, val)
        row.update(levels=len(levels), loss_ratio=dr.final_loss / dr.initial_loss)
        out.append(row)
        log.info("levels %s: %s", levels, row)
    return out


def adapter_dim(cfg: RunConfig, dims: tuple[int, ...] | None = None) -> list[dict]:
    """Shrink the adapter bottleneck step by step."""
    pairs, sp = load_data(cfg)
    train, val = select(pairs, sp["train"]), select(pairs, sp["val"])
    if dims is None:
        top = min(cfg.model.stage_dims)
        dims = tuple(d for d in (top * 3 // 4, top // 2, top // 4, top // 8) if d >= 1)
    out = []
    for d in dims:
        run = cfg.replace(model=dataclasses.replace(cfg.model, adapter_dim=d, edge_dim=d))
        res = train_peft(run, train, val)
        tp = res.model.num_parameters(trainable_only=True)
        out.append(_summary(f"dim={d}", res.model, train, val) | {"adapter_dim": d, "trainable": tp})
        log.info("adapter dim %d: %s", d, out[-1])
    return out


def run_study(name: str, cfg: RunConfig, teacher: SegModel | None = None) -> list[dict]:
    if name == "edge-directions":
        return edge_directions(cfg)
    if name == "distill-levels":
        return distill_levels(cfg, teacher)
    if name == "adapter-dim":
        return adapter_dim(cfg)
    raise ValueError(f"unknown study {name!r}; choose from {STUDIES}")


def write_table(rows: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (r[c] for c in cols)])


def format_table(rows: list[dict]) -> str:
    cols = list(rows[0])
    cells = [[f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
