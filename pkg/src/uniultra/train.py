"""Adapter fine-tuning loop and dataset evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import MaskPair, box_from_mask, gen_synthetic, load_dir, split, SplitSpec
from .metrics import dice, hausdorff, iou, logits_to_mask, seg_loss
from .model import SegModel, StudentModel, save_checkpoint
from .nn import Adam, exponential_lr, params_digest
from .rng import stream
from .tensor import Tensor

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "lr", "loss", "train_dice", "val_dice", "val_miou", "val_hd"]


def load_data(cfg: RunConfig) -> tuple[list[MaskPair], dict[str, list[str]]]:
    size = cfg.model.image_size
    if cfg.data.dir:
        pairs = load_dir(cfg.data.dir, size=size, seed=cfg.seed, jitter_max=cfg.train.jitter_max)
    else:
        pairs = gen_synthetic(cfg.data.n_synthetic, cfg.seed, size, cfg.data.blob_offset,
                              jitter_max=cfg.train.jitter_max)
    if not pairs:
        raise FileNotFoundError("no usable samples")
    return pairs, split([p.id for p in pairs], SplitSpec(seed=cfg.seed))


def predict(model: SegModel | StudentModel, pair: MaskPair) -> np.ndarray:
    with T.no_grad():
        return logits_to_mask(model(Tensor(pair.image), pair.box))


def evaluate(model: SegModel | StudentModel, pairs: list[MaskPair]) -> list[dict]:
    rows = []
    for p in pairs:
        pred = predict(model, p)
        rows.append({"id": p.id, "dice": dice(pred, p.mask), "iou": iou(pred, p.mask),
                     "hd": hausdorff(pred, p.mask)})
    return rows


def mean_dice(model, pairs: list[MaskPair]) -> float:
    return float(np.mean([r["dice"] for r in evaluate(model, pairs)])) if pairs else float("nan")


@dataclass
class TrainResult:
    model: SegModel
    history: list[dict] = field(default_factory=list)
    best_val_dice: float = float("-inf")
    best_state: dict | None = None
    frozen_audit_ok: bool = False

    @property
    def final(self) -> dict:
        return self.history[-1]


def train_peft(cfg: RunConfig, train: list[MaskPair], val: list[MaskPair],
               out_dir: str | Path | None = None,
               progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Fine-tune adapters, neck and decoder with the backbone frozen."""
    tc = cfg.train
    model = SegModel(cfg.model, stream(cfg.seed, "init", "teacher")).configure_peft()
    frozen = [p for p in model.parameters() if p.frozen]
    frozen_digest = params_digest(frozen)
    opt = Adam([p for p in model.parameters() if not p.frozen], lr=tc.lr)
    result = TrainResult(model)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for epoch in range(tc.epochs):
        opt.lr = exponential_lr(tc.lr, tc.lr_decay, epoch)
        order = stream(cfg.seed, "order", epoch).permutation(len(train))
        loss_sum = 0.0
        for start in range(0, len(order), tc.batch_size):
            batch = order[start:start + tc.batch_size]
            for i in batch:
                pair = train[i]
                box = (box_from_mask(pair.mask, tc.jitter_max, stream(cfg.seed, "jitter", epoch, int(i)))
                       if tc.rejitter else pair.box)
                logits = model(Tensor(pair.image), box)
                loss = seg_loss(logits, pair.mask, tc.focal_weight, tc.dice_weight)
                loss_sum += loss.item()
                T.mul(loss, 1.0 / len(batch)).backward()
            opt.step()
        val_rows = evaluate(model, val)
        row = {
            "epoch": epoch,
            "lr": opt.lr,
            "loss": loss_sum / len(train),
            "train_dice": mean_dice(model, train),
            "val_dice": float(np.mean([r["dice"] for r in val_rows])) if val_rows else float("nan"),
            "val_miou": float(np.mean([r["iou"] for r in val_rows])) if val_rows else float("nan"),
            "val_hd": float(np.mean([r["hd"] for r in val_rows])) if val_rows else float("nan"),
        }
        result.history.append(row)
        if progress is not None:
            progress(row)
        score = row["val_dice"] if val_rows else row["train_dice"]
        if score > result.best_val_dice:
            result.best_val_dice = score
            result.best_state = model.state_dict()
            if out is not None:
                save_checkpoint(out / "best.ckpt", model, {"epoch": epoch, "val_dice": score})

    result.frozen_audit_ok = params_digest(frozen) == frozen_digest
    log.info("frozen audit: %s (%d frozen tensors)", "passed" if result.frozen_audit_ok else "FAILED",
             len(frozen))
    if out is not None:
        write_metrics(out / "metrics.csv", result.history)
        save_checkpoint(out / "last.ckpt", model, {"epoch": tc.epochs - 1})
    return result


def _fmt(value) -> str:
    return str(value) if isinstance(value, int) else repr(float(value))


def write_metrics(path: str | Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in history:
            w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
