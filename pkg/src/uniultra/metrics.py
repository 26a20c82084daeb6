"""Segmentation supervision (focal + soft dice) and evaluation metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensor as T
from .tensor import DimensionError, Tensor


# -- losses -------------------------------------------------------------------

def focal_loss(logits: Tensor, gt: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean sigmoid focal loss over all pixels."""
    t = np.asarray(gt, dtype=np.float64).reshape(logits.shape)
    p = T.sigmoid(logits)
    # cross-entropy with logits: -(t log p + (1-t) log(1-p))
    ce = T.mul(T.add(T.mul(T.log_sigmoid(logits), t), T.mul(T.log_sigmoid(T.mul(logits, -1.0)), 1.0 - t)), -1.0)
    one_minus_pt = T.add(T.mul(p, 1.0 - 2.0 * t), t)  # 1 - p_t
    alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t)
    return T.mean(T.mul(T.mul(ce, T.power(one_minus_pt, gamma)), alpha_t))


def soft_dice_loss(logits: Tensor, gt: np.ndarray, smooth: float = 1.0) -> Tensor:
    t = np.asarray(gt, dtype=np.float64).reshape(logits.shape)
    p = T.sigmoid(logits)
    inter = T.sum_(T.mul(p, t))
    denom = T.add(T.sum_(p), float(t.sum()) + smooth)
    return T.sub(1.0, T.div(T.add(T.mul(inter, 2.0), smooth), denom))


def seg_loss(logits: Tensor, gt: np.ndarray, focal_weight: float = 20.0, dice_weight: float = 1.0) -> Tensor:
    gt = np.asarray(gt)
    if logits.size != gt.size or logits.shape[-2:] != gt.shape[-2:]:
        raise DimensionError(f"seg_loss: logits {logits.shape} vs mask {gt.shape}")
    return T.add(T.mul(focal_loss(logits, gt), focal_weight), T.mul(soft_dice_loss(logits, gt), dice_weight))


# -- metrics --------------------------------------------------------------------

def logits_to_mask(logits) -> np.ndarray:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data.reshape(data.shape[-2:]) > 0.0  # sigmoid > 0.5


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred, dtype=bool)
    b = np.asarray(gt, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(pred, gt) -> float:
    a, b = _pair(pred, gt)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def iou(pred, gt) -> float:
    a, b = _pair(pred, gt)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def miou(preds, gts) -> float:
    if len(preds) != len(gts):
        raise ValueError(f"miou: {len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise ValueError("miou of an empty set")
    return float(np.mean([iou(p, g) for p, g in zip(preds, gts)]))


def _directed(a: np.ndarray, b: np.ndarray) -> float:
    # distance from every pixel to the nearest foreground pixel of b
    dist_to_b = ndimage.distance_transform_edt(~b)
    return float(dist_to_b[a].max())


def hausdorff(pred, gt) -> float:
    """Symmetric Hausdorff distance (pixels) between foreground pixel sets.

    Both empty gives 0; exactly one empty gives the image diagonal.
    """
    a, b = _pair(pred, gt)
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return 0.0
    if ea or eb:
        return math.hypot(*a.shape)
    return max(_directed(a, b), _directed(b, a))


@dataclass
class MetricReport:
    dice: float
    miou: float
    hd: float


def score(pred, gt) -> MetricReport:
    return MetricReport(dice(pred, gt), iou(pred, gt), hausdorff(pred, gt))


def write_report(rows: list[dict], csv_path: str | Path, json_path: str | Path) -> dict:
    """Per-image rows (id, dice, iou, hd) to CSV; per-image rows + means to JSON."""
    agg = {
        "n": len(rows),
        "dice": float(np.mean([r["dice"] for r in rows])) if rows else float("nan"),
        "miou": float(np.mean([r["iou"] for r in rows])) if rows else float("nan"),
        "hd": float(np.mean([r["hd"] for r in rows])) if rows else float("nan"),
    }
    csv_path, json_path = Path(csv_path), Path(json_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "dice", "iou", "hd"])
        for r in rows:
            w.writerow([r["id"], repr(r["dice"]), repr(r["iou"]), repr(r["hd"])])
    json_path.write_text(json.dumps({"images": rows, "aggregate": agg}, indent=2) + "\n")
    return agg

