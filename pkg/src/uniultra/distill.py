"""Deep-supervised knowledge distillation over per-stage encoder taps.

Each stage contributes up to three mean-squared-error terms between the
teacher's tap and the student's tap mapped into teacher space by a neck:

    D1  integration (block output + adapter output)
    D2  transformer block output
    D3  adapter output
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import LEVELS, ConfigError, DistillConfig, ModelConfig
from .data import MaskPair
from .encoder import StageTaps
from .model import SegModel, StudentModel
from .nn import Adam, Conv2d, Module, exponential_lr, params_digest
from .rng import stream
from .tensor import DimensionError, Tensor

log = logging.getLogger(__name__)


class Neck(Module):
    """3x3 conv (student dim, pad 1) followed by a 1x1 conv to the teacher dim."""

    def __init__(self, c_student: int, c_teacher: int, rng: np.random.Generator):
        self.conv3 = Conv2d(c_student, c_student, 3, rng, pad=1, init="identity")
        self.conv1 = Conv2d(c_student, c_teacher, 1, rng, init="fan_in")

    def identity_init(self) -> "Neck":
        self.conv3.weight.data[...] = 0.0
        c = self.conv3.weight.shape[0]
        self.conv3.weight.data[np.arange(c), np.arange(c), 1, 1] = 1.0
        self.conv3.bias.data[...] = 0.0
        self.conv1.weight.data[...] = np.eye(*self.conv1.weight.shape[:2])[:, :, None, None]
        self.conv1.bias.data[...] = 0.0
        return self

    def __call__(self, f: Tensor) -> Tensor:
        return self.conv1(self.conv3(f))


class _StageNecks(Module):
    pass


class DistillNecks(Module):
    """One neck per (stage, enabled level); parameters named ``stage{l}.{D}.*``."""

    def __init__(self, student_dims, teacher_dims, levels, rng: np.random.Generator):
        for l, (cs, ct) in enumerate(zip(student_dims, teacher_dims), start=1):
            holder = _StageNecks()
            for d in LEVELS:
                if d in levels:
                    setattr(holder, d, Neck(cs, ct, rng))
            setattr(self, f"stage{l}", holder)

    def get(self, stage: int, level: str) -> Neck:
        return getattr(getattr(self, f"stage{stage}"), level)

    def identity_init(self) -> "DistillNecks":
        for stage in (1, 2, 3):
            for d in LEVELS:
                neck = getattr(getattr(self, f"stage{stage}"), d, None)
                if neck is not None:
                    neck.identity_init()
        return self


def dskd_terms(teacher_taps: list[StageTaps], student_taps: list[StageTaps], necks: DistillNecks,
               levels=LEVELS, stage_weights=(1.0, 1.0, 1.0)) -> dict[tuple[int, str], Tensor]:
    """Per-(stage, level) weighted mean-squared errors."""
    if len(teacher_taps) != 3 or len(student_taps) != 3:
        raise DimensionError("distillation needs taps from exactly three stages")
    terms = {}
    for l, (tt, st) in enumerate(zip(teacher_taps, student_taps), start=1):
        for d in LEVELS:
            if d not in levels:
                continue
            target = tt.level(d)
            pred = necks.get(l, d)(st.level(d))
            if pred.shape != target.shape:
                raise DimensionError(f"stage {l} level {d}: student maps to {pred.shape}, "
                                     f"teacher tap is {target.shape}")
            term = T.mse(pred, Tensor(target.data))
            w = stage_weights[l - 1]
            terms[(l, d)] = term if w == 1.0 else T.mul(term, w)
    return terms


def dskd_loss(teacher_taps, student_taps, necks, levels=LEVELS, stage_weights=(1.0, 1.0, 1.0)) -> Tensor:
    terms = list(dskd_terms(teacher_taps, student_taps, necks, levels, stage_weights).values())
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def check_alignment(teacher_cfg: ModelConfig, student_cfg: ModelConfig) -> None:
    if teacher_cfg.grid_sizes != student_cfg.grid_sizes:
        raise ConfigError(f"teacher grids {teacher_cfg.grid_sizes} and student grids "
                         f"{student_cfg.grid_sizes} are not spatially aligned")


@dataclass
class DistillResult:
    student: StudentModel
    trace: list[dict] = field(default_factory=list)
    teacher_digest_before: str = ""
    teacher_digest_after: str = ""

    @property
    def initial_loss(self) -> float:
        return self.trace[0]["total"]

    @property
    def final_loss(self) -> float:
        return self.trace[-1]["total"]

    def smoothed_decreasing(self, window: int = 5) -> bool:
        vals = np.array([r["total"] for r in self.trace])
        if len(vals) < 2 * window:
            return bool(vals[-1] < vals[0])
        sm = np.convolve(vals, np.ones(window) / window, mode="valid")
        return bool(sm[-1] < sm[0])


def _term_key(l: int, d: str) -> str:
    return f"stage{l}_{d}"


def distill_run(teacher: SegModel, student_cfg: ModelConfig, pairs: list[MaskPair],
                cfg: DistillConfig, seed: int, progress=None) -> DistillResult:
    """Train a student encoder and necks to match the frozen teacher's taps."""
    check_alignment(teacher.config, student_cfg)
    teacher.freeze()
    before = params_digest(teacher.parameters())
    with T.no_grad():
        targets = [teacher.encoder.taps(Tensor(p.image)) for p in pairs]

    student = StudentModel(student_cfg, teacher.config, cfg.levels, stream(seed, "init", "student"))
    student.attach_teacher_head(teacher, frozen=True)
    trainable = student.encoder_parameters() + student.necks.parameters()
    opt = Adam(trainable, lr=cfg.lr)
    keys = [(l, d) for l in (1, 2, 3) for d in LEVELS if d in cfg.levels]

    def evaluate(epoch: int) -> dict:
        sums = {k: 0.0 for k in keys}
        with T.no_grad():
            for i, p in enumerate(pairs):
                terms = dskd_terms(targets[i], student.encoder.taps(Tensor(p.image)), student.necks,
                                   cfg.levels, cfg.stage_weights)
                for k, t in terms.items():
                    sums[k] += t.item()
        row = {"epoch": epoch}
        row.update({_term_key(*k): sums[k] / len(pairs) for k in keys})
        row["total"] = sum(sums.values()) / len(pairs)
        if progress is not None:
            progress(row)
        return row

    trace = [evaluate(0)]
    for epoch in range(cfg.epochs):
        opt.lr = exponential_lr(cfg.lr, cfg.lr_decay, epoch)
        order = stream(seed, "distill-order", epoch).permutation(len(pairs))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            for i in batch:
                s_taps = student.encoder.taps(Tensor(pairs[i].image))
                loss = dskd_loss(targets[i], s_taps, student.necks, cfg.levels, cfg.stage_weights)
                T.mul(loss, 1.0 / len(batch)).backward()
            opt.step()
        trace.append(evaluate(epoch + 1))

    if cfg.finetune_decoder:
        _finetune_head(student, pairs, cfg, seed)
    result = DistillResult(student, trace, before, params_digest(teacher.parameters()))
    log.info("distillation: L_DSKD %.6g -> %.6g (smoothed decreasing: %s)",
             result.initial_loss, result.final_loss, result.smoothed_decreasing())
    return result


def _finetune_head(student: StudentModel, pairs: list[MaskPair], cfg: DistillConfig, seed: int) -> None:
    from .metrics import seg_loss

    body = student.encoder_parameters() + student.necks.parameters()
    for p in body:
        p.frozen = True
    for p in student.head_parameters():
        p.frozen = False
    opt = Adam(student.head_parameters(), lr=cfg.lr)
    for epoch in range(cfg.epochs):
        opt.lr = exponential_lr(cfg.lr, cfg.lr_decay, epoch)
        order = stream(seed, "finetune-order", epoch).permutation(len(pairs))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            for i in batch:
                logits = student(Tensor(pairs[i].image), pairs[i].box)
                T.mul(seg_loss(logits, pairs[i].mask), 1.0 / len(batch)).backward()
            opt.step()
    for p in student.head_parameters():
        p.frozen = True
    for p in body:
        p.frozen = False


def write_trace(path: str | Path, trace: list[dict]) -> None:
    if not trace:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = list(trace[0])
        w.writerow(cols)
        for row in trace:
            w.writerow([row[c] if c == "epoch" else repr(float(row[c])) for c in cols])
