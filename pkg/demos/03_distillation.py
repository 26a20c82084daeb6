"""Distil a teacher encoder into a half-width student.

    python3 demos/03_distillation.py [teacher_epochs] [distill_epochs]

Trains a short teacher first, then matches the student to it at every stage.
"""

import dataclasses
import sys

import numpy as np

from uniultra.cli import param_table
from uniultra.config import RunConfig, TrainConfig
from uniultra.data import select
from uniultra.distill import distill_run
from uniultra.train import evaluate, load_data, train_peft

t_epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 40
d_epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 30
cfg = RunConfig(train=TrainConfig(epochs=t_epochs))
cfg = cfg.replace(distill=dataclasses.replace(cfg.distill, epochs=d_epochs))
pairs, sp = load_data(cfg)
train, val = select(pairs, sp["train"]), select(pairs, sp["val"])

teacher = train_peft(cfg, train, val).model
res = distill_run(teacher, cfg.student, train, cfg.distill, cfg.seed)
print("per-term distillation loss, init vs final:")
for key in res.trace[0]:
    if key != "epoch":
        print(f"  {key:<8} {res.trace[0][key]:10.5f} -> {res.trace[-1][key]:10.5f}")


def dice(model):
    return np.mean([r["dice"] for r in evaluate(model, val)])


print(f"val Dice: teacher {dice(teacher):.3f}, student {dice(res.student):.3f}")
print(f"teacher unchanged: {res.teacher_digest_before == res.teacher_digest_after}")
for row in param_table(cfg):
    print(f"{row['phase']:<30} {row['trainable']:>8d} / {row['total']:<8d} {100 * row['ratio']:.1f}%")
