"""Adapter fine-tuning on synthetic data with a frozen backbone.

    python3 demos/02_peft_quickstart.py [epochs]

The default 30 epochs take about 15 s on one core; the full 200-epoch run is `uniultra train`.
"""

import sys

from uniultra.config import RunConfig, TrainConfig
from uniultra.data import select
from uniultra.train import load_data, train_peft

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 30
cfg = RunConfig(train=TrainConfig(epochs=epochs))
pairs, sp = load_data(cfg)
train, val = select(pairs, sp["train"]), select(pairs, sp["val"])
print(f"{len(train)} train / {len(val)} val synthetic images, seed {cfg.seed}")


def show(row):
    if row["epoch"] % 5 == 0 or row["epoch"] == epochs - 1:
        print(f"epoch {row['epoch']:3d}  loss {row['loss']:.4f}  train Dice {row['train_dice']:.3f}  "
              f"val Dice {row['val_dice']:.3f}")


res = train_peft(cfg, train, val, progress=show)
tp, total = res.model.num_parameters(trainable_only=True), res.model.num_parameters()
print(f"trainable {tp} of {total} parameters ({100 * tp / total:.1f}%)")
print(f"backbone untouched: {res.frozen_audit_ok}")
