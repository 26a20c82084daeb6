"""Dice, IoU and Hausdorff distance on small hand-made masks, including the empty cases.

    python3 demos/04_metrics.py
"""

import numpy as np

from uniultra.metrics import dice, hausdorff, iou

gt = np.zeros((10, 10), dtype=bool)
gt[3:7, 3:7] = True
shifted = np.roll(gt, 2, axis=1)
speck = gt.copy()
speck[0, 9] = True  # one stray pixel far away
empty = np.zeros_like(gt)

cases = {"identical": gt, "shifted by 2": shifted, "one stray pixel": speck, "empty prediction": empty}
print(f"{'prediction':<18} {'Dice':>6} {'IoU':>6} {'HD':>6}")
for name, pred in cases.items():
    print(f"{name:<18} {dice(pred, gt):6.3f} {iou(pred, gt):6.3f} {hausdorff(pred, gt):6.2f}")
print("both empty: Dice", dice(empty, empty), "HD", hausdorff(empty, empty))
# the stray pixel barely moves Dice but dominates the Hausdorff distance
