"""Take one adapter apart: context prompt, edge path, and how they fuse.

    python3 demos/01_adapter_anatomy.py
"""

import numpy as np

from uniultra.adapter import ChAdapter
from uniultra.edge import sobel_bank, sobel_response
from uniultra.tensor import Tensor

rng = np.random.default_rng(0)

# The four fixed Sobel directions.  They are constants, never parameters.
bank = sobel_bank()
for name, k in zip(bank.names, bank.kernels):
    print(f"{name:<15} sum={k.sum():+.0f}\n{k.astype(int)}")

# A vertical step edge: strongest on the horizontal kernel, weaker on the diagonals, zero on the vertical one.
step = np.zeros((1, 8, 8))
step[:, :, 4:] = 1.0
for name in bank.names:
    r = sobel_response(Tensor(step), sobel_bank((name,))).data[0, 1:-1, 1:-1]
    print(f"step edge, {name:<15} interior |response| max = {np.abs(r).max():.0f}")

# A fresh adapter: the edge up-projection starts at zero, so h is the context prompt alone.
adapter = ChAdapter(32, 8, 8, rng)
f = Tensor(rng.normal(size=(32, 16, 16)))
h, p, e = adapter.adapter_forward(f)
print(f"\nfresh adapter: |e|max = {np.abs(e.data).max():g}, h == p: {np.array_equal(h.data, p.data)}")

# After training perturbs the weights the edge path contributes, and h stays exactly p + e.
for prm in adapter.parameters():
    prm.data[...] = rng.normal(scale=0.3, size=prm.shape)
h, p, e = adapter.adapter_forward(f)
print(f"perturbed adapter: |e|max = {np.abs(e.data).max():.3f}, h == p + e: {np.array_equal(h.data, p.data + e.data)}")
print(f"adapter parameters: {sum(q.size for q in adapter.parameters())} for a 32-channel stage")
