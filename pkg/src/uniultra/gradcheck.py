"""Central finite-difference checks for every differentiable tensor operation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

H = 1e-5
TOLERANCE = 1e-4


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0) -> float:
    """Max relative error over all inputs of ``sum(fn(*inputs) * R)`` for a random R."""
    rng = np.random.default_rng(seed + 1000)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probe = None

    def scalar() -> float:
        with T.no_grad():
            out = fn(*[Tensor(a) for a in arrays])
        return float((out.data * probe).sum())

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    probe = rng.normal(size=out.shape)
    T.sum_(T.mul(out, probe)).backward()
    worst = 0.0
    for t, a in zip(tensors, arrays):
        num = numerical_grad(scalar, a)
        ana = t.grad if t.grad is not None else np.zeros_like(a)
        worst = max(worst, relative_error(ana, num))
    return worst


@dataclass(frozen=True)
class Case:
    name: str
    fn: Callable[..., Tensor]
    make: Callable[[np.random.Generator], list[np.ndarray]]


def _n(*shape):
    return lambda rng: [rng.normal(size=s) for s in shape]


def _pos(*shape):
    return lambda rng: [rng.uniform(0.5, 2.0, size=s) for s in shape]


def _distinct(shape):
    # well separated values so pooling windows have a unique maximum
    def make(rng):
        n = int(np.prod(shape))
        return [(rng.permutation(n) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape)]
    return make


def _attention(q, k, v):
    from .encoder import multi_head_attention
    return multi_head_attention(q, k, v, heads=2)


CASES: list[Case] = [
    Case("add", T.add, _n((3, 4), (4,))),
    Case("sub", T.sub, _n((3, 4), (3, 1))),
    Case("mul", T.mul, _n((2, 3, 4), (3, 4))),
    Case("div", T.div, lambda rng: [rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, size=(3, 4))]),
    Case("power", lambda a: T.power(a, 3.0), _n((3, 4))),
    Case("sqrt", T.sqrt, _pos((3, 4))),
    Case("exp", T.exp, _n((3, 4))),
    Case("log", T.log, _pos((3, 4))),
    Case("sigmoid", T.sigmoid, _n((4, 8))),
    Case("log_sigmoid", T.log_sigmoid, lambda rng: [rng.normal(scale=4.0, size=(4, 8))]),
    Case("gelu", T.gelu, lambda rng: [rng.normal(scale=2.0, size=(4, 8))]),
    Case("sum", lambda a: T.sum_(a, axis=1), _n((2, 3, 4))),
    Case("sum_keepdims", lambda a: T.sum_(a, axis=(0, 2), keepdims=True), _n((2, 3, 4))),
    Case("mean", lambda a: T.mean(a, axis=-1), _n((2, 3, 4))),
    Case("reshape", lambda a: T.reshape(a, (4, 6)), _n((2, 3, 4))),
    Case("transpose", lambda a: T.transpose(a, (2, 0, 1)), _n((2, 3, 4))),
    Case("slice", lambda a: a[:, 1:3, ::2], _n((2, 4, 4))),
    Case("concat", lambda a, b: T.concat([a, b], axis=1), _n((2, 3), (2, 5))),
    Case("stack", lambda a, b: T.stack([a, b], axis=0), _n((2, 3), (2, 3))),
    Case("matmul", T.matmul, _n((2, 3, 4), (2, 4, 5))),
    Case("matmul_broadcast", T.matmul, _n((3, 4), (2, 4, 5))),
    Case("linear", T.linear, _n((3, 4), (4, 5), (5,))),
    Case("softmax", lambda a: T.softmax(a, axis=-1), _n((3, 6))),
    Case("layer_norm", lambda a, w, b: T.layer_norm(a, w, b), _n((4, 8), (8,), (8,))),
    Case("conv2d", lambda x, k, b: T.conv2d(x, k, b, pad=1), _n((2, 4, 4), (3, 2, 3, 3), (3,))),
    Case("conv2d_stride", lambda x, k: T.conv2d(x, k, stride=2, pad=1), _n((2, 8, 8), (2, 2, 3, 3))),
    Case("conv2d_patch", lambda x, k: T.conv2d(x, k, stride=4), _n((1, 8, 8), (4, 1, 4, 4))),
    Case("conv2d_grouped", lambda x, k: T.conv2d(x, k, pad=1, groups=2), _n((2, 4, 4), (8, 1, 3, 3))),
    Case("upsample_nearest2x", T.upsample_nearest2x, _n((2, 4, 4))),
    Case("max_pool2x", T.max_pool2x, _distinct((2, 4, 4))),
    Case("upsample_bilinear", lambda a: T.upsample_bilinear(a, (8, 8)), _n((1, 4, 4))),
    Case("mse", T.mse, _n((4, 8), (4, 8))),
    Case("attention", _attention, _n((3, 4), (5, 4), (5, 4))),
]


@dataclass(frozen=True)
class Result:
    name: str
    seed: int
    error: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def run_suite(seeds: Sequence[int] = tuple(range(10)), cases: Sequence[Case] = CASES) -> list[Result]:
    results = []
    for case in cases:
        for seed in seeds:
            inputs = case.make(np.random.default_rng(seed))
            results.append(Result(case.name, seed, check(case.fn, inputs, seed)))
    return results
