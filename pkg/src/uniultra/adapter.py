"""Context-Edge Hybrid Adapter (CH-Adapter)."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import DIRECTIONS
from .edge import EdgePath
from .nn import Linear, Module
from .tensor import DimensionError, Tensor


def grid_to_tokens(f: Tensor) -> Tensor:
    c, h, w = f.shape
    return T.transpose(T.reshape(f, (c, h * w)), (1, 0))


def tokens_to_grid(x: Tensor, h: int, w: int) -> Tensor:
    n, c = x.shape
    return T.reshape(T.transpose(x, (1, 0)), (c, h, w))


class ChAdapter(Module):
    """Bottleneck context prompt plus Sobel edge path, fused by addition.

    With no Sobel directions the edge path is omitted and the adapter
    reduces to the plain context (bottleneck) adapter.
    """

    def __init__(self, stage_dim: int, adapter_dim: int, edge_dim: int, rng: np.random.Generator,
                 directions: tuple[str, ...] = DIRECTIONS, stage_index: int = 1):
        if adapter_dim >= stage_dim:
            raise DimensionError(f"adapter dim {adapter_dim} must be below stage dim {stage_dim}")
        self.down = Linear(stage_dim, adapter_dim, rng, init="fan_in")
        self.up = Linear(adapter_dim, stage_dim, rng, init="zeros")
        self.edge = EdgePath(stage_dim, edge_dim, rng, directions) if directions else None
        self._stage_dim = stage_dim
        self._stage_index = stage_index

    @property
    def stage_index(self) -> int:
        return self._stage_index

    def _check(self, f: Tensor) -> None:
        if f.ndim != 3 or f.shape[0] != self._stage_dim:
            raise DimensionError(f"adapter for stage {self._stage_index} expects "
                                 f"[{self._stage_dim}, H, W], got {f.shape}")

    def context_prompt(self, f: Tensor) -> Tensor:
        self._check(f)
        _, h, w = f.shape
        tokens = grid_to_tokens(f)
        return tokens_to_grid(self.up(T.gelu(self.down(tokens))), h, w)

    def edge_path(self, f: Tensor) -> Tensor:
        self._check(f)
        if self.edge is None:
            return T.zeros(f.shape)
        return self.edge(f)

    def __call__(self, f: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Return (h, p, f_edge) with h = p + f_edge."""
        p = self.context_prompt(f)
        f_edge = self.edge_path(f)
        return T.add(p, f_edge), p, f_edge

    adapter_forward = __call__


def count_trainable(model: Module) -> tuple[int, int, float]:
    params = model.parameters()
    total = sum(p.size for p in params)
    tp = sum(p.size for p in params if not p.frozen)
    return tp, total, (tp / total if total else 0.0)
