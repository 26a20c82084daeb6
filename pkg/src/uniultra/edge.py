"""Edge-aware path: patch mixer, fixed four-direction Sobel filtering, channel mixers.

Feature grids are plain ``Tensor`` objects of shape [C, H, W].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import DIRECTIONS
from .nn import Conv2d, Module
from .tensor import DimensionError, Tensor

_KERNELS = {
    "horizontal": np.array([[-1.0, 0.0, 1.0],
                            [-2.0, 0.0, 2.0],
                            [-1.0, 0.0, 1.0]]),
    "right_diagonal": np.array([[0.0, 1.0, 2.0],
                                [-1.0, 0.0, 1.0],
                                [-2.0, -1.0, 0.0]]),
    "left_diagonal": np.array([[-2.0, -1.0, 0.0],
                               [-1.0, 0.0, 1.0],
                               [0.0, 1.0, 2.0]]),
}
_KERNELS["vertical"] = _KERNELS["horizontal"].T.copy()


@dataclass(frozen=True)
class SobelBank:
    """Fixed 3x3 directional kernels; never exposed as trainable parameters."""

    names: tuple[str, ...]
    kernels: np.ndarray  # [n, 3, 3]

    trainable = False

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.kernels[self.names.index(name)]


def sobel_bank(directions: tuple[str, ...] = DIRECTIONS) -> SobelBank:
    """Kernels in the canonical order horizontal, vertical, right/left diagonal.

    ``directions`` selects a subset (the order of the result always follows
    the canonical order); an empty selection disables the edge response.
    """
    names = tuple(d for d in DIRECTIONS if d in directions)
    unknown = set(directions) - set(DIRECTIONS)
    if unknown:
        raise ValueError(f"unknown Sobel directions {sorted(unknown)}")
    kernels = np.stack([_KERNELS[n] for n in names]) if names else np.zeros((0, 3, 3))
    kernels.setflags(write=False)
    return SobelBank(names, kernels)


def sobel_response(f: Tensor, bank: SobelBank) -> Tensor:
    """Per channel, the sum of the directional responses (zero padding 1)."""
    c, h, w = f.shape
    n = len(bank)
    if n == 0:
        return T.zeros((c, h, w))
    weight = Tensor(np.tile(bank.kernels[:, None], (c, 1, 1, 1)))  # [c*n, 1, 3, 3]
    per_dir = T.conv2d(f, weight, stride=1, pad=1, groups=c)
    return T.sum_(T.reshape(per_dir, (c, n, h, w)), axis=1)


def edge_enhance(f: Tensor, bank: SobelBank, mixer: Conv2d) -> Tensor:
    """Sobel response of every channel followed by the 1x1 channel mixer."""
    if f.shape[0] != mixer.c_in:
        raise DimensionError(f"edge_enhance: grid has {f.shape[0]} channels, mixer expects {mixer.c_in}")
    return mixer(sobel_response(f, bank))


class EdgePath(Module):
    """patch mixer (stage -> edge dim), Sobel + mixer, up-mix back to stage dim.

    The up-mixer starts at zero so a fresh adapter leaves the stream untouched.
    """

    def __init__(self, stage_dim: int, edge_dim: int, rng: np.random.Generator,
                 directions: tuple[str, ...] = DIRECTIONS):
        self.patch_mixer = Conv2d(stage_dim, edge_dim, 1, rng, init="fan_in")
        self.mixer = Conv2d(edge_dim, edge_dim, 1, rng, init="fan_in")
        self.up_mixer = Conv2d(edge_dim, stage_dim, 1, rng, init="zeros")
        self._bank = sobel_bank(directions)
        self._stage_dim = stage_dim

    @property
    def bank(self) -> SobelBank:
        return self._bank

    @property
    def enabled(self) -> bool:
        return len(self._bank) > 0

    def __call__(self, f: Tensor) -> Tensor:
        if f.shape[0] != self._stage_dim:
            raise DimensionError(f"edge path expects {self._stage_dim} channels, got {f.shape[0]}")
        if not self.enabled:
            return T.zeros(f.shape)
        return self.up_mixer(edge_enhance(self.patch_mixer(f), self._bank, self.mixer))
