"""Parameters, modules, the Adam optimiser and the checkpoint archive."""

from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. a trainable parameter has no gradient)."""


class Parameter(Tensor):
    """A named leaf tensor owned by a module.

    ``frozen`` parameters are skipped by the optimiser and do not record
    gradients.
    """

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(data, requires_grad=not frozen)
        self.name = name
        self._frozen = bool(frozen)

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        self.requires_grad = not self._frozen
        if self._frozen:
            self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


class Module:
    """Container that discovers parameters and sub-modules from its attributes.

    Attribute order is insertion order, so parameter enumeration (and
    therefore the checkpoint layout) is deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def freeze(self, frozen: bool = True) -> "Module":
        for p in self.parameters():
            p.frozen = frozen
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.data.shape != arr.shape:
                raise T.DimensionError(f"{name}: checkpoint shape {arr.shape} != parameter {p.shape}")
            p.data[...] = arr

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.parameters() if not (trainable_only and p.frozen))


# -- initialisation -----------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +/- 2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def fan_in_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


# -- layers ---------------------------------------------------------------------

class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None,
                 init: str = "trunc_normal", bias: bool = True):
        if init == "zeros" or rng is None:
            w = np.zeros((d_in, d_out))
        elif init == "trunc_normal":
            w = trunc_normal(rng, (d_in, d_out))
        elif init == "fan_in":
            w = fan_in_normal(rng, (d_in, d_out), d_in)
        elif init == "identity":
            w = np.eye(d_in, d_out)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """Convolution over a single [C, H, W] feature grid."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator | None = None,
                 stride: int = 1, pad: int = 0, init: str = "fan_in", bias: bool = True):
        shape = (c_out, c_in, kernel, kernel)
        fan_in = c_in * kernel * kernel
        if init == "zeros" or rng is None:
            w = np.zeros(shape)
        elif init == "fan_in":
            w = fan_in_normal(rng, shape, fan_in)
        elif init == "trunc_normal":
            w = trunc_normal(rng, shape)
        elif init == "identity":
            w = np.zeros(shape)
            c = kernel // 2
            for i in range(min(c_in, c_out)):
                w[i, i, c, c] = 1.0
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out)) if bias else None
        self._stride = stride
        self._pad = pad

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self._stride, pad=self._pad)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias)


# -- optimiser ------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: list[Parameter], lr: float, state: AdamState) -> None:
    """One Adam update on every non-frozen parameter, then clear all gradients."""
    live = [p for p in params if not p.frozen]
    for p in live:
        if p.grad is None:
            raise ContractError(f"trainable parameter {p.name or p.shape} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in live:
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    for p in params:
        p.grad = None


class Adam:
    def __init__(self, params: list[Parameter], lr: float = 1e-4):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState()

    def step(self) -> None:
        adam_step(self.params, self.lr, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def exponential_lr(base_lr: float, decay: float, epoch: int) -> float:
    return base_lr * decay ** epoch


# -- checkpoint archive -----------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_archive(path: str | Path, records: list[tuple[str, np.ndarray]],
                 meta: dict | None = None) -> None:
    """Write ordered (name, shape, float64 LE payload) records plus a text manifest.

    The archive is a stored (uncompressed) zip with fixed timestamps so that
    identical parameters always produce identical bytes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    with zipfile.ZipFile(path, "w") as zf:
        for i, (name, arr) in enumerate(records):
            arr = np.asarray(arr, dtype="<f8")  # keeps 0-d shapes, unlike ascontiguousarray
            shape = "x".join(str(n) for n in arr.shape) or "scalar"
            lines.append(f"{i}\t{name}\t{shape}")
            _entry(zf, f"tensors/{i:05d}.f64", arr.tobytes(order="C"))
        _entry(zf, "manifest.txt", ("\n".join(lines) + "\n").encode())
        if meta is not None:
            _entry(zf, "meta.json", json.dumps(meta, indent=2, sort_keys=True).encode())


def load_archive(path: str | Path) -> tuple[list[tuple[str, np.ndarray]], dict | None]:
    records = []
    with zipfile.ZipFile(path) as zf:
        manifest = zf.read("manifest.txt").decode().splitlines()
        for line in manifest:
            if not line.strip():
                continue
            idx, name, shape = line.split("\t")
            dims = () if shape == "scalar" else tuple(int(n) for n in shape.split("x"))
            raw = zf.read(f"tensors/{int(idx):05d}.f64")
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
            records.append((name, arr))
        meta = json.loads(zf.read("meta.json")) if "meta.json" in zf.namelist() else None
    return records, meta


def save_module(path: str | Path, module: Module, meta: dict | None = None) -> None:
    records = [(n, p.data) for n, p in module.named_parameters()]
    frozen = [n for n, p in module.named_parameters() if p.frozen]
    meta = dict(meta or {})
    meta.setdefault("frozen", frozen)
    save_archive(path, records, meta)


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def params_digest(params: list[Parameter]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()

