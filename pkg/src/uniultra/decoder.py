"""Box prompt encoder and a two-way-attention mask decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adapter import grid_to_tokens, tokens_to_grid
from .encoder import multi_head_attention
from .nn import Conv2d, LayerNorm, Linear, Module, Parameter
from .tensor import DimensionError, Tensor


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class BoxPrompt:
    """Inclusive pixel box: columns x0..x1, rows y0..y1."""

    x0: int
    y0: int
    x1: int
    y1: int

    def validate(self, size: tuple[int, int] | None = None) -> "BoxPrompt":
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise PromptError(f"degenerate box {self}")
        if min(self.x0, self.y0) < 0:
            raise PromptError(f"box {self} has negative coordinates")
        if size is not None:
            h, w = size
            if self.x1 >= w or self.y1 >= h:
                raise PromptError(f"box {self} exceeds image extent {h}x{w}")
        return self

    def contains(self, other: "BoxPrompt") -> bool:
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and self.x1 >= other.x1 and self.y1 >= other.y1)

    @property
    def center(self) -> tuple[float, float]:
        """(row, col) centre."""
        return ((self.y0 + self.y1) / 2.0, (self.x0 + self.x1) / 2.0)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)


def sinusoidal_encoding(coords: np.ndarray, dim: int) -> np.ndarray:
    """Encode normalised (x, y) points in [0, 1] as ``dim`` sin/cos features."""
    if dim % 4:
        raise DimensionError(f"positional encoding dim must be divisible by 4, got {dim}")
    nf = dim // 4
    freqs = np.pi * 2.0 ** np.linspace(0.0, 4.0, nf)
    out = []
    for axis in (0, 1):
        ang = coords[:, axis:axis + 1] * freqs[None, :]
        out += [np.sin(ang), np.cos(ang)]
    return np.concatenate(out, axis=1)


def dense_encoding(h: int, w: int, dim: int) -> np.ndarray:
    """Positional encoding of every cell centre of an h x w grid, as [h*w, dim]."""
    ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return sinusoidal_encoding(np.stack([xs.ravel(), ys.ravel()], axis=1), dim)


class PromptEncoder(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.corner_embed = Parameter(rng.normal(0.0, 1.0, size=(2, dim)))
        self._dim = dim

    @property
    def dim(self) -> int:
        return self._dim

    def __call__(self, box: BoxPrompt, img_size: tuple[int, int]) -> Tensor:
        box.validate(img_size)
        h, w = img_size
        corners = np.array([[box.x0 / w, box.y0 / h],
                            [(box.x1 + 1) / w, (box.y1 + 1) / h]])
        return T.add(Tensor(sinusoidal_encoding(corners, self._dim)), self.corner_embed)

    encode_box = __call__


class CrossAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.q = Linear(dim, dim, rng, init="fan_in")
        self.k = Linear(dim, dim, rng, init="fan_in")
        self.v = Linear(dim, dim, rng, init="fan_in")
        self.out = Linear(dim, dim, rng, init="fan_in")
        self._heads = heads

    def __call__(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        return self.out(multi_head_attention(self.q(q), self.k(k), self.v(v), self._heads))


class TwoWayLayer(Module):
    """Token self-attention, token->image, token MLP, image->token."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.self_attn = CrossAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.t2i = CrossAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, 2 * dim, rng, init="fan_in")
        self.fc2 = Linear(2 * dim, dim, rng, init="fan_in")
        self.norm3 = LayerNorm(dim)
        self.i2t = CrossAttention(dim, heads, rng)
        self.norm4 = LayerNorm(dim)

    def __call__(self, queries: Tensor, keys: Tensor, query_pe: Tensor, key_pe: Tensor):
        q = T.add(queries, query_pe)
        queries = self.norm1(T.add(queries, self.self_attn(q, q, queries)))
        q = T.add(queries, query_pe)
        k = T.add(keys, key_pe)
        queries = self.norm2(T.add(queries, self.t2i(q, k, keys)))
        queries = self.norm3(T.add(queries, self.fc2(T.gelu(self.fc1(queries)))))
        q = T.add(queries, query_pe)
        k = T.add(keys, key_pe)
        keys = self.norm4(T.add(keys, self.i2t(k, q, queries)))
        return queries, keys


class MaskDecoder(Module):
    """Single-mask decoder conditioned on box tokens.

    High-resolution encoder features (stage 1 and stage 2 grids) are added
    while upscaling the image embedding, then a hypernetwork vector from the
    mask token is dotted with every cell and the logits are resized
    bilinearly to the image.
    """

    def __init__(self, dim: int, heads: int, layers: int, high_res_dims: tuple[int, int],
                 rng: np.random.Generator):
        self.mask_token = Parameter(rng.normal(0.0, 1.0, size=(1, dim)))
        self.layer = [TwoWayLayer(dim, heads, rng) for _ in range(layers)]
        self.final_attn = CrossAttention(dim, heads, rng)
        self.norm_final = LayerNorm(dim)
        self.up1 = Conv2d(dim, dim // 2, 1, rng)
        self.skip1 = Conv2d(high_res_dims[1], dim // 2, 1, rng)
        self.up2 = Conv2d(dim // 2, dim // 4, 1, rng)
        self.skip0 = Conv2d(high_res_dims[0], dim // 4, 1, rng)
        self.hyper1 = Linear(dim, dim, rng, init="fan_in")
        self.hyper2 = Linear(dim, dim // 4, rng, init="fan_in")
        self._dim = dim

    def __call__(self, embedding: Tensor, prompt_tokens: Tensor, high_res: tuple[Tensor, Tensor],
                 out_size: tuple[int, int]) -> Tensor:
        d, h, w = embedding.shape
        if d != self._dim or prompt_tokens.shape[-1] != self._dim:
            raise DimensionError(f"decoder dim {self._dim}: embedding {embedding.shape}, "
                                 f"tokens {prompt_tokens.shape}")
        f0, f1 = high_res
        if f1.shape[1:] != (2 * h, 2 * w) or f0.shape[1:] != (4 * h, 4 * w):
            raise DimensionError(f"high-res features {f0.shape}, {f1.shape} misaligned with {embedding.shape}")
        tokens = T.concat([self.mask_token, prompt_tokens], axis=0)
        query_pe = tokens
        keys = grid_to_tokens(embedding)
        key_pe = Tensor(dense_encoding(h, w, d))
        queries = tokens
        for layer in self.layer:
            queries, keys = layer(queries, keys, query_pe, key_pe)
        q = T.add(queries, query_pe)
        k = T.add(keys, key_pe)
        queries = self.norm_final(T.add(queries, self.final_attn(q, k, keys)))

        x = tokens_to_grid(keys, h, w)
        x = T.gelu(T.add(self.up1(T.upsample_nearest2x(x)), self.skip1(f1)))
        x = T.gelu(T.add(self.up2(T.upsample_nearest2x(x)), self.skip0(f0)))
        c, hh, ww = x.shape
        vec = self.hyper2(T.gelu(self.hyper1(queries[0:1])))  # [1, c]
        low = T.reshape(T.matmul(vec, T.reshape(x, (c, hh * ww))), (1, hh, ww))
        return T.upsample_bilinear(low, out_size)

    decode_mask = __call__
