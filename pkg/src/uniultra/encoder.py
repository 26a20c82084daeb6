"""Three-stage hierarchical transformer encoder with per-stage CH-Adapters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adapter import ChAdapter, grid_to_tokens, tokens_to_grid
from .config import ConfigError, ModelConfig
from .nn import Conv2d, LayerNorm, Linear, Module, Parameter, trunc_normal
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class StageConfig:
    embed_dim: int
    num_blocks: int
    num_heads: int
    downsample: bool


def stage_configs(cfg: ModelConfig) -> list[StageConfig]:
    return [StageConfig(d, b, h, i < 2)
            for i, (d, b, h) in enumerate(zip(cfg.stage_dims, cfg.num_blocks, cfg.num_heads))]


@dataclass
class StageTaps:
    """Distillation observables of one stage."""

    stage_input: Tensor
    block_out: Tensor
    adapter_out: Tensor
    integration: Tensor

    def level(self, name: str) -> Tensor:
        return {"D1": self.integration, "D2": self.block_out, "D3": self.adapter_out}[name]


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention on token matrices q [Nq, D], k/v [Nk, D]."""
    nq, d = q.shape
    nk = k.shape[0]
    hd = d // heads
    qh = T.transpose(T.reshape(q, (nq, heads, hd)), (1, 0, 2))
    kh = T.transpose(T.reshape(k, (nk, heads, hd)), (1, 2, 0))
    vh = T.transpose(T.reshape(v, (nk, heads, hd)), (1, 0, 2))
    att = T.softmax(T.mul(T.matmul(qh, kh), 1.0 / np.sqrt(hd)), axis=-1)
    out = T.matmul(att, vh)  # [heads, nq, hd]
    return T.reshape(T.transpose(out, (1, 0, 2)), (nq, d))


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self._heads = heads
        self._dim = dim

    def __call__(self, x: Tensor) -> Tensor:
        d = self._dim
        qkv = self.qkv(x)
        q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
        return self.proj(multi_head_attention(q, k, v, self._heads))


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block with global attention over the token grid."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng)

    def __call__(self, f: Tensor) -> Tensor:
        _, h, w = f.shape
        x = grid_to_tokens(f)
        x = T.add(x, self.attn(self.norm1(x)))
        x = T.add(x, self.mlp(self.norm2(x)))
        return tokens_to_grid(x, h, w)


class PatchEmbed(Module):
    def __init__(self, patch: int, dim: int, grid: int, rng: np.random.Generator):
        self.proj = Conv2d(1, dim, patch, rng, stride=patch, init="fan_in")
        self.pos = Parameter(trunc_normal(rng, (dim, grid, grid)))
        self._patch = patch

    def __call__(self, img: Tensor) -> Tensor:
        if img.ndim != 3 or img.shape[0] != 1:
            raise DimensionError(f"patch_embed expects a [1, H, W] image, got {img.shape}")
        _, h, w = img.shape
        if h % self._patch or w % self._patch:
            raise ConfigError(f"image {h}x{w} not divisible by patch size {self._patch}")
        f = self.proj(img)
        if f.shape[1:] != self.pos.shape[1:]:
            raise ConfigError(f"image {h}x{w} does not match the configured resolution")
        return T.add(f, self.pos)


class Stage(Module):
    def __init__(self, index: int, cfg: ModelConfig, rng: np.random.Generator):
        sc = stage_configs(cfg)[index - 1]
        self.block = [Block(sc.embed_dim, sc.num_heads, cfg.mlp_ratio, rng) for _ in range(sc.num_blocks)]
        self.adapter = (ChAdapter(sc.embed_dim, cfg.adapter_dim, cfg.edge_dim, rng,
                                  cfg.edge_directions, stage_index=index)
                        if cfg.use_adapters else None)
        self.down = (Conv2d(sc.embed_dim, cfg.stage_dims[index], 1, rng, init="fan_in")
                     if sc.downsample else None)
        self._index = index
        self._dim = sc.embed_dim
        self._adapter_input = cfg.adapter_input

    def __call__(self, x: Tensor) -> tuple[StageTaps, Tensor | None]:
        if x.shape[0] != self._dim:
            raise DimensionError(f"stage {self._index} expects {self._dim} channels, got {x.shape[0]}")
        out = x
        for blk in self.block:
            out = blk(out)
        if self.adapter is None:
            adapter_out = T.zeros(out.shape)
        else:
            src = x if self._adapter_input == "block_input" else out
            adapter_out, _, _ = self.adapter(src)
        integration = T.add(out, adapter_out)
        taps = StageTaps(stage_input=x, block_out=out, adapter_out=adapter_out, integration=integration)
        nxt = self.down(T.max_pool2x(integration)) if self.down is not None else None
        return taps, nxt


class Encoder(Module):
    """patch_embed -> stage1..3 -> 1x1 neck to the decoder dimension."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        grid = cfg.image_size // cfg.patch_size
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.stage_dims[0], grid, rng)
        self.stage1 = Stage(1, cfg, rng)
        self.stage2 = Stage(2, cfg, rng)
        self.stage3 = Stage(3, cfg, rng)
        self.neck = Conv2d(cfg.stage_dims[-1], cfg.decoder_dim, 1, rng, init="fan_in")
        self._cfg = cfg

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def stages(self) -> list[Stage]:
        return [self.stage1, self.stage2, self.stage3]

    def stage_forward(self, l: int, x: Tensor) -> tuple[StageTaps, Tensor | None]:
        return self.stages[l - 1](x)

    def taps(self, img: Tensor) -> list[StageTaps]:
        x = self.patch_embed(img)
        taps = []
        for stage in self.stages:
            t, x = stage(x)
            taps.append(t)
        return taps

    def encode(self, img: Tensor) -> tuple[Tensor, list[StageTaps]]:
        taps = self.taps(img)
        return self.neck(taps[-1].integration), taps

    __call__ = encode

    def backbone_parameters(self) -> list[Parameter]:
        return [p for n, p in self.named_parameters() if is_backbone(n)]


def is_backbone(name: str) -> bool:
    """Parameters frozen during adapter fine-tuning."""
    if name.startswith("patch_embed."):
        return True
    parts = name.split(".")
    return parts[0].startswith("stage") and len(parts) > 1 and (
        parts[1].startswith("block") or parts[1] == "down")
