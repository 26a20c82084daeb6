"""Full segmentation models: the adapted teacher and the distilled student."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ModelConfig, model_config_from_dict
from .decoder import BoxPrompt, MaskDecoder, PromptEncoder
from .encoder import Encoder, StageTaps, is_backbone
from .nn import Conv2d, Module, Parameter, load_archive, save_module
from .tensor import Tensor


def _flat(*modules: tuple[str, Module | None]):
    for prefix, mod in modules:
        if mod is not None:
            yield from mod.named_parameters(prefix)


class SegModel(Module):
    """Adapter-augmented encoder + box prompt encoder + mask decoder.

    Encoder parameters are exposed without a prefix so names read
    ``patch_embed.*``, ``stage{l}.*`` and ``neck.*``.
    """

    kind = "teacher"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.encoder = Encoder(cfg, rng)
        self.prompt = PromptEncoder(cfg.decoder_dim, rng)
        self.decoder = MaskDecoder(cfg.decoder_dim, cfg.decoder_heads, cfg.decoder_layers,
                                   (cfg.stage_dims[0], cfg.stage_dims[1]), rng)
        self._cfg = cfg
        self.assign_names()

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    def named_parameters(self, prefix: str = ""):
        yield from _flat((prefix, self.encoder), (prefix + "prompt.", self.prompt),
                         (prefix + "decoder.", self.decoder))

    def configure_peft(self) -> "SegModel":
        """Freeze the backbone; adapters, neck, prompt encoder and decoder train."""
        for name, p in self.named_parameters():
            p.frozen = is_backbone(name)
        return self

    def forward_with_taps(self, img: Tensor, box: BoxPrompt) -> tuple[Tensor, list[StageTaps]]:
        final, taps = self.encoder.encode(img)
        tokens = self.prompt(box, img.shape[1:])
        logits = self.decoder(final, tokens, (taps[0].integration, taps[1].integration), img.shape[1:])
        return logits, taps

    def __call__(self, img: Tensor, box: BoxPrompt) -> Tensor:
        return self.forward_with_taps(img, box)[0]

    def meta(self) -> dict:
        return {"kind": self.kind, "model": dataclasses.asdict(self._cfg)}


class StudentModel(Module):
    """Distilled encoder whose taps are mapped into teacher space by the necks.

    The final embedding and high-resolution features fed to the (copied)
    teacher neck and decoder are the integration-level neck outputs.  When the
    integration level was not distilled, the block and adapter necks are
    summed instead, mirroring integration = block + adapter.
    """

    kind = "student"

    def __init__(self, cfg: ModelConfig, teacher_cfg: ModelConfig, levels: tuple[str, ...],
                 rng: np.random.Generator):
        from .distill import DistillNecks

        self.encoder = Encoder(cfg, rng)
        self.encoder.neck = None
        self.necks = DistillNecks(cfg.stage_dims, teacher_cfg.stage_dims, levels, rng)
        self.neck = Conv2d(teacher_cfg.stage_dims[-1], teacher_cfg.decoder_dim, 1, rng)
        self.prompt = PromptEncoder(teacher_cfg.decoder_dim, rng)
        self.decoder = MaskDecoder(teacher_cfg.decoder_dim, teacher_cfg.decoder_heads,
                                   teacher_cfg.decoder_layers,
                                   (teacher_cfg.stage_dims[0], teacher_cfg.stage_dims[1]), rng)
        self._cfg = cfg
        self._teacher_cfg = teacher_cfg
        self._levels = tuple(levels)
        self.assign_names()

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def levels(self) -> tuple[str, ...]:
        return self._levels

    def named_parameters(self, prefix: str = ""):
        yield from _flat((prefix, self.encoder), (prefix + "distill.", self.necks),
                         (prefix + "neck.", self.neck), (prefix + "prompt.", self.prompt),
                         (prefix + "decoder.", self.decoder))

    def encoder_parameters(self) -> list[Parameter]:
        return self.encoder.parameters()

    def head_parameters(self) -> list[Parameter]:
        return self.neck.parameters() + self.prompt.parameters() + self.decoder.parameters()

    def teacher_space(self, taps: list[StageTaps]) -> list[Tensor]:
        out = []
        for l, t in enumerate(taps, start=1):
            if "D1" in self._levels:
                out.append(self.necks.get(l, "D1")(t.integration))
            else:
                parts = [self.necks.get(l, d)(t.level(d)) for d in ("D2", "D3") if d in self._levels]
                out.append(parts[0] if len(parts) == 1 else T.add(parts[0], parts[1]))
        return out

    def forward_with_taps(self, img: Tensor, box: BoxPrompt) -> tuple[Tensor, list[StageTaps]]:
        taps = self.encoder.taps(img)
        feats = self.teacher_space(taps)
        tokens = self.prompt(box, img.shape[1:])
        logits = self.decoder(self.neck(feats[2]), tokens, (feats[0], feats[1]), img.shape[1:])
        return logits, taps

    def __call__(self, img: Tensor, box: BoxPrompt) -> Tensor:
        return self.forward_with_taps(img, box)[0]

    def attach_teacher_head(self, teacher: SegModel, frozen: bool = True) -> None:
        """Copy the teacher's neck, prompt encoder and decoder weights."""
        src = dict(teacher.named_parameters())
        for name, p in self.named_parameters():
            if name.split(".")[0] in ("neck", "prompt", "decoder"):
                p.data[...] = src[name].data
                p.frozen = frozen

    def meta(self) -> dict:
        return {"kind": self.kind, "model": dataclasses.asdict(self._cfg),
                "teacher_model": dataclasses.asdict(self._teacher_cfg), "levels": list(self._levels)}


def save_checkpoint(path: str | Path, model: SegModel | StudentModel, extra: dict | None = None) -> None:
    meta = model.meta()
    if extra:
        meta.update(extra)
    save_module(path, model, meta)


def load_checkpoint(path: str | Path) -> SegModel | StudentModel:
    records, meta = load_archive(path)
    if not meta or "kind" not in meta:
        raise ValueError(f"{path}: checkpoint has no model metadata")
    rng = np.random.default_rng(0)
    cfg = model_config_from_dict(meta["model"])
    if meta["kind"] == "teacher":
        model: SegModel | StudentModel = SegModel(cfg, rng)
    elif meta["kind"] == "student":
        model = StudentModel(cfg, model_config_from_dict(meta["teacher_model"]),
                             tuple(meta["levels"]), rng)
    else:
        raise ValueError(f"{path}: unknown checkpoint kind {meta['kind']!r}")
    model.load_state_dict(dict(records))
    frozen = set(meta.get("frozen", []))
    for name, p in model.named_parameters():
        p.frozen = name in frozen
    return model
