"""Shared fixtures.  The long training runs are session-scoped and built lazily,
so a single run of the suite trains each toy model at most once."""

from __future__ import annotations

import dataclasses
import time

import numpy as np
import pytest

from uniultra.config import RunConfig
from uniultra.data import select
from uniultra.distill import distill_run
from uniultra.train import load_data, train_peft


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_cfg() -> RunConfig:
    return RunConfig()


@pytest.fixture(scope="session")
def toy_splits(toy_cfg):
    pairs, sp = load_data(toy_cfg)
    return {name: select(pairs, ids) for name, ids in sp.items()}


@pytest.fixture(scope="session")
def teacher_run(toy_cfg, toy_splits, tmp_path_factory):
    """Full 200-epoch adapter fine-tune of the toy teacher (seed 7)."""
    out = tmp_path_factory.mktemp("teacher")
    t0 = time.perf_counter()
    res = train_peft(toy_cfg, toy_splits["train"], toy_splits["val"], out)
    res.seconds = time.perf_counter() - t0
    res.out_dir = out
    return res


@pytest.fixture(scope="session")
def teacher(teacher_run):
    """The best-validation teacher, as written to best.ckpt."""
    from uniultra.model import load_checkpoint

    return load_checkpoint(teacher_run.out_dir / "best.ckpt")


@pytest.fixture(scope="session")
def distill_runs(toy_cfg, toy_splits, teacher):
    """100-epoch distillation for the one-level and three-level configurations."""
    runs = {}
    for levels in (("D1",), ("D1", "D2", "D3")):
        dcfg = dataclasses.replace(toy_cfg.distill, levels=levels)
        runs[levels] = distill_run(teacher, toy_cfg.student, toy_splits["train"], dcfg, toy_cfg.seed)
    return runs


@pytest.fixture(scope="session")
def no_edge_run(toy_cfg, toy_splits):
    """Same seed and data as the teacher, but the adapters have no Sobel directions."""
    cfg = toy_cfg.replace(model=dataclasses.replace(toy_cfg.model, edge_directions=()))
    return train_peft(cfg, toy_splits["train"], toy_splits["val"])
