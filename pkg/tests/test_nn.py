import zipfile

import numpy as np
import pytest

from uniultra import tensor as T
from uniultra.config import ModelConfig
from uniultra.model import SegModel, load_checkpoint, save_checkpoint
from uniultra.nn import (Adam, AdamState, Conv2d, ContractError, Linear, Parameter, adam_step,
                         exponential_lr, file_sha256, load_archive, save_archive, trunc_normal)

from oracles import adam_first_step


def test_adam_first_step_magnitude():
    p = Parameter(np.array([1.0]))
    p.grad = np.array([1.0])
    adam_step([p], 0.1, AdamState())
    assert p.data[0] == pytest.approx(adam_first_step(1.0, 1.0, 0.1), abs=1e-15)
    assert p.data[0] == pytest.approx(0.9, abs=1e-6)


def test_adam_two_steps_matches_recurrence(rng):
    w0 = rng.normal(size=5)
    g1, g2 = rng.normal(size=5), rng.normal(size=5)
    p = Parameter(w0.copy())
    state = AdamState()
    for g in (g1, g2):
        p.grad = g.copy()
        adam_step([p], 0.01, state)
    m = 0.1 * g1 * 0.9 + 0.1 * g2
    v = 0.001 * g1 ** 2 * 0.999 + 0.001 * g2 ** 2
    expect = w0 - 0.01 * g1 / (np.abs(g1) + 1e-8)  # first step: bias-corrected m/sqrt(v) = sign(g)
    expect = expect - 0.01 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(p.data, expect, rtol=1e-12)


def test_adam_zero_grads_leave_params():
    p = Parameter(np.array([0.3, -2.0]))
    before = p.data.copy()
    opt = Adam([p], lr=0.5)
    for _ in range(2):
        p.grad = np.zeros(2)
        opt.step()
    np.testing.assert_array_equal(p.data, before)


def test_adam_frozen_untouched_and_missing_grad_rejected():
    live, cold = Parameter(np.ones(3), "live"), Parameter(np.ones(3), "cold", frozen=True)
    before = cold.data.tobytes()
    live.grad = np.ones(3)
    adam_step([live, cold], 0.1, AdamState())
    assert cold.data.tobytes() == before
    with pytest.raises(ContractError, match="live"):
        adam_step([live, cold], 0.1, AdamState())


def test_frozen_flag_controls_grad():
    p = Parameter(np.ones(2))
    p.frozen = True
    assert not p.requires_grad
    y = T.sum_(T.mul(p, 2.0))
    assert not y.requires_grad


def test_exponential_lr():
    for k in (0, 1, 7, 199):
        assert abs(exponential_lr(1e-4, 0.98, k) - 1e-4 * 0.98 ** k) <= 1e-12


def test_trunc_normal_bounds(rng):
    x = trunc_normal(rng, (10000,))
    assert np.abs(x).max() <= 0.04
    assert 0.015 < x.std() < 0.02


def test_identity_inits(rng):
    lin = Linear(4, 4, rng, init="identity")
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(lin(T.Tensor(x)).data, x)
    conv = Conv2d(3, 3, 1, rng, init="identity")
    f = rng.normal(size=(3, 5, 5))
    np.testing.assert_array_equal(conv(T.Tensor(f)).data, f)


def test_archive_roundtrip_and_determinism(tmp_path, rng):
    recs = [("a.w", rng.normal(size=(2, 3))), ("b", np.array(4.5)), ("c", rng.normal(size=7))]
    save_archive(tmp_path / "x.zip", recs, {"kind": "test"})
    save_archive(tmp_path / "y.zip", recs, {"kind": "test"})
    assert file_sha256(tmp_path / "x.zip") == file_sha256(tmp_path / "y.zip")
    back, meta = load_archive(tmp_path / "x.zip")
    assert meta == {"kind": "test"}
    for (n1, a1), (n2, a2) in zip(recs, back):
        assert n1 == n2 and a1.tobytes() == a2.tobytes() and a1.shape == a2.shape
    with zipfile.ZipFile(tmp_path / "x.zip") as zf:
        assert all(i.compress_type == zipfile.ZIP_STORED for i in zf.infolist())
        assert zf.read("manifest.txt").decode().splitlines()[0] == "0\ta.w\t2x3"


def test_checkpoint_roundtrip_restores_weights_and_freeze(tmp_path):
    cfg = ModelConfig(stage_dims=(16, 32, 64), adapter_dim=8, edge_dim=8)
    model = SegModel(cfg, np.random.default_rng(3)).configure_peft()
    save_checkpoint(tmp_path / "m.ckpt", model)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == cfg
    a, b = dict(model.named_parameters()), dict(back.named_parameters())
    assert a.keys() == b.keys()
    for name in a:
        assert a[name].data.tobytes() == b[name].data.tobytes()
        assert a[name].frozen == b[name].frozen


def test_state_dict_strict(rng):
    lin = Linear(3, 2, rng)
    state = lin.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises((KeyError, ValueError)):
        lin.load_state_dict(state)
