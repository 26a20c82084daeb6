"""Acceptance criteria.  Each test prints one [PASS]/[FAIL] line, visible even under capture.

The training criteria (7-10) share the session fixtures from conftest.py, so the toy
teacher and the distilled students are trained once per run.
"""

import time

import numpy as np
import pytest

from uniultra.adapter import ChAdapter
from uniultra.cli import EXIT_OK, main, param_table
from uniultra.config import DIRECTIONS, ModelConfig, RunConfig
from uniultra.data import generate_sample
from uniultra.distill import DistillNecks, dskd_loss, dskd_terms
from uniultra.edge import sobel_bank, sobel_response
from uniultra.encoder import Encoder
from uniultra.gradcheck import run_suite
from uniultra.metrics import dice, hausdorff, iou, seg_loss
from uniultra.model import SegModel
from uniultra.nn import Adam, file_sha256
from uniultra.tensor import Tensor
from uniultra.train import evaluate

from oracles import dice_sets, hausdorff_pairwise, iou_sets, random_masks


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
        assert ok, detail
    return emit


def _mean_dice(model, pairs):
    return float(np.mean([r["dice"] for r in evaluate(model, pairs)]))


def test_criterion_01_gradient_suite(report):
    t0 = time.perf_counter()
    results = run_suite(seeds=tuple(range(10)))
    secs = time.perf_counter() - t0
    worst = max(r.error for r in results)
    ok = all(r.error < 1e-4 for r in results) and secs < 60
    report(1, ok, f"{len(results)} checks, worst rel err {worst:.2e} (< 1e-4), {secs:.1f}s (< 60s)")


def test_criterion_02_freeze_contract(report):
    t0 = time.perf_counter()
    model = SegModel(ModelConfig(), np.random.default_rng(7)).configure_peft()
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    opt = Adam([p for p in model.parameters() if not p.frozen], lr=1e-3)
    for k in range(5):
        pair = generate_sample(7, k)
        opt.zero_grad()
        seg_loss(model(Tensor(pair.image), pair.box), pair.mask).backward()
        opt.step()
    secs = time.perf_counter() - t0
    params = dict(model.named_parameters())
    backbone_same = all(params[n].data.tobytes() == before[n].tobytes() for n in params if params[n].frozen)
    changed = lambda key: any(params[n].data.tobytes() != before[n].tobytes() for n in params if key in n)
    ok = backbone_same and changed(".adapter.") and changed("decoder.") and secs < 10
    report(2, ok, f"backbone bit-identical={backbone_same}, adapters changed={changed('.adapter.')}, "
                  f"decoder changed={changed('decoder.')}, {secs:.2f}s (< 10s)")


def test_criterion_03_fusion_exact(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        a = ChAdapter(32, 8, 8, rng)
        for p in a.parameters():
            p.data[...] = rng.normal(scale=0.5, size=p.shape)
        f = Tensor(rng.normal(size=(32, 16, 16)))
        h, p, e = a.adapter_forward(f)
        worst = max(worst, float(np.abs(h.data - (p.data + e.data)).max()))
    report(3, worst == 0.0, f"max |h - (p + e)| over 20 random inputs = {worst:g}")


def test_criterion_04_distill_fixed_point(report):
    rng = np.random.default_rng(4)
    cfg = ModelConfig()
    teacher = Encoder(cfg, np.random.default_rng(1))
    for stage in teacher.stages:
        for p in stage.adapter.parameters():
            p.data[...] = rng.normal(scale=0.1, size=p.shape)
    student = Encoder(cfg, np.random.default_rng(2))
    student.load_state_dict(teacher.state_dict())
    necks = DistillNecks(cfg.stage_dims, cfg.stage_dims, ("D1", "D2", "D3"), rng).identity_init()
    img = Tensor(rng.uniform(size=(1, 64, 64)))
    zero = dskd_loss(teacher.taps(img), student.taps(img), necks).item()

    small = Encoder(RunConfig().student, rng)
    necks = DistillNecks(RunConfig().student.stage_dims, cfg.stage_dims, ("D1", "D2", "D3"), rng)
    tt, st = teacher.taps(img), small.taps(img)
    gap = abs(sum(t.item() for t in dskd_terms(tt, st, necks).values()) - dskd_loss(tt, st, necks).item())
    report(4, zero == 0.0 and gap <= 1e-12, f"copied-student loss {zero:g} (== 0), decomposition gap {gap:.1e} (<= 1e-12)")


def test_criterion_05_metric_oracles(report):
    rng = np.random.default_rng(5)
    exact, hd_gap = True, 0.0
    for a, b in random_masks(rng, 100, size=16):
        exact &= dice(a, b) == dice_sets(a, b) and iou(a, b) == iou_sets(a, b)
        hd_gap = max(hd_gap, abs(hausdorff(a, b) - hausdorff_pairwise(a, b)))
    p, q = np.zeros((8, 8), bool), np.zeros((8, 8), bool)
    p[0, 0], q[3, 4] = True, True
    hd = hausdorff(p, q)
    report(5, exact and hd_gap <= 1e-9 and hd == 5.0,
           f"Dice/IoU exact on 100 pairs={exact}, max HD gap {hd_gap:.1e} (<= 1e-9), HD((0,0),(3,4))={hd}")


def test_criterion_06_sobel_contract(report):
    bank = sobel_bank()
    zero_sum = all(k.sum() == 0.0 for k in bank.kernels)
    const = max(float(np.abs(sobel_response(Tensor(np.full((2, 8, 8), 3.5)), sobel_bank((d,))).data[:, 1:-1, 1:-1]).max())
                for d in DIRECTIONS)
    ramp = Tensor(np.tile(np.arange(10.0), (10, 1))[None])
    r = sobel_response(ramp, sobel_bank(("horizontal",))).data[0, 1:-1, 1:-1]
    ok = zero_sum and const == 0.0 and bool(np.all(r == 8.0))
    report(6, ok, f"kernels zero-sum={zero_sum}, constant response max {const:g}, "
                  f"ramp interior response in [{r.min():g}, {r.max():g}] (== 8)")


@pytest.mark.slow
def test_criterion_07_teacher_overfit(report, teacher_run):
    f = teacher_run.final
    ok = f["train_dice"] >= 0.90 and f["val_dice"] >= 0.80 and teacher_run.seconds < 900
    report(7, ok, f"train Dice {f['train_dice']:.4f} (>= 0.90), val Dice {f['val_dice']:.4f} (>= 0.80), "
                  f"{teacher_run.seconds:.0f}s (< 900s)")


@pytest.mark.slow
def test_criterion_08_distillation(report, teacher, distill_runs, toy_splits, capsys):
    run = distill_runs[("D1", "D2", "D3")]
    t_dice = _mean_dice(teacher, toy_splits["val"])
    s_dice = _mean_dice(run.student, toy_splits["val"])
    assert main(["params"]) == EXIT_OK
    printed = capsys.readouterr().out
    enc = {r["phase"]: r for r in param_table(RunConfig())}["encoder: student vs teacher"]
    ratio = run.final_loss / run.initial_loss
    ok = (s_dice >= t_dice - 0.05 and enc["ratio"] <= 0.30 and ratio <= 0.10
          and f"{100 * enc['ratio']:.2f}" in printed)
    report(8, ok, f"student val Dice {s_dice:.4f} vs teacher {t_dice:.4f} (gap <= 0.05), "
                  f"encoder params {enc['trainable']}/{enc['total']} = {100 * enc['ratio']:.2f}% (<= 30%), "
                  f"L_DSKD final/initial {ratio:.4f} (<= 0.10)")


@pytest.mark.slow
def test_criterion_09_ablation_trends(report, teacher_run, no_edge_run, distill_runs, toy_splits):
    four, none = teacher_run.final["train_dice"], no_edge_run.final["train_dice"]
    three = _mean_dice(distill_runs[("D1", "D2", "D3")].student, toy_splits["val"])
    one = _mean_dice(distill_runs[("D1",)].student, toy_splits["val"])
    ok = four >= none - 0.02 and three >= one - 0.01
    report(9, ok, f"edge train Dice 4-dir {four:.4f} vs 0-dir {none:.4f} (>= -0.02); "
                  f"DSKD val Dice 3-level {three:.4f} vs 1-level {one:.4f} (>= -0.01)")


@pytest.mark.slow
def test_criterion_10_reproducible_train(report, teacher_run, tmp_path):
    digests = []
    for name in ("a", "b"):
        assert main(["train", "--seed", "7", "--out", str(tmp_path / name)]) == EXIT_OK
        digests.append(file_sha256(tmp_path / name / "metrics.csv"))
    lib = file_sha256(teacher_run.out_dir / "metrics.csv")
    ok = digests[0] == digests[1]
    report(10, ok, f"two `train` runs: metrics.csv sha256 {digests[0][:12]} / {digests[1][:12]}, "
                   f"library run {lib[:12]} (identical={digests[0] == digests[1] == lib})")
