"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import time

import numpy as np
import pytest

from mspn import checks, io
from mspn.engine import ParamSet
from mspn.objectives import loss_l1l2, loss_silog
from mspn.pipeline import RefineConfig, iteration_count, refine
from mspn.trainer import eval_scene_seeds, evaluate_holefill, evaluate_sweep, make_sample

LEVELS = (20, 50, 200)
N_SCENES = 20


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

    return emit


@pytest.fixture(scope="module")
def sweep(trained_model):
    return evaluate_sweep(
        trained_model.params, LEVELS, N_SCENES, seed=0,
        train_cfg=trained_model.train_cfg, model_cfg=trained_model.model_cfg,
    )


def test_1_oracle_equivalence(report):
    start = time.process_time()
    err = checks.oracle_equivalence(50, seed=0, sizes=(1, 3, 5, 13))
    secs = time.process_time() - start
    ok = err <= 1e-6 and secs < 30
    report(1, ok, f"max |step - reference| = {err:.2e} over 50 instances in {secs:.1f}s CPU")
    assert ok


def test_2_attention_invariants(report):
    stats = checks.attention_invariants(1000, seed=0)
    ok = (
        stats.max_sum_error <= 1e-5
        and stats.min_weight >= 0
        and stats.window_violations == 0
        and stats.mask_min >= 0
        and stats.mask_max <= 1
    )
    report(2, ok, f"sum error {stats.max_sum_error:.1e}, min weight {stats.min_weight:.1e}, "
                  f"window violations {stats.window_violations}, mask in [{stats.mask_min:.3f}, {stats.mask_max:.3f}]")
    assert ok


def test_3_mask_dilation(report):
    bad = checks.dilation_mismatches(20, sizes=(3, 13), seed=0)
    report(3, bad == 0, f"{bad} support mismatches against BFS dilation (20 patterns, p in {{3, 13}})")
    assert bad == 0


def test_4_seed_fidelity(trained_model, report):
    cfg = RefineConfig()
    mismatches = runs = 0
    for scene_seed in eval_scene_seeds(N_SCENES):
        for level in LEVELS:
            s = make_sample(scene_seed, level, "points", trained_model.train_cfg)
            pred, _ = refine(s.image, s.sparse, s.d0, trained_model.params, cfg, trained_model.model_cfg.guidance)
            seeds = s.sparse > 0
            mismatches += not np.array_equal(pred.data[seeds], s.sparse[seeds])
            runs += 1
    report(4, mismatches == 0, f"{mismatches} of {runs} sweep runs differ from S at a seed pixel")
    assert mismatches == 0


def test_5_scheduler(report):
    a = iteration_count(500, 228, 304, RefineConfig(p=13, kappa=2.0)).n_layer1
    b = iteration_count(10, 228, 304, RefineConfig(p=13, kappa=2.0)).n_layer1
    grid = np.unique(np.linspace(1, 228 * 304, 50).astype(int))
    counts = [iteration_count(int(s), 228, 304).n_layer1 for s in grid]
    monotone = all(y <= x for x, y in zip(counts, counts[1:]))
    ok = a == 6 and b == 30 and monotone and len(grid) == 50
    report(5, ok, f"s=500 -> {a}, s=10 -> {b}, non-increasing over 50-point grid: {monotone}")
    assert ok


def test_6_gradient_checks(report):
    start = time.process_time()
    errs = checks.gradcheck_components("tiny", seed=0)
    secs = time.process_time() - start
    worst = max(errs.values())
    ok = worst < 1e-3 and secs < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    report(6, ok, f"{detail}; {secs:.1f}s CPU")
    assert ok


def test_7_loss_correctness(report):
    l12 = loss_l1l2(np.array([1.0, 3.0]), np.array([1.0, 1.0])).item()
    gt = np.random.default_rng(0).uniform(0.5, 10, 64)
    silog = loss_silog(np.e * gt, gt, alpha=10.0, lam=0.85).item()
    invariant = loss_silog(2.7 * gt, gt, lam=1.0).item()
    ok = l12 == 3.0 and abs(silog - 3.8730) <= 1e-3 and abs(invariant) <= 1e-9
    report(7, ok, f"l1l2 {l12!r}, silog {silog:.5f}, silog(c*gt, lam=1) {invariant:.1e}")
    assert ok


def test_8_sdr_trend(trained_model, sweep, report):
    base = sweep.baseline.rmse
    rmse = [r.rmse for r in sweep.reports]
    gains = [1 - r / base for r in rmse]
    beats = all(g >= 0.30 for g in gains)
    monotone = all(b <= a for a, b in zip(rmse, rmse[1:]))
    in_budget = trained_model.seconds <= 30 * 60
    ok = beats and monotone and in_budget
    rows = ", ".join(f"s={lv}: {r:.4f} ({g:+.0%})" for lv, r, g in zip(LEVELS, rmse, gains))
    report(8, ok, f"D0 {base:.4f}; {rows}; training {trained_model.seconds / 60:.1f} min CPU")
    assert ok


def test_9_mask_update_ablation(trained_model, sweep, report):
    frozen = evaluate_sweep(
        trained_model.params, [LEVELS[0]], N_SCENES, seed=0,
        train_cfg=trained_model.train_cfg, model_cfg=trained_model.model_cfg,
        refine_cfg=RefineConfig(mask_update=False),
    )
    full_rmse, frozen_rmse = sweep.reports[0].rmse, frozen.reports[0].rmse
    degradation = frozen_rmse / full_rmse - 1
    ok = degradation >= 0.10
    report(9, ok, f"s={LEVELS[0]}: full {full_rmse:.4f}, frozen mask {frozen_rmse:.4f} ({degradation:+.0%})")
    assert ok


def test_10_hole_filling(trained_model, report):
    result = evaluate_holefill(
        trained_model.hole_params, N_SCENES, seed=0,
        train_cfg=trained_model.train_cfg, model_cfg=trained_model.model_cfg,
    )
    ok = result.wins >= 15
    report(10, ok, f"model beats D0 inside the hole on {result.wins}/{N_SCENES} scenes "
                   f"(mean {result.model.rmse:.4f} vs {result.baseline.rmse:.4f})")
    assert ok


def test_11_determinism_and_serialization(trained_model, sweep, tmp_path, report):
    again = evaluate_sweep(
        trained_model.params, LEVELS, N_SCENES, seed=0,
        train_cfg=trained_model.train_cfg, model_cfg=trained_model.model_cfg,
    )
    same_sweep = again.csv().encode() == sweep.csv().encode() and again.table() == sweep.table()
    trained_model.params.save(tmp_path / "p.bin")
    loaded = ParamSet.load(tmp_path / "p.bin")
    same_params = loaded.equal(trained_model.params) and loaded.to_bytes() == trained_model.params.to_bytes()
    depth = np.random.default_rng(0).uniform(0.5, 10, (32, 32)).astype(np.float32)
    io.write_pfm(tmp_path / "d.pfm", depth)
    same_pfm = np.array_equal(io.read_pfm(tmp_path / "d.pfm").view(np.uint32), depth.view(np.uint32))
    ok = same_sweep and same_params and same_pfm
    report(11, ok, f"sweep byte-identical {same_sweep}, ParamSet round trip {same_params}, PFM round trip {same_pfm}")
    assert ok
