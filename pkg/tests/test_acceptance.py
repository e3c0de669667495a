"""Acceptance checks, one test per criterion.

Each test records a one-line verdict ("[PASS] C<n> ..." / "[FAIL] C<n> ...")
which the session summary prints, so the verdicts are visible even when
output capture is on.  Running this file directly prints the same lines:

    python tests/test_acceptance.py
"""
import functools
import json
import time

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from htcl import harness
from htcl import numcore as nc
from htcl.baselines import coral_loss, erm_loss
from htcl.config import ExperimentConfig, parse, serialize
from htcl.data import (DividingPattern, SyntheticSpec, generate_toy, load_dataset, load_labels,
                       load_matrix, load_pattern, save_dataset, save_labels, save_matrix,
                       save_pattern)
from htcl.hetero import (Stage1Config, batch_heterogeneity_loss, cross_dist, init_variance_models,
                         measure_H, run_stage1, train_variance_model, variance_loss, within_dist)
from htcl.invariant import (Stage2Config, alignment_loss, build_pairs, contrastive_loss, mmd,
                            predict_loss)
from htcl.numcore import MlpModel

import oracles
from gradcases import cases
from test_harness import TINY

RESULTS: list[str] = []
SEEDS = range(5)


def verdict(number: int, ok: bool, detail: str) -> bool:
    RESULTS.append(f"[{'PASS' if ok else 'FAIL'}] C{number} {detail}")
    return ok


# 1 ---------------------------------------------------------------------------------


def test_c1_gradient_contract():
    start = time.perf_counter()
    worst, worst_name = 0.0, ""
    all_cases = cases()
    for name, loss_fn, arrays in all_cases:
        err = nc.finite_difference_check(loss_fn, arrays)
        if err > worst:
            worst, worst_name = err, name
    elapsed = time.perf_counter() - start
    ok = len(all_cases) >= 100 and worst <= 1e-4 and elapsed < 120
    assert verdict(1, ok, f"gradient contract: {len(all_cases)} configs, worst rel err "
                          f"{worst:.2e} ({worst_name}), {elapsed:.1f}s (need >=100, <=1e-4, <120s)")


# 2 ---------------------------------------------------------------------------------


def test_c2_oracle_equivalence():
    worst = 0.0
    count = 0
    for n in range(2, 9):
        for d in range(1, 5):
            rng = np.random.default_rng(1000 + 10 * n + d)
            x = rng.normal(size=(n, d))
            other = rng.normal(size=(n, d)) * 1.7
            rows, orows = x.tolist(), other.tolist()
            checks = [
                (within_dist(x).item(), oracles.within(rows)),
                (cross_dist(x, other).item(), oracles.cross(rows, orows)),
            ]
            if n >= 2:
                checks.append((mmd(x, other).item(), oracles.mmd(rows, orows)))
            for _ in range(3):
                y = rng.integers(0, 2, size=n)
                e = rng.integers(0, 3, size=n)
                checks += [
                    (batch_heterogeneity_loss(x, y, e).item(),
                     oracles.heterogeneity(rows, y.tolist(), e.tolist())),
                    (contrastive_loss(x, build_pairs(y, e)).item(),
                     oracles.contrastive(rows, y.tolist(), e.tolist())),
                    (alignment_loss(x, e).item(), oracles.alignment(rows, e.tolist())),
                ]
            for got, want in checks:
                worst = max(worst, abs(got - want))
                count += 1
    assert verdict(2, worst <= 1e-9, f"oracle equivalence: {count} comparisons on groups <=8 rows, "
                                     f"<=4 dims, max abs diff {worst:.1e} (need <=1e-9)")


# 3 ---------------------------------------------------------------------------------


def _trained_H(dataset, pattern, config, seed):
    phi, w = init_variance_models(dataset.dim, dataset.num_classes, config, np.random.default_rng(seed))
    phi, w, _ = train_variance_model(phi, w, dataset, pattern, config, seed=seed)
    return measure_H(phi, dataset, pattern, config.batch_size, seed=seed)


def test_c3_metric_separates_planted_heterogeneity():
    start = time.perf_counter()
    config = Stage1Config()
    wins = 0
    for seed in range(20):
        data = generate_toy(SyntheticSpec(seed=seed, initial_pattern_mode="aligned"))
        rng = np.random.default_rng(seed)
        aligned = DividingPattern.of(data)
        random = DividingPattern(rng.integers(0, 2, size=data.n), 2)
        wins += _trained_H(data, aligned, config, seed) < _trained_H(data, random, config, seed)
    elapsed = time.perf_counter() - start
    ok = wins >= 19 and elapsed < 300
    assert verdict(3, ok, f"H(aligned) < H(random) in {wins}/20 trials, {elapsed:.0f}s "
                          f"(need >=19, <300s)")


# 4 ---------------------------------------------------------------------------------


def test_c4_stage1_recovery(fixtures_dir):
    pilot = json.loads((fixtures_dir / "stage1_pilot.json").read_text())
    threshold = pilot["threshold"]
    start = time.perf_counter()
    scores = []
    for seed in SEEDS:
        data = generate_toy(SyntheticSpec(seed=seed, initial_pattern_mode="mixed"))
        best, _ = run_stage1(data, DividingPattern.of(data), Stage1Config(T1=5, seed=seed))
        scores.append(adjusted_rand_score(data.latent_groups, best.assignment))
    elapsed = time.perf_counter() - start
    mean = float(np.mean(scores))
    ok = mean >= threshold and pilot["pilot_mean_ari"] >= threshold and elapsed < 600
    assert verdict(4, ok, f"Stage-1 recovery mean ARI {mean:.3f} over 5 seeds "
                          f"(pilot {pilot['pilot_mean_ari']:.3f}, need >={threshold}), {elapsed:.0f}s")


# 5-7: spurious benchmark -------------------------------------------------------------


def benchmark_config() -> ExperimentConfig:
    return ExperimentConfig().replace(**{"experiment.num_runs": len(SEEDS)})


@functools.lru_cache(maxsize=None)
def timed(kind: str, arg: str | None = None):
    start = time.perf_counter()
    cfg = benchmark_config()
    if kind == "htcl":
        report = harness.run_htcl(cfg)
    elif kind == "baseline":
        report = harness.run_baseline(cfg, arg)
    elif kind == "ablation":
        report = harness.run_ablation(cfg, arg)
    else:
        report = harness.run_plugin(cfg, arg)
    return report, time.perf_counter() - start


@pytest.mark.slow
def test_c5_ood_gain_over_erm():
    htcl, t_htcl = timed("htcl")
    erm, t_erm = timed("baseline", "erm")
    gap = htcl.test_mean - erm.test_mean
    elapsed = t_htcl + t_erm
    ok = gap >= 0.05 and elapsed < 900
    assert verdict(5, ok, f"OOD accuracy HTCL {htcl.test_mean:.4f} vs ERM {erm.test_mean:.4f} "
                          f"(gap {100 * gap:+.2f} pts, need >=+5.0), {elapsed:.0f}s")


@pytest.mark.slow
def test_c6_ablation_ordering():
    full, _ = timed("htcl")
    parts = []
    ok = True
    for variant in harness.ABLATIONS:
        report, _ = timed("ablation", variant)
        mean = report.test_mean
        ok &= full.test_mean >= mean and mean > 0.5
        parts.append(f"{variant} {mean:.4f}")
    assert verdict(6, ok, f"full HTCL {full.test_mean:.4f} vs " + ", ".join(parts)
                          + " (need full >= each, each > 0.5 chance)")


@pytest.mark.slow
def test_c7_plugin_gain():
    parts = []
    ok = True
    for method in harness.PLUGIN_METHODS:
        report, _ = timed("plugin", method)
        # accuracies are multiples of 1/n_test; compare at float resolution, not below it
        ok &= report.delta >= 0.01 - 1e-12
        parts.append(f"{method} {report.original.test_mean:.4f}->{report.generated.test_mean:.4f} "
                     f"({100 * report.delta:+.2f} pts)")
    assert verdict(7, ok, "plug-in " + "; ".join(parts) + " (need >=+1.0 each)")


# 8 ---------------------------------------------------------------------------------


def test_c8_reduction_identities():
    ok = True
    for seed in range(10):
        rng = np.random.default_rng(seed)
        phi = MlpModel.init((4, 8, 5), rng)
        w = MlpModel.init((5, 3), rng)
        x = rng.normal(size=(18, 4))
        y = np.tile([0, 1, 2], 6)
        e = np.repeat([0, 1], 9)
        reduced, _ = predict_loss(phi, w, x, y, e, Stage2Config(lambda_cont=0.0, lambda_mmd=0.0))
        erm = erm_loss(phi, w, x, y)
        params = phi.params + w.params
        ok &= reduced.item() == erm.item()
        ok &= all(np.array_equal(a, b) for a, b in
                  zip(nc.gradients(reduced, params), nc.gradients(erm, params)))
        lam = float(rng.uniform(0.1, 3))
        ok &= coral_loss(phi, w, x, y, e, lam).item() == \
            predict_loss(phi, w, x, y, e, Stage2Config(lambda_cont=0.0, lambda_mmd=lam))[0].item()
        ce = nc.softmax_cross_entropy(nc.forward(w, nc.forward(phi, x)), y)
        ok &= variance_loss(phi, w, x, y, e, 0.0).item() == ce.item()
    assert verdict(8, ok, "reduction identities: zero-weight predict == ERM (value and gradients), "
                          "CORAL == predict without contrastive, L_var(lambda1=0) == CE; 10 batches")


# 9 ---------------------------------------------------------------------------------


def _round_trips(tmp_path) -> list[str]:
    failures = []
    toy = generate_toy(SyntheticSpec(n_per_class_per_env=30, seed=9))
    save_dataset(toy, tmp_path / "d.csv")
    if not load_dataset(tmp_path / "d.csv").equals(toy):
        failures.append("dataset")
    pattern = DividingPattern(np.random.default_rng(0).integers(0, 3, size=toy.n), 3)
    save_pattern(pattern, tmp_path / "p.csv")
    if load_pattern(tmp_path / "p.csv", toy.n) != pattern:
        failures.append("pattern")
    save_matrix(toy.features * np.pi, tmp_path / "m.csv")
    if not np.array_equal(load_matrix(tmp_path / "m.csv"), toy.features * np.pi):
        failures.append("matrix")
    save_labels(toy.class_labels, tmp_path / "y.csv")
    if not np.array_equal(load_labels(tmp_path / "y.csv", toy.n), toy.class_labels):
        failures.append("labels")
    cfg = ExperimentConfig().replace(**{"stage2.lambda_cont": 0.1 + 0.2, "stage1.hidden": (7, 3)})
    if parse(serialize(cfg)) != cfg:
        failures.append("config")
    rng = np.random.default_rng(1)
    phi = MlpModel.init((3, 4, 2), rng)
    harness.save_models(tmp_path / "model.json", phi=phi)
    back = harness.load_models(tmp_path / "model.json")["phi"]
    if not all(np.array_equal(a.data, b.data) for a, b in zip(phi.params, back.params)):
        failures.append("model")
    return failures


def test_c9_determinism_and_bookkeeping(tmp_path):
    tiny = ExperimentConfig().replace(**TINY)
    harness._STAGE1_CACHE.clear()
    first = harness.run_htcl(tiny, tmp_path / "a")
    harness._STAGE1_CACHE.clear()
    second = harness.run_htcl(tiny, tmp_path / "b")
    same = json.dumps(first.metrics(), sort_keys=True) == json.dumps(second.metrics(), sort_keys=True)
    best_ok = all(r["best_H"] == min(r["H_trace"]) for r in first.runs)
    saved = json.loads((tmp_path / "a" / "htcl" / "report.json").read_text())
    report_ok = saved["runs"] == json.loads(json.dumps(first.runs))
    failures = _round_trips(tmp_path)
    sweep_ok = True
    one_run = tiny.replace(**{"experiment.num_runs": 1})
    for parameter, grid in harness.SWEEP_GRIDS.items():
        reports = harness.run_sweep(one_run, parameter, out_dir=tmp_path / f"sweep_{parameter}")
        rows = (tmp_path / f"sweep_{parameter}" / "sweep_summary.csv").read_text().splitlines()
        sweep_ok &= len(reports) == len(grid) == len(rows) - 1
    ok = same and best_ok and report_ok and not failures and sweep_ok
    assert verdict(9, ok, f"determinism {'ok' if same else 'BROKEN'}; best_H==min(trace) "
                          f"{best_ok}; round-trips {'all exact' if not failures else failures}; "
                          f"report JSON {report_ok}; default sweep grids {sweep_ok}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
