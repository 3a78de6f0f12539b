"""End-to-end acceptance runs at their stated tolerances.

Each test records one PASS/FAIL line, collected in the terminal summary.
"""
import itertools
import math
import time

import numpy as np
import pytest

from scorewatch import adcore as ad
from scorewatch.cli import load_scenario
from scorewatch.detect import cg_solve, linear_stat, segment_information, top_subset
from scorewatch.harness import (ScenarioConfig, arma_heterogeneity_study, null_distribution_check,
                                power_curve, runtime_benchmark)
from scorewatch.models import HmmSpec, ObservationSequence, hmm_loglik, linear_model

from conftest import ZOO, brute_force_hmm_loglik, random_stochastic, zoo_instance

pytestmark = pytest.mark.slow


def _scenario(name, **overrides):
    raw, _ = load_scenario(name)
    if "deltas" in overrides:
        raw.pop("delta_grid", None)
    if "bootstrap" in overrides:
        raw["test"] = dict(raw.get("test", {}), bootstrap=overrides.pop("bootstrap"))
    raw.update(overrides)
    return ScenarioConfig.from_dict(raw)


@pytest.fixture(scope="module")
def curves():
    return {name: power_curve(_scenario(name), cache_dir=False) for name in ("linear_p1", "linear_p5")}


def test_null_calibration(criterion):
    start = time.perf_counter()
    check = null_distribution_check(linear_model(3), n=500, tau=250, reps=500, seed=0)
    elapsed = time.perf_counter() - start
    ok = check.ks <= 0.08 and elapsed <= 120 and check.failures == 0
    criterion(1, ok, f"KS={check.ks:.4f} (<= 0.08), runtime {elapsed:.1f}s (<= 120s)")


def test_level_control(criterion):
    config = _scenario("linear_p1", deltas=[0.0])
    assert config.n == 400 and config.reps == 200 and config.program().dim == 21
    assert config.test.levels() == (0.025, 0.025) and config.test.card(21) == 4
    start = time.perf_counter()
    curve = power_curve(config, cache_dir=False)
    elapsed = time.perf_counter() - start
    fa = curve.freq["auto"][0]
    ok = fa <= 0.08 and elapsed <= 600 and not curve.partial
    criterion(2, ok, f"auto false alarm {fa:.3f} (<= 0.08), lin {curve.freq['lin'][0]:.3f}, "
                     f"scan {curve.freq['scan'][0]:.3f}, runtime {elapsed:.1f}s (<= 600s)")


def test_power_ordering(criterion, curves):
    p1, p5 = curves["linear_p1"], curves["linear_p5"]
    best = np.maximum(p1.freq["lin"], p1.freq["scan"])
    idx = np.flatnonzero(best >= 0.2)
    j1 = int(idx[0]) if idx.size else None
    if j1 is None:
        sparse_ok, sparse = False, "no delta reaches power 0.2"
    else:
        se = math.hypot(p1.stderr["lin"][j1], p1.stderr["scan"][j1])
        sparse_ok = p1.freq["scan"][j1] >= p1.freq["lin"][j1] - 2 * se
        sparse = (f"p=1 at delta={p1.deltas[j1]:.2f}: scan {p1.freq['scan'][j1]:.3f} "
                  f"vs lin {p1.freq['lin'][j1]:.3f} (2se={2 * se:.3f})")
    j5 = len(p5.deltas) // 2
    se5 = math.hypot(p5.stderr["lin"][j5], p5.stderr["scan"][j5])
    dense_ok = p5.freq["lin"][j5] >= p5.freq["scan"][j5] - 2 * se5
    top = min(p1.freq["auto"][-1], p5.freq["auto"][-1])
    ok = sparse_ok and dense_ok and top >= 0.9
    criterion(3, ok, f"{sparse}; p=5 at delta={p5.deltas[j5]:.2f}: lin {p5.freq['lin'][j5]:.3f} "
                     f"vs scan {p5.freq['scan'][j5]:.3f} (2se={2 * se5:.3f}); "
                     f"auto at delta_max {p1.freq['auto'][-1]:.3f}/{p5.freq['auto'][-1]:.3f} (>= 0.9)")


def test_bootstrap_calibration(criterion):
    config = _scenario("linear_p1", deltas=[0.0], bootstrap=200)
    curve = power_curve(config, cache_dir=False)
    fa = curve.freq["auto"][0]
    ok = 0.03 <= fa <= 0.10 and not curve.partial
    criterion(4, ok, f"bootstrap auto false alarm {fa:.3f} in [0.03, 0.10] "
                     f"(lin {curve.freq['lin'][0]:.3f}, scan {curve.freq['scan'][0]:.3f}, "
                     f"{int(curve.n_ok[0])} reps)")


def test_woodbury_cg_equivalence(criterion):
    rng = np.random.default_rng(55)
    gaps, excess = [], []
    for _ in range(20):
        d = int(rng.integers(30, 61))
        n = 1000
        prog = linear_model(d)
        theta = rng.standard_normal(d)
        after = theta + 0.3 * rng.standard_normal(d) / math.sqrt(d)
        data = prog.simulate(theta, n, rng, theta_after=after, tau=n // 2)
        theta_hat = prog.mle(data)
        tau = int(rng.integers(n // 4, 3 * n // 4))
        direct = linear_stat(prog, theta_hat, data, tau, "direct")
        cg = linear_stat(prog, theta_hat, data, tau, "cg")
        gaps.append(abs(cg - direct) / abs(direct))
        ws = ad.Workspace(prog, theta_hat, data)
        z = rng.standard_normal(d)
        for s, t in ((1, tau), (tau + 1, n)):
            res = cg_solve(segment_information(prog, theta_hat, data, s, t, ws), z, full_output=True)
            excess.append(res.iterations - d)
    ok = max(gaps) <= 1e-6 and max(excess) < 0
    criterion(5, ok, f"max relative gap {max(gaps):.2e} (<= 1e-6), "
                     f"max iterations minus d {max(excess)} (< 0)")


def _subset_value(a, alpha, T):
    T = list(T)
    return float(alpha[T] @ np.linalg.solve(a[np.ix_(T, T)], alpha[T]))


def test_subset_selection_bound(criterion):
    rng = np.random.default_rng(8)
    d = 8
    violations = mismatches = 0
    worst = 0.0
    for p in (1, 2, 3):
        subsets = list(itertools.combinations(range(d), p))
        for _ in range(100):
            m = rng.standard_normal((d, d))
            a = m @ m.T / d + 0.1 * np.eye(d)
            alpha = rng.standard_normal(d)
            exact = max(_subset_value(a, alpha, T) for T in subsets)
            approx = _subset_value(a, alpha, top_subset(alpha**2 / np.diag(a), p))
            w = np.linalg.eigvalsh(a)
            bound = 2 * (1 / w[0] - 1 / w[-1]) * (alpha @ alpha)
            gap = exact - approx
            worst = max(worst, gap / bound)
            violations += not (-1e-12 <= gap <= bound + 1e-12)
            a_diag = np.diag(np.exp(rng.uniform(-1, 1, d)))
            best = max(subsets, key=lambda T: _subset_value(a_diag, alpha, T))
            mismatches += tuple(sorted(top_subset(alpha**2 / np.diag(a_diag), p))) != best
    ok = violations == 0 and mismatches == 0
    criterion(6, ok, f"{violations} bound violations, {mismatches} diagonal mismatches over 300 "
                     f"instances (largest gap/bound {worst:.3f})")


def test_hmm_oracle(criterion):
    rng = np.random.default_rng(7)
    worst_rel = worst_phi = 0.0
    for n_states, n in ((2, 3), (3, 5), (3, 6)):
        for _ in range(5):
            q = random_stochastic(rng, n_states)
            means = rng.standard_normal(n_states)
            sig = rng.uniform(0.5, 1.5, n_states)
            init = rng.dirichlet(np.ones(n_states))
            spec = HmmSpec(q, means, sig, init)
            prog = hmm_loglik(spec)
            y = rng.standard_normal(n)
            data = ObservationSequence(y)
            oracle = brute_force_hmm_loglik(q, means, sig, init, y)
            worst_rel = max(worst_rel, abs(ad.evaluate(prog, spec.theta, data) - oracle) / abs(oracle))
            _, phi = prog.forward_filter(spec.theta, data)
            worst_phi = max(worst_phi, float(np.max(np.abs(phi.sum(axis=1) - 1.0))))
    ok = worst_rel <= 1e-10 and worst_phi <= 1e-12
    criterion(7, ok, f"max relative error {worst_rel:.2e} (<= 1e-10), "
                     f"max normalization error {worst_phi:.2e} (<= 1e-12)")


def test_autodiff_correctness(criterion):
    worst_fd = worst_hvp = 0.0
    for kind in ZOO:
        rng = np.random.default_rng(sum(map(ord, kind)))
        for _ in range(50):
            prog, theta, data = zoo_instance(kind, rng)
            g = ad.gradient(prog, theta, data)
            fd = ad.finite_difference_gradient(lambda th: ad.evaluate(prog, th, data), theta)
            worst_fd = max(worst_fd, np.linalg.norm(g - fd) / (1.0 + np.linalg.norm(g)))
            dense = ad.full_hessian(prog, theta, data)
            v = rng.standard_normal(prog.dim)
            ref = dense @ v
            hv = ad.hvp(prog, theta, data, v=v)
            worst_hvp = max(worst_hvp, np.linalg.norm(hv - ref) / (1.0 + np.linalg.norm(ref)))
    ok = worst_fd <= 1e-5 and worst_hvp <= 1e-8
    criterion(8, ok, f"max gradient error {worst_fd:.2e} (<= 1e-5), "
                     f"max hvp error {worst_hvp:.2e} (<= 1e-8) over 5 models x 50 draws")


def test_arma_heterogeneity(criterion):
    rep = arma_heterogeneity_study((3, 2), n=1000, reps=100, seed=0)
    fu, fr = rep.fa_unrestricted, rep.fa_restricted
    ok = fu["lin"] >= 0.3 and all(fr[t] <= 0.1 for t in ("lin", "scan", "auto"))
    criterion(9, ok, f"unrestricted lin {fu['lin']:.2f} (>= 0.3); restricted lin {fr['lin']:.2f}, "
                     f"scan {fr['scan']:.2f}, auto {fr['auto']:.2f} (<= 0.1); "
                     f"{rep.failures} failed reps")


def test_runtime_ordering(criterion):
    (row,) = runtime_benchmark("linear", n_grid=(2000,), d_grid=(500,), reps=5)
    (mlp,) = runtime_benchmark("mlp", n_grid=(2000,), d_grid=(10,), reps=5)
    ordering = "CG slower" if mlp.cg_mean > mlp.direct_mean else "CG faster"
    ok = row.cg_mean < row.direct_mean and row.cg_failures == 0
    criterion(10, ok, f"linear d=500 n=2000: CG {row.cg_mean:.3f}s vs direct {row.direct_mean:.3f}s; "
                      f"reported only, mlp dim {mlp.dim}: CG {mlp.cg_mean:.3f}s vs direct "
                      f"{mlp.direct_mean:.3f}s ({ordering})")


def test_local_alternative_drift(criterion):
    check = null_distribution_check(linear_model(3), n=2000, reps=300, seed=0, h=(2.0, 2.0, 2.0))
    target = check.expected_mean
    rel = abs(check.mean - target) / target
    ok = rel <= 0.15 and math.isclose(target, 6.0, rel_tol=1e-12)
    criterion(11, ok, f"mean {check.mean:.3f} vs {target:.3f} (relative {rel:.3f} <= 0.15)")
