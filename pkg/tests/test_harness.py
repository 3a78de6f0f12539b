import csv
import json
import math

import numpy as np
import pytest

from scorewatch import harness
from scorewatch.detect import TestConfig
from scorewatch.errors import ConfigError, DomainError, SizeError
from scorewatch.harness import (BaseParameter, PowerCurve, ScenarioConfig, arma_heterogeneity_study,
                                draw_parameter, fixed_alternative_check, hmm_transition,
                                null_distribution_check, plant_change, power_curve, run_cells,
                                runtime_benchmark, simulate, substream, write_timing_csv)
from scorewatch.models import ArmaModel, HmmSpec, LinearModel, TopicModel, hmm_loglik

SMALL = {"kind": "linear", "dim": 3, "params": {"sigma": 1.0}}
HMM3 = hmm_loglik(HmmSpec(np.full((3, 3), 1 / 3), np.arange(3.0)))


def _small_config(**kw):
    base = dict(model=SMALL, n=120, deltas=(0.0, 1.5), reps=4, seed=5)
    base.update(kw)
    return ScenarioConfig(**base)


# -- parameters and planted changes ---------------------------------------------------------


def test_zero_jump_is_identity():
    prog = LinearModel(5)
    base = draw_parameter(prog, substream(0, 1))
    theta0, theta1 = plant_change(prog, base, 2, 0.0)
    np.testing.assert_array_equal(theta0, theta1)


def test_sparse_jump_count():
    prog = LinearModel(101)
    base = draw_parameter(prog, substream(0, 2))
    theta0, theta1 = plant_change(prog, base, 20, 0.3)
    diff = theta1 - theta0
    assert np.count_nonzero(diff) == 20
    np.testing.assert_allclose(diff[:20], 0.3)


def test_arma_jump_shifts_roots():
    prog = ArmaModel(3, 2)
    base = draw_parameter(prog, substream(0, 3))
    assert np.all((base.ar_roots > 1.5) & (base.ar_roots < 3.0))
    theta0, theta1 = plant_change(prog, base, 1, 0.4)
    # construction polynomial x^3 - phi_1 x^2 - ... has roots 1 / (lambda_i + delta)
    roots = np.sort(np.roots(np.concatenate([[1.0], -theta1[:3]])).real)
    np.testing.assert_allclose(roots, np.sort(1.0 / (base.ar_roots + 0.4)), rtol=1e-10)
    np.testing.assert_array_equal(theta1[3:], theta0[3:])


def test_arma_jump_leaving_stationarity():
    prog = ArmaModel(1, 0)
    base = BaseParameter(np.array([1 / 1.6]), np.array([1.6]), np.zeros(0))
    with pytest.raises(DomainError):
        plant_change(prog, base, 1, -0.7)


def test_hmm_jump_moves_first_row_mass():
    prog = HMM3
    base = draw_parameter(prog, substream(0, 4))
    theta0, theta1 = plant_change(prog, base, 1, 0.05)
    q0, _ = prog.unpack(theta0)
    q1, _ = prog.unpack(theta1)
    assert q1[0, 0] == pytest.approx(q0[0, 0] - 0.05)
    assert q1[0, 2] == pytest.approx(q0[0, 2] + 0.05)
    np.testing.assert_allclose(q1[1:], q0[1:])
    np.testing.assert_allclose(q1.sum(axis=1), 1.0, atol=1e-12)


def test_hmm_jump_leaving_simplex():
    prog = hmm_loglik(HmmSpec(np.full((2, 2), 0.5), np.arange(2.0)))
    base = draw_parameter(prog, substream(0, 5))
    with pytest.raises(DomainError):
        plant_change(prog, base, 1, 2.0)


def test_sparsity_bounds():
    prog = LinearModel(3)
    base = draw_parameter(prog, substream(0, 6))
    with pytest.raises(ConfigError):
        plant_change(prog, base, 4, 0.1)


def test_hmm_transition_rows():
    q = hmm_transition(4, substream(1))
    np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(q >= 1 / 8)


def test_topic_parameter_draw():
    prog = TopicModel(3, (0, 1, 2, 0, 1, 2))
    base = draw_parameter(prog, substream(2))
    q, g = prog.unpack(base.theta)
    np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-12)
    for c in range(3):
        assert g[prog.members(c)].sum() == pytest.approx(1.0)


# -- simulation -------------------------------------------------------------------------------


@pytest.mark.parametrize("model", [LinearModel(3), ArmaModel(2, 1), HMM3])
def test_zero_jump_simulation_equals_null_draw(model):
    base = draw_parameter(model, substream(0, 7))
    theta0, theta1 = plant_change(model, base, 1, 0.0)
    a = simulate(model, theta0, theta1, 50, 100, 11)
    b = model.simulate(theta0, 100, substream(11))
    np.testing.assert_array_equal(a.values, b.values)


def _batch_means_se(x, batches=50):
    m = np.array([b.mean() for b in np.array_split(x, batches)])
    return m.std(ddof=1) / math.sqrt(batches)


def test_hmm_stationary_frequencies():
    rng = substream(0, 8)
    q = hmm_transition(3, rng)
    spec = HmmSpec(q, np.arange(3.0))
    prog = hmm_loglik(spec)
    data = simulate(prog, spec.theta, spec.theta, 0, 100_000, 12)
    # emission scales are at most 0.1 around integer means, so rounding recovers the states
    states = np.rint(data.values).astype(int)
    w, v = np.linalg.eig(q.T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1))])
    pi /= pi.sum()
    for s in range(3):
        ind = (states == s).astype(float)
        assert abs(ind.mean() - pi[s]) <= 3 * _batch_means_se(ind)


def test_ar1_lag_zero_autocovariance():
    prog = ArmaModel(1, 0, sigma=0.1)
    phi = 0.6
    data = prog.simulate(np.array([phi]), 100_000, substream(0, 9))
    x = np.concatenate([data.prefix, data.values])
    assert np.var(x) == pytest.approx(0.01 / (1 - phi**2), rel=0.05)


def test_dependent_models_carry_state_across_tau():
    prog = ArmaModel(1, 0, sigma=0.1)
    data = simulate(prog, np.array([0.9]), np.array([0.0]), 500, 1000, 3)
    x = data.values
    # the first post-change value still depends on the last pre-change one
    lag1 = np.corrcoef(x[:499], x[1:500])[0, 1]
    after = np.corrcoef(x[501:-1], x[502:])[0, 1]
    assert lag1 > 0.8 and abs(after) < 0.15


def test_simulate_tau_check():
    with pytest.raises(ConfigError):
        simulate(LinearModel(2), np.zeros(2), np.zeros(2), 200, 100, 0)


# -- scenario configs and power curves ------------------------------------------------------


def test_scenario_defaults_and_validation():
    cfg = _small_config()
    assert cfg.tau == 60
    with pytest.raises(ConfigError):
        _small_config(deltas=(0.5, 1.0))
    with pytest.raises(ConfigError):
        _small_config(p=4)
    with pytest.raises(ConfigError):
        _small_config(tau=5)
    with pytest.raises(ConfigError):
        _small_config(restrict=(0, 9))


def test_scenario_from_dict():
    cfg = ScenarioConfig.from_dict({
        "model": SMALL, "n": 100, "reps": 3, "delta_grid": {"max": 1.0, "num": 5},
        "test": {"method": "cg", "tau_range": [0.2, 0.8]}, "restrict": [0, 1]})
    np.testing.assert_allclose(cfg.deltas, [0, 0.25, 0.5, 0.75, 1.0])
    assert cfg.test.method == "cg" and cfg.test_config().restrict == (0, 1)
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"model": SMALL, "bogus": 1})
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"model": SMALL, "test": {"bogus": 1}})


def test_config_hash_stable_and_sensitive():
    a, b = _small_config(), _small_config()
    assert a.config_hash() == b.config_hash()
    assert len(a.config_hash()) == 16
    assert _small_config(seed=6).config_hash() != a.config_hash()


def test_power_curve_reproducible_and_well_formed(tmp_path):
    cfg = _small_config()
    a = power_curve(cfg, cache_dir=False)
    b = power_curve(cfg, cache_dir=False)
    assert a.to_json(include_records=True) == b.to_json(include_records=True)
    for t in harness.TESTS:
        f = a.freq[t]
        assert np.all((f >= 0) & (f <= 1))
        np.testing.assert_allclose(a.stderr[t], np.sqrt(f * (1 - f) / a.n_ok))
    assert a.freq["auto"][1] == 1.0
    assert not a.partial
    a.write_csv(tmp_path / "pc.csv")
    rows = list(csv.reader((tmp_path / "pc.csv").open()))
    assert rows[0][0] == "delta" and rows[0][-1] == "config_hash"
    assert all(r[-1] == cfg.config_hash() for r in rows[1:])
    a.write_json(tmp_path / "pc.json")
    assert json.loads((tmp_path / "pc.json").read_text())["config_hash"] == cfg.config_hash()


def test_parallel_matches_serial():
    cfg = _small_config()
    cells = [(r, j) for j in range(2) for r in range(4)]
    assert run_cells(cfg, cells, jobs=2) == run_cells(cfg, cells, jobs=1)


def test_cache_resume(tmp_path, monkeypatch):
    cfg = _small_config()
    full = power_curve(cfg, cache_dir=tmp_path)
    files = sorted((tmp_path / cfg.config_hash()).glob("*.json"))
    assert len(files) == 8
    files[0].unlink()
    calls = []
    real = harness._run_rep
    monkeypatch.setattr(harness, "_run_rep", lambda c, r, j: calls.append((r, j)) or real(c, r, j))
    again = power_curve(cfg, cache_dir=tmp_path)
    assert len(calls) == 1
    assert again.to_json() == full.to_json()


def test_cache_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SCOREWATCH_CACHE", str(tmp_path))
    cfg = _small_config(reps=1)
    power_curve(cfg)
    assert (tmp_path / cfg.config_hash()).is_dir()


def test_partial_flag_on_failures():
    # negative root shifts push ARMA(1,0) roots inside the unit disk for most draws
    cfg = ScenarioConfig(model={"kind": "arma", "params": {"r": 1, "q": 0}}, n=100, deltas=(0.0, -1.0),
                         reps=10, seed=0, test=TestConfig(accept_unconverged=True))
    pc = power_curve(cfg, cache_dir=False)
    assert pc.failures[0] == 0 and pc.failures[1] > 0
    assert pc.partial
    assert pc.n_ok[1] + pc.failures[1] == 10


def test_from_records_counts_fit_failures():
    cfg = _small_config(reps=2)
    recs = [{"rep": 0, "j": 0, "psi_lin": True, "psi_scan": False, "psi_auto": True, "fit_failed": True},
            {"rep": 1, "j": 0, "error": "DomainError: x"},
            {"rep": 0, "j": 1, "psi_lin": False, "psi_scan": False, "psi_auto": False},
            {"rep": 1, "j": 1, "psi_lin": False, "psi_scan": True, "psi_auto": True}]
    pc = PowerCurve.from_records(cfg, recs)
    assert pc.n_ok.tolist() == [1, 2] and pc.failures.tolist() == [1, 0]
    assert pc.fit_failed.tolist() == [1, 0]
    assert pc.freq["auto"].tolist() == [1.0, 0.5]
    assert pc.partial


# -- property checks -------------------------------------------------------------------------


def test_null_check_central_case():
    res = null_distribution_check(SMALL, n=300, reps=60, seed=1)
    assert res.noncentrality == 0.0 and res.expected_mean == 3
    assert res.failures == 0 and res.stats.size == 60
    assert abs(res.mean - 3) < 1.0
    assert res.ks < 0.2


def test_null_check_drift_noncentrality():
    res = null_distribution_check(SMALL, n=400, reps=5, seed=2, h=[2.0, 0.0, 0.0])
    assert res.noncentrality == pytest.approx(0.25 * 4.0)
    res0 = null_distribution_check(SMALL, n=400, reps=5, seed=2, h=0.0)
    assert res0.noncentrality == 0.0


def test_fixed_alternative_ratio_settles():
    out = fixed_alternative_check(SMALL, ns=(500, 1000, 2000), delta=0.5, reps=20, seed=0)
    assert all(r <= 0.1 for r in out["rel_change"])
    # limit of R/n for a mean shift with identity information is lambda (1 - lambda) delta^2
    assert out["means"][-1] == pytest.approx(0.25 * 0.25, rel=0.15)


def test_benchmark_single_dimension(tmp_path):
    rows = runtime_benchmark("linear", n_grid=(200,), d_grid=(1,), reps=2)
    assert len(rows) == 1
    row = rows[0]
    assert row.dim == 1 and row.cg_failures == 0 and row.direct_failures == 0
    assert row.rel_diff < 1e-6
    assert row.cg_iterations == 1
    write_timing_csv(rows, tmp_path / "t.csv", "h")
    hdr = next(csv.reader((tmp_path / "t.csv").open()))
    assert {"direct_mean", "direct_stderr", "cg_mean", "cg_stderr", "config_hash"} <= set(hdr)


def test_benchmark_mlp_reports_both():
    rows = runtime_benchmark("mlp", n_grid=(200,), d_grid=(4,), reps=2)
    assert rows[0].dim == 13
    assert math.isfinite(rows[0].direct_mean) and math.isfinite(rows[0].cg_mean)


def test_benchmark_errors():
    with pytest.raises(ConfigError):
        runtime_benchmark("linear", n_grid=(), d_grid=(5,))
    with pytest.raises(SizeError):
        runtime_benchmark("linear", n_grid=(10**6,), d_grid=(100,))
    with pytest.raises(ConfigError):
        runtime_benchmark("svm", n_grid=(10,), d_grid=(2,))


def test_heterogeneity_study_smoke():
    rep = arma_heterogeneity_study((3, 2), n=300, reps=3, seed=1)
    js = rep.to_json()
    assert set(js["fa_unrestricted"]) == {"lin", "scan", "auto"}
    assert 0 <= js["ar_only_subsets"] <= 1
    assert js["median_log10_cond"] > js["median_log10_cond_restricted"]
    json.dumps(js, allow_nan=False)
