import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scorewatch import adcore as ad
from scorewatch.errors import ConfigError, ConvergenceError, DataError, DegeneracyError, DomainError
from scorewatch.models import (ArmaModel, ArmaSpec, HmmSpec, ObservationSequence, TopicModelSpec,
                               arma_loglik, coefficients_from_roots, default_sigmas, fit_mle,
                               hmm_loglik, linear_model, mlp_model, topic_model_loglik)
from scorewatch.models.io import load_data, load_model_spec, program_from_spec, save_data, spec_to_json

from conftest import brute_force_hmm_loglik, random_stochastic


# -- linear and MLP -----------------------------------------------------------


def test_linear_null_point_log_density(rng):
    prog = linear_model(3)
    cov = rng.standard_normal((5, 2))
    data = ObservationSequence(np.zeros(5), cov)
    terms = ad.Workspace(prog, np.zeros(3), data).terms
    np.testing.assert_allclose(terms, -0.5 * np.log(2 * np.pi), rtol=1e-15)


def test_linear_covariate_mismatch(rng):
    prog = linear_model(3)
    with pytest.raises(DataError):
        ad.evaluate(prog, np.zeros(3), ObservationSequence(np.zeros(4), rng.standard_normal((4, 3))))


def test_linear_mle_recovers_truth_at_full_size():
    rng = np.random.default_rng(5)
    prog = linear_model(101)
    theta0 = rng.standard_normal(101)
    data = prog.simulate(theta0, 1000, rng)
    x = np.hstack([np.ones((1000, 1)), data.covariates])
    ols = np.linalg.solve(x.T @ x, x.T @ data.values)
    np.testing.assert_allclose(prog.mle(data), ols, rtol=1e-9, atol=1e-12)
    assert np.linalg.norm(ols - theta0) / np.linalg.norm(theta0) <= 0.1
    assert np.max(np.abs(ad.gradient(prog, ols, data))) <= 1e-8


@pytest.mark.parametrize("seed", range(20))
def test_fit_mle_linear_matches_ols(seed):
    rng = np.random.default_rng(seed)
    prog = linear_model(5)
    data = prog.simulate(rng.standard_normal(5), 80, rng)
    x = np.hstack([np.ones((80, 1)), data.covariates])
    ols = np.linalg.lstsq(x, data.values, rcond=None)[0]
    fit = fit_mle(prog, data, init=np.zeros(5), tol=1e-9)
    np.testing.assert_allclose(np.asarray(fit), ols, rtol=1e-6, atol=1e-9)
    assert fit.grad_norm <= 1e-9


def test_monitor_sigma_layout(rng):
    prog = linear_model(2, sigma=0.5, monitor_sigma=True)
    assert prog.dim == 3
    theta = np.array([0.1, -0.2, np.log(0.5)])
    data = prog.simulate(theta, 30, rng)
    fixed = linear_model(2, sigma=0.5)
    assert ad.evaluate(prog, theta, data) == pytest.approx(ad.evaluate(fixed, theta[:2], data), rel=1e-12)


@pytest.mark.parametrize("r, d", [(2, 5), (6, 25), (45, 1035)])
def test_mlp_dimension(r, d):
    m = r // 2
    assert mlp_model(r).dim == d == r * m + 2 * m + 1


def test_mlp_matches_numpy_forward(rng):
    prog = mlp_model(4)
    theta = rng.standard_normal(prog.dim)
    data = prog.simulate(theta, 25, rng)
    a1 = theta[:8].reshape(4, 2)
    b1, a2, b2 = theta[8:10], theta[10:12], theta[12]
    pred = np.tanh(data.covariates @ a1 + b1) @ a2 + b2
    expected = -0.5 * np.sum((data.values - pred) ** 2) - 12.5 * np.log(2 * np.pi)
    assert ad.evaluate(prog, theta, data) == pytest.approx(expected, rel=1e-12)


def test_mlp_needs_two_inputs():
    with pytest.raises(ConfigError):
        mlp_model(1)


# -- ARMA -----------------------------------------------------------------------


def _gauss_const(sigma):
    return 0.5 * np.log(2 * np.pi) + np.log(sigma)


def test_arma_zero_coefficients(rng):
    prog = ArmaModel(2, 1)
    x = rng.standard_normal(30)
    data = ObservationSequence(x[2:], prefix=x[:2])
    expected = -0.5 * np.sum(x[2:] ** 2) / 0.01 - 28 * _gauss_const(0.1)
    assert ad.evaluate(prog, np.zeros(3), data) == pytest.approx(expected, rel=1e-12)


def test_pure_ar_matches_explicit_residuals(rng):
    phi = np.array([0.5, -0.2, 0.1])
    prog = ArmaModel(3, 0, sigma=1.0)
    x = rng.standard_normal(40)
    data = ObservationSequence(x[3:], prefix=x[:3])
    eps = np.array([x[t] - phi @ x[t - 3:t][::-1] for t in range(3, 40)])
    np.testing.assert_allclose(prog.residuals(phi, data), eps, rtol=0, atol=1e-15)
    expected = -0.5 * np.sum(eps**2) - 37 * _gauss_const(1.0)
    assert ad.evaluate(prog, phi, data) == pytest.approx(expected, rel=1e-12)


def test_arma_residual_recursion(rng):
    phi, varphi = np.array([0.4, 0.1]), np.array([0.3])
    prog = ArmaModel(2, 1, sigma=1.0)
    x = rng.standard_normal(25)
    data = ObservationSequence(x[2:], prefix=x[:2])
    eps = np.zeros(25)
    for t in range(2, 25):
        eps[t] = x[t] - phi[0] * x[t - 1] - phi[1] * x[t - 2] - varphi[0] * eps[t - 1]
    theta = np.concatenate([phi, varphi])
    expected = -0.5 * np.sum(eps[2:] ** 2) - 23 * _gauss_const(1.0)
    assert ad.evaluate(prog, theta, data) == pytest.approx(expected, rel=1e-12)


def test_arma_order_check():
    with pytest.raises(ConfigError):
        ArmaModel(1, 2)


def test_root_construction_round_trip(rng):
    lam, mu = rng.uniform(1.5, 3, 3), rng.uniform(1.5, 3, 2)
    phi, varphi = coefficients_from_roots(lam, mu)
    # AR operator 1 - sum phi_i z^i vanishes at z = lambda_i
    for z in lam:
        assert abs(1 - sum(phi[i] * z ** (i + 1) for i in range(3))) <= 1e-12
    for z in mu:
        assert abs(1 + sum(varphi[i] * (-z) ** (i + 1) for i in range(2))) <= 1e-12
    spec = ArmaSpec.from_roots(lam, mu)
    assert spec.is_stationary and spec.is_invertible


def test_arma_sample_path_stays_bounded():
    rng = np.random.default_rng(2)
    spec = ArmaSpec.from_roots(rng.uniform(1.5, 3, 3), rng.uniform(1.5, 3, 2))
    data = arma_loglik(spec).simulate(spec.theta, 2000, rng)
    x = np.concatenate([data.prefix, data.values])
    assert np.all(np.isfinite(x))
    assert np.max(np.abs(x)) < 50 * spec.sigma
    assert abs(np.std(x[:1000]) / np.std(x[1000:]) - 1) < 0.3


def test_nonstationary_spec_flagged():
    spec = ArmaSpec(1, 0, np.array([1.2]), np.zeros(0))
    assert not spec.is_stationary


# -- HMM ----------------------------------------------------------------------------


@pytest.mark.parametrize("n_states, n", [(2, 3), (2, 5), (3, 4), (3, 6)])
def test_hmm_matches_brute_force(n_states, n):
    rng = np.random.default_rng(n_states * 10 + n)
    q = random_stochastic(rng, n_states)
    means = rng.standard_normal(n_states)
    sig = rng.uniform(0.5, 1.5, n_states)
    init = rng.dirichlet(np.ones(n_states))
    spec = HmmSpec(q, means, sig, init)
    prog = hmm_loglik(spec)
    y = rng.standard_normal(n)
    data = ObservationSequence(y)
    oracle = brute_force_hmm_loglik(q, means, sig, init, y)
    assert ad.evaluate(prog, spec.theta, data) == pytest.approx(oracle, rel=1e-10)
    _, phi = prog.forward_filter(spec.theta, data)
    np.testing.assert_allclose(phi.sum(axis=1), 1.0, atol=1e-12)


def test_hmm_single_state_is_iid():
    y = np.array([0.3, -1.2, 2.0, 0.0])
    spec = HmmSpec(np.ones((1, 1)), np.array([0.5]), np.array([0.8]))
    prog = hmm_loglik(spec)
    assert prog.dim == 1
    expected = np.sum(-0.5 * ((y - 0.5) / 0.8) ** 2 - np.log(0.8) - 0.5 * np.log(2 * np.pi))
    assert ad.evaluate(prog, spec.theta, ObservationSequence(y)) == pytest.approx(expected, rel=1e-12)


def test_hmm_free_parameter_convention(rng):
    q = random_stochastic(rng, 3)
    spec = HmmSpec(q, np.arange(3.0))
    prog = hmm_loglik(spec)
    assert prog.dim == 3 * 2 + 3
    np.testing.assert_array_equal(spec.theta[:6], q[:, :2].reshape(-1))


def test_default_sigmas():
    np.testing.assert_allclose(default_sigmas(3), [0.01, 0.055, 0.1])


def test_hmm_degeneracy_identifies_step():
    spec = HmmSpec(np.full((2, 2), 0.5), np.array([0.0, 1.0]), np.array([0.01, 0.01]))
    prog = hmm_loglik(spec)
    y = np.array([0.0, 1.0, 40.0, 0.0])
    with pytest.raises(DegeneracyError) as err:
        prog.forward_filter(spec.theta, ObservationSequence(y))
    assert "c_3" in str(err.value)


def test_hmm_invalid_transition():
    with pytest.raises(ConfigError):
        HmmSpec(np.array([[0.5, 0.6], [0.5, 0.5]]), np.zeros(2))


def test_hmm_fit_history_non_decreasing():
    rng = np.random.default_rng(4)
    spec = HmmSpec(random_stochastic(rng, 3), np.arange(3.0), np.full(3, 0.3))
    prog = hmm_loglik(spec)
    data = prog.simulate(spec.theta, 300, rng)
    init = spec.theta + 0.01 * rng.standard_normal(spec.theta.size) * np.r_[np.ones(6), np.ones(3)]
    try:
        fit = fit_mle(prog, data, init=init, tol=1e-5)
    except ConvergenceError as exc:
        fit = exc.best
    assert np.all(np.diff(fit.history) >= -1e-9 * np.abs(fit.history[1:]))
    assert fit.loglik >= ad.evaluate(prog, init, data)


# -- topic --------------------------------------------------------------------------------


def _topic_spec(rng, N=3, per=2):
    state_map = np.tile(np.arange(N), per)
    g = np.empty(state_map.size)
    for c in range(N):
        w = np.flatnonzero(state_map == c)
        g[w] = rng.dirichlet(np.full(w.size, 2.0))
    return TopicModelSpec(random_stochastic(rng, N), g, state_map)


def test_topic_uniform_closed_form():
    state_map = np.array([0, 1, 2, 0, 1, 2])
    spec = TopicModelSpec(np.full((3, 3), 1 / 3), np.full(6, 0.5), state_map)
    prog = topic_model_loglik(spec)
    words = np.array([0, 4, 5, 1, 3, 3, 2])
    data = ObservationSequence(words.astype(float), prefix=[1.0])
    expected = 7 * (np.log(1 / 3) + np.log(0.5))
    assert ad.evaluate(prog, spec.theta, data) == pytest.approx(expected, rel=1e-13)


def test_topic_single_observation(rng):
    spec = _topic_spec(rng)
    prog = topic_model_loglik(spec)
    data = ObservationSequence(np.array([4.0]), prefix=[0.0])
    h = spec.state_map
    expected = np.log(spec.transition[h[0], h[4]]) + np.log(spec.emission[4])
    assert ad.evaluate(prog, spec.theta, data) == pytest.approx(expected, rel=1e-13)


def test_topic_mle_is_count_ratio():
    rng = np.random.default_rng(9)
    spec = _topic_spec(rng)
    prog = topic_model_loglik(spec)
    data = prog.simulate(spec.theta, 3000, rng)
    x = np.concatenate([data.prefix, data.values]).astype(int)
    h = spec.state_map[x]
    counts = np.zeros((3, 3))
    for a, b in zip(h[:-1], h[1:]):
        counts[a, b] += 1
    bigram = counts / counts.sum(axis=1, keepdims=True)
    q_hat, _ = prog.unpack(prog.mle(data))
    np.testing.assert_allclose(q_hat, bigram, rtol=1e-12)
    assert np.max(np.abs(ad.gradient(prog, prog.mle(data), data))) <= 1e-8 * data.n


def test_topic_brown_structure(rng):
    spec = _topic_spec(rng)
    prog = topic_model_loglik(spec)
    # transition free entries plus one dropped word per cluster
    assert prog.dim == 3 * 2 + (6 - 3)
    _, g = prog.unpack(spec.theta)
    np.testing.assert_allclose(g, spec.emission, rtol=1e-13)


def test_topic_unknown_word(rng):
    prog = topic_model_loglik(_topic_spec(rng))
    with pytest.raises(DataError):
        ad.evaluate(prog, prog.initial_guess(ObservationSequence([0.0], prefix=[0.0])),
                    ObservationSequence(np.array([0.0, 7.0]), prefix=[0.0]))
    with pytest.raises(DataError):
        prog.check_data(ObservationSequence(np.array([0.0])))


def test_topic_domain_exit(rng):
    spec = _topic_spec(rng)
    prog = topic_model_loglik(spec)
    theta = spec.theta.copy()
    theta[0] = 1.5
    with pytest.raises(DomainError):
        prog.check_domain(theta)


# -- fitting and io --------------------------------------------------------------------------


def test_arma_fit_from_truth_is_stationary_point(rng):
    spec = ArmaSpec.from_roots([2.0, 2.5], [1.8])
    prog = arma_loglik(spec)
    data = prog.simulate(spec.theta, 400, rng)
    fit = fit_mle(prog, data, init=spec.theta, tol=1e-6 * data.n)
    assert fit.grad_norm <= 1e-6 * data.n
    fit2 = fit_mle(prog, data, init=np.asarray(fit), tol=1e-6 * data.n)
    assert fit2.iterations == 0


def test_fit_convergence_error_carries_best(rng):
    prog = mlp_model(4)
    theta = rng.standard_normal(prog.dim)
    data = prog.simulate(theta, 100, rng)
    with pytest.raises(ConvergenceError) as err:
        fit_mle(prog, data, init=theta, tol=1e-14, max_iter=2)
    assert err.value.best is not None
    assert err.value.best.loglik >= ad.evaluate(prog, theta, data)


@pytest.mark.parametrize("spec", [
    {"kind": "linear", "dim": 3, "params": {"sigma": 1.0}},
    {"kind": "mlp", "params": {"r": 4}},
    {"kind": "arma", "params": {"r": 3, "q": 2}},
    {"kind": "hmm", "params": {"N": 3}},
    {"kind": "topic", "params": {"N": 2, "state_map": [0, 1, 0, 1]}},
])
def test_spec_round_trip(spec, tmp_path):
    prog = program_from_spec(spec)
    doc = spec_to_json(prog, known_prefix=[1.0] if spec["kind"] == "topic" else None)
    assert set(doc) == {"kind", "dim", "params", "known_prefix"}
    path = tmp_path / "model.json"
    path.write_text(json.dumps(doc))
    prog2, prefix = load_model_spec(path)
    assert prog2 == prog
    assert (prefix is None) == (spec["kind"] != "topic")


def test_spec_errors():
    with pytest.raises(ConfigError):
        program_from_spec({"kind": "nope"})
    with pytest.raises(ConfigError):
        program_from_spec({"kind": "linear", "dim": 3, "extra": 1})
    with pytest.raises(ConfigError):
        program_from_spec({"kind": "mlp", "dim": 7, "params": {"r": 4}})
    with pytest.raises(ConfigError):
        program_from_spec({"kind": "arma", "params": {"r": 3}})


@pytest.mark.parametrize("suffix", [".csv", ".json"])
def test_data_round_trip(suffix, tmp_path, rng):
    data = ObservationSequence(rng.standard_normal(7), rng.standard_normal((7, 2)),
                               prefix=None if suffix == ".csv" else np.array([0.5]))
    path = tmp_path / f"d{suffix}"
    save_data(path, data)
    back = load_data(path)
    assert np.array_equal(back.values, data.values)
    assert np.array_equal(back.covariates, data.covariates)


def test_bad_csv(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("y,x1\n1.0,abc\n")
    with pytest.raises(DataError):
        load_data(path)
    path.write_text("y,x1\n1.0\n")
    with pytest.raises(DataError):
        load_data(path)


def test_segment_views():
    data = ObservationSequence(np.arange(10.0))
    seg = data.segment(3, 5)
    np.testing.assert_array_equal(seg.values, [2.0, 3.0, 4.0])
    assert np.shares_memory(seg.values, data.values)
    with pytest.raises(DataError):
        data.segment(0, 3)


@given(st.lists(st.floats(1.05, 10.0), min_size=1, max_size=4))
def test_roots_outside_unit_disk_are_stationary(roots):
    phi, _ = coefficients_from_roots(roots)
    spec = ArmaSpec(len(roots), 0, phi, np.zeros(0))
    assert spec.is_stationary
