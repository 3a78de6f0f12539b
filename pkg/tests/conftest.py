import itertools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scorewatch.models import (ArmaSpec, HmmSpec, TopicModelSpec, arma_loglik, hmm_loglik,
                               linear_model, mlp_model, topic_model_loglik)

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def brute_force_hmm_loglik(q, means, sigmas, initial, y):
    """log of the sum over all hidden paths of the joint density."""
    n_states = len(means)
    dens = np.exp(-0.5 * ((y[:, None] - means[None, :]) / sigmas) ** 2) / (sigmas * np.sqrt(2 * np.pi))
    total = 0.0
    for path in itertools.product(range(n_states), repeat=len(y)):
        p = initial[path[0]] * dens[0, path[0]]
        for k in range(1, len(y)):
            p *= q[path[k - 1], path[k]] * dens[k, path[k]]
        total += p
    return float(np.log(total))


def random_stochastic(rng, n):
    q = 0.5 / n + 0.5 * rng.dirichlet(np.full(n, 0.5), size=n)
    return q / q.sum(axis=1, keepdims=True)


def zoo_instance(kind, rng, n=40):
    """(program, theta, data) for one random draw of each model kind."""
    if kind == "linear":
        prog = linear_model(4)
        theta = rng.standard_normal(4)
        return prog, theta, prog.simulate(theta, n, rng)
    if kind == "mlp":
        prog = mlp_model(4)
        theta = 0.5 * rng.standard_normal(prog.dim)
        return prog, theta, prog.simulate(theta, n, rng)
    if kind == "arma":
        spec = ArmaSpec.from_roots(rng.uniform(1.5, 3, 2), rng.uniform(1.5, 3, 1))
        prog = arma_loglik(spec)
        return prog, spec.theta, prog.simulate(spec.theta, n, rng)
    if kind == "hmm":
        q = random_stochastic(rng, 3)
        spec = HmmSpec(q, np.arange(3.0), sigmas=np.array([0.5, 0.6, 0.7]))
        prog = hmm_loglik(spec)
        return prog, spec.theta, prog.simulate(spec.theta, n, rng)
    if kind == "topic":
        state_map = np.array([0, 1, 2, 0, 1, 2])
        g = np.empty(6)
        for c in range(3):
            w = np.flatnonzero(state_map == c)
            g[w] = rng.dirichlet(np.full(w.size, 2.0))
        spec = TopicModelSpec(random_stochastic(rng, 3), g, state_map)
        prog = topic_model_loglik(spec)
        return prog, spec.theta, prog.simulate(spec.theta, n, rng)
    raise ValueError(kind)


ZOO = ("linear", "mlp", "arma", "hmm", "topic")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record an acceptance outcome (printed in the terminal summary) and assert it."""
    results = request.config.stash.setdefault(_CRITERIA, {})

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        results[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_CRITERIA, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
