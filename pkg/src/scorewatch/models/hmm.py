"""Hidden Markov model with Gaussian emissions, normalized forward recursion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import adcore as ad
from ..errors import ConfigError, DataError, DegeneracyError, DomainError
from .base import ModelProgram, ObservationSequence, SimplexReparam

C_FLOOR = 1e-300
_LOG_FLOOR = float(np.log(C_FLOOR))
_LOG_2PI = float(np.log(2.0 * np.pi))


def default_sigmas(n_states: int) -> np.ndarray:
    """Emission scales ``0.01 + 0.09 k / (N - 1)`` for ``k = 0..N-1``."""
    if n_states == 1:
        return np.array([0.01])
    return 0.01 + 0.09 * np.arange(n_states) / (n_states - 1)


def _check_stochastic(mat, name):
    mat = np.asarray(mat, dtype=float)
    if np.any(mat < 0):
        raise ConfigError(f"{name} has negative entries")
    if np.any(np.abs(mat.sum(axis=-1) - 1.0) > 1e-12):
        raise ConfigError(f"{name} rows must sum to 1 within 1e-12")
    return mat


@dataclass(frozen=True)
class HmmSpec:
    """Transition matrix, Gaussian emission means and scales, initial law."""

    transition: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray | None = None
    initial: np.ndarray | None = None

    def __post_init__(self):
        q = _check_stochastic(self.transition, "transition matrix")
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ConfigError("transition matrix must be square")
        n = q.shape[0]
        means = np.asarray(self.means, dtype=float).reshape(-1)
        sig = default_sigmas(n) if self.sigmas is None else np.asarray(self.sigmas, dtype=float).reshape(-1)
        init = np.full(n, 1.0 / n) if self.initial is None else _check_stochastic(self.initial, "initial law")
        if means.size != n or sig.size != n or init.shape != (n,):
            raise ConfigError("emission and initial parameters must have one entry per state")
        if np.any(sig <= 0):
            raise ConfigError("emission scales must be positive")
        for name, val in (("transition", q), ("means", means), ("sigmas", sig), ("initial", init)):
            object.__setattr__(self, name, val)

    @property
    def N(self) -> int:
        return self.transition.shape[0]

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.transition[:, :-1].reshape(-1), self.means])


@dataclass(frozen=True)
class HmmModel(ModelProgram):
    """``theta = (Q[:, :N-1] row-major, means)``; the last column is implied.

    ``l_k = log c_k`` where ``c_k`` normalizes the filter; the first term
    uses the initial law. A normalizer below ``1e-300`` is an error.
    """

    N: int
    sigmas: tuple
    initial: tuple

    kind = "hmm"
    independent = False

    def __post_init__(self):
        if self.N < 1 or len(self.sigmas) != self.N or len(self.initial) != self.N:
            raise ConfigError("sigmas and initial law need one entry per state")
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        object.__setattr__(self, "initial", tuple(float(s) for s in self.initial))

    @property
    def n_transition(self) -> int:
        return self.N * (self.N - 1)

    @property
    def dim(self) -> int:
        return self.n_transition + self.N

    @property
    def labels(self):
        n = self.N
        out = [f"q[{i},{j}]" for i in range(n) for j in range(n - 1)]
        return tuple(out + [f"mu[{k}]" for k in range(n)])

    @property
    def reparam(self):
        m = self.N - 1
        return SimplexReparam(self.dim, [range(i * m, (i + 1) * m) for i in range(self.N)])

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        n = self.N
        free = theta[: self.n_transition].reshape(n, n - 1)
        q = np.hstack([free, 1.0 - free.sum(axis=1, keepdims=True)])
        return q, theta[self.n_transition:]

    def check_domain(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,) or not np.all(np.isfinite(theta)):
            raise DomainError(f"HMM parameter must be a finite vector of length {self.dim}")
        q, _ = self.unpack(theta)
        if np.any(q < 0):
            raise DomainError("transition probabilities left the simplex")

    def log_emission(self, means, y):
        sig = np.asarray(self.sigmas)
        z = (np.asarray(y, dtype=float)[:, None] - means[None, :]) / sig
        return -0.5 * z * z - np.log(sig) - 0.5 * _LOG_2PI

    def forward_filter(self, theta, data):
        """Numpy recursion returning ``(log c, phi)`` with ``phi`` of shape ``(n, N)``."""
        q, means = self.unpack(theta)
        dens = np.exp(self.log_emission(means, data.values))
        phi = np.empty((data.n, self.N))
        logc = np.empty(data.n)
        prev = None
        for k in range(data.n):
            u = (np.asarray(self.initial) if prev is None else prev @ q) * dens[k]
            c = u.sum()
            if not c >= C_FLOOR:
                raise DegeneracyError(f"forward normalizer c_{k + 1} = {c:.3g} below the numeric floor", k=k + 1)
            phi[k] = prev = u / c
            logc[k] = np.log(c)
        return logc, phi

    def build(self, theta, data):
        n = self.N
        if n > 1:
            free = ad.reshape(ad.take(theta, np.arange(self.n_transition)), (n, n - 1))
            last = 1.0 - ad.vsum(free, axis=1)
            q = ad.concat([free, ad.reshape(last, (n, 1))], axis=1)
        else:
            q = np.ones((1, 1))
        means = ad.take(theta, np.arange(self.n_transition, self.dim))
        sig = np.asarray(self.sigmas)
        z = (data.values[:, None] - means) * (1.0 / sig)
        dens = ad.exp(z * z * -0.5) * (1.0 / (sig * np.sqrt(2.0 * np.pi)))
        cs = []
        prev = None
        for k in range(data.n):
            g = ad.take(dens, k)
            u = np.asarray(self.initial) * g if prev is None else ad.matmul(prev, q) * g
            c = ad.vsum(u)
            cs.append(c)
            prev = u / c
        return ad.log(ad.stack(cs))

    def check_terms(self, terms):
        bad = np.flatnonzero(~(terms >= _LOG_FLOOR))
        if bad.size:
            k = int(bad[0]) + 1
            raise DegeneracyError(f"forward normalizer c_{k} below the numeric floor", k=k)

    def explain_failure(self, exc, theta, data):
        self.forward_filter(theta, data)

    def initial_guess(self, data):
        n = self.N
        q = np.full((n, n), 1.0 / n)
        means = np.quantile(data.values, (np.arange(n) + 0.5) / n)
        return np.concatenate([q[:, :-1].reshape(-1), means])

    def simulate(self, theta, n, rng, template=None, theta_after=None, tau=None):
        if template is not None:
            n = template.n
        q0, m0 = self.unpack(theta)
        q1, m1 = (q0, m0) if theta_after is None else self.unpack(theta_after)
        tau = n if tau is None else tau
        sig = np.asarray(self.sigmas)
        states = np.empty(n, dtype=int)
        y = np.empty(n)
        for k in range(n):
            q, m = (q0, m0) if k < tau else (q1, m1)
            p = np.asarray(self.initial) if k == 0 else q[states[k - 1]]
            p = np.clip(p, 0.0, None)
            states[k] = rng.choice(self.N, p=p / p.sum())
            y[k] = m[states[k]] + sig[states[k]] * rng.standard_normal()
        return ObservationSequence(y)

    def check_data(self, data):
        if not np.all(np.isfinite(data.values)):
            raise DataError("HMM observations must be finite")

    def to_json(self):
        return {"kind": self.kind, "dim": self.dim,
                "params": {"N": self.N, "sigmas": list(self.sigmas), "initial": list(self.initial)}}


def hmm_loglik(spec: HmmSpec) -> HmmModel:
    return HmmModel(spec.N, tuple(spec.sigmas), tuple(spec.initial))
