"""Gaussian regression programs: linear model and a one-hidden-layer network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import adcore as ad
from ..errors import ConfigError, DataError
from .base import ModelProgram, ObservationSequence

_LOG_2PI = float(np.log(2.0 * np.pi))


def _switching(theta, theta_after, tau, n):
    """Per-observation parameter rows for a single change after ``tau``."""
    rows = np.tile(np.asarray(theta, dtype=float), (n, 1))
    if theta_after is not None and tau is not None:
        rows[tau:] = np.asarray(theta_after, dtype=float)
    return rows


@dataclass(frozen=True)
class LinearModel(ModelProgram):
    """``W_i = (Y_i, X_i)`` with ``Y_i | X_i ~ N(X_i^T theta, sigma^2)``.

    The design gets an intercept column prepended, so ``d - 1`` covariates
    are expected per observation. With ``monitor_sigma`` the log noise scale
    is appended as an extra parameter and ``sigma`` only sets its initial value.
    """

    d: int
    sigma: float = 1.0
    monitor_sigma: bool = False

    kind = "linear"

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError("linear model needs d >= 1")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")

    @property
    def dim(self) -> int:
        return self.d + int(self.monitor_sigma)

    @property
    def labels(self):
        out = ("intercept",) + tuple(f"beta{i}" for i in range(1, self.d))
        return out + (("log_sigma",) if self.monitor_sigma else ())

    def design(self, data: ObservationSequence) -> np.ndarray:
        cov = data.covariates
        width = 0 if cov is None else cov.shape[1]
        if width != self.d - 1:
            raise DataError(f"linear model with d={self.d} needs {self.d - 1} covariates, got {width}")
        ones = np.ones((data.n, 1))
        return ones if cov is None else np.hstack([ones, cov])

    def check_data(self, data):
        self.design(data)

    def build(self, theta, data):
        x = self.design(data)
        if not self.monitor_sigma:
            resid = data.values - x @ theta
            return resid * resid * (-0.5 / self.sigma**2) - 0.5 * (_LOG_2PI + 2.0 * np.log(self.sigma))
        beta = ad.take(theta, np.arange(self.d))
        log_sigma = ad.take(theta, self.d)
        resid = data.values - x @ beta
        return resid * resid * (-0.5 * ad.exp(-2.0 * log_sigma)) - log_sigma - 0.5 * _LOG_2PI

    def mle(self, data) -> np.ndarray:
        """Closed-form least squares estimate."""
        x = self.design(data)
        beta = np.linalg.lstsq(x, data.values, rcond=None)[0]
        if not self.monitor_sigma:
            return beta
        resid = data.values - x @ beta
        return np.append(beta, 0.5 * np.log(max(np.mean(resid**2), 1e-300)))

    def initial_guess(self, data):
        return self.mle(data)

    def simulate(self, theta, n, rng, template=None, theta_after=None, tau=None):
        if template is not None:
            cov = template.covariates
            n = template.n
        else:
            cov = rng.standard_normal((n, self.d - 1)) if self.d > 1 else None
        x = np.ones((n, 1)) if cov is None else np.hstack([np.ones((n, 1)), cov])
        rows = _switching(theta, theta_after, tau, n)
        if self.monitor_sigma:
            scale = np.exp(rows[:, -1])
            rows = rows[:, :-1]
        else:
            scale = self.sigma
        y = np.einsum("ij,ij->i", x, rows) + scale * rng.standard_normal(n)
        return ObservationSequence(y, cov)

    def to_json(self):
        return {"kind": self.kind, "dim": self.d,
                "params": {"sigma": self.sigma, "monitor_sigma": self.monitor_sigma}}


@dataclass(frozen=True)
class MlpModel(ModelProgram):
    """Regression on a tanh network with ``r`` inputs and ``r // 2`` hidden units.

    Parameter layout: ``A1`` (``r x m``, row-major), ``b1`` (``m``), ``A2``
    (``m``), ``b2`` (scalar); ``d = r*m + 2*m + 1``. The noise scale is known.
    """

    r: int
    sigma: float = 1.0
    init_seed: int = 0

    kind = "mlp"

    def __post_init__(self):
        if self.r < 2:
            raise ConfigError("network needs r >= 2 inputs")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")

    @property
    def hidden(self) -> int:
        return self.r // 2

    @property
    def dim(self) -> int:
        m = self.hidden
        return self.r * m + 2 * m + 1

    @property
    def labels(self):
        r, m = self.r, self.hidden
        out = [f"A1[{i},{j}]" for i in range(r) for j in range(m)]
        out += [f"b1[{j}]" for j in range(m)]
        out += [f"A2[{j}]" for j in range(m)]
        return tuple(out + ["b2"])

    def check_data(self, data):
        cov = data.covariates
        if cov is None or cov.shape[1] != self.r:
            raise DataError(f"network needs {self.r} covariates per observation")

    def unpack(self, theta):
        r, m = self.r, self.hidden
        a1 = np.reshape(theta[: r * m], (r, m))
        b1 = theta[r * m: r * m + m]
        a2 = theta[r * m + m: r * m + 2 * m]
        return a1, b1, a2, theta[-1]

    def predict(self, theta, x):
        a1, b1, a2, b2 = self.unpack(np.asarray(theta, dtype=float))
        return np.tanh(x @ a1 + b1) @ a2 + b2

    def build(self, theta, data):
        self.check_data(data)
        r, m = self.r, self.hidden
        a1 = ad.reshape(ad.take(theta, np.arange(r * m)), (r, m))
        b1 = ad.take(theta, np.arange(r * m, r * m + m))
        a2 = ad.take(theta, np.arange(r * m + m, r * m + 2 * m))
        b2 = ad.take(theta, r * m + 2 * m)
        hid = ad.tanh(ad.matmul(data.covariates, a1) + b1)
        resid = data.values - (ad.matmul(hid, a2) + b2)
        return resid * resid * (-0.5 / self.sigma**2) - 0.5 * (_LOG_2PI + 2.0 * np.log(self.sigma))

    def initial_guess(self, data):
        rng = np.random.default_rng(self.init_seed)
        return 0.5 * rng.standard_normal(self.dim)

    def simulate(self, theta, n, rng, template=None, theta_after=None, tau=None):
        if template is not None:
            x = template.covariates
            n = template.n
        else:
            x = rng.standard_normal((n, self.r))
        f = self.predict(theta, x)
        if theta_after is not None and tau is not None:
            f[tau:] = self.predict(theta_after, x[tau:])
        return ObservationSequence(f + self.sigma * rng.standard_normal(n), x)

    def to_json(self):
        return {"kind": self.kind, "dim": self.dim, "params": {"r": self.r, "sigma": self.sigma}}


def linear_model(d: int, sigma: float = 1.0, monitor_sigma: bool = False) -> LinearModel:
    return LinearModel(d, sigma, monitor_sigma)


def mlp_model(r: int, sigma: float = 1.0) -> MlpModel:
    return MlpModel(r, sigma)
