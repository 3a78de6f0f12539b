"""Conditional Gaussian likelihood of an ARMA(r, q) process."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import adcore as ad
from ..errors import ConfigError, DataError, DomainError
from .base import ModelProgram, ObservationSequence

_LOG_2PI = float(np.log(2.0 * np.pi))
BURN_IN = 500


def coefficients_from_roots(ar_roots, ma_roots=()):
    """AR and MA coefficients from construction roots ``lambda`` and ``mu``.

    With ``c`` the coefficients of ``prod_i (x - 1/lambda_i)`` (leading one
    dropped), the AR part is ``phi = -c``, so the AR operator factors as
    ``prod_i (1 - B/lambda_i)``. The MA part takes the coefficients of
    ``prod_j (x + 1/mu_j)``, so the MA operator is ``prod_j (1 + B/mu_j)``.
    Both are stationary and invertible whenever every root exceeds one in
    modulus, and for positive roots no AR factor can cancel an MA factor.
    """
    ar = np.asarray(ar_roots, dtype=float)
    ma = np.asarray(ma_roots, dtype=float)
    phi = -np.poly(1.0 / ar)[1:] if ar.size else np.zeros(0)
    varphi = np.poly(-1.0 / ma)[1:] if ma.size else np.zeros(0)
    return np.real(phi), np.real(varphi)


def _companion_radius(c):
    """Largest root modulus of ``z^k + c_1 z^{k-1} + ... + c_k``."""
    if c.size == 0:
        return 0.0
    return float(np.max(np.abs(np.roots(np.concatenate([[1.0], c])))))


@dataclass(frozen=True)
class ArmaSpec:
    """ARMA orders, coefficients, and the known innovation scale."""

    r: int
    q: int
    phi: np.ndarray
    varphi: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sigma: float = 0.1

    def __post_init__(self):
        if self.r < 1 or self.q < 0 or self.q > self.r:
            raise ConfigError(f"ARMA orders need 1 <= r and 0 <= q <= r, got r={self.r}, q={self.q}")
        phi = np.asarray(self.phi, dtype=float).reshape(-1)
        varphi = np.asarray(self.varphi, dtype=float).reshape(-1)
        if phi.size != self.r or varphi.size != self.q:
            raise ConfigError("coefficient lengths must match the orders")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "varphi", varphi)

    @classmethod
    def from_roots(cls, ar_roots, ma_roots=(), sigma=0.1) -> "ArmaSpec":
        phi, varphi = coefficients_from_roots(ar_roots, ma_roots)
        return cls(len(phi), len(varphi), phi, varphi, sigma)

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.phi, self.varphi])

    @property
    def is_stationary(self) -> bool:
        return _companion_radius(-self.phi) < 1.0

    @property
    def is_invertible(self) -> bool:
        return _companion_radius(self.varphi) < 1.0


@dataclass(frozen=True)
class ArmaModel(ModelProgram):
    """Residual recursion ``eps_t = X_t - sum phi_i X_{t-i} - sum varphi_i eps_{t-i}``.

    The data hold ``X_{r+1..}`` as values and ``X_{1:r}`` as the prefix;
    presample residuals are zero. ``theta = (phi, varphi)``.
    """

    r: int
    q: int
    sigma: float = 0.1

    kind = "arma"
    independent = False

    def __post_init__(self):
        ArmaSpec(self.r, self.q, np.zeros(self.r), np.zeros(self.q), self.sigma)

    @property
    def dim(self) -> int:
        return self.r + self.q

    @property
    def labels(self):
        return tuple(f"phi{i + 1}" for i in range(self.r)) + tuple(
            f"varphi{i + 1}" for i in range(self.q))

    def check_data(self, data):
        if data.prefix is None or data.prefix.size != self.r:
            got = 0 if data.prefix is None else data.prefix.size
            raise DataError(f"ARMA({self.r},{self.q}) needs a known prefix of length {self.r}, got {got}")

    def lag_matrix(self, data) -> np.ndarray:
        """Row ``t`` holds ``X_{t-1}, ..., X_{t-r}`` for modelled observation ``t``."""
        self.check_data(data)
        full = np.concatenate([data.prefix, data.values])
        n, r = data.n, self.r
        idx = r + np.arange(n)[:, None] - 1 - np.arange(r)[None, :]
        return full[idx]

    def residuals(self, theta, data) -> np.ndarray:
        """Plain numpy residual recursion (used for simulation checks and tests)."""
        theta = np.asarray(theta, dtype=float)
        e = data.values - self.lag_matrix(data) @ theta[: self.r]
        ma = theta[self.r:]
        eps = np.zeros(data.n)
        for t in range(data.n):
            acc = e[t]
            for i in range(min(self.q, t)):
                acc -= ma[i] * eps[t - 1 - i]
            eps[t] = acc
        return eps

    def build(self, theta, data):
        lags = self.lag_matrix(data)
        phi = ad.take(theta, np.arange(self.r))
        e = data.values - ad.matmul(lags, phi)
        if self.q == 0:
            eps = e
        else:
            neg_ma = -ad.take(theta, np.arange(self.r, self.r + self.q))
            steps = []
            for t in range(data.n):
                prev = [steps[t - 1 - i] if t - 1 - i >= 0 else 0.0 for i in range(self.q)]
                steps.append(ad.take(e, t) + ad.matmul(ad.stack(prev), neg_ma))
            eps = ad.stack(steps)
        scale = -0.5 / self.sigma**2
        return eps * eps * scale - 0.5 * (_LOG_2PI + 2.0 * np.log(self.sigma))

    def check_domain(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,) or not np.all(np.isfinite(theta)):
            raise DomainError(f"ARMA parameter must be a finite vector of length {self.dim}")
        # outside the invertible region the residual recursion explodes
        if _companion_radius(theta[self.r:]) >= 1.0:
            raise DomainError("MA part is not invertible")

    def initial_guess(self, data):
        # least-squares AR fit, MA part at zero
        lags = self.lag_matrix(data)
        phi = np.linalg.lstsq(lags, data.values, rcond=None)[0]
        return np.concatenate([phi, np.zeros(self.q)])

    def simulate(self, theta, n, rng, template=None, theta_after=None, tau=None):
        r, q = self.r, self.q
        theta = np.asarray(theta, dtype=float)
        after = theta if theta_after is None else np.asarray(theta_after, dtype=float)
        tau = n if tau is None else tau
        if template is not None:
            n = template.n
            burn = 0
            start = np.asarray(template.prefix, dtype=float)
        else:
            burn = BURN_IN
            start = np.zeros(r)
        total = burn + n
        x = np.concatenate([start, np.zeros(total)])
        eps = np.zeros(r + total)
        noise = self.sigma * rng.standard_normal(total)
        for k in range(total):
            t = r + k
            th = theta if k - burn < tau else after
            phi, ma = th[:r], th[r:]
            eps[t] = noise[k]
            x[t] = phi @ x[t - r:t][::-1] + eps[t]
            if q:
                x[t] += ma @ eps[t - q:t][::-1]
            if not np.isfinite(x[t]):
                raise DomainError("simulated ARMA path diverged")
        if burn:
            prefix = x[burn:burn + r]
            values = x[burn + r:]
        else:
            prefix, values = start, x[r:]
        return ObservationSequence(values, prefix=prefix)

    def to_json(self):
        return {"kind": self.kind, "dim": self.dim,
                "params": {"r": self.r, "q": self.q, "sigma": self.sigma}}


def arma_loglik(spec: ArmaSpec) -> ArmaModel:
    return ArmaModel(spec.r, spec.q, spec.sigma)
