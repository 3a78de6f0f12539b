"""Observation container and the model-program protocol."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import DataError


@dataclass(frozen=True, eq=False)
class ObservationSequence:
    """Ordered observations ``W_1..W_n`` with optional covariates and known prefix.

    ``values`` holds the responses (shape ``(n,)``), ``covariates`` an optional
    ``(n, m)`` design, and ``prefix`` the presample values a dependent model
    conditions on (``X_{1:r}`` for ARMA, ``X_0`` for the topic model).
    Observation indices are 1-based in every public API.
    """

    values: np.ndarray
    covariates: np.ndarray | None = None
    prefix: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.size < 1:
            raise DataError("an observation sequence needs at least one observation")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.covariates is not None:
            cov = np.asarray(self.covariates, dtype=float)
            if cov.ndim == 1:
                cov = cov[:, None]
            if cov.shape[0] != values.size:
                raise DataError(
                    f"covariates have {cov.shape[0]} rows for {values.size} observations"
                )
            cov.setflags(write=False)
            object.__setattr__(self, "covariates", cov)
        if self.prefix is not None:
            pre = np.asarray(self.prefix, dtype=float).reshape(-1)
            pre.setflags(write=False)
            object.__setattr__(self, "prefix", pre)

    @property
    def n(self) -> int:
        return int(self.values.size)

    def __len__(self):
        return self.n

    def segment(self, s: int, t: int) -> "SegmentView":
        if not (1 <= s <= t <= self.n):
            raise DataError(f"segment {s}:{t} outside 1..{self.n}")
        return SegmentView(self, s, t)


@dataclass(frozen=True)
class SegmentView:
    """Read-only window ``W_{s:t}`` onto a parent sequence (no copy)."""

    parent: ObservationSequence
    s: int
    t: int

    @property
    def values(self) -> np.ndarray:
        return self.parent.values[self.s - 1:self.t]

    @property
    def covariates(self) -> np.ndarray | None:
        cov = self.parent.covariates
        return None if cov is None else cov[self.s - 1:self.t]

    def __len__(self):
        return self.t - self.s + 1


class SimplexReparam:
    """Logit map between unconstrained coordinates and free simplex entries.

    ``groups`` lists index groups of the natural parameter vector; each group
    holds the free probabilities of one simplex whose remaining mass is
    implied. Coordinates outside every group pass through unchanged.
    """

    def __init__(self, dim: int, groups: Sequence[Sequence[int]]):
        self.dim = dim
        self.groups = [np.asarray(g, dtype=int) for g in groups if len(g) > 0]

    def to_natural(self, u):
        u = np.asarray(u, dtype=float)
        theta = u.copy()
        for g in self.groups:
            z = u[g]
            m = max(0.0, float(z.max()))
            e = np.exp(z - m)
            theta[g] = e / (np.exp(-m) + e.sum())
        return theta

    def from_natural(self, theta):
        theta = np.asarray(theta, dtype=float)
        u = theta.copy()
        for g in self.groups:
            p = theta[g]
            rest = 1.0 - p.sum()
            u[g] = np.log(p) - np.log(rest)
        return u

    def jacobian(self, u) -> np.ndarray:
        """``d theta / d u`` as a dense ``(d, d)`` matrix."""
        theta = self.to_natural(u)
        jac = np.eye(self.dim)
        for g in self.groups:
            p = theta[g]
            jac[np.ix_(g, g)] = np.diag(p) - np.outer(p, p)
        return jac


class ModelProgram:
    """A probabilistic-loss program ``(theta, data) -> per-term log-likelihoods``.

    Subclasses implement :meth:`build` with the tracing primitives of
    :mod:`scorewatch.adcore`. Instances are immutable and hashable so that
    recorded tapes can be cached per data set.
    """

    kind = "abstract"
    independent = True
    reparam: SimplexReparam | None = None

    @property
    def dim(self) -> int:
        raise NotImplementedError

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(f"theta{i}" for i in range(self.dim))

    def build(self, theta, data):
        raise NotImplementedError

    def check_domain(self, theta) -> None:
        pass

    def check_data(self, data: ObservationSequence) -> None:
        pass

    def check_terms(self, terms) -> None:
        """Hook run on the per-term vector after every forward sweep."""

    def explain_failure(self, exc, theta, data) -> None:
        """Hook that may re-raise a sweep failure with a model-specific error."""

    def initial_guess(self, data) -> np.ndarray:
        return np.zeros(self.dim)

    def simulate(self, theta, n, rng, template=None, theta_after=None, tau=None):
        """Draw observations from ``p_theta``; switch to ``theta_after`` after ``tau``."""
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError
