"""Chi-squared quantiles, Bonferroni thresholds, and parametric bootstrap calibration."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import special

from .errors import CalibrationError, ConfigError

LOG_TINY = math.log(1e-300)


def chi2_survival(x, dof) -> float:
    """``P(chi2_dof > x)``."""
    if x <= 0:
        return 1.0
    return float(special.gammaincc(0.5 * dof, 0.5 * x))


def _log_survival(x, dof):
    q = special.gammaincc(0.5 * dof, 0.5 * x)
    return math.log(q) if q > 0 else -math.inf


def _log_pdf(x, dof):
    k = 0.5 * dof
    return (k - 1.0) * math.log(x) - 0.5 * x - k * math.log(2.0) - special.gammaln(k)


def chi2_quantile(dof: int, upper_prob: float, log_upper_prob: float | None = None) -> float:
    """Upper quantile ``x`` with ``P(chi2_dof > x) = upper_prob``.

    The inverse incomplete gamma from scipy gives the starting point; Newton
    steps on the log-survival function polish it (with a bisection fallback),
    so the round trip holds to about 1e-12 relative even for tiny levels.
    Pass ``log_upper_prob`` for levels below the double-precision range of
    ``upper_prob`` itself.
    """
    if dof < 1 or int(dof) != dof:
        raise ConfigError(f"degrees of freedom must be a positive integer, got {dof}")
    if log_upper_prob is None:
        if not 0.0 < upper_prob < 1.0:
            if upper_prob == 0.0:
                return math.inf
            raise ConfigError(f"upper probability must lie in (0, 1), got {upper_prob}")
        target = math.log(upper_prob)
    else:
        target = float(log_upper_prob)
    if target < LOG_TINY:
        raise CalibrationError(
            f"tail level exp({target:.1f}) underflows double precision; use a smaller maximum cardinality")
    x = float(special.gammainccinv(0.5 * dof, math.exp(target))) * 2.0
    if not np.isfinite(x) or x <= 0:
        x = max(float(dof), 1.0)
    lo, hi = 0.0, math.inf
    for _ in range(200):
        log_q = _log_survival(x, dof)
        g = log_q - target
        if g > 0:
            lo = x
        else:
            hi = x
        if abs(g) <= 1e-14:
            break
        step = math.nan
        if np.isfinite(log_q):
            # d/dx log Q = -pdf / Q
            slope = -math.exp(_log_pdf(x, dof) - log_q)
            step = x - g / slope
        if not (lo < step < hi):
            step = 0.5 * (lo + hi) if np.isfinite(hi) else 2.0 * x + 1.0
        if abs(step - x) <= 1e-15 * x:
            break
        x = step
    return x


def linear_threshold(d: int, n: int, alpha_l: float) -> float:
    """``q_{chi2_d}(alpha_l / n)``; ``+inf`` when ``alpha_l == 0``."""
    if not 0.0 <= alpha_l < 1.0:
        raise ConfigError(f"alpha_l must lie in [0, 1), got {alpha_l}")
    if alpha_l == 0.0:
        return math.inf
    return chi2_quantile(d, 0.0, log_upper_prob=math.log(alpha_l) - math.log(n))


def log_binomial(d: int, p: int) -> float:
    return special.gammaln(d + 1) - special.gammaln(p + 1) - special.gammaln(d - p + 1)


def scan_thresholds(d: int, n: int, P: int, alpha_s: float) -> np.ndarray:
    """``H_p = q_{chi2_p}(alpha_s / [C(d, p) n (p + 1)^2])`` for ``p = 1..P``."""
    if not 1 <= P <= d:
        raise ConfigError(f"maximum cardinality must satisfy 1 <= P <= d, got P={P}, d={d}")
    if not 0.0 <= alpha_s < 1.0:
        raise ConfigError(f"alpha_s must lie in [0, 1), got {alpha_s}")
    if alpha_s == 0.0:
        return np.full(P, math.inf)
    out = np.empty(P)
    for p in range(1, P + 1):
        level = math.log(alpha_s) - log_binomial(d, p) - math.log(n) - 2.0 * math.log(p + 1)
        out[p - 1] = chi2_quantile(p, 0.0, log_upper_prob=level)
    return out


@dataclass(frozen=True)
class ThresholdSet:
    """Rejection thresholds of the linear and scan parts of the auto-test."""

    h_lin: float
    h_scan: tuple
    alpha_l: float
    alpha_s: float
    n: int
    d: int
    P: int
    source: str = "bonferroni"

    def __post_init__(self):
        if sum(1.0 / (p + 1) ** 2 for p in range(1, self.P + 1)) >= 1.0:
            raise CalibrationError("scan weights must sum below one")
        object.__setattr__(self, "h_scan", tuple(float(h) for h in self.h_scan))

    @classmethod
    def bonferroni(cls, d, n, P, alpha_l, alpha_s) -> "ThresholdSet":
        return cls(linear_threshold(d, n, alpha_l), tuple(scan_thresholds(d, n, P, alpha_s)),
                   alpha_l, alpha_s, n, d, P)

    def to_json(self) -> dict:
        out = asdict(self)
        out["h_scan"] = [_finite_or_none(h) for h in self.h_scan]
        out["h_lin"] = _finite_or_none(self.h_lin)
        return out


def _finite_or_none(x):
    return float(x) if np.isfinite(x) else None


def empirical_quantile(samples, alpha: float) -> float:
    """Upper-``alpha`` empirical quantile (an order statistic, never interpolated)."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise CalibrationError("no bootstrap replicates to take a quantile of")
    if alpha <= 0.0:
        return math.inf
    return float(np.quantile(samples, 1.0 - alpha, method="higher"))


@dataclass(frozen=True)
class BootstrapResult:
    """Replicate statistics of a parametric bootstrap and the resulting quantiles."""

    r_lin: np.ndarray
    r_scan: np.ndarray
    failures: int
    B: int

    def quantile(self, kind: str, alpha: float) -> float:
        return empirical_quantile(self.r_lin if kind == "lin" else self.r_scan, alpha)


def bootstrap_distribution(program, data, theta_hat, config, B=500, seed=0):
    """Simulate ``B`` samples from ``p_theta_hat``, refit, and recompute both statistics.

    Replicates reuse covariates and known prefixes of ``data``; each refit is
    warm-started at ``theta_hat``. Replicate ``b`` draws from its own
    substream of ``seed``, so results do not depend on execution order.
    """
    from .detect import auto_test  # local import: detect depends on this module
    from .errors import ScorewatchError

    theta_hat = np.asarray(theta_hat, dtype=float)
    r_lin = np.full(B, np.nan)
    r_scan = np.full(B, np.nan)
    failures = 0
    inner = config.replace(bootstrap=0)
    for b in range(B):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(b,))))
        try:
            rep = program.simulate(theta_hat, data.n, rng, template=data)
            report = auto_test(program, rep, inner, init=theta_hat)
        except ScorewatchError:
            failures += 1
            continue
        if report.fit_failed:
            failures += 1
            continue
        r_lin[b] = report.r_lin
        r_scan[b] = report.r_scan
    if failures > 0.1 * B:
        raise CalibrationError(f"{failures} of {B} bootstrap replicates failed (limit 10%)")
    ok = ~np.isnan(r_lin)
    return BootstrapResult(r_lin[ok], r_scan[ok], failures, B)


def bootstrap_calibrate(program, data, theta_hat, statistic_kind, B=500, alpha=0.05,
                        config=None, seed=0) -> float:
    """Bootstrap upper-``alpha`` quantile of ``R_lin`` (``"lin"``) or normalized ``R_scan`` (``"scan"``)."""
    from .detect import TestConfig

    if statistic_kind not in ("lin", "scan"):
        raise ConfigError(f"statistic_kind must be 'lin' or 'scan', got {statistic_kind!r}")
    config = TestConfig() if config is None else config
    res = bootstrap_distribution(program, data, theta_hat, config, B=B, seed=seed)
    return res.quantile(statistic_kind, alpha)
