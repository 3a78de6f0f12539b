"""Score statistics for a parameter jump at an unknown time.

For a candidate changepoint ``tau`` with head information ``A = I_{1:tau}``,
tail information ``B = I_{tau+1:n}`` and ``F = A + B``, the partial
information is ``B - B F^{-1} B`` and its inverse is ``A^{-1} + B^{-1}``.
The ``direct`` method forms these matrices; the ``cg`` method only applies
``A`` and ``B`` to vectors and solves with conjugate gradients.
"""

from __future__ import annotations

import csv
import json
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import adcore as ad
from .calibrate import ThresholdSet, empirical_quantile
from .errors import ConditioningError, ConfigError, ConvergenceError
from .models.fit import fit_mle

METHODS = ("direct", "cg")
# per-term Hessians are materialized only below this many floats
JET_CAP = 20_000_000


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TestConfig:
    """Settings of the auto-test.

    ``tau_range`` is a pair of fractions of ``n`` (``(0.1, 0.9)`` scans
    ``ceil(n/10)..floor(9n/10)``) or a pair of integer indices. Unset
    ``alpha_l``/``alpha_s`` split ``alpha`` evenly; ``max_card`` defaults to
    ``floor(sqrt(d))`` of the (restricted) dimension.
    """

    __test__ = False  # not a pytest class

    alpha: float = 0.05
    alpha_l: float | None = None
    alpha_s: float | None = None
    max_card: int | None = None
    tau_range: tuple = (0.1, 0.9)
    method: str = "direct"
    restrict: tuple | None = None
    ridge: float = 0.0
    cond_max: float = 1e12
    cg_tol: float = 1e-7
    cg_max_iter: int | None = None
    fit_tol: float | None = None
    fit_max_iter: int = 200
    accept_unconverged: bool = False
    bootstrap: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in [0, 1), got {self.alpha}")
        self.levels()
        if self.ridge < 0:
            raise ConfigError("ridge must be nonnegative")
        if self.restrict is not None:
            idx = tuple(int(i) for i in self.restrict)
            if not idx:
                raise ConfigError("restriction subset must be nonempty")
            if len(set(idx)) != len(idx):
                raise ConfigError("restriction subset has repeated indices")
            object.__setattr__(self, "restrict", tuple(sorted(idx)))
        if len(self.tau_range) != 2:
            raise ConfigError("tau_range needs two entries")
        object.__setattr__(self, "tau_range", tuple(self.tau_range))

    def replace(self, **changes) -> "TestConfig":
        return replace(self, **changes)

    def levels(self) -> tuple[float, float]:
        a, al, as_ = self.alpha, self.alpha_l, self.alpha_s
        if al is None and as_ is None:
            al = as_ = 0.5 * a
        elif al is None:
            al = a - as_
        elif as_ is None:
            as_ = a - al
        if al < 0 or as_ < 0 or abs(al + as_ - a) > 1e-12:
            raise ConfigError(f"need alpha_l + alpha_s = alpha with both >= 0 (got {al}, {as_}, alpha={a})")
        return float(al), float(as_)

    def taus(self, n: int) -> np.ndarray:
        lo, hi = self.tau_range
        if all(isinstance(x, (int, np.integer)) and not isinstance(x, bool) for x in (lo, hi)):
            t0, t1 = int(lo), int(hi)
        else:
            lo, hi = float(lo), float(hi)
            if not 0.0 <= lo <= hi <= 1.0:
                raise ConfigError(f"fractional tau_range must satisfy 0 <= lo <= hi <= 1, got {self.tau_range}")
            t0, t1 = math.ceil(lo * n - 1e-9), math.floor(hi * n + 1e-9)
        t0, t1 = max(t0, 1), min(t1, n - 1)
        if t0 > t1:
            raise ConfigError(f"tau_range {self.tau_range} is empty for n={n}")
        return np.arange(t0, t1 + 1)

    def components(self, d: int) -> np.ndarray:
        if self.restrict is None:
            return np.arange(d)
        idx = np.asarray(self.restrict, dtype=int)
        if idx.min() < 0 or idx.max() >= d:
            raise ConfigError(f"restriction indices must lie in 0..{d - 1}")
        return idx

    def card(self, d_eff: int) -> int:
        P = int(math.isqrt(d_eff)) if self.max_card is None else int(self.max_card)
        if not 1 <= P <= d_eff:
            raise ConfigError(f"maximum cardinality must lie in 1..{d_eff}, got {P}")
        return P

    def to_json(self) -> dict:
        al, as_ = self.levels()
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out.update(alpha_l=al, alpha_s=as_, tau_range=list(self.tau_range),
                   restrict=None if self.restrict is None else list(self.restrict))
        return out


def restrict_components(config: TestConfig, subset) -> TestConfig:
    """Copy of ``config`` whose statistics use only the components in ``subset``."""
    subset = tuple(int(i) for i in subset)
    if not subset:
        raise ConfigError("restriction subset must be nonempty")
    if min(subset) < 0:
        raise ConfigError("restriction indices must be nonnegative")
    return config.replace(restrict=subset)


# ---------------------------------------------------------------------------
# operators and CG


@dataclass(frozen=True)
class InformationOperator:
    """Matrix-free symmetric PSD operator ``v -> I v``."""

    matvec: Callable
    dim: int
    kind: str
    diag_fn: Callable | None = None

    def apply(self, v) -> np.ndarray:
        return np.asarray(self.matvec(np.asarray(v, dtype=float)), dtype=float)

    __call__ = apply

    def dense(self) -> np.ndarray:
        cols = [self.apply(e) for e in np.eye(self.dim)]
        return np.column_stack(cols)

    def diagonal(self) -> np.ndarray:
        if self.diag_fn is not None:
            return np.asarray(self.diag_fn(), dtype=float)
        return np.array([self.apply(e)[i] for i, e in enumerate(np.eye(self.dim))])

    def restrict(self, idx) -> "InformationOperator":
        """The ``[I]_{T,T}`` block as an operator on ``R^|T|``."""
        idx = np.asarray(idx, dtype=int)
        full = self.dim

        def mv(v):
            x = np.zeros(full)
            x[idx] = v
            return self.apply(x)[idx]

        return InformationOperator(mv, idx.size, self.kind)


@dataclass(frozen=True)
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float


def cg_solve(op, b, tol=1e-7, max_iter=None, full_output=False, segment=None):
    """Conjugate gradients for ``op x = b`` with ``||op x - b|| <= tol ||b||``.

    Raises
    ------
    ConditioningError
        On non-positive curvature or when ``max_iter`` (default ``2 d``)
        iterations do not reach the tolerance; carries the residual norm.
    """
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise ConditioningError("right-hand side is not finite", segment=segment)
    apply = op.apply if isinstance(op, InformationOperator) else op
    d = b.size
    max_iter = 2 * d if max_iter is None else int(max_iter)
    bnorm = float(np.linalg.norm(b))
    x = np.zeros(d)
    if bnorm == 0.0:
        res = CGResult(x, 0, 0.0)
        return res if full_output else x
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    target = tol * bnorm
    for it in range(1, max_iter + 1):
        ap = apply(p)
        pap = float(p @ ap)
        if not pap > 0 or not np.isfinite(pap):
            raise ConditioningError(
                f"non-positive curvature in CG at iteration {it}",
                residual=math.sqrt(rr), segment=segment)
        step = rr / pap
        x += step * p
        r -= step * ap
        rr_new = float(r @ r)
        if math.sqrt(rr_new) <= target:
            res = CGResult(x, it, math.sqrt(rr_new))
            return res if full_output else x
        p = r + (rr_new / rr) * p
        rr = rr_new
    raise ConditioningError(
        f"CG did not reach relative residual {tol:g} in {max_iter} iterations",
        residual=math.sqrt(rr), segment=segment)


def _workspace(program, theta, data):
    return ad.Workspace(program, ad.as_array(theta), data)


def segment_score(program, theta_hat, data, s, t, workspace=None) -> np.ndarray:
    """``S_{s:t}(theta_hat)``; a tail segment uses ``S_{1:n} - S_{1:s-1}``."""
    ws = workspace or _workspace(program, theta_hat, data)
    n = ws.n
    if not 1 <= s <= t <= n:
        raise ConfigError(f"segment {s}:{t} outside 1..{n}")
    if t == n and s > 1:
        return ws.gradient(1, n) - ws.gradient(1, s - 1)
    return ws.gradient(s, t)


def segment_information(program, theta_hat, data, s, t, workspace=None) -> InformationOperator:
    """Observed information ``I_{s:t}`` as a matrix-free operator."""
    ws = workspace or _workspace(program, theta_hat, data)
    ws.tape.seed_for(s, t)
    return InformationOperator(lambda v: ws.info_vp(v, s, t), ws.dim, "segment")


def partial_information(program, theta_hat, data, tau, tol=1e-7, max_iter=None,
                        workspace=None) -> InformationOperator:
    """``v -> B v - B F^{-1} B v`` with the inner solve by CG."""
    ws = workspace or _workspace(program, theta_hat, data)
    n = ws.n
    if not 1 <= tau <= n - 1:
        raise ConfigError(f"tau must lie in 1..{n - 1}, got {tau}")
    tail = segment_information(program, theta_hat, data, tau + 1, n, ws)
    full = segment_information(program, theta_hat, data, 1, n, ws)

    def mv(v):
        bv = tail.apply(v)
        return bv - tail.apply(cg_solve(full, bv, tol=tol, max_iter=max_iter, segment=(1, n)))

    return InformationOperator(mv, ws.dim, "schur")


def split_normalizer(program, theta_hat, data, tau, subset=None, tol=1e-7, max_iter=None,
                     workspace=None) -> InformationOperator:
    """``v -> [A]_{TT}^{-1} v + [B]_{TT}^{-1} v`` by two CG solves."""
    ws = workspace or _workspace(program, theta_hat, data)
    n = ws.n
    head = segment_information(program, theta_hat, data, 1, tau, ws)
    tail = segment_information(program, theta_hat, data, tau + 1, n, ws)
    if subset is not None:
        head, tail = head.restrict(subset), tail.restrict(subset)

    def mv(v):
        return (cg_solve(head, v, tol=tol, max_iter=max_iter, segment=(1, tau))
                + cg_solve(tail, v, tol=tol, max_iter=max_iter, segment=(tau + 1, n)))

    return InformationOperator(mv, head.dim, "split-normalizer")


# ---------------------------------------------------------------------------
# single-tau statistics


def _dense_partial(ws, tau):
    n = ws.n
    a = ws.info(1, tau)
    b = ws.info(tau + 1, n)
    f = a + b
    try:
        fb = np.linalg.solve(f, b)
    except np.linalg.LinAlgError:
        raise ConditioningError("full-sample information is singular", segment=(1, n)) from None
    p = b - b @ fb
    return 0.5 * (p + p.T), a, b


def _quad_solve(mat, vec, segment):
    try:
        chol = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise ConditioningError("information block is not positive definite", segment=segment) from None
    y = np.linalg.solve(chol, vec)
    return float(y @ y)


def _tail_score(ws, tau):
    return ws.gradient(1, ws.n) - ws.gradient(1, tau)


def linear_stat(program, theta_hat, data, tau, method="direct", restrict=None,
                tol=1e-7, max_iter=None, workspace=None) -> float:
    """Generalized score statistic ``R_n(tau)`` (optionally on a component subset)."""
    ws = workspace or _workspace(program, theta_hat, data)
    idx = np.arange(ws.dim) if restrict is None else np.asarray(restrict, dtype=int)
    s = _tail_score(ws, tau)[idx]
    if method == "direct":
        p, _, _ = _dense_partial(ws, tau)
        return _quad_solve(p[np.ix_(idx, idx)], s, (tau + 1, ws.n))
    if method == "cg":
        norm = split_normalizer(program, theta_hat, data, tau, None if restrict is None else idx,
                                tol=tol, max_iter=max_iter, workspace=ws)
        return float(s @ norm.apply(s))
    raise ConfigError(f"unknown method {method!r}")


def diag_importance(program, theta_hat, data, tau, method="direct", tol=1e-7,
                    workspace=None) -> np.ndarray:
    """``v_i = S_i^2 / [I_n(tau)]_{ii}`` (``cg``: ``S_i^2 (1/A_ii + 1/B_ii)``).

    Components with a nonpositive diagonal are excluded (``nan``) with a warning.
    """
    ws = workspace or _workspace(program, theta_hat, data)
    s = _tail_score(ws, tau)
    if method == "direct":
        p, _, _ = _dense_partial(ws, tau)
        diag = np.diag(p)
        inv = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), np.nan)
    elif method == "cg":
        eye = np.eye(ws.dim)
        a_diag = np.array([ws.info_vp(e, 1, tau)[i] for i, e in enumerate(eye)])
        b_diag = np.array([ws.info_vp(e, tau + 1, ws.n)[i] for i, e in enumerate(eye)])
        ok = (a_diag > 0) & (b_diag > 0)
        inv = np.where(ok, 1.0 / np.where(ok, a_diag, 1.0) + 1.0 / np.where(ok, b_diag, 1.0), np.nan)
    else:
        raise ConfigError(f"unknown method {method!r}")
    if np.any(np.isnan(inv)):
        warnings.warn(f"components {np.flatnonzero(np.isnan(inv)).tolist()} excluded: "
                      f"nonpositive information diagonal at tau={tau}", RuntimeWarning, stacklevel=2)
    return s * s * inv


def top_subset(v, p) -> np.ndarray:
    """Indices of the ``p`` largest entries of ``v`` (descending, index order on ties)."""
    key = np.where(np.isnan(v), -np.inf, v)
    return np.argsort(-key, kind="stable")[:p]


def truncated_stat(program, theta_hat, data, tau, T, method="direct", tol=1e-7,
                   max_iter=None, workspace=None) -> float:
    """``R_n(tau, T)``: the statistic on the ``T`` block (``cg``: modified normalizer)."""
    T = np.asarray(sorted(int(i) for i in T), dtype=int)
    if T.size == 0:
        raise ConfigError("subset T must be nonempty")
    ws = workspace or _workspace(program, theta_hat, data)
    if T.min() < 0 or T.max() >= ws.dim:
        raise ConfigError(f"subset indices must lie in 0..{ws.dim - 1}")
    return linear_stat(program, theta_hat, data, tau, method, restrict=T, tol=tol,
                       max_iter=max_iter, workspace=ws)


# ---------------------------------------------------------------------------
# batched sweep over tau


@dataclass
class _Sweep:
    taus: np.ndarray
    comps: np.ndarray
    P: int
    r_lin: np.ndarray
    r_trunc: np.ndarray
    order: np.ndarray
    skipped: np.ndarray
    cond: np.ndarray
    reasons: dict = field(default_factory=dict)
    cg_iterations: int = 0


def _quad_and_cond(mats, vecs, cond_max):
    """``v^T M^{-1} v`` and the 2-norm condition number of each matrix.

    ``trace(M) trace(M^{-1})`` bounds the condition number from above, so the
    exact eigenvalue computation only runs where that bound exceeds ``cond_max``.
    """
    nb = mats.shape[0]
    cond = np.full(nb, np.inf)
    quad = np.full(nb, np.nan)
    pd = np.ones(nb, dtype=bool)
    try:
        np.linalg.cholesky(mats)
    except np.linalg.LinAlgError:
        for j in range(nb):
            try:
                np.linalg.cholesky(mats[j])
            except np.linalg.LinAlgError:
                pd[j] = False
    if not pd.any():
        return quad, cond
    inv = np.linalg.inv(mats[pd])
    bound = np.trace(mats[pd], axis1=1, axis2=2) * np.trace(inv, axis1=1, axis2=2)
    exact = bound > cond_max
    c = bound.copy()
    if exact.any():
        w = np.linalg.eigvalsh(mats[pd][exact])
        c[exact] = np.where(w[:, 0] > 0, w[:, -1] / np.where(w[:, 0] > 0, w[:, 0], 1.0), np.inf)
    cond[pd] = c
    quad[pd] = np.einsum("bi,bij,bj->b", vecs[pd], inv, vecs[pd])
    return quad, cond


def _direct_batch(a, f, f_inv, s, comps, P, ridge, cond_max):
    """Statistics for a batch of taus from dense head informations ``a``."""
    b = f[None] - a
    part = b - b @ f_inv @ b
    part = 0.5 * (part + np.swapaxes(part, -1, -2))
    if comps.size < f.shape[0]:
        part = part[:, comps][:, :, comps]
    if ridge:
        part = part + ridge * np.eye(comps.size)
    sr = s[:, comps]
    r_lin, cond = _quad_and_cond(part, sr, cond_max)
    skipped = ~(cond <= cond_max)
    diag = np.diagonal(part, axis1=1, axis2=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(diag > 0, sr * sr / diag, np.nan)
    key = np.where(np.isnan(v), -np.inf, v)
    order = np.argsort(-key, axis=1, kind="stable")[:, :P]
    valid = np.sum(~np.isnan(v), axis=1)
    nb = a.shape[0]
    r_trunc = np.full((nb, P), np.nan)
    rows = np.arange(nb)[:, None, None]
    for p in range(1, P + 1):
        idx = order[:, :p]
        sub = part[rows, idx[:, :, None], idx[:, None, :]]
        sp = np.take_along_axis(sr, idx, axis=1)
        ok = (~skipped) & (valid >= p)
        if np.any(ok):
            try:
                sol = np.linalg.solve(sub[ok], sp[ok][..., None])[..., 0]
                r_trunc[ok, p - 1] = np.sum(sp[ok] * sol, axis=1)
            except np.linalg.LinAlgError:
                for j in np.flatnonzero(ok):
                    try:
                        r_trunc[j, p - 1] = float(sp[j] @ np.linalg.solve(sub[j], sp[j]))
                    except np.linalg.LinAlgError:
                        pass
    r_lin = np.where(skipped, np.nan, r_lin)
    return r_lin, r_trunc, order, skipped, cond


def _sweep_direct(ws, taus, comps, P, cfg):
    n, d = ws.n, ws.dim
    nb = taus.size
    out = _Sweep(taus, comps, P, np.empty(nb), np.empty((nb, P)), np.empty((nb, P), dtype=int),
                 np.empty(nb, dtype=bool), np.empty(nb))
    use_jets = n * d * d <= JET_CAP
    if use_jets:
        scores, hess = ws.jets(order=2)
        cum_s = np.cumsum(scores, axis=0)
        cum_i = -np.cumsum(hess, axis=0)
        f = cum_i[-1]
        full = cum_s[-1]
    else:
        f = ws.info()
        full = ws.gradient()
    f = 0.5 * (f + f.T)
    try:
        f_inv = np.linalg.inv(f)
    except np.linalg.LinAlgError:
        raise ConditioningError("full-sample information is singular", segment=(1, n)) from None
    if not np.all(np.isfinite(f_inv)):
        raise ConditioningError("full-sample information is singular", segment=(1, n))
    chunk = max(1, min(nb, int(4_000_000 // max(d * d, 1))))
    for lo in range(0, nb, chunk):
        tt = taus[lo:lo + chunk]
        if use_jets:
            a = cum_i[tt - 1]
            s = full[None] - cum_s[tt - 1]
        else:
            a = np.stack([ws.info(1, int(t)) for t in tt])
            s = np.stack([full - ws.gradient(1, int(t)) for t in tt])
        res = _direct_batch(a, f, f_inv, s, comps, P, cfg.ridge, cfg.cond_max)
        sl = slice(lo, lo + tt.size)
        out.r_lin[sl], out.r_trunc[sl], out.order[sl], out.skipped[sl], out.cond[sl] = res
    for j in np.flatnonzero(out.skipped):
        c = out.cond[j]
        out.reasons[int(taus[j])] = ("partial information not positive definite" if not np.isfinite(c)
                                     else f"condition number {c:.3g} exceeds {cfg.cond_max:g}")
    return out


def _sweep_cg(ws, taus, comps, P, cfg):
    n, d = ws.n, ws.dim
    nb = taus.size
    k = comps.size
    out = _Sweep(taus, comps, P, np.full(nb, np.nan), np.full((nb, P), np.nan),
                 np.zeros((nb, P), dtype=int), np.zeros(nb, dtype=bool), np.full(nb, np.nan))
    if n * d <= JET_CAP:
        scores, _ = ws.jets(order=1)
        cum_s = np.cumsum(scores, axis=0)
        head_score = lambda t: cum_s[t - 1]  # noqa: E731
        full = cum_s[-1]
    else:
        head_score = lambda t: ws.gradient(1, t)  # noqa: E731
        full = ws.gradient()
    eye = np.eye(d)
    f_diag = np.array([ws.info_vp(eye[i])[i] for i in comps])
    tol, max_iter = cfg.cg_tol, cfg.cg_max_iter
    ridge = cfg.ridge
    iters = 0

    def embed(v, idx):
        x = np.zeros(d)
        x[idx] = v
        return x

    for j, tau in enumerate(taus):
        tau = int(tau)
        s = (full - head_score(tau))[comps]
        a_diag = np.array([ws.info_vp(eye[i], 1, tau)[i] for i in comps]) + ridge
        b_diag = f_diag - a_diag + 2 * ridge
        ok = (a_diag > 0) & (b_diag > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            v = np.where(ok, s * s * (1.0 / a_diag + 1.0 / b_diag), np.nan)
        order = top_subset(v, P)
        out.order[j] = comps[order]
        if not ok.all():
            # a PSD block with a nonpositive diagonal entry is singular
            seg = (1, tau) if not (a_diag > 0).all() else (tau + 1, n)
            out.skipped[j] = True
            out.reasons[tau] = f"information of segment {seg[0]}:{seg[1]} is singular (zero diagonal entry)"
            continue

        def stat(sub):
            nonlocal iters
            idx = comps[sub]
            ss = s[sub]
            val = 0.0
            for lo_, hi_ in ((1, tau), (tau + 1, n)):
                op = (lambda lo_, hi_: lambda x: ws.info_vp(embed(x, idx), lo_, hi_)[idx] + ridge * x)(lo_, hi_)
                res = cg_solve(op, ss, tol=tol, max_iter=max_iter if max_iter else 2 * idx.size,
                               full_output=True, segment=(lo_, hi_))
                iters = max(iters, res.iterations)
                val += float(ss @ res.x)
            return val

        try:
            out.r_lin[j] = stat(np.arange(k))
            for p in range(1, P + 1):
                if np.sum(ok) >= p:
                    out.r_trunc[j, p - 1] = stat(order[:p])
        except ConditioningError as exc:
            out.skipped[j] = True
            out.r_lin[j] = np.nan
            out.r_trunc[j] = np.nan
            out.reasons[tau] = str(exc)
    out.cg_iterations = iters
    return out


# ---------------------------------------------------------------------------
# report and the auto-test


@dataclass
class DetectionReport:
    """Per-tau statistics, thresholds, the argmax changepoints, and the decisions.

    Per-tau arrays are aligned with ``taus``; ``r_trunc[j, p-1]`` is
    ``R_n(tau_j, T_{tau_j, p})`` and ``order[j, :p]`` lists ``T_{tau_j, p}``
    (full-vector component indices, by decreasing importance).
    """

    taus: np.ndarray
    r_lin_tau: np.ndarray
    r_trunc: np.ndarray
    order: np.ndarray
    r_scan_tau: np.ndarray
    p_star_tau: np.ndarray
    skipped: np.ndarray
    skip_reasons: dict
    cond: np.ndarray
    r_lin: float
    r_scan: float
    tau_hat_lin: int | None
    tau_hat_scan: int | None
    subset_hat: tuple
    psi_lin: bool
    psi_scan: bool
    psi_auto: bool
    thresholds: ThresholdSet
    theta_hat: np.ndarray
    config: TestConfig
    n: int
    d: int
    fit_iterations: int = 0
    fit_grad_norm: float = 0.0
    fit_failed: bool = False
    wall_clock: float = 0.0
    cg_iterations: int = 0
    bootstrap: dict | None = None

    @property
    def per_tau(self) -> list[dict]:
        out = []
        for j, tau in enumerate(self.taus):
            P = self.r_trunc.shape[1]
            out.append({
                "tau": int(tau),
                "r_lin": _num(self.r_lin_tau[j]),
                "subsets": [sorted(int(i) for i in self.order[j, :p]) for p in range(1, P + 1)],
                "r_trunc": [_num(x) for x in self.r_trunc[j]],
                "r_scan_norm": _num(self.r_scan_tau[j]),
                "p_star": int(self.p_star_tau[j]),
                "skipped": bool(self.skipped[j]),
            })
        return out

    def to_json(self, include_trace=True) -> dict:
        out = {
            "n": self.n, "d": self.d,
            "r_lin": self.r_lin, "r_scan": self.r_scan,
            "tau_hat_lin": self.tau_hat_lin, "tau_hat_scan": self.tau_hat_scan,
            "subset_hat": list(self.subset_hat),
            "psi_lin": self.psi_lin, "psi_scan": self.psi_scan, "psi_auto": self.psi_auto,
            "thresholds": self.thresholds.to_json(),
            "theta_hat": [float(x) for x in self.theta_hat],
            "config": self.config.to_json(),
            "diagnostics": {
                "fit_iterations": self.fit_iterations, "fit_grad_norm": self.fit_grad_norm,
                "fit_failed": self.fit_failed, "wall_clock": self.wall_clock,
                "cg_iterations_max": self.cg_iterations,
                "skipped_taus": {str(k): v for k, v in self.skip_reasons.items()},
            },
            "bootstrap": self.bootstrap,
        }
        if include_trace:
            out["per_tau"] = self.per_tau
        return out

    def write_json(self, path, include_trace=True) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(include_trace), fh, indent=2, sort_keys=True, allow_nan=False)

    def write_trace_csv(self, path, config_hash: str | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            header = ["tau", "r_lin", "r_scan_norm", "p_star", "subset"]
            writer.writerow(header + (["config_hash"] if config_hash else []))
            for j, tau in enumerate(self.taus):
                p = int(self.p_star_tau[j])
                subset = " ".join(str(i) for i in sorted(int(i) for i in self.order[j, :p]))
                row = [int(tau), _csv_num(self.r_lin_tau[j]), _csv_num(self.r_scan_tau[j]), p, subset]
                writer.writerow(row + ([config_hash] if config_hash else []))


def _num(x):
    x = float(x)
    return x if np.isfinite(x) else None


def _csv_num(x):
    x = float(x)
    return repr(x) if np.isfinite(x) else ""


def _fit(program, data, cfg, init):
    tol = cfg.fit_tol if cfg.fit_tol is not None else 1e-7 * max(data.n, 1)
    try:
        fit = fit_mle(program, data, init=init, tol=tol, max_iter=cfg.fit_max_iter)
        return fit.values, fit.iterations, fit.grad_norm, False
    except ConvergenceError as exc:
        if not cfg.accept_unconverged or exc.best is None:
            raise
        return exc.best.values, exc.best.iterations, exc.best.grad_norm, True


def sweep(program, theta_hat, data, config: TestConfig, workspace=None) -> _Sweep:
    """Per-tau linear and truncated statistics over the configured tau range."""
    ws = workspace or _workspace(program, theta_hat, data)
    comps = config.components(ws.dim)
    P = config.card(comps.size)
    taus = config.taus(ws.n)
    if config.method == "direct":
        out = _sweep_direct(ws, taus, comps, P, config)
        out.order = comps[out.order]
    else:
        out = _sweep_cg(ws, taus, comps, P, config)
    return out


def _normalize(sw: _Sweep, h_scan):
    h = np.asarray(h_scan, dtype=float)
    with np.errstate(invalid="ignore"):
        ratio = np.where(np.isfinite(h)[None, :], sw.r_trunc / h[None, :], 0.0)
    ratio = np.where(np.isnan(ratio), -np.inf, ratio)
    p_star = np.argmax(ratio, axis=1) + 1
    r_scan = np.max(ratio, axis=1)
    r_scan = np.where(sw.skipped | ~np.isfinite(r_scan), np.nan, r_scan)
    return r_scan, p_star


def _argmax(values):
    key = np.where(np.isnan(values), -np.inf, values)
    if key.size == 0 or not np.isfinite(key.max()):
        return None, 0.0
    j = int(np.argmax(key))
    return j, float(max(key[j], 0.0))


def scan_stat(program, theta_hat, data, P, alpha_s, thresholds=None, config=None):
    """``(R_scan, tau_hat, T_hat)`` with ``R_scan = max_{tau, p} R_n(tau, T_{tau,p}) / H_p``."""
    config = (config or TestConfig()).replace(max_card=P)
    ws = _workspace(program, theta_hat, data)
    sw = sweep(program, theta_hat, data, config, ws)
    if thresholds is None:
        d_eff = sw.comps.size
        thresholds = ThresholdSet.bonferroni(d_eff, ws.n, P, 0.0, alpha_s).h_scan
    r_scan, p_star = _normalize(sw, thresholds)
    j, value = _argmax(r_scan)
    if j is None:
        return 0.0, None, ()
    subset = tuple(sorted(int(i) for i in sw.order[j, :p_star[j]]))
    return value, int(sw.taus[j]), subset


def auto_test(program, data, config: TestConfig | None = None, theta_hat=None,
              init=None) -> DetectionReport:
    """Fit the MLE (unless ``theta_hat`` is given), sweep tau, and apply the thresholds.

    ``psi_lin = R_lin > H_lin(alpha_l)``, ``psi_scan = R_scan > 1`` and
    ``psi_auto = psi_lin or psi_scan``. With ``config.bootstrap = B > 0`` the
    thresholds are replaced by parametric-bootstrap quantiles of ``R_lin``
    and of the normalized ``R_scan``.
    """
    cfg = config or TestConfig()
    start = time.perf_counter()
    if theta_hat is None:
        theta, fit_it, fit_grad, fit_failed = _fit(program, data, cfg, init)
    else:
        theta, fit_it, fit_grad, fit_failed = ad.as_array(theta_hat), 0, float("nan"), False
    ws = _workspace(program, theta, data)
    if theta_hat is None:
        fit_grad = float(np.max(np.abs(ws.gradient())))
    sw = sweep(program, theta, data, cfg, ws)
    d_eff = sw.comps.size
    al, as_ = cfg.levels()
    thr = ThresholdSet.bonferroni(d_eff, ws.n, sw.P, al, as_)
    r_scan_tau, p_star = _normalize(sw, thr.h_scan)
    j_lin, r_lin = _argmax(sw.r_lin)
    j_scan, r_scan = _argmax(r_scan_tau)
    boot = None
    lin_cut, scan_cut = thr.h_lin, 1.0
    if cfg.bootstrap:
        from .calibrate import bootstrap_distribution

        res = bootstrap_distribution(program, data, theta, cfg, B=cfg.bootstrap, seed=cfg.seed)
        lin_cut = empirical_quantile(res.r_lin, al)
        scan_cut = empirical_quantile(res.r_scan, as_)
        boot = {"B": cfg.bootstrap, "failures": res.failures,
                "q_lin": _num(lin_cut), "q_scan": _num(scan_cut),
                "note": "quantiles of R_lin and of the per-p normalized R_scan"}
    psi_lin = bool(r_lin > lin_cut)
    psi_scan = bool(r_scan > scan_cut)
    subset = () if j_scan is None else tuple(sorted(int(i) for i in sw.order[j_scan, :p_star[j_scan]]))
    return DetectionReport(
        taus=sw.taus, r_lin_tau=sw.r_lin, r_trunc=sw.r_trunc, order=sw.order,
        r_scan_tau=r_scan_tau, p_star_tau=p_star, skipped=sw.skipped, skip_reasons=sw.reasons,
        cond=sw.cond, r_lin=r_lin, r_scan=r_scan,
        tau_hat_lin=None if j_lin is None else int(sw.taus[j_lin]),
        tau_hat_scan=None if j_scan is None else int(sw.taus[j_scan]),
        subset_hat=subset, psi_lin=psi_lin, psi_scan=psi_scan, psi_auto=psi_lin or psi_scan,
        thresholds=thr, theta_hat=np.array(theta), config=cfg, n=ws.n, d=ws.dim,
        fit_iterations=int(fit_it), fit_grad_norm=float(fit_grad), fit_failed=fit_failed,
        wall_clock=time.perf_counter() - start, cg_iterations=sw.cg_iterations, bootstrap=boot)
