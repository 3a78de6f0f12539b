"""Maximum likelihood fitting by BFGS with a backtracking line search."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import adcore as ad
from ..errors import ConvergenceError, DomainError, NumericError

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class FitResult(ad.ParameterVector):
    """Fitted parameter vector plus optimizer diagnostics.

    ``history`` lists the log-likelihood after every accepted step, starting
    with the initial point.
    """

    iterations: int = 0
    grad_norm: float = float("nan")
    loglik: float = float("nan")
    history: tuple = field(default=(), repr=False)


class _Objective:
    """Negative log-likelihood in optimizer coordinates ``u``."""

    def __init__(self, program, data):
        self.program = program
        self.data = data
        self.reparam = program.reparam

    def natural(self, u):
        return u if self.reparam is None else self.reparam.to_natural(u)

    def coords(self, theta):
        return np.array(theta, dtype=float) if self.reparam is None else self.reparam.from_natural(theta)

    def evaluate(self, u):
        theta = self.natural(u)
        ws = ad.Workspace(self.program, theta, self.data)
        value = ws.value()
        if not np.isfinite(value):
            raise NumericError("log-likelihood is not finite")
        score = ws.gradient()
        grad_u = -score if self.reparam is None else -(self.reparam.jacobian(u).T @ score)
        return ws, -value, grad_u, score


def _information(ws, max_jet_elements=5_000_000, max_hvp_dim=300):
    n, d = ws.n, ws.dim
    if n * d * d <= max_jet_elements:
        _, hess = ws.jets(order=2)
        return -hess.sum(axis=0)
    if d <= max_hvp_dim:
        return ws.info()
    return None


def _initial_inverse(obj, ws, u, grad):
    info = _information(ws)
    if info is not None:
        if obj.reparam is not None:
            jac = obj.reparam.jacobian(u)
            info = jac.T @ info @ jac
        info = 0.5 * (info + info.T)
        try:
            chol = np.linalg.cholesky(info)
            inv = np.linalg.inv(chol)
            return inv.T @ inv
        except np.linalg.LinAlgError:
            pass
    scale = 1.0 / max(np.linalg.norm(grad), 1.0)
    return scale * np.eye(u.size)


def fit_mle(program, data, init=None, tol=1e-6, max_iter=200) -> FitResult:
    """Maximize the conditional log-likelihood of ``data`` under ``program``.

    Stops once ``max |S_{1:n}(theta)| <= tol``. Simplex-constrained models are
    optimized in logit coordinates; trial points that leave the domain or
    produce non-finite values halve the step.

    Raises
    ------
    DomainError
        If the initial point is outside the parameter domain.
    ConvergenceError
        After ``max_iter`` iterations, or when no step makes progress; the
        best iterate is attached as ``best``.
    """
    program.check_data(data)
    theta0 = program.initial_guess(data) if init is None else ad.as_array(init)
    program.check_domain(theta0)
    labels = program.labels if len(program.labels) == theta0.size else None
    obj = _Objective(program, data)
    u = obj.coords(theta0)
    ws, f, grad, score = obj.evaluate(u)
    hinv = None
    history = [-f]
    reset = False

    def result(it):
        theta = obj.natural(u)
        return FitResult(theta, labels, iterations=it, grad_norm=float(np.max(np.abs(score))),
                         loglik=-f, history=tuple(history))

    for it in range(max_iter + 1):
        if np.max(np.abs(score)) <= tol:
            return result(it)
        if it == max_iter:
            break
        if hinv is None:
            hinv = _initial_inverse(obj, ws, u, grad)
        direction = -hinv @ grad
        slope = float(grad @ direction)
        if not slope < 0:
            hinv = np.eye(u.size) / max(np.linalg.norm(grad), 1.0)
            direction = -hinv @ grad
            slope = float(grad @ direction)
        step = 1.0
        accepted = None
        for _ in range(60):
            trial = u + step * direction
            try:
                ws_t, f_t, g_t, s_t = obj.evaluate(trial)
            except (DomainError, NumericError, FloatingPointError):
                step *= 0.5
                continue
            armijo = f_t <= f + 1e-4 * step * slope
            flat = f_t <= f + 16 * _EPS * abs(f) and np.linalg.norm(g_t) < np.linalg.norm(grad)
            if armijo or flat:
                accepted = (trial, ws_t, f_t, g_t, s_t)
                break
            step *= 0.5
        if accepted is None:
            if reset:
                break
            # one retry along steepest descent before giving up
            hinv = np.eye(u.size) / max(np.linalg.norm(grad), 1.0)
            reset = True
            continue
        reset = False
        trial, ws, f_new, g_new, score = accepted
        s_vec = trial - u
        if np.linalg.norm(s_vec) <= 1e-14 * (1.0 + np.linalg.norm(u)):
            break
        y_vec = g_new - grad
        sy = float(s_vec @ y_vec)
        if sy > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            rho = 1.0 / sy
            hy = hinv @ y_vec
            hinv = (hinv - rho * (np.outer(s_vec, hy) + np.outer(hy, s_vec))
                    + (rho * rho * float(y_vec @ hy) + rho) * np.outer(s_vec, s_vec))
        u, f, grad = trial, f_new, g_new
        history.append(-f)
    best = result(it)
    raise ConvergenceError(
        f"no convergence after {best.iterations} iterations (max |score| = {best.grad_norm:.3g})",
        best=best, grad_norm=best.grad_norm)
