"""Box-constrained limited-memory BFGS for small dense problems.

Active-set handling follows the gradient-projection idea: variables pinned
at a bound with the gradient pushing outward are frozen for the iteration,
the two-loop recursion runs on the free variables, and trial points are
projected back onto the box during a backtracking Armijo search.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DataError, NonFiniteObjective


class ObjectiveEvaluation(NamedTuple):
    value: float
    gradient: np.ndarray


Objective = Callable[[np.ndarray], "ObjectiveEvaluation | tuple[float, np.ndarray]"]


@dataclass(frozen=True, eq=False)
class BoxBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise DataError(f"bound lengths differ: {lo.shape} vs {hi.shape}")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or np.any(lo > hi):
            raise DataError("lower bounds must not exceed upper bounds")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls, n: int) -> "BoxBounds":
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.minimum(np.maximum(x, self.lower), self.upper)

    def contains(self, x) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))


@dataclass
class OptimizerOptions:
    max_iters: int = 100
    grad_tol: float = 1e-6
    memory: int = 8
    armijo: float = 1e-4
    max_backtracks: int = 40


CONVERGED = "converged"
MAX_ITERS = "max_iters"
LINE_SEARCH_FAILURE = "line_search_failure"


@dataclass
class OptimizeResult:
    x: np.ndarray
    value: float
    status: str
    iterations: int
    evaluations: int
    values: list[float] = field(default_factory=list)

    def __iter__(self):
        yield self.x
        yield self.value
        yield self.status


def projected_gradient(x, g, bounds: BoxBounds) -> np.ndarray:
    return bounds.project(x - g) - x


def _evaluate(f: Objective, x: np.ndarray) -> tuple[float, np.ndarray]:
    value, grad = f(x)
    value = float(value)
    grad = np.asarray(grad, dtype=float)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteObjective(f"objective returned non-finite value at x={x}")
    return value, grad


def _two_loop(g: np.ndarray, pairs, free: np.ndarray) -> np.ndarray:
    q = np.where(free, g, 0.0)
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * np.dot(s[free], q[free])
        q[free] -= a * y[free]
        alphas.append(a)
    if pairs:
        s, y, _ = pairs[-1]
        yy = np.dot(y[free], y[free])
        gamma = np.dot(s[free], y[free]) / yy if yy > 0 else 1.0
        if gamma <= 0:
            gamma = 1.0
        q *= gamma
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * np.dot(y[free], q[free])
        q[free] += (a - b) * s[free]
    return -q


def minimize(
    f: Objective,
    x0,
    bounds: BoxBounds | None = None,
    opts: OptimizerOptions | None = None,
) -> OptimizeResult:
    """Minimize ``f`` over a box; ``f(x)`` returns ``(value, gradient)``.

    Every iterate is feasible and accepted steps never raise the objective.
    """
    opts = opts or OptimizerOptions()
    x = np.asarray(x0, dtype=float).reshape(-1).copy()
    bounds = bounds or BoxBounds.unbounded(len(x))
    if len(bounds.lower) != len(x):
        raise DataError(f"bounds have length {len(bounds.lower)}, x0 has {len(x)}")
    x = bounds.project(x)
    fx, g = _evaluate(f, x)
    evals = 1
    values = [fx]
    pairs: deque = deque(maxlen=max(opts.memory, 1))
    status = MAX_ITERS
    it = 0
    while it < opts.max_iters:
        pg = projected_gradient(x, g, bounds)
        if np.max(np.abs(pg), initial=0.0) <= opts.grad_tol:
            status = CONVERGED
            break
        it += 1
        at_lo = (x <= bounds.lower) & (g > 0)
        at_hi = (x >= bounds.upper) & (g < 0)
        free = ~(at_lo | at_hi)
        d = _two_loop(g, pairs, free) if pairs else np.where(free, -g, 0.0)
        if np.dot(d, g) >= 0:
            pairs.clear()
            d = np.where(free, -g, 0.0)
        step = 1.0
        if not pairs:
            step = min(1.0, 1.0 / max(np.linalg.norm(d), 1e-300))
        accepted = False
        for _ in range(opts.max_backtracks):
            xt = bounds.project(x + step * d)
            dx = xt - x
            if not np.any(dx):
                break
            ft, gt = _evaluate(f, xt)
            evals += 1
            if ft <= fx + opts.armijo * np.dot(g, dx) and ft <= fx:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if pairs:
                pairs.clear()
                continue
            status = LINE_SEARCH_FAILURE
            break
        y = gt - g
        sy = np.dot(dx, y)
        if sy > 1e-12 * max(np.dot(y, y), 1e-300):
            pairs.append((dx, y, 1.0 / sy))
        x, fx, g = xt, ft, gt
        values.append(fx)
    return OptimizeResult(x, fx, status, it, evals, values)


def check_gradient(f: Objective, x, rel_step: float = 1e-6) -> float:
    """Relative error between the analytic gradient and central differences.

    Step per coordinate is ``rel_step * (1 + |x_i|)``. The error is
    ``||g - g_fd|| / max(||g||, ||g_fd||)`` (0 when both vanish).
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    _, g = f(x)
    g = np.asarray(g, dtype=float)
    fd = np.empty_like(x)
    for i in range(len(x)):
        h = rel_step * (1.0 + abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd[i] = (f(xp)[0] - f(xm)[0]) / (2 * h)
    scale = max(np.linalg.norm(g), np.linalg.norm(fd))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(g - fd) / scale)


def _solve_spd(h, rhs: np.ndarray, ridge: float) -> np.ndarray:
    """Solve ``(H + ridge I) x = rhs``; dense Cholesky unless ``H`` is large and sparse."""
    n = h.shape[0]
    if n <= 6000 or h.nnz > 0.05 * n * n:
        dense = h.toarray()
        dense[np.diag_indices(n)] += ridge
        return sla.cho_solve(sla.cho_factor(dense, check_finite=False), rhs, check_finite=False)
    return spla.splu((h + ridge * sp.identity(n, format="csc")).tocsc()).solve(rhs)


@dataclass
class QuadraticResult:
    x: np.ndarray
    value_change: float
    converged: bool
    iterations: int


def minimize_box_quadratic(
    hessian,
    gradient,
    x0,
    bounds: BoxBounds,
    grad_tol: float = 1e-8,
    max_iters: int = 500,
    active_band: float = 1e-3,
) -> QuadraticResult:
    """Projected Newton for ``q(x) = g^T (x - x0) + 0.5 (x - x0)^T H (x - x0)`` over a box.

    ``H`` is symmetric positive semi-definite (dense or scipy sparse).
    Variables with zero curvature do not influence ``q`` beyond their
    (then zero) gradient and are left alone. Near-bound variables pushed
    outward take a diagonal step; the rest take a damped Newton step whose
    ridge grows when the projected search has to backtrack and shrinks when
    the full step is taken. ``value_change`` is ``q(x) - q(x0)``.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    g0 = np.asarray(gradient, dtype=float).reshape(-1)
    h = sp.csc_matrix(hessian)
    diag = h.diagonal()
    scale = max(float(np.max(np.abs(diag), initial=0.0)), 1e-300)
    live = diag > 0
    mu = 1e-6 * scale
    x = bounds.project(x0)

    # q is tracked through exact per-step changes g.s + s^T H s / 2, which
    # stay resolvable long after q itself stops changing in floating point
    dz = x - x0
    change = float(g0 @ dz + 0.5 * dz @ (h @ dz))
    converged = False
    it = 0
    while it < max_iters:
        g = g0 + h @ (x - x0)
        pg = np.where(live, projected_gradient(x, g, bounds), 0.0)
        worst = float(np.max(np.abs(pg), initial=0.0))
        if worst <= grad_tol:
            converged = True
            break
        it += 1
        eps = min(active_band, worst)
        held = ((x <= bounds.lower + eps) & (g > 0)) | ((x >= bounds.upper - eps) & (g < 0))
        free = np.flatnonzero(~held & live)
        pinned = np.flatnonzero(held & live)
        d = np.zeros_like(x)
        d[pinned] = -g[pinned] / diag[pinned]
        if len(free):
            d[free] = -_solve_spd(h[free][:, free], g[free], mu)
        step = 1.0
        accepted = False
        for _ in range(60):
            xt = bounds.project(x + step * d)
            s = xt - x
            slope = float(g @ s)
            dq = slope + 0.5 * float(s @ (h @ s))
            if dq <= 1e-4 * slope and dq <= 0:
                accepted = True
                break
            step *= 0.5
        if not accepted or not np.any(xt != x):
            break
        mu = mu * 10 if step < 1 else max(mu / 10, 1e-14 * scale)
        x = xt
        change += dq
    return QuadraticResult(x, change, converged, it)
