"""Projected gradient descent on the capped simplex.

Minimizes x^T Q x - 2 b^T x over {x in [0,1]^n : sum(x) = N}.  Q is a cosine
Gram matrix, either as-is (convex) or with its diagonal zeroed (possibly
non-convex); b is zero for uncoordinated selection and G^T h for the
coordinated client subproblem.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradients import GramMatrix, SelectionWeights


class InfeasibleError(ValueError):
    """The budget exceeds the number of variables."""


@dataclass(frozen=True)
class SolverOptions:
    max_iters: int = 5000
    tolerance: float = 1e-9
    power_iter_steps: int = 50
    # Stationarity requirement: projected gradient norm below
    # pg_tolerance * (1 + |objective|) before the solve counts as converged.
    pg_tolerance: float = 1e-6


@dataclass(frozen=True)
class QpProblem:
    Q: GramMatrix
    b: np.ndarray
    budget: int

    def __post_init__(self):
        b = np.asarray(self.b, dtype=np.float64)
        object.__setattr__(self, "b", b)
        if b.size != self.Q.size:
            raise ValueError("linear term length must match Gram size")
        if not (1 <= self.budget <= self.Q.size):
            raise ValueError("budget must satisfy 1 <= N <= n")

    def objective(self, x: np.ndarray) -> float:
        return float(x @ self.Q.values @ x - 2.0 * self.b @ x)


@dataclass(frozen=True)
class QpSolution:
    x: SelectionWeights
    objective: float
    iterations: int
    converged: bool
    projected_gradient_norm: float


def _bisect_clip(y: np.ndarray, budget: float, feas_tol: float) -> np.ndarray:
    """Bisection core for the capped-simplex projection (scalar loops so it
    can be JIT-compiled; the numpy fallback is semantically identical)."""
    n = y.shape[0]
    lo = y[0]
    hi = y[0]
    for i in range(n):
        if y[i] < lo:
            lo = y[i]
        if y[i] > hi:
            hi = y[i]
    lo -= 1.0
    x = np.empty(n)
    tau = 0.5 * (lo + hi)
    for _ in range(200):
        tau = 0.5 * (lo + hi)
        s = 0.0
        for i in range(n):
            v = y[i] - tau
            if v < 0.0:
                v = 0.0
            elif v > 1.0:
                v = 1.0
            x[i] = v
            s += v
        if abs(s - budget) <= feas_tol:
            return x
        if s > budget:
            lo = tau
        else:
            hi = tau
    return x


def _pgd_core(q: np.ndarray, b: np.ndarray, budget: float, lip: float,
              max_iters: int, tolerance: float, pg_tolerance: float,
              x: np.ndarray):
    """Projected-gradient loop (scalar/JIT-friendly form).

    Returns (x, f, iterations, converged_flag, pg_norm); semantics identical
    to the documented behavior of :func:`solve`.
    """
    n = x.shape[0]
    f = x @ (q @ x) - 2.0 * (b @ x)
    streak = 0
    pg_norm = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        grad = 2.0 * (q @ x - b)
        x_new = _bisect_clip(x - grad / lip, budget, 1e-12)
        f_new = x_new @ (q @ x_new) - 2.0 * (b @ x_new)
        diff = 0.0
        for i in range(n):
            diff += (x_new[i] - x[i]) ** 2
        pg_norm = lip * np.sqrt(diff)
        rel_dec = (f - f_new) / max(1.0, abs(f))
        if rel_dec < tolerance:
            streak += 1
        else:
            streak = 0
        x = x_new
        f = f_new
        if streak >= 3 and pg_norm <= pg_tolerance * (1.0 + abs(f)):
            break
    converged = streak >= 3 and pg_norm <= pg_tolerance * (1.0 + abs(f))
    return x, f, it, converged, pg_norm


try:  # pragma: no cover - exercised implicitly when numba is installed
    import numba

    _bisect_clip = numba.njit(cache=True)(_bisect_clip)
    _pgd_core = numba.njit(cache=True)(_pgd_core)
except ImportError:  # pragma: no cover
    pass


def project_capped_simplex(y, budget: int, feas_tol: float = 1e-12) -> np.ndarray:
    """Euclidean projection of y onto {x in [0,1]^n : sum(x) = N}.

    Bisection on the shift tau with x_i = clip(y_i - tau, 0, 1); the sum is
    continuous and non-increasing in tau, bracketed by [min(y)-1, max(y)].
    """
    y = np.ascontiguousarray(y, dtype=np.float64)
    n = y.size
    if budget > n:
        raise InfeasibleError(f"budget {budget} > {n} variables")
    if budget == n:
        return np.ones(n)
    return _bisect_clip(y, float(budget), feas_tol)


def _spectral_norm(q: np.ndarray, steps: int) -> float:
    """Power-iteration estimate of the spectral norm of a symmetric matrix."""
    v = np.ones(q.shape[0]) / np.sqrt(q.shape[0])
    sigma = 0.0
    for _ in range(steps):
        w = q @ v
        sigma = float(np.linalg.norm(w))
        if sigma == 0.0:
            return 0.0
        v = w / sigma
    return sigma


def step_lipschitz(q: np.ndarray, power_iter_steps: int = 50) -> float:
    """Step-size constant for PGD: spectral norm of 2Q, inflated 1% to guard
    against power iteration under-estimating, floored away from zero."""
    return max(2.0 * _spectral_norm(q, power_iter_steps) * 1.01, 1e-6)


def solve(problem: QpProblem, opts: SolverOptions | None = None,
          x0: np.ndarray | None = None, lip: float | None = None) -> QpSolution:
    """Fixed-step projected gradient descent from the uniform feasible point.

    Step size 1/L with L the (slightly inflated) power-iteration estimate of
    the spectral norm of 2Q.  Convergence requires both a stalled objective
    (relative decrease below tolerance for 3 consecutive iterations) and a
    small projected gradient, so returned points are feasible stationary
    points even in the non-convex case.  ``x0`` warm-starts the iteration
    (it is projected onto the feasible set first); callers that resolve a
    sequence of nearby problems pass the previous solution.  ``lip`` lets
    callers that reuse the same Q cache :func:`step_lipschitz` once.
    """
    opts = opts or SolverOptions()
    q = np.ascontiguousarray(problem.Q.values)
    b = np.ascontiguousarray(problem.b)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite entries in Q or b")
    n = problem.Q.size
    budget = problem.budget
    if lip is None:
        lip = step_lipschitz(q, opts.power_iter_steps)

    if x0 is None:
        x = np.full(n, budget / n)
    else:
        x = project_capped_simplex(np.asarray(x0, dtype=np.float64), budget)
    x, f, it, converged, pg_norm = _pgd_core(
        q, b, float(budget), float(lip), opts.max_iters, opts.tolerance,
        opts.pg_tolerance, x)
    weights = SelectionWeights(x, budget)
    return QpSolution(weights, float(f), int(it), bool(converged), float(pg_norm))
