"""Optimal-transport solvers and alignment maps.

All problems use uniform marginals over neurons. Plans are float64.

An *alignment map* is a transport plan with every column divided by its sum:
rows index neurons of the model being aligned, columns index neurons of the
anchor, and column ``j`` holds the convex weights that rebuild anchor neuron
``j`` from the other model's neurons. A hard square plan becomes an exact 0/1
permutation matrix. Weights are rewritten as ``M_in.T @ W @ M_out``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .linalg import ShapeError, pairwise_sq_dist

AlignmentMap = np.ndarray

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 10_000


class OTError(ValueError):
    """Invalid optimal-transport problem."""


class SinkhornConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class CostMatrix:
    c: np.ndarray
    normalized: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.c.shape


@dataclass(frozen=True)
class TransportPlan:
    t: np.ndarray
    a: np.ndarray
    b: np.ndarray
    lam: float  # 0 for the exact (EMD) solution
    cost: float  # <T, C>
    iterations: int = 0
    violation: float = 0.0  # max marginal violation at exit
    converged: bool = True


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=x.copy(), where=norms > 0)


def build_cost_matrix(
    x: np.ndarray,
    y: np.ndarray,
    normalize_features: bool = False,
    normalize_cost: bool = False,
) -> CostMatrix:
    """Squared-Euclidean ground cost between feature rows of ``x`` and ``y``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1] or x.shape[1] < 1:
        raise ShapeError(f"cost matrix: feature mismatch {x.shape} vs {y.shape}")
    if np.isnan(x).any() or np.isnan(y).any():
        raise OTError("cost matrix: NaN in neuron features")
    if normalize_features:
        x, y = _unit_rows(x), _unit_rows(y)
    c = pairwise_sq_dist(x, y)
    normalized = False
    if normalize_cost:
        peak = c.max() if c.size else 0.0
        if peak > 0:
            c = c / peak
            normalized = True
    return CostMatrix(c=c, normalized=normalized)


def _as_cost(c) -> CostMatrix:
    return c if isinstance(c, CostMatrix) else CostMatrix(np.asarray(c, dtype=np.float64))


def solve_emd(c: CostMatrix | np.ndarray) -> TransportPlan:
    """Exact OT between two uniform measures of equal size.

    With uniform marginals and square costs an optimal vertex is a scaled
    permutation, so this is solved as a linear assignment problem.
    """
    cm = _as_cost(c)
    n, m = cm.c.shape
    if n != m:
        raise OTError(
            f"exact EMD needs a square cost matrix, got {n}x{m}; "
            "use the Sinkhorn solver for layers of different widths"
        )
    rows, cols = linear_sum_assignment(cm.c)
    t = np.zeros((n, n))
    t[rows, cols] = 1.0 / n
    a = np.full(n, 1.0 / n)
    return TransportPlan(t=t, a=a, b=a.copy(), lam=0.0, cost=float(np.sum(t * cm.c)))


def _log_plan(f, g, C, lam):
    return (f[:, None] + g[None, :] - C) / lam


def _violation(log_t: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    with np.errstate(over="ignore"):
        t = np.exp(log_t)
    if not np.all(np.isfinite(t)):
        return np.inf
    return float(max(np.max(np.abs(t.sum(axis=1) - a)), np.max(np.abs(t.sum(axis=0) - b))))


def _newton_step(f, g, C, lam, a, b, violation):
    """One damped Newton step on the entropic dual; ``None`` if it does not help.

    The dual Hessian is ``-(1/lam) [[diag(T1), T], [T^T, diag(T^T 1)]]``; the
    last column potential is pinned to remove the constant-shift null space.
    """
    n, m = C.shape
    t = np.exp(_log_plan(f, g, C, lam))
    grad = np.concatenate([a - t.sum(axis=1), b - t.sum(axis=0)])
    hess = np.block([[np.diag(t.sum(axis=1)), t], [t.T, np.diag(t.sum(axis=0))]]) / lam
    step = np.zeros(n + m)
    try:
        step[:-1] = np.linalg.solve(hess[:-1, :-1], grad[:-1])
    except np.linalg.LinAlgError:
        step[:-1] = np.linalg.lstsq(hess[:-1, :-1], grad[:-1], rcond=None)[0]
    if not np.all(np.isfinite(step)):
        return None
    scale = 1.0
    while scale > 1e-4:
        f2, g2 = f + scale * step[:n], g + scale * step[n:]
        v2 = _violation(_log_plan(f2, g2, C, lam), a, b)
        if v2 < violation:
            return f2, g2, v2
        scale *= 0.5
    return None


def solve_sinkhorn(
    c: CostMatrix | np.ndarray,
    lam: float,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> TransportPlan:
    """Entropy-regularised OT, ``min <T,C> - lam * H(T)``, in the log domain.

    Alternates exact updates of the dual potentials ``f`` (rows) and ``g``
    (columns) until the larger marginal violation drops below ``tol``. For
    small ``lam`` the potentials are warm-started by annealing the
    regulariser down from the cost scale.

    Near-permutation plans make plain alternating scaling converge very
    slowly, so once the sweeps have settled the solver also tries damped
    Newton steps on the same dual; a step is kept only if it lowers the
    violation. Both updates count toward ``max_iter``. Failure to reach
    ``tol`` emits a :class:`SinkhornConvergenceWarning` and sets
    ``converged=False``.
    """
    if not lam > 0:
        raise OTError(f"Sinkhorn regulariser must be positive, got {lam}")
    cm = _as_cost(c)
    C = cm.c
    n, m = C.shape
    a = np.full(n, 1.0 / n)
    b = np.full(m, 1.0 / m)
    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros(n)
    g = np.zeros(m)

    def sweep(f, g, eps):
        f = eps * log_a - eps * logsumexp((g[None, :] - C) / eps, axis=1)
        g = eps * log_b - eps * logsumexp((f[:, None] - C) / eps, axis=0)
        return f, g

    scale = float(C.max()) if C.size else 0.0
    lam_k = scale
    iters = 0
    while lam_k > 4.0 * lam and iters < max_iter:
        for _ in range(200):
            f, g = sweep(f, g, lam_k)
            iters += 1
            if _violation(_log_plan(f, g, C, lam_k), a, b) < 1e-3:
                break
        lam_k *= 0.5

    violation = np.inf
    newton_ok = True
    since_newton = 0
    while iters < max_iter:
        f, g = sweep(f, g, lam)
        iters += 1
        since_newton += 1
        violation = _violation(_log_plan(f, g, C, lam), a, b)
        if violation < tol:
            break
        if since_newton >= (20 if newton_ok else 200) and iters < max_iter:
            since_newton = 0
            stepped = _newton_step(f, g, C, lam, a, b, violation)
            newton_ok = stepped is not None
            while stepped is not None and iters < max_iter:
                f, g, violation = stepped
                iters += 1
                if violation < tol:
                    break
                stepped = _newton_step(f, g, C, lam, a, b, violation)
            if violation < tol:
                break

    t = np.exp(_log_plan(f, g, C, lam))
    converged = violation < tol
    if not converged:
        warnings.warn(
            f"Sinkhorn did not converge: lambda={lam} violation={violation:.3e} "
            f"after {iters} iterations",
            SinkhornConvergenceWarning,
            stacklevel=2,
        )
    return TransportPlan(
        t=t,
        a=a,
        b=b,
        lam=float(lam),
        cost=float(np.sum(t * C)),
        iterations=iters,
        violation=float(violation),
        converged=converged,
    )


def to_alignment_map(plan: TransportPlan | np.ndarray) -> AlignmentMap:
    t = plan.t if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    sums = t.sum(axis=0)
    if np.any(sums <= 0):
        raise OTError("transport plan has an empty column; cannot normalise")
    return t / sums[None, :]
