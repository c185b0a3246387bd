"""Exact discrete optimal transport between empirical measures.

The solver is a transportation simplex (northwest-corner start, MODI
potentials, Bland's rule for entering and leaving cells), so the returned
plan is a vertex of the transport polytope and the optimum is exact up to
floating point.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .measures import CouplingPlan, EmpiricalMeasure
from .validation import check_measure, check_scalar


@dataclass(frozen=True)
class TransportResult:
    """Optimal ``p``-plan and its cost.

    ``degenerate`` is set when some non-basic cell has zero reduced cost at
    the optimum, i.e. the optimal plan may not be unique and the returned
    vertex is only one member of the optimal face.
    """

    distance: float
    plan: CouplingPlan
    order: int
    degenerate: bool = False
    iterations: int = 0


def cost_matrix(x: np.ndarray, y: np.ndarray, p: int) -> np.ndarray:
    diff = x[:, None, :] - y[None, :, :]
    if p == 2:
        return np.sum(diff**2, axis=-1)
    return np.linalg.norm(diff, axis=-1) ** p


def _northwest_corner(a: np.ndarray, b: np.ndarray):
    n, m = len(a), len(b)
    a, b = a.copy(), b.copy()
    X = np.zeros((n, m))
    basis = []
    i = j = 0
    while True:
        q = min(a[i], b[j])
        X[i, j] = q
        basis.append((i, j))
        a[i] -= q
        b[j] -= q
        if i == n - 1 and j == m - 1:
            break
        # move exactly one index per cell so the basis is a spanning tree
        if j == m - 1 or (i < n - 1 and a[i] <= b[j]):
            i += 1
        else:
            j += 1
    return X, basis


def _tree_path(n: int, m: int, basis, start: int, goal: int):
    """Cells on the tree path between node ``start`` and node ``goal``.

    Rows are nodes ``0..n-1``, columns are nodes ``n..n+m-1``.
    """
    adj = [[] for _ in range(n + m)]
    for (i, j) in basis:
        adj[i].append((n + j, (i, j)))
        adj[n + j].append((i, (i, j)))
    prev = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nxt, cell in adj[node]:
            if nxt not in prev:
                prev[nxt] = (node, cell)
                queue.append(nxt)
    path = []
    node = goal
    while prev[node] is not None:
        node, cell = prev[node]
        path.append(cell)
    return path[::-1]


def _potentials(n: int, m: int, basis, C: np.ndarray):
    u = np.full(n, np.nan)
    v = np.full(m, np.nan)
    u[0] = 0.0
    rows = {}
    cols = {}
    for (i, j) in basis:
        rows.setdefault(i, []).append(j)
        cols.setdefault(j, []).append(i)
    queue = deque([("r", 0)])
    while queue:
        kind, k = queue.popleft()
        if kind == "r":
            for j in rows.get(k, ()):
                if np.isnan(v[j]):
                    v[j] = C[k, j] - u[k]
                    queue.append(("c", j))
        else:
            for i in cols.get(k, ()):
                if np.isnan(u[i]):
                    u[i] = C[i, k] - v[k]
                    queue.append(("r", i))
    return u, v


def solve_transport(a, b, C, max_iter: int = 100_000):
    """Minimise ``<C, X>`` over nonnegative ``X`` with row sums ``a``, column sums ``b``.

    Returns ``(X, degenerate, iterations)``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    C = np.asarray(C, dtype=float)
    n, m = C.shape
    X, basis = _northwest_corner(a, b)
    tol = 1e-12 * max(1.0, float(np.max(np.abs(C))))
    in_basis = np.zeros((n, m), dtype=bool)
    for cell in basis:
        in_basis[cell] = True

    for it in range(max_iter):
        u, v = _potentials(n, m, basis, C)
        reduced = C - u[:, None] - v[None, :]
        candidates = np.flatnonzero(((reduced < -tol) & ~in_basis).ravel())
        if candidates.size == 0:
            degenerate = bool(np.any((np.abs(reduced) <= tol) & ~in_basis))
            X[X < 0] = 0.0
            return X, degenerate, it
        # Bland: lowest-index improving cell enters
        ei, ej = divmod(int(candidates[0]), m)
        path = _tree_path(n, m, basis, n + ej, ei)
        # cycle: entering (+), then path cells alternate -, +, ...
        # path runs column ej -> ... -> row ei; first cell touches column ej
        minus = path[0::2]
        plus = path[1::2]
        theta = min(X[c] for c in minus)
        theta = max(theta, 0.0)
        ties = [c for c in minus if X[c] <= theta]
        leave = min(ties, key=lambda c: c[0] * m + c[1])
        X[ei, ej] += theta
        for c in plus:
            X[c] += theta
        for c in minus:
            X[c] -= theta
        X[leave] = 0.0
        basis.remove(leave)
        in_basis[leave] = False
        basis.append((ei, ej))
        in_basis[ei, ej] = True
    raise RuntimeError(f"transport simplex did not terminate in {max_iter} pivots")


def wasserstein(p: int, m1: EmpiricalMeasure, m2: EmpiricalMeasure) -> TransportResult:
    """Exact ``W_p`` distance and an optimal vertex plan, for ``p`` in {1, 2}."""
    if p not in (1, 2):
        raise ValueError(f"only p in {{1, 2}} is supported, got {p}")
    if m1.dim != m2.dim:
        raise ValueError(f"dimension mismatch: {m1.dim} vs {m2.dim}")
    C = cost_matrix(m1.atoms, m2.atoms, p)
    X, degenerate, iters = solve_transport(m1.weights, m2.weights, C)
    # clean marginals drift from pivoting arithmetic
    X[X < 1e-16] = 0.0
    plan = CouplingPlan(m1, m2, X)
    total = float(np.sum(X * C))
    return TransportResult(max(total, 0.0) ** (1.0 / p), plan, p, degenerate, iters)


class OptimalTransport(BaseEstimator):
    """Estimator wrapper around :func:`wasserstein`.

    Parameters
    ----------
    p : {1, 2}, default=2
        Order of the Wasserstein distance.

    Attributes
    ----------
    plan_ : CouplingPlan
    distance_ : float
    degenerate_ : bool
    """

    def __init__(self, p: int = 2):
        self.p = p

    def fit(self, source, target):
        source = check_measure(source, name="source")
        target = check_measure(target, dim=source.dim, name="target")
        res = wasserstein(self.p, source, target)
        self.plan_ = res.plan
        self.distance_ = res.distance
        self.degenerate_ = res.degenerate
        self.n_iter_ = res.iterations
        return self

    def transform(self, source=None) -> np.ndarray:
        """Barycentric image of each source atom under the fitted plan."""
        from sklearn.utils.validation import check_is_fitted

        from .measures import barycentric_projection

        check_is_fitted(self, "plan_")
        if source is not None and not check_measure(source).same_as(self.plan_.source):
            raise ValueError("transform only applies to the fitted source measure")
        return barycentric_projection(self.plan_)


def kantorovich_lower_bound(m1: EmpiricalMeasure, m2: EmpiricalMeasure, witness, atol: float = 1e-12) -> float:
    """``int phi d(m1 - m2)`` for a witness certified 1-Lipschitz on the atoms.

    The pairwise check runs over the union of both supports; the result is a
    lower bound for ``W_1(m1, m2)``.
    """
    pts = np.vstack([m1.atoms, m2.atoms])
    vals = np.array([float(witness(x)) for x in pts])
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    excess = np.abs(vals[:, None] - vals[None, :]) - dist
    if np.max(excess) > atol:
        raise ValueError(f"witness is not 1-Lipschitz on the atoms (excess {np.max(excess):.3e})")
    n = m1.n_atoms
    return float(m1.weights @ vals[:n] - m2.weights @ vals[n:])


def interpolate(plan: CouplingPlan, lam: float) -> EmpiricalMeasure:
    """Displacement interpolation ``((1-lam) pi^1 + lam pi^2)_# plan``.

    One atom per positive plan entry, in row-major order; coincident atoms
    are kept separate.
    """
    lam = check_scalar(lam, "lambda", min_val=0.0, max_val=1.0)
    i, j, w = plan.entries()
    atoms = (1 - lam) * plan.source.atoms[i] + lam * plan.target.atoms[j]
    return EmpiricalMeasure(atoms, w / w.sum())


def plan_cost(plan: CouplingPlan) -> float:
    """Plan-weighted quadratic distance ``(sum mass_ij |x_i - y_j|^2)^(1/2)``."""
    C = cost_matrix(plan.source.atoms, plan.target.atoms, 2)
    return float(np.sqrt(max(np.sum(plan.mass * C), 0.0)))


def coupled_trajectories(plan: CouplingPlan, flow1, flow2) -> list[CouplingPlan]:
    """Transport the entries of ``plan`` along two particle flows.

    ``flow1`` and ``flow2`` are flow solutions whose trajectories start at the
    plan's source and target atoms respectively. The plan at node ``n`` keeps
    the masses and moves entry ``(i, j)`` to ``(flow1_n(x_i), flow2_n(y_j))``.
    """
    if len(flow1.grid.nodes) != len(flow2.grid.nodes) or not np.allclose(
        flow1.grid.nodes, flow2.grid.nodes, rtol=0, atol=1e-12
    ):
        raise ValueError("the two flows live on different time grids")
    plans = []
    for x_n, y_n in zip(flow1.trajectories, flow2.trajectories):
        src = EmpiricalMeasure._trusted(x_n, plan.source.weights)
        tgt = EmpiricalMeasure._trusted(y_n, plan.target.weights)
        plans.append(CouplingPlan(src, tgt, plan.mass))
    return plans
