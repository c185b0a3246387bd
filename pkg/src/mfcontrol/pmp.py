"""Pontryagin state-costate dynamics for particle systems.

The costate of each particle obeys the backward equation

``r_i' = -D_x v(x_i)^T r_i - sum_j w_j D_mu v(x_j)(x_i)^T r_j``,
``r_i(T) = -grad phi(mu(T))(x_i(T))``,

which is the reduction of the measure-valued adjoint dynamics to Dirac
conditionals. A forward-backward sweep searches for extremals over a finite
list of control samples.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .fields import ControlSet, FinalCostSpec, VelocityFieldSpec
from .flow import ControlSignal, FlowSolution, TimeGrid, CompensatedRK4, _check_finite, integrate_flow
from .measures import EmpiricalMeasure
from .validation import check_measure, check_scalar

TIE_TOL = 1e-12


def hamiltonian(field: VelocityFieldSpec, t: float, X, R, weights, u) -> float:
    """``H = sum_i w_i <r_i, v(t, mu, u, x_i)>`` for paired atoms ``(x_i, r_i)``."""
    X = np.asarray(X, dtype=float)
    R = np.asarray(R, dtype=float)
    weights = np.asarray(weights, dtype=float)
    mu = EmpiricalMeasure._trusted(X, weights)
    V = field.eval(t, mu, np.atleast_1d(u), X)
    return float(weights @ np.sum(R * V, axis=1))


def _costate_drift(field, t, mu, u, R):
    # x-slot of the Hamiltonian gradient
    X = mu.atoms
    J = field.jac_x(t, mu, u, X)
    G = field.grad_mu(t, mu, u, X, X)
    return np.einsum("ied,ie->id", J, R) + np.einsum("j,jied,je->id", mu.weights, G, R)


def hamiltonian_gradient(field: VelocityFieldSpec, t: float, X, R, weights, u) -> np.ndarray:
    """Wasserstein gradient of the Hamiltonian at each paired atom.

    Returns
    -------
    ndarray of shape (N, 2 d)
        Columns ``[:d]`` hold the x-slot
        ``D_x v(x_i)^T r_i + sum_j w_j D_mu v(x_j)(x_i)^T r_j``; columns ``[d:]``
        hold the r-slot ``v(x_i)``.
    """
    X = np.asarray(X, dtype=float)
    R = np.asarray(R, dtype=float)
    mu = EmpiricalMeasure._trusted(X, np.asarray(weights, dtype=float))
    u = np.atleast_1d(u)
    return np.hstack([_costate_drift(field, t, mu, u, R), field.eval(t, mu, u, X)])


@dataclass(frozen=True, eq=False)
class StateCostateEnsemble:
    """Paired particle paths ``(x_i(t), r_i(t))`` on a time grid."""

    grid: TimeGrid
    weights: np.ndarray
    x_paths: np.ndarray
    r_paths: np.ndarray
    control: ControlSignal
    field: VelocityFieldSpec
    cost: FinalCostSpec | None = None
    flow: FlowSolution | None = None

    @property
    def nodes(self) -> np.ndarray:
        return self.grid.nodes

    def measure_at(self, index: int) -> EmpiricalMeasure:
        return EmpiricalMeasure._trusted(self.x_paths[index], self.weights)

    def control_at_node(self, index: int) -> np.ndarray:
        """Right-continuous control value at a node (left value at the horizon)."""
        return self.control.at(self.nodes[index])

    def hamiltonian_at(self, index: int, u=None) -> float:
        u = self.control_at_node(index) if u is None else u
        return hamiltonian(self.field, self.nodes[index], self.x_paths[index], self.r_paths[index],
                           self.weights, u)

    def hamiltonian_path(self) -> np.ndarray:
        return np.array([self.hamiltonian_at(n) for n in range(len(self.nodes))])

    def terminal_residual(self) -> float:
        """``max_i |r_i(T) + grad phi(mu(T))(x_i(T))|``."""
        if self.cost is None:
            raise ValueError("ensemble carries no terminal cost")
        g = self.cost.wgrad(self.measure_at(-1))
        return float(np.max(np.abs(self.r_paths[-1] + g)))

    def to_csv(self, path) -> None:
        d = self.x_paths.shape[2]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "atom_index"] + [f"x_{k + 1}" for k in range(d)] + [f"r_{k + 1}" for k in range(d)])
            for t, X, R in zip(self.nodes, self.x_paths, self.r_paths):
                for i in range(X.shape[0]):
                    w.writerow([repr(float(t)), i] + [repr(float(v)) for v in (*X[i], *R[i])])


def integrate_costate(base: FlowSolution, field: VelocityFieldSpec, cost: FinalCostSpec) -> StateCostateEnsemble:
    """Backward costate integration along ``base`` from the horizon.

    The state is re-integrated backward from ``x(T)`` together with the
    costate so both use the same RK4 stages; the stored state paths are the
    forward ones, so the first marginal matches the base flow exactly.
    """
    nodes = base.grid.nodes
    w = base.base.weights
    XT = base.trajectories[-1]
    RT = -np.asarray(cost.wgrad(EmpiricalMeasure._trusted(XT, w)), dtype=float)
    rs = [RT]
    rk = CompensatedRK4([XT, RT])
    for ta, tb in zip(nodes[::-1][:-1], nodes[::-1][1:]):
        u = base.control.on_step(ta, tb)

        def rhs(t, y, u=u):
            mu = EmpiricalMeasure._trusted(y[0], w)
            return [field.eval(t, mu, u, y[0]), -_costate_drift(field, t, mu, u, y[1])]

        X, R = (a.copy() for a in rk.step(rhs, ta, tb - ta))
        _check_finite((X, R), tb)
        rs.append(R)
    return StateCostateEnsemble(base.grid, w, base.trajectories, np.array(rs[::-1]), base.control, field, cost, base)


def check_maximisation(ensemble: StateCostateEnsemble, control_samples) -> np.ndarray:
    """Per-node gap ``max_u H(t, nu(t), u) - H(t, nu(t), u*(t))`` over the samples."""
    samples = np.atleast_2d(np.asarray(control_samples, dtype=float))
    if samples.size == 0:
        raise ValueError("empty control sample set")
    out = np.empty(len(ensemble.nodes))
    for n in range(len(ensemble.nodes)):
        h_star = ensemble.hamiltonian_at(n)
        best = max(ensemble.hamiltonian_at(n, u) for u in samples)
        out[n] = max(best - h_star, 0.0)
    return out


# ---------------------------------------------------------------------------
# forward-backward sweep


@dataclass
class SweepResult:
    ensemble: StateCostateEnsemble
    control: ControlSignal
    converged: bool
    n_iter: int
    cost_history: list


def _interval_hamiltonians(ens: StateCostateEnsemble, control_grid: TimeGrid, samples: np.ndarray) -> np.ndarray:
    """Trapezoid average of ``H(t, nu(t), u)`` over each control interval, shape ``(steps, k)``."""
    nodes = ens.nodes
    Hs = np.array([[hamiltonian(ens.field, t, ens.x_paths[n], ens.r_paths[n], ens.weights, u)
                    for u in samples] for n, t in enumerate(nodes)])
    out = np.empty((control_grid.steps, len(samples)))
    for k, (a, b) in enumerate(zip(control_grid.nodes[:-1], control_grid.nodes[1:])):
        sel = (nodes >= a - 1e-12) & (nodes <= b + 1e-12)
        out[k] = np.trapezoid(Hs[sel], nodes[sel], axis=0) / (b - a)
    return out


def _default_initial(control_set: ControlSet, control_grid: TimeGrid) -> ControlSignal:
    s = control_set.samples()
    return ControlSignal.constant(control_grid, s[int(np.argmin(np.linalg.norm(s, axis=1)))])


def forward_backward_sweep(field: VelocityFieldSpec, cost: FinalCostSpec, m0: EmpiricalMeasure, grid: TimeGrid,
                           control_set: ControlSet, *, control_grid: TimeGrid | None = None,
                           init: ControlSignal | None = None, damping: float = 0.5, max_iter: int = 200,
                           tol: float = 1e-8) -> SweepResult:
    """Indirect search for a PMP extremal.

    Each sweep integrates the state forward, the costate backward, and then
    updates the control on every interval toward the sample maximising the
    interval-averaged Hamiltonian. For a finite control set the update
    switches ``ceil(damping * n_changed)`` intervals with the largest
    Hamiltonian gain; for a box it takes the convex step
    ``u + damping (u_best - u)``. Non-convergence is reported, not raised.
    """
    control_grid = grid if control_grid is None else control_grid
    u = _default_initial(control_set, control_grid) if init is None else init
    samples = control_set.samples()
    history = []
    for it in range(1, max_iter + 1):
        flow = integrate_flow(field, u, grid.t0, m0, grid)
        ens = integrate_costate(flow, field, cost)
        history.append(cost(flow.measure_at(index=-1)))
        Hbar = _interval_hamiltonians(ens, control_grid, samples)
        cur_idx = [np.flatnonzero(np.all(np.abs(samples - v) <= 1e-12, axis=1)) for v in u.values]
        new = u.values.copy()
        if control_set.kind == "finite":
            gains = np.zeros(control_grid.steps)
            best = np.zeros(control_grid.steps, dtype=int)
            for k in range(control_grid.steps):
                row = Hbar[k]
                top = row.max()
                cur = hamiltonian_interval_value(ens, control_grid, k, u.values[k], cur_idx[k], row)
                scale = max(1.0, abs(top))
                if cur >= top - TIE_TOL * scale:
                    continue
                best[k] = int(np.flatnonzero(row >= top - TIE_TOL * scale)[0])
                gains[k] = top - cur
            changed = np.flatnonzero(gains > 0)
            if changed.size == 0:
                return SweepResult(ens, u, True, it, history)
            n_switch = math.ceil(damping * changed.size)
            order = changed[np.argsort(-gains[changed], kind="stable")][:n_switch]
            for k in order:
                new[k] = samples[best[k]]
        else:
            best = samples[np.argmax(Hbar, axis=1)]
            new = u.values + damping * (best - u.values)
            if np.max(np.abs(new - u.values)) <= tol:
                return SweepResult(ens, u, True, it, history)
        u = ControlSignal(control_grid, new)
    flow = integrate_flow(field, u, grid.t0, m0, grid)
    ens = integrate_costate(flow, field, cost)
    history.append(cost(flow.measure_at(index=-1)))
    return SweepResult(ens, u, False, max_iter, history)


def hamiltonian_interval_value(ens, control_grid, k, u_k, idx, row) -> float:
    """Averaged Hamiltonian of the current value on interval ``k``."""
    if idx.size:
        return float(row[idx[0]])
    return float(_interval_hamiltonians(ens, control_grid, np.atleast_2d(u_k))[k, 0])


class ForwardBackwardSweep(BaseEstimator):
    """Estimator wrapper around :func:`forward_backward_sweep`.

    Parameters
    ----------
    field : VelocityFieldSpec
    cost : FinalCostSpec
    control_set : ControlSet
    grid : TimeGrid
        Integration grid.
    control_grid : TimeGrid, optional
        Grid carrying the piecewise-constant control; defaults to ``grid``.
    damping : float, default=0.5
    max_iter : int, default=200
    tol : float, default=1e-8

    Attributes
    ----------
    ensemble_ : StateCostateEnsemble
    control_ : ControlSignal
    converged_ : bool
    n_iter_ : int
    cost_ : float
    """

    def __init__(self, field=None, cost=None, control_set=None, grid=None, control_grid=None,
                 damping=0.5, max_iter=200, tol=1e-8):
        self.field = field
        self.cost = cost
        self.control_set = control_set
        self.grid = grid
        self.control_grid = control_grid
        self.damping = damping
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, m0, init=None):
        for name in ("field", "cost", "control_set", "grid"):
            if getattr(self, name) is None:
                raise ValueError(f"{name} must be set before fit")
        check_scalar(self.damping, "damping", min_val=0.0, max_val=1.0, include_boundaries=True)
        if self.damping == 0.0:
            raise ValueError("damping must be positive")
        m0 = check_measure(m0, name="m0")
        res = forward_backward_sweep(self.field, self.cost, m0, self.grid, self.control_set,
                                     control_grid=self.control_grid, init=init, damping=self.damping,
                                     max_iter=self.max_iter, tol=self.tol)
        self.ensemble_ = res.ensemble
        self.control_ = res.control
        self.converged_ = res.converged
        self.n_iter_ = res.n_iter
        self.cost_ = res.cost_history[-1]
        self.cost_history_ = res.cost_history
        return self
