"""First-order sensitivities of non-local flows.

Three linearised systems are carried along a base flow started at node
``tau``:

* the space Jacobian ``W_i(t) = D_x Phi(x_i)``, ``W' = D_x v W``, ``W(tau) = I``;
* the measure derivative along a plan ``gamma`` from the base measure to a
  target ``nu``, ``w_i' = D_x v w_i + sum_jk gamma_jk D_mu v(x_i)(x_j) [W_j (z_k - y_j) + w_j]``,
  ``w(tau) = 0``;
* the initial-time derivative ``Psi_i' = D_x v Psi_i + sum_j w_j D_mu v(x_i)(x_j) Psi_j``,
  ``Psi(tau) = -v(tau, mu, u, x_i)``.

All three are integrated jointly with the particle system as one augmented
RK4 system on the base grid, so the particle part reproduces the base flow
exactly and every linearised path sees the same discretisation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fields import VelocityFieldSpec
from .flow import CompensatedRK4, FlowSolution, _check_finite, march
from .measures import CouplingPlan, EmpiricalMeasure
from .transport import interpolate
from .validation import check_plan

DEFAULT_EPSILONS = (1e-1, 1e-2, 1e-3)


@dataclass(frozen=True, eq=False)
class LinearizationBundle:
    """Linearised paths at every node of the base grid.

    Attributes
    ----------
    space_jac : ndarray of shape (n_nodes, N, d, d)
    measure_dir : ndarray of shape (n_nodes, N, d)
        Zero when no plan was supplied.
    time_dir : ndarray of shape (n_nodes, N, d)
        NaN when ``tau`` sits on a control jump.
    """

    grid: object
    space_jac: np.ndarray
    measure_dir: np.ndarray
    time_dir: np.ndarray
    base_flow: FlowSolution
    plan: CouplingPlan | None = None

    @property
    def tau(self) -> float:
        return self.base_flow.tau

    @property
    def tau_index(self) -> int:
        return self.base_flow.tau_index


def _plan_displacement(plan: CouplingPlan) -> np.ndarray:
    """``D_j = sum_k gamma_jk (z_k - y_j)`` for each source atom ``j``."""
    return plan.mass @ plan.target.atoms - plan.source.weights[:, None] * plan.source.atoms


def _augmented_rhs(field: VelocityFieldSpec, weights, u, D):
    def rhs(t, y):
        X, W, w, P = y
        mu = EmpiricalMeasure._trusted(X, weights)
        V = field.eval(t, mu, u, X)
        J = field.jac_x(t, mu, u, X)
        G = field.grad_mu(t, mu, u, X, X)
        dW = J @ W
        src = np.einsum("jde,je->jd", W, D) + weights[:, None] * w
        dw = np.einsum("ide,ie->id", J, w) + np.einsum("ijde,je->id", G, src)
        dP = np.einsum("ide,ie->id", J, P) + np.einsum("ijde,j,je->id", G, weights, P)
        return [V, dW, dw, dP]

    return rhs


def _march_augmented(field, control, times, X0, weights, D, P0):
    N, d = X0.shape
    y = [np.array(X0, dtype=float), np.broadcast_to(np.eye(d), (N, d, d)).copy(), np.zeros((N, d)), P0.copy()]
    out = [[a.copy() for a in y]]
    rk = CompensatedRK4(y)
    for ta, tb in zip(times[:-1], times[1:]):
        rhs = _augmented_rhs(field, weights, control.on_step(ta, tb), D)
        y = [a.copy() for a in rk.step(rhs, ta, tb - ta)]
        _check_finite(y, tb)
        out.append(y)
    return [np.array([s[k] for s in out]) for k in range(4)]


def linearize(base: FlowSolution, field: VelocityFieldSpec, plan: CouplingPlan | None = None) -> LinearizationBundle:
    """Integrate all three linearised systems along ``base``.

    Parameters
    ----------
    base : FlowSolution
    field : VelocityFieldSpec
        The field that generated ``base``.
    plan : CouplingPlan, optional
        Direction of the measure derivative; its source must be the base
        measure (same atoms and weights).

    Returns
    -------
    LinearizationBundle
    """
    m = base.base
    if plan is not None:
        check_plan(plan, source=m)
        D = _plan_displacement(plan)
    else:
        D = np.zeros_like(m.atoms)
    k = base.tau_index
    nodes = base.grid.nodes
    tau = base.tau
    on_jump = base.control.is_jump(tau)
    if on_jump:
        P0 = np.zeros_like(m.atoms)
    else:
        # value on the step leaving tau forward (or backward at t1)
        u_tau = base.control.at(tau)
        P0 = -field.eval(tau, m, u_tau, m.atoms)
    fwd = _march_augmented(field, base.control, nodes[k:], m.atoms, m.weights, D, P0)
    bwd = _march_augmented(field, base.control, nodes[: k + 1][::-1], m.atoms, m.weights, D, P0)
    paths = [np.concatenate([b[::-1][:-1], f], axis=0) for b, f in zip(bwd, fwd)]
    time_dir = paths[3]
    if on_jump:
        time_dir = np.full_like(time_dir, np.nan)
    return LinearizationBundle(base.grid, paths[1], paths[2], time_dir, base, plan)


def space_jacobian(base: FlowSolution, field: VelocityFieldSpec) -> np.ndarray:
    """Per-atom paths of ``D_x Phi_(tau, t)[mu](x_i)``, shape ``(n_nodes, N, d, d)``."""
    return linearize(base, field).space_jac


def measure_derivative(base: FlowSolution, field: VelocityFieldSpec, plan: CouplingPlan) -> np.ndarray:
    """Per-atom paths of the measure derivative along ``plan``, shape ``(n_nodes, N, d)``."""
    if plan is None:
        raise ValueError("a coupling plan is required")
    return linearize(base, field, plan).measure_dir


def time_derivative(base: FlowSolution, field: VelocityFieldSpec) -> np.ndarray:
    """Per-atom paths of the initial-time derivative ``Psi_tau(t, x_i)``.

    Raises
    ------
    ValueError
        If ``tau`` is a jump time of the control.
    """
    if base.control.is_jump(base.tau):
        raise ValueError(f"tau={base.tau} is a control discontinuity")
    return linearize(base, field).time_dir


# ---------------------------------------------------------------------------
# Taylor residuals


@dataclass(frozen=True)
class Perturbation:
    """Combined first-order perturbation ``(x + eps dy, plan, tau + eps dh)``."""

    dy: np.ndarray | None = None
    plan: CouplingPlan | None = None
    dh: float = 0.0


@dataclass
class TaylorTable:
    epsilons: np.ndarray
    residuals: np.ndarray
    slope: float
    local_slopes: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epsilon", "residual", "slope_estimate"])
            for e, r, s in zip(self.epsilons, self.residuals, self.local_slopes):
                w.writerow([repr(float(e)), repr(float(r)), repr(float(s))])


def _perturbed_measure(m: EmpiricalMeasure, plan: CouplingPlan | None, eps: float) -> EmpiricalMeasure:
    if plan is None:
        return m
    if plan.is_deterministic():
        j = np.argmax(plan.mass, axis=1)
        atoms = m.atoms + eps * (plan.target.atoms[j] - m.atoms)
        return EmpiricalMeasure._trusted(atoms, m.weights)
    return interpolate(plan, eps)


def perturbed_paths(base: FlowSolution, field: VelocityFieldSpec, pert: Perturbation, eps: float):
    """Paths ``Phi_(tau + eps dh, t)[nu_eps](x_i + eps dy_i)`` at nodes ``t >= max(tau, tau + eps dh)``.

    Returns ``(node_indices, paths)`` with ``paths`` of shape ``(n, N, d)``.
    """
    m = base.base
    dy = np.zeros_like(m.atoms) if pert.dy is None else np.asarray(pert.dy, dtype=float)
    nu = _perturbed_measure(m, pert.plan, eps)
    tau_p = base.tau + eps * pert.dh
    nodes = base.grid.nodes
    if tau_p < nodes[0] - 1e-15 or tau_p > nodes[-1] + 1e-15:
        raise ValueError(f"perturbed initial time {tau_p} leaves the grid")
    later = nodes[nodes > tau_p + 1e-14]
    times = np.concatenate([[tau_p], later])
    _, tr = march(field, base.control, times, nu.atoms, nu.weights, m.atoms + eps * dy)
    first = len(nodes) - len(later)
    idx = np.arange(first, len(nodes))
    paths = tr[1:]
    if abs(tau_p - nodes[first - 1]) <= 1e-14 and first - 1 >= base.tau_index:
        # tau_p coincides with a node: include it
        idx = np.concatenate([[first - 1], idx])
        paths = tr
    keep = idx >= base.tau_index
    return idx[keep], paths[keep]


def first_order_prediction(bundle: LinearizationBundle, pert: Perturbation, eps: float) -> np.ndarray:
    """``D_x Phi dy + w + dh Psi`` scaled by ``eps``, at every node."""
    N, d = bundle.base_flow.base.atoms.shape
    dy = np.zeros((N, d)) if pert.dy is None else np.asarray(pert.dy, dtype=float)
    pred = np.einsum("nide,ie->nid", bundle.space_jac, dy)
    if pert.plan is not None:
        pred = pred + bundle.measure_dir
    if pert.dh != 0.0:
        pred = pred + pert.dh * bundle.time_dir
    return eps * pred


def directional_fd_error(base, field, pert: Perturbation, eps: float, bundle=None) -> float:
    """``max |(Phi_pert - Phi_base) / eps - derivative|`` over atoms and nodes after ``tau``."""
    bundle = linearize(base, field, pert.plan) if bundle is None else bundle
    idx, paths = perturbed_paths(base, field, pert, eps)
    diff = (paths - base.trajectories[idx]) / eps - first_order_prediction(bundle, pert, 1.0)[idx]
    return float(np.max(np.linalg.norm(diff, axis=-1)))


def loglog_slope(eps: Sequence[float], res: Sequence[float]) -> float:
    eps = np.asarray(eps, dtype=float)
    res = np.asarray(res, dtype=float)
    ok = (eps > 0) & (res > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(eps[ok]), np.log(res[ok]), 1)[0])


def taylor_residual(base: FlowSolution, field: VelocityFieldSpec, perturbation: Perturbation,
                    epsilons: Sequence[float] = DEFAULT_EPSILONS) -> TaylorTable:
    """Residual of the total first-order expansion of the flow.

    For each ``eps`` the perturbed flow is re-integrated and compared with
    ``Phi + eps (D_x Phi dy + w + dh Psi)``; the maximum over atoms and nodes
    after ``tau`` is reported, with a least-squares log-log slope.
    """
    if perturbation.dh != 0.0 and base.control.is_jump(base.tau):
        raise ValueError(f"tau={base.tau} is a control discontinuity")
    bundle = linearize(base, field, perturbation.plan)
    eps_arr = np.asarray(sorted(epsilons, reverse=True), dtype=float)
    res = []
    for eps in eps_arr:
        idx, paths = perturbed_paths(base, field, perturbation, eps)
        pred = base.trajectories[idx] + first_order_prediction(bundle, perturbation, eps)[idx]
        res.append(float(np.max(np.linalg.norm(paths - pred, axis=-1))))
    res = np.array(res)
    local = np.full(len(res), np.nan)
    for k in range(1, len(res)):
        local[k] = loglog_slope(eps_arr[k - 1:k + 1], res[k - 1:k + 1])
    return TaylorTable(eps_arr, res, loglog_slope(eps_arr, res), local)
