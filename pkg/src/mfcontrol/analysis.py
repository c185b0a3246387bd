"""Numerical checks of semiconcavity, sensitivity and optimality relations.

Every check takes plain callables for the functional being tested: a cost
functional ``f(mu)`` or a value handle ``V(tau, mu)`` such as
:class:`~mfcontrol.value.ExhaustiveValue`. One-sided limits in ``eps`` are
estimated from a fixed geometric list by the max (upper) or min (lower) of
the difference quotients at its two smallest entries.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .fields import ControlSet, VelocityFieldSpec
from .flow import ControlSignal, TimeGrid, integrate_flow
from .linearization import LinearizationBundle
from .measures import CouplingPlan, EmpiricalMeasure
from .pmp import StateCostateEnsemble, check_maximisation
from .transport import coupled_trajectories, interpolate, plan_cost, wasserstein
from .validation import check_atom_field, check_measure, check_plan
from .value import value_monotonicity_check

DINI_EPSILONS = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3)
DEFAULT_VALUE_TOL = 5e-3
DEFAULT_INTEGRATOR_TOL = 1e-6
DEFAULT_TOL_SENS = 5.0 * (DEFAULT_VALUE_TOL + DEFAULT_INTEGRATOR_TOL)
DEFAULT_FRECHET_TOL = 1e-2

OPTIMAL_CONSISTENT = "OPTIMAL-CONSISTENT"
INCONCLUSIVE = "INCONCLUSIVE"

CHECK_NAMES = (
    "geodesic_semiconcavity_defect",
    "strong_semiconcavity_defect",
    "joint_semiconcavity_defect",
    "interpolation_inequality_check",
    "velocity_interpolation_defect",
    "dini_upper_derivative",
    "dini_sensitivity_check",
    "frechet_sensitivity_check",
    "constancy_monitor",
    "sufficiency_verdict",
    "feedback_membership",
    "subdifferential_propagation_check",
    "regularised_lower_derivative",
)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


# ---------------------------------------------------------------------------
# semiconcavity defects


@dataclass
class DefectReport:
    """Concavity defects against their quadratic normalisers.

    ``fitted_constant`` is ``max(defect / normalizer)`` over samples whose
    normaliser is positive (0 when there are none). ``passed`` compares it
    with ``bound`` plus ``tol`` when a bound is known, and otherwise only
    requires it to be finite.
    """

    scenario: str
    lambdas: np.ndarray
    defects: np.ndarray
    normalizers: np.ndarray
    fitted_constant: float = 0.0
    bound: float | None = None
    tol: float = 1e-9
    passed: bool = True
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=float)
        self.defects = np.asarray(self.defects, dtype=float)
        self.normalizers = np.asarray(self.normalizers, dtype=float)
        if self.defects.shape != self.normalizers.shape:
            raise ValueError("defect and normaliser arrays differ in length")
        pos = self.normalizers > 0
        self.fitted_constant = float(np.max(self.defects[pos] / self.normalizers[pos])) if pos.any() else 0.0
        if self.bound is None:
            self.passed = bool(np.isfinite(self.fitted_constant))
        else:
            self.passed = bool(self.fitted_constant <= self.bound + self.tol)

    def to_csv(self, path) -> None:
        _write_rows(path, ["lambda", "defect", "normalizer"],
                    zip(self.lambdas, self.defects, self.normalizers))


def _defects(f, m1, m2, plan, lambdas):
    f1, f2 = f(m1), f(m2)
    out = []
    for lam in lambdas:
        if lam == 0.0:
            out.append(0.0)
        elif lam == 1.0:
            out.append(0.0)
        else:
            out.append((1 - lam) * f1 + lam * f2 - f(interpolate(plan, lam)))
    return np.array(out)


def geodesic_semiconcavity_defect(f: Callable, mu1, mu2, lambdas: Sequence[float], *, bound=None,
                                  tol: float = 1e-9, scenario: str = "") -> DefectReport:
    """Defect of ``f`` along the optimal ``W_2`` interpolation from ``mu1`` to ``mu2``.

    ``defect(lam) = (1 - lam) f(mu1) + lam f(mu2) - f(mu_lam)`` against
    ``lam (1 - lam) W_2^2(mu1, mu2)``.
    """
    mu1, mu2 = check_measure(mu1), check_measure(mu2)
    res = wasserstein(2, mu1, mu2)
    lambdas = np.asarray(lambdas, dtype=float)
    d = _defects(f, mu1, mu2, res.plan, lambdas)
    norm = lambdas * (1 - lambdas) * res.distance**2
    return DefectReport(scenario, lambdas, d, norm, bound=bound, tol=tol,
                        extra={"w2": res.distance, "degenerate_plan": res.degenerate})


def strong_semiconcavity_defect(f: Callable, mu1, mu2, plan: CouplingPlan, lambdas: Sequence[float], *,
                                bound=None, tol: float = 1e-9, scenario: str = "") -> DefectReport:
    """Defect of ``f`` along the interpolation driven by an arbitrary plan."""
    mu1, mu2 = check_measure(mu1), check_measure(mu2)
    check_plan(plan, source=mu1)
    if not plan.target.same_as(mu2):
        raise ValueError("plan target marginal does not match mu2")
    lambdas = np.asarray(lambdas, dtype=float)
    d = _defects(f, mu1, mu2, plan, lambdas)
    norm = lambdas * (1 - lambdas) * plan_cost(plan) ** 2
    return DefectReport(scenario, lambdas, d, norm, bound=bound, tol=tol, extra={"plan_cost": plan_cost(plan)})


def joint_semiconcavity_defect(handle: Callable, first, second, plan: CouplingPlan, lambdas: Sequence[float], *,
                               field: VelocityFieldSpec, grid: TimeGrid | None = None, bound=None,
                               tol: float = 1e-9, scenario: str = "") -> DefectReport:
    """Joint defect of ``V(tau, mu)`` in time and measure.

    ``first`` and ``second`` are ``(tau, mu)`` pairs. The interpolated time
    ``(1 - lam) tau1 + lam tau2`` is snapped to the nearest node of ``grid``
    when one is given; snap distances are kept in ``extra``.

    Raises
    ------
    ValueError
        If ``field`` does not declare a time-independent sublinearity.
    """
    if not getattr(field, "time_regular", False):
        raise ValueError(f"field {field.name!r} lacks time-regularity metadata")
    (t1, mu1), (t2, mu2) = first, second
    mu1, mu2 = check_measure(mu1), check_measure(mu2)
    check_plan(plan, source=mu1)
    lambdas = np.asarray(lambdas, dtype=float)
    v1, v2 = handle(t1, mu1), handle(t2, mu2)
    defects, snaps = [], []
    for lam in lambdas:
        t_lam = (1 - lam) * t1 + lam * t2
        if grid is not None:
            snapped = float(grid.nodes[grid.nearest(t_lam)])
            snaps.append(abs(snapped - t_lam))
            t_lam = snapped
        else:
            snaps.append(0.0)
        if lam in (0.0, 1.0):
            defects.append(0.0)
            continue
        defects.append((1 - lam) * v1 + lam * v2 - handle(t_lam, interpolate(plan, lam)))
    norm = lambdas * (1 - lambdas) * ((t1 - t2) ** 2 + plan_cost(plan) ** 2)
    return DefectReport(scenario, lambdas, np.array(defects), norm, bound=bound, tol=tol,
                        extra={"snap_distance": np.array(snaps)})


def interpolation_inequality_check(field: VelocityFieldSpec, u: ControlSignal, tau: float, mu1, mu2,
                                   lambdas: Sequence[float], grid: TimeGrid, *, bound=None,
                                   scenario: str = "") -> DefectReport:
    """Gap between transported interpolations and flows of interpolations.

    For each ``lam`` the defect is ``max_t W_1`` between the interpolation of
    the two coupled flows and the flow started from the interpolated measure,
    normalised by ``lam (1 - lam) W_2^2(mu1, mu2)``.
    """
    mu1, mu2 = check_measure(mu1), check_measure(mu2)
    res = wasserstein(2, mu1, mu2)
    f1 = integrate_flow(field, u, tau, mu1, grid)
    f2 = integrate_flow(field, u, tau, mu2, grid)
    plans = coupled_trajectories(res.plan, f1, f2)
    k0 = grid.index(tau)
    lambdas = np.asarray(lambdas, dtype=float)
    defects = []
    for lam in lambdas:
        if lam in (0.0, 1.0):
            defects.append(0.0)
            continue
        start = interpolate(res.plan, lam)
        direct = integrate_flow(field, u, tau, start, grid)
        worst = 0.0
        for n in range(k0, len(grid.nodes)):
            a = interpolate(plans[n], lam)
            worst = max(worst, wasserstein(1, a, direct.measure_at(index=n)).distance)
        defects.append(worst)
    norm = lambdas * (1 - lambdas) * res.distance**2
    return DefectReport(scenario, lambdas, np.array(defects), norm, bound=bound)


def velocity_interpolation_defect(field: VelocityFieldSpec, t: float, u, plan: CouplingPlan, x1, x2,
                                  lambdas: Sequence[float], *, bound=None, scenario: str = "") -> DefectReport:
    """Concavity defect of ``(mu, x) -> v(t, mu, u, x)`` along a plan and a segment.

    ``|(1 - lam) v(mu1, x1) + lam v(mu2, x2) - v(mu_lam, x_lam)|`` against
    ``lam (1 - lam) (|x1 - x2|^2 + plan_cost^2)``.
    """
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    u = np.atleast_1d(u)
    v1 = field.eval(t, plan.source, u, x1[None, :])[0]
    v2 = field.eval(t, plan.target, u, x2[None, :])[0]
    lambdas = np.asarray(lambdas, dtype=float)
    defects = []
    for lam in lambdas:
        if lam in (0.0, 1.0):
            defects.append(0.0)
            continue
        xl = (1 - lam) * x1 + lam * x2
        vl = field.eval(t, interpolate(plan, lam), u, xl[None, :])[0]
        defects.append(float(np.linalg.norm((1 - lam) * v1 + lam * v2 - vl)))
    norm = lambdas * (1 - lambdas) * (np.sum((x1 - x2) ** 2) + plan_cost(plan) ** 2)
    return DefectReport(scenario, lambdas, np.array(defects), norm, bound=bound)


# ---------------------------------------------------------------------------
# Dini derivatives


@dataclass
class DiniEstimate:
    """Difference quotients of ``V`` in the direction ``(h, F)``.

    ``upper`` and ``lower`` are the max and min over the two smallest ``eps``.
    """

    epsilons: np.ndarray
    quotients: np.ndarray
    upper: float
    lower: float


def _push(m: EmpiricalMeasure, F: np.ndarray, eps: float) -> EmpiricalMeasure:
    return EmpiricalMeasure._trusted(m.atoms + eps * F, m.weights)


def _time_bounds(handle):
    grid = getattr(handle, "control_grid", None)
    return (grid.t0, grid.t1) if grid is not None else (-np.inf, np.inf)


def dini_quotients(handle: Callable, tau: float, m, h: float, F, eps_list=DINI_EPSILONS) -> DiniEstimate:
    """Quotients ``[V(tau + eps h, (Id + eps F)_# m) - V(tau, m)] / eps``.

    Times leaving the handle's horizon are clamped to it with a warning.
    """
    m = check_measure(m)
    F = check_atom_field(F, m)
    eps = np.asarray(sorted(eps_list, reverse=True), dtype=float)
    lo, hi = _time_bounds(handle)
    base = handle(tau, m)
    q = []
    for e in eps:
        t = tau + e * h
        if t < lo or t > hi:
            warnings.warn(f"time {t} outside [{lo}, {hi}] clamped", RuntimeWarning, stacklevel=2)
            t = min(max(t, lo), hi)
        q.append((handle(t, _push(m, F, e)) - base) / e)
    q = np.array(q)
    tail = q[-2:]
    return DiniEstimate(eps, q, float(tail.max()), float(tail.min()))


def dini_upper_derivative(handle, tau, m, h, F, eps_list=DINI_EPSILONS) -> DiniEstimate:
    """Upper Dini estimate ``d^+ V(tau, m)(h, F)``; read ``.upper``."""
    return dini_quotients(handle, tau, m, h, F, eps_list)


def dini_lower_derivative(handle, tau, m, h, F, eps_list=DINI_EPSILONS) -> DiniEstimate:
    """Lower Dini estimate ``d^- V(tau, m)(h, F)``; read ``.lower``."""
    return dini_quotients(handle, tau, m, h, F, eps_list)


def sample_directions(rng, measure: EmpiricalMeasure, n: int, *, with_time: bool = True):
    """``n`` random directions ``(h, F)`` with entries uniform in ``[-1, 1]``."""
    out = []
    for _ in range(n):
        F = rng.uniform(-1.0, 1.0, size=measure.atoms.shape)
        h = float(rng.uniform(-1.0, 1.0)) if with_time else 0.0
        out.append((h, F))
    return out


@dataclass
class SensitivityCertificate:
    """Margins of the Dini super-differential test at one node.

    ``margins[k] = right[k] - upper[k]``; ``passed`` iff every margin is at
    least ``-tol``.
    """

    node: float
    h: np.ndarray
    directions: list
    quotients: np.ndarray
    upper: np.ndarray
    right: np.ndarray
    margins: np.ndarray = field(init=False)
    tol: float = DEFAULT_TOL_SENS
    passed: bool = field(init=False)

    def __post_init__(self):
        self.margins = np.asarray(self.right) - np.asarray(self.upper)
        self.passed = bool(np.all(self.margins >= -self.tol))

    @property
    def min_margin(self) -> float:
        return float(self.margins.min()) if self.margins.size else 0.0

    def rows(self):
        for k in range(len(self.margins)):
            yield [self.node, k, self.h[k], self.upper[k], self.right[k], self.margins[k]]


def write_certificates(path, certs) -> None:
    rows = [r for c in certs for r in c.rows()]
    _write_rows(path, ["t", "direction", "h", "dini_upper", "right_side", "margin"], rows)


def sensitivity_nodes(ensemble: StateCostateEnsemble, times=None) -> list[int]:
    """Interior ensemble node indices that are not control jumps."""
    grid = ensemble.grid
    if times is None:
        idx = range(1, len(grid.nodes) - 1)
    else:
        idx = [grid.index(t) for t in times]
    return [k for k in idx if 0 < k < len(grid.nodes) - 1 and not ensemble.control.is_jump(grid.nodes[k])]


def dini_sensitivity_check(ensemble: StateCostateEnsemble, handle: Callable, nodes: Sequence[int],
                           directions, *, tol: float = DEFAULT_TOL_SENS, eps_list=DINI_EPSILONS,
                           certificate=None) -> list[SensitivityCertificate]:
    """Test ``(H, -r)`` against upper Dini derivatives of ``V`` at ensemble nodes.

    Parameters
    ----------
    ensemble : StateCostateEnsemble
    handle : callable
        ``V(tau, mu)``.
    nodes : sequence of int
        Node indices of the ensemble grid.
    directions : sequence of ``(h, F)`` or callable
        A callable is called as ``directions(index)`` and must return such a
        sequence, which allows node-dependent directions.
    certificate : MonotonicityReport, optional
        Optimality evidence; a non-constant value sequence is rejected.
    """
    if certificate is not None and not certificate.constant:
        raise ValueError("ensemble is not certified optimal (value not constant along the pair)")
    certs = []
    for n in nodes:
        t = float(ensemble.nodes[n])
        mu = ensemble.measure_at(n)
        R = ensemble.r_paths[n]
        H = ensemble.hamiltonian_at(n)
        dirs = directions(n) if callable(directions) else directions
        hs, Fs, qs, ups, rights = [], [], [], [], []
        for h, F in dirs:
            F = check_atom_field(F, mu)
            est = dini_quotients(handle, t, mu, h, F, eps_list)
            hs.append(h)
            Fs.append(F)
            qs.append(est.quotients)
            ups.append(est.upper)
            rights.append(float(mu.weights @ np.sum(-R * F, axis=1)) + h * H)
        certs.append(SensitivityCertificate(t, np.array(hs), Fs, np.array(qs), np.array(ups), np.array(rights), tol=tol))
    return certs


@dataclass
class FrechetCertificate:
    """Violation ratios ``max(0, dV - pairing) / W_2`` per test measure."""

    node: float
    radii: np.ndarray
    value_gaps: np.ndarray
    pairings: np.ndarray
    ratios: np.ndarray
    degenerate: np.ndarray
    tol: float
    passed: bool

    def to_csv(self, path) -> None:
        _write_rows(path, ["radius", "value_gap", "pairing", "violation_ratio", "degenerate_plan"],
                    zip(self.radii, self.value_gaps, self.pairings, self.ratios, self.degenerate.astype(int)))


def frechet_sensitivity_check(ensemble: StateCostateEnsemble, handle: Callable, node: int, test_measures,
                              *, tol: float = DEFAULT_FRECHET_TOL) -> FrechetCertificate:
    """Superdifferential test of ``-r`` at ``mu*(t)`` against nearby measures.

    The pairing is ``sum_ij gamma_ij <-r_i, y_j - x_i>`` with ``gamma`` the
    solver's optimal ``W_2`` plan; degenerate plans are flagged because other
    optimal plans are not explored. Passes iff the ratio is at most ``tol``
    at the two smallest radii.
    """
    t = float(ensemble.nodes[node])
    mu = ensemble.measure_at(node)
    R = ensemble.r_paths[node]
    base = handle(t, mu)
    radii, gaps, pairs, ratios, deg = [], [], [], [], []
    for nu in test_measures:
        nu = check_measure(nu, dim=mu.dim)
        res = wasserstein(2, mu, nu)
        disp = nu.atoms[None, :, :] - mu.atoms[:, None, :]
        pairing = float(np.sum(res.plan.mass * np.einsum("id,ijd->ij", -R, disp)))
        gap = handle(t, nu) - base
        radii.append(res.distance)
        gaps.append(gap)
        pairs.append(pairing)
        ratios.append(max(0.0, gap - pairing) / res.distance if res.distance > 0 else 0.0)
        deg.append(res.degenerate)
    radii = np.array(radii)
    ratios = np.array(ratios)
    order = np.argsort(radii, kind="stable")
    passed = bool(np.all(ratios[order[:2]] <= tol))
    return FrechetCertificate(t, radii, np.array(gaps), np.array(pairs), ratios, np.array(deg), tol, passed)


# ---------------------------------------------------------------------------
# constancy of the two consistency functionals


@dataclass
class ConstancyReport:
    times: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    drift_h1: float
    drift_h2: float
    hamiltonian_tau: float

    def to_csv(self, path) -> None:
        _write_rows(path, ["t", "H1", "H2"], zip(self.times, self.h1, self.h2))


def _relative_drift(path):
    return float(np.max(np.abs(path - path[0])) / max(abs(path[0]), 1.0))


def constancy_monitor(ensemble: StateCostateEnsemble, plan_tau: CouplingPlan | None,
                      bundle: LinearizationBundle) -> ConstancyReport:
    """Track the two functionals that stay constant along state-costate curves.

    ``H1(t) = sum_i <r_i(t), W_i(t) D_i + w_i w_i(t)>`` with
    ``D_i = sum_k gamma_ik (y_k - x_i(tau))`` and ``H2(t) = sum_i w_i <r_i(t), Psi_i(t)>``,
    evaluated at the nodes from ``tau`` to the horizon. Drifts are relative
    to ``max(|value at tau|, 1)``.
    """
    base = bundle.base_flow
    if len(base.grid.nodes) != len(ensemble.nodes) or not np.allclose(base.grid.nodes, ensemble.nodes,
                                                                         rtol=0, atol=1e-12):
        raise ValueError("linearisation and ensemble live on different grids")
    k = base.tau_index
    if not np.allclose(base.base.atoms, ensemble.x_paths[k], rtol=0, atol=1e-10):
        raise ValueError("linearisation does not start from the ensemble state at tau")
    w = ensemble.weights
    R = ensemble.r_paths[k:]
    if plan_tau is not None:
        check_plan(plan_tau, source=base.base)
        D = plan_tau.mass @ plan_tau.target.atoms - w[:, None] * base.base.atoms
        trans = np.einsum("nide,ie->nid", bundle.space_jac[k:], D) + w[None, :, None] * bundle.measure_dir[k:]
        h1 = np.einsum("nid,nid->n", R, trans)
    else:
        h1 = np.zeros(len(R))
    h2 = np.einsum("i,nid,nid->n", w, R, bundle.time_dir[k:])
    H = ensemble.hamiltonian_at(k)
    return ConstancyReport(ensemble.nodes[k:], h1, h2, _relative_drift(h1), _relative_drift(h2), H)


# ---------------------------------------------------------------------------
# sufficiency and feedback


@dataclass
class Verdict:
    status: str
    reason: str
    details: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL_CONSISTENT


def sufficiency_verdict(ensemble: StateCostateEnsemble, handle, control_set: ControlSet, *, times=None,
                        tol_max: float = 1e-8, tol_terminal: float = 1e-9, tol: float = DEFAULT_TOL_SENS,
                        eps_list=DINI_EPSILONS) -> Verdict:
    """Sufficient-optimality test for a PMP candidate.

    Preconditions are the maximisation condition over the control samples
    and the terminal costate condition. The test then runs the Dini check in
    the canonical direction ``F = v(t, mu*(t), u*(t), .)``, ``h = 1`` at the
    sampled non-jump nodes, and requires the value to be constant along the
    candidate pair.
    """
    gaps = check_maximisation(ensemble, control_set.samples())
    interior = gaps[1:-1] if len(gaps) > 2 else gaps
    if np.max(interior) > tol_max:
        return Verdict(INCONCLUSIVE, "maximisation condition violated", {"max_gap": float(np.max(interior))})
    if ensemble.cost is not None and ensemble.terminal_residual() > tol_terminal:
        return Verdict(INCONCLUSIVE, "terminal costate condition violated",
                       {"terminal_residual": ensemble.terminal_residual()})
    nodes = sensitivity_nodes(ensemble, times)
    field_ = ensemble.field

    def canonical(n):
        t = ensemble.nodes[n]
        mu = ensemble.measure_at(n)
        return [(1.0, field_.eval(t, mu, ensemble.control_at_node(n), mu.atoms))]

    certs = dini_sensitivity_check(ensemble, handle, nodes, canonical, tol=tol, eps_list=eps_list)
    mono = value_monotonicity_check(handle, float(ensemble.nodes[0]), ensemble.measure_at(0), ensemble.control)
    details = {"min_margin": min((c.min_margin for c in certs), default=0.0),
               "value_sequence": mono.values.tolist(), "nodes": [float(ensemble.nodes[n]) for n in nodes]}
    if not all(c.passed for c in certs):
        return Verdict(INCONCLUSIVE, "Dini sensitivity margin below tolerance", details)
    if not mono.constant:
        return Verdict(INCONCLUSIVE, "value not constant along the candidate", details)
    return Verdict(OPTIMAL_CONSISTENT, "all checks passed", details)


@dataclass
class FeedbackSet:
    """Control samples whose velocity has a nonpositive lower Dini derivative."""

    t: float
    samples: np.ndarray
    lower: np.ndarray
    members: np.ndarray
    tol: float

    @property
    def controls(self) -> np.ndarray:
        return self.samples[self.members]


def feedback_membership(handle, t: float, m, control_set: ControlSet, field: VelocityFieldSpec, *,
                        tol: float = DEFAULT_TOL_SENS, eps_list=DINI_EPSILONS) -> FeedbackSet:
    """Generalised feedback set at ``(t, m)`` among the control samples."""
    m = check_measure(m)
    samples = control_set.samples()
    lower = []
    for u in samples:
        F = field.eval(t, m, u, m.atoms)
        lower.append(dini_lower_derivative(handle, t, m, 1.0, F, eps_list).lower)
    lower = np.array(lower)
    return FeedbackSet(t, samples, lower, lower <= tol, tol)


# ---------------------------------------------------------------------------
# propagation of differentiability and regularised lower derivatives


@dataclass
class PropagationReport:
    nodes: np.ndarray
    dini_gaps: np.ndarray
    pairing_gaps: np.ndarray
    premise: bool
    passed: bool
    tol: float

    def to_csv(self, path) -> None:
        rows = []
        for a, t in enumerate(self.nodes):
            for k in range(self.dini_gaps.shape[1]):
                rows.append([t, k, self.dini_gaps[a, k], self.pairing_gaps[a, k]])
        _write_rows(path, ["t", "direction", "dini_gap", "pairing_gap"], rows)


def subdifferential_propagation_check(ensemble: StateCostateEnsemble, handle, tau_index: int,
                                      nodes: Sequence[int], directions, *, tol: float = DEFAULT_TOL_SENS,
                                      eps_list=DINI_EPSILONS) -> PropagationReport:
    """Check that differentiability at ``tau`` persists at later nodes.

    For each node and measure direction ``F`` this records ``|d^+ - d^-|``
    and the gap between the symmetric quotient at the smallest ``eps`` and
    ``sum_i w_i <-r_i, F_i>``. When both are within ``tol`` at ``tau`` they
    must stay within ``tol`` at every listed node after it; otherwise the
    premise fails and the check passes vacuously.
    """
    all_nodes = [tau_index] + [n for n in nodes if n > tau_index]
    eps_min = min(eps_list)
    dg = np.zeros((len(all_nodes), len(directions)))
    pg = np.zeros_like(dg)
    for a, n in enumerate(all_nodes):
        t = float(ensemble.nodes[n])
        mu = ensemble.measure_at(n)
        R = ensemble.r_paths[n]
        for k, F in enumerate(directions):
            F = check_atom_field(F, mu)
            est = dini_quotients(handle, t, mu, 0.0, F, eps_list)
            dg[a, k] = abs(est.upper - est.lower)
            sym = (handle(t, _push(mu, F, eps_min)) - handle(t, _push(mu, F, -eps_min))) / (2 * eps_min)
            pg[a, k] = abs(sym - float(mu.weights @ np.sum(-R * F, axis=1)))
    ok = (dg <= tol) & (pg <= tol)
    premise = bool(np.all(ok[0]))
    passed = bool(np.all(ok)) if premise else True
    return PropagationReport(np.array([ensemble.nodes[n] for n in all_nodes]), dg, pg, premise, passed, tol)


@dataclass
class RegularisedLowerEstimate:
    regularised: float
    plain: float
    quotients: np.ndarray


def regularised_lower_derivative(f: Callable, m, F, radius: float, eps_list=DINI_EPSILONS,
                                 neighbors=None) -> RegularisedLowerEstimate:
    """Regularised lower derivative of a functional ``f(mu)`` in direction ``F``.

    The minimum of ``[f((Id + eps F)_# nu) - f(nu)] / eps`` over the two
    smallest ``eps`` and the neighbour measures ``nu`` (``m`` itself is always
    included). ``F`` is a point map, or an array when every neighbour shares
    the atom indexing of ``m``.
    """
    m = check_measure(m)
    neighbors = [m] + [check_measure(nu, dim=m.dim) for nu in (neighbors or [])]
    eps = sorted(eps_list)[:2]
    qs = []
    for nu in neighbors:
        if nu is not m and wasserstein(2, m, nu).distance > radius + 1e-12:
            raise ValueError("neighbour measure lies outside the sampling radius")
        Fn = check_atom_field(F, nu)
        f0 = f(nu)
        qs.append([(f(_push(nu, Fn, e)) - f0) / e for e in eps])
    qs = np.array(qs)
    return RegularisedLowerEstimate(float(qs.min()), float(qs[0].min()), qs)
