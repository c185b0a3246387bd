"""Scenario pipeline: flow, costate, value, then the requested checks.

Each check writes one CSV report into the output directory and returns a
summary record ``{name, passed, metrics, tolerances}``. All sampling comes
from one seed: check ``k`` in :data:`CHECK_ORDER` draws from the ``k``-th
child of ``SeedSequence(seed)``, so reports do not depend on which checks
run or in which thread.
"""

from __future__ import annotations

import json
import math
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import clone

from . import __version__
from .analysis import (
    DEFAULT_FRECHET_TOL,
    DEFAULT_TOL_SENS,
    constancy_monitor,
    dini_sensitivity_check,
    feedback_membership,
    frechet_sensitivity_check,
    geodesic_semiconcavity_defect,
    sample_directions,
    sufficiency_verdict,
    write_certificates,
)
from .flow import ControlSignal, apriori_radius, integrate_flow, semigroup_check
from .linearization import Perturbation, linearize, taylor_residual
from .measures import EmpiricalMeasure
from .pmp import check_maximisation, forward_backward_sweep, integrate_costate
from .scenarios import Scenario
from .transport import wasserstein
from .value import ExhaustiveValue, ValueRecord, value_monotonicity_check, write_value_table

CHECK_ORDER = (
    "semigroup",
    "apriori_support",
    "taylor_residual",
    "adjoint_gradient",
    "maximisation",
    "value",
    "value_monotonicity",
    "constancy_monitor",
    "geodesic_semiconcavity_defect",
    "dini_sensitivity_check",
    "frechet_sensitivity_check",
    "sufficiency_verdict",
    "feedback_membership",
)


@dataclass
class Context:
    sc: Scenario
    handle: ExhaustiveValue
    control: ControlSignal
    flow: object
    ensemble: object
    out: Path


def _csv(path, header, rows):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _control_nodes(ctx: Context, include_start=False):
    """Ensemble node indices at interior control nodes that are not jumps."""
    cg = ctx.sc.control_grid
    times = cg.nodes if include_start else cg.nodes[1:]
    times = [t for t in times if t < cg.t1 and not ctx.control.is_jump(t)]
    return [ctx.sc.grid.index(t) for t in times]


# -- individual checks ---------------------------------------------------------


def _semigroup(ctx, opts, rng):
    g = ctx.sc.grid
    s = float(g.nodes[g.steps // 2])
    d = semigroup_check(ctx.sc.field, ctx.control, g.t0, s, g.t1, ctx.sc.initial, g)
    tol = opts.get("tol", 1e-9)
    _csv(ctx.out / "semigroup.csv", ["tau", "s", "t", "defect"], [[g.t0, s, g.t1, d]])
    return d <= tol, {"defect": d}, {"tol": tol}


def _apriori(ctx, opts, rng):
    g = ctx.sc.grid
    R = apriori_radius(ctx.sc.field, ctx.sc.initial.support_radius, g.t1 - g.t0)
    radii = ctx.flow.support_radii()
    _csv(ctx.out / "apriori_support.csv", ["t", "support_radius", "bound"], [[t, r, R] for t, r in zip(g.nodes, radii)])
    return bool(np.all(radii <= R * (1 + 1e-12))), {"max_radius": float(radii.max()), "bound": R}, {}


def _taylor(ctx, opts, rng):
    sc = ctx.sc
    cg = sc.control_grid
    tau = float(sc.grid.nodes[sc.grid.nearest(cg.t0 + 0.5 * cg.h)])
    base = integrate_flow(sc.field, ctx.control, tau, ctx.flow.measure_at(tau), sc.grid)
    m = base.base
    dy = rng.uniform(-1, 1, size=m.atoms.shape)
    target = EmpiricalMeasure(m.atoms + rng.uniform(-0.5, 0.5, size=m.atoms.shape), m.weights)
    plan = wasserstein(2, m, target).plan
    dh = float(rng.uniform(-0.5, 0.5)) * min(1.0, cg.h)
    table = taylor_residual(base, sc.field, Perturbation(dy, plan, dh), opts.get("epsilons", (1e-1, 1e-2, 1e-3)))
    table.to_csv(ctx.out / "taylor_residual.csv")
    lo, hi = opts.get("slope_range", (1.8, 2.2))
    ok = bool(lo <= table.slope <= hi) or bool(np.max(table.residuals) <= 1e-10)
    return ok, {"slope": table.slope, "max_residual": float(table.residuals.max())}, {"slope_range": [lo, hi]}


def adjoint_gradient_gap(field, cost, control, m, grid, ensemble, eps=1e-6):
    """Rows ``(i, k, w_i r_i(0)_k, -d(phi o flow)/dx_ik)`` and the max gap."""
    rows, gap = [], 0.0
    for i in range(m.n_atoms):
        for k in range(m.dim):
            up, dn = m.atoms.copy(), m.atoms.copy()
            up[i, k] += eps
            dn[i, k] -= eps
            fu = cost(integrate_flow(field, control, grid.t0, m.with_atoms(up), grid).measure_at(index=-1))
            fd = cost(integrate_flow(field, control, grid.t0, m.with_atoms(dn), grid).measure_at(index=-1))
            lhs = m.weights[i] * ensemble.r_paths[0, i, k]
            rhs = -(fu - fd) / (2 * eps)
            rows.append([i, k, lhs, rhs])
            gap = max(gap, abs(lhs - rhs))
    return rows, gap


def _adjoint(ctx, opts, rng):
    sc = ctx.sc
    rows, gap = adjoint_gradient_gap(sc.field, sc.cost, ctx.control, sc.initial, sc.grid, ctx.ensemble)
    tol = opts.get("tol", 1e-4)
    _csv(ctx.out / "adjoint_gradient.csv", ["atom_index", "coord", "weighted_costate", "minus_fd_gradient"], rows)
    return gap <= tol, {"max_gap": gap}, {"tol": tol}


def _maximisation(ctx, opts, rng):
    res = check_maximisation(ctx.ensemble, ctx.sc.control_set.samples())
    ctx.ensemble.to_csv(ctx.out / "ensemble.csv")
    _csv(ctx.out / "maximisation.csv", ["t", "residual"], zip(ctx.ensemble.nodes, res))
    tol = opts.get("tol", 1e-8)
    interior = res[1:-1]
    return bool(np.all(interior <= tol)), {"max_residual": float(interior.max(initial=0.0))}, {"tol": tol}


def _value(ctx, opts, rng):
    v, u = ctx.handle.value(ctx.sc.grid.t0, ctx.sc.initial)
    metrics = {"value": v, "argmin": u.encode(ctx.sc.control_set)}
    tol = opts.get("tol", 1e-6)
    if "expected" in opts:
        return abs(v - opts["expected"]) <= tol, metrics, {"tol": tol, "expected": opts["expected"]}
    return math.isfinite(v), metrics, {}


def _monotonicity(ctx, opts, rng):
    rep = value_monotonicity_check(ctx.handle, ctx.sc.grid.t0, ctx.sc.initial, ctx.control, tol=opts.get("tol", 1e-9))
    _csv(ctx.out / "value_monotonicity.csv", ["t", "value"], zip(rep.times, rep.values))
    ok = rep.nondecreasing and (rep.constant or not opts.get("expect_constant", False))
    return ok, {"nondecreasing": rep.nondecreasing, "constant": rep.constant}, {"tol": rep.tol}


def _constancy(ctx, opts, rng):
    sc = ctx.sc
    k = 0
    m = ctx.ensemble.measure_at(k)
    target = EmpiricalMeasure(m.atoms + rng.uniform(-0.3, 0.3, size=m.atoms.shape), m.weights)
    plan = wasserstein(2, m, target).plan
    base = integrate_flow(sc.field, ctx.control, float(sc.grid.nodes[k]), m, sc.grid)
    rep = constancy_monitor(ctx.ensemble, plan, linearize(base, sc.field, plan))
    rep.to_csv(ctx.out / "constancy_monitor.csv")
    tol = opts.get("tol", 1e-5)
    return max(rep.drift_h1, rep.drift_h2) <= tol, {"drift_h1": rep.drift_h1, "drift_h2": rep.drift_h2}, {"tol": tol}


def _geodesic(ctx, opts, rng):
    m = ctx.sc.initial
    lambdas = np.linspace(0.0, 1.0, int(opts.get("lambdas", 9)))
    rows, fitted = [], -np.inf
    bound = ctx.sc.cost.semiconcavity
    ok = True
    for s in range(int(opts.get("pairs", 3))):
        m1 = EmpiricalMeasure(m.atoms + rng.uniform(-0.5, 0.5, size=m.atoms.shape), m.weights)
        m2 = EmpiricalMeasure.uniform(m.atoms + rng.uniform(-1.0, 1.0, size=m.atoms.shape))
        rep = geodesic_semiconcavity_defect(ctx.sc.cost, m1, m2, lambdas, bound=bound, tol=opts.get("tol", 1e-6))
        ok &= rep.passed
        fitted = max(fitted, rep.fitted_constant)
        rows += [[s, lam, d, n] for lam, d, n in zip(rep.lambdas, rep.defects, rep.normalizers)]
    _csv(ctx.out / "geodesic_semiconcavity_defect.csv", ["sample", "lambda", "defect", "normalizer"], rows)
    return bool(ok), {"fitted_constant": float(fitted)}, {"bound": bound}


def _certified(ctx):
    rep = value_monotonicity_check(ctx.handle, ctx.sc.grid.t0, ctx.sc.initial, ctx.control)
    return rep


def _dini(ctx, opts, rng):
    tol = opts.get("tol", DEFAULT_TOL_SENS)
    mono = _certified(ctx)
    if not mono.constant:
        return False, {"reason": "non-optimal ensemble rejected"}, {"tol_sens": tol}
    nodes = _control_nodes(ctx)
    n_dir = int(opts.get("directions", 20))
    m = ctx.ensemble.measure_at(0)
    dirs = sample_directions(rng, m, n_dir)
    certs = dini_sensitivity_check(ctx.ensemble, ctx.handle, nodes, dirs, tol=tol, certificate=mono)
    write_certificates(ctx.out / "dini_sensitivity_check.csv", certs)
    worst = min((c.min_margin for c in certs), default=0.0)
    return all(c.passed for c in certs), {"min_margin": worst, "nodes": len(nodes)}, {"tol_sens": tol}


def _frechet(ctx, opts, rng):
    nodes = _control_nodes(ctx)
    node = nodes[len(nodes) // 2] if nodes else 0
    m = ctx.ensemble.measure_at(node)
    direction = rng.uniform(-1, 1, size=m.atoms.shape)
    direction /= max(np.sqrt(m.weights @ np.sum(direction**2, axis=1)), 1e-300)
    tests = [EmpiricalMeasure._trusted(m.atoms + r * direction, m.weights) for r in opts.get("radii", (1e-1, 1e-2, 1e-3))]
    tol = opts.get("tol", DEFAULT_FRECHET_TOL)
    cert = frechet_sensitivity_check(ctx.ensemble, ctx.handle, node, tests, tol=tol)
    cert.to_csv(ctx.out / "frechet_sensitivity_check.csv")
    return cert.passed, {"ratios": cert.ratios.tolist(), "degenerate": bool(cert.degenerate.any())}, {"tol": tol}


def _sufficiency(ctx, opts, rng):
    cg = ctx.sc.control_grid
    times = [t for t in cg.nodes[1:-1]]
    verdict = sufficiency_verdict(ctx.ensemble, ctx.handle, ctx.sc.control_set, times=times,
                                  tol=opts.get("tol", DEFAULT_TOL_SENS))
    _csv(ctx.out / "sufficiency_verdict.csv", ["verdict", "reason"], [[verdict.status, verdict.reason]])
    expected = opts.get("expected", "OPTIMAL-CONSISTENT")
    return verdict.status == expected, {"verdict": verdict.status, "reason": verdict.reason}, {"expected": expected}


def _feedback(ctx, opts, rng):
    rows, ok = [], True
    tol = opts.get("tol", DEFAULT_TOL_SENS)
    for n in _control_nodes(ctx, include_start=True):
        t = float(ctx.ensemble.nodes[n])
        fs = feedback_membership(ctx.handle, t, ctx.ensemble.measure_at(n), ctx.sc.control_set, ctx.sc.field, tol=tol)
        u = ctx.control.at(t)
        hit = np.flatnonzero(np.all(np.abs(fs.samples - u) <= 1e-12, axis=1))
        member = bool(hit.size and fs.members[hit[0]])
        ok &= member
        for s, lo, mem in zip(fs.samples, fs.lower, fs.members):
            rows.append([t, " ".join(repr(float(x)) for x in s), lo, int(mem)])
    _csv(ctx.out / "feedback_membership.csv", ["t", "control", "lower_dini", "member"], rows)
    return bool(ok), {}, {"tol_fb": tol}


CHECKS = {
    "semigroup": _semigroup,
    "apriori_support": _apriori,
    "taylor_residual": _taylor,
    "adjoint_gradient": _adjoint,
    "maximisation": _maximisation,
    "value": _value,
    "value_monotonicity": _monotonicity,
    "constancy_monitor": _constancy,
    "geodesic_semiconcavity_defect": _geodesic,
    "dini_sensitivity_check": _dini,
    "frechet_sensitivity_check": _frechet,
    "sufficiency_verdict": _sufficiency,
    "feedback_membership": _feedback,
}


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def _merge_records(handles) -> list[ValueRecord]:
    """Distinct value queries in first-seen order, renumbered."""
    seen, out = set(), []
    for h in handles:
        for r in h.records_:
            if r.key in seen:
                continue
            seen.add(r.key)
            out.append(ValueRecord(r.tau, f"m{len(out)}", r.value, r.encoding, r.key))
    return out


def prepare(sc: Scenario, out: Path) -> Context:
    handle = ExhaustiveValue(sc.field, sc.cost, sc.control_set, sc.control_grid, **sc.value_options).fit()
    if isinstance(sc.control, str) and sc.control == "optimal":
        control = handle.value(sc.grid.t0, sc.initial)[1]
    elif isinstance(sc.control, str):
        control = forward_backward_sweep(sc.field, sc.cost, sc.initial, sc.grid, sc.control_set,
                                         control_grid=sc.control_grid).control
    else:
        control = ControlSignal(sc.control_grid, sc.control)
    flow = integrate_flow(sc.field, control, sc.grid.t0, sc.initial, sc.grid)
    ensemble = integrate_costate(flow, sc.field, sc.cost)
    return Context(sc, handle, control, flow, ensemble, out)


def run_scenario(sc: Scenario, out, *, seed: int | None = None, threads: int = 1, strict: bool = False) -> dict:
    """Run every requested check and write ``summary.json``; returns the summary."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seed = sc.seed if seed is None else int(seed)
    unknown = sorted(set(sc.checks) - set(CHECKS))
    if unknown:
        raise ValueError(f"unknown checks {unknown}; known {list(CHECK_ORDER)}")
    ctx = prepare(sc, out)
    ctx.flow.to_csv(out / "trajectories.csv")
    children = np.random.SeedSequence(seed).spawn(len(CHECK_ORDER))
    requested = [c for c in CHECK_ORDER if c in sc.checks]

    # warnings filters are process-wide, so one capture spans all checks and
    # each message is routed to the thread that raised it
    local = threading.local()

    def route(message, category, filename, lineno, file=None, line=None):
        getattr(local, "messages", []).append(str(message))

    handles = {}

    def run_one(name):
        rng = np.random.default_rng(children[CHECK_ORDER.index(name)])
        handle = clone(ctx.handle).fit() if threads > 1 else ctx.handle
        handles[name] = handle
        check_ctx = Context(ctx.sc, handle, ctx.control, ctx.flow, ctx.ensemble, out)
        local.messages = []
        try:
            passed, metrics, tols = CHECKS[name](check_ctx, dict(sc.checks[name] or {}), rng)
            error = None
        except Exception as exc:  # reported in the summary, never swallowed silently
            passed, metrics, tols, error = False, {}, {}, f"{type(exc).__name__}: {exc}"
        msgs = local.messages
        if strict and msgs:
            passed = False
        rec = {"name": name, "passed": bool(passed), "metrics": metrics, "tolerances": tols}
        if msgs:
            rec["warnings"] = msgs
        if error:
            rec["error"] = error
        return _jsonable(rec)

    with warnings.catch_warnings():
        warnings.simplefilter("always")
        warnings.showwarning = route
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                records = list(pool.map(run_one, requested))
        else:
            records = [run_one(n) for n in requested]
    pools = [ctx.handle] + [handles[n] for n in requested if handles[n] is not ctx.handle]
    write_value_table(out / "values.csv", _merge_records(pools))
    summary = {
        "schema_version": 1,
        "tool_version": __version__,
        "scenario": sc.name,
        "seed": seed,
        "control": ctx.control.encode(sc.control_set),
        "checks": records,
        "all_passed": all(r["passed"] for r in records),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
