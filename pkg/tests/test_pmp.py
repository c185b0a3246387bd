import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad_vec
from scipy.linalg import expm
from sklearn.base import clone

from mfcontrol.fields import ControlSet, builtin_cost, builtin_field
from mfcontrol.flow import ControlSignal, TimeGrid, integrate_flow
from mfcontrol.measures import EmpiricalMeasure
from mfcontrol.pmp import (
    ForwardBackwardSweep,
    check_maximisation,
    forward_backward_sweep,
    hamiltonian,
    hamiltonian_gradient,
    integrate_costate,
)
from mfcontrol.runner import adjoint_gradient_gap
from mfcontrol.scenarios import BUILTIN_SCENARIOS, builtin_scenario
from mfcontrol.value import ExhaustiveValue

U3 = ControlSet([[-1.0], [0.0], [1.0]])


def test_hamiltonian_examples():
    f = builtin_field("constant_control", {})
    X = [[0.0], [3.0]]
    R = [[1.0], [-2.0]]
    assert hamiltonian(f, 0.0, X, R, [0.5, 0.5], [1.0]) == pytest.approx(-0.5)
    assert hamiltonian(builtin_field("zero"), 0.0, X, R, [0.5, 0.5], [1.0]) == 0.0
    lin = builtin_field("linear", {"A": [[0.0, 1.0], [-1.0, 0.0]]})
    assert hamiltonian(lin, 0.0, [[1.0, 0.0]], [[0.0, 1.0]], [1.0], [0.0]) == pytest.approx(-1.0)


def test_hamiltonian_gradient_examples():
    A = np.array([[0.0, 2.0], [0.0, 0.0]])
    lin = builtin_field("linear", {"A": A.tolist()})
    g = hamiltonian_gradient(lin, 0.0, [[1.0, 1.0]], [[3.0, -1.0]], [1.0], [0.0])
    np.testing.assert_allclose(g, [[0.0, 6.0, 2.0, 0.0]])
    # mean attraction: x-slot is -k r_i + k sum_j w_j r_j
    ma = builtin_field("mean_attraction", {"strength": 2.0})
    g = hamiltonian_gradient(ma, 0.0, [[0.0], [1.0]], [[1.0], [3.0]], [0.5, 0.5], [0.0])
    np.testing.assert_allclose(g[:, 0], [-2.0 + 4.0, -6.0 + 4.0])
    np.testing.assert_allclose(g[:, 1], [1.0, -1.0])


def test_costate_constant_for_pure_control_field():
    f = builtin_field("constant_control", {})
    cost = builtin_cost("potential", {"Q": [[1.0]]})
    g = TimeGrid(0.0, 1.0, 4)
    flow = integrate_flow(f, ControlSignal.constant(g, [-1.0]), 0.0, EmpiricalMeasure.dirac([2.0]), g.refine(10))
    ens = integrate_costate(flow, f, cost)
    np.testing.assert_allclose(ens.r_paths[:, 0, 0], -2.0, atol=1e-14)
    assert ens.terminal_residual() == 0.0


def test_costate_linear_field_matrix_exponential():
    A = np.array([[-0.3, 1.0], [-1.0, 0.2]])
    f = builtin_field("linear", {"A": A.tolist()})
    cost = builtin_cost("potential", {"Q": 0.0, "b": [1.0, -0.5]})
    g = TimeGrid(0.0, 1.0, 400)
    flow = integrate_flow(f, ControlSignal.constant(g, [0.0]), 0.0, EmpiricalMeasure.dirac([0.4, 0.1]), g)
    ens = integrate_costate(flow, f, cost)
    for k in (0, 200, 400):
        exact = -expm(A.T * (1.0 - g.nodes[k])) @ np.array([1.0, -0.5])
        np.testing.assert_allclose(ens.r_paths[k, 0], exact, atol=1e-10)


@pytest.mark.parametrize("name", sorted(BUILTIN_SCENARIOS))
def test_adjoint_identity_on_builtins(name):
    sc = builtin_scenario(name)
    sc.grid = sc.control_grid.refine(50)
    u = ControlSignal(sc.control_grid, np.resize(sc.control_set.samples(), (sc.control_grid.steps, 1)))
    ens = integrate_costate(integrate_flow(sc.field, u, 0.0, sc.initial, sc.grid), sc.field, sc.cost)
    _, gap = adjoint_gradient_gap(sc.field, sc.cost, u, sc.initial, sc.grid, ens)
    assert gap <= 1e-4


def test_maximisation_shift_optimal_and_suboptimal(shift_problem):
    p = shift_problem
    for control, expected_gap in ((-1.0, 0.0), (0.0, 4.0)):
        u = ControlSignal.constant(p["control_grid"], [control])
        ens = integrate_costate(integrate_flow(p["field"], u, 0.0, p["m0"], p["grid"]), p["field"], p["cost"])
        gaps = check_maximisation(ens, U3.samples())
        np.testing.assert_allclose(gaps, expected_gap, atol=1e-12)
    with pytest.raises(ValueError):
        check_maximisation(ens, np.zeros((0, 1)))


def test_sweep_zero_field_stops_immediately():
    m0 = EmpiricalMeasure.uniform([[0.0, 1.0], [1.0, -1.0]])
    g = TimeGrid(0.0, 1.0, 4)
    res = forward_backward_sweep(builtin_field("zero"), builtin_cost("potential", {"Q": [[1.0]]}), m0,
                                 g.refine(10), ControlSet([[-1.0], [0.0], [1.0]]), control_grid=g)
    assert res.converged and res.n_iter == 1
    np.testing.assert_array_equal(res.control.values, 0.0)
    assert res.cost_history[-1] == pytest.approx(1.5)


def test_sweep_shift_reaches_exhaustive_value(shift_problem):
    p = shift_problem
    res = forward_backward_sweep(p["field"], p["cost"], p["m0"], p["grid"], p["U"], control_grid=p["control_grid"])
    assert res.converged
    np.testing.assert_array_equal(res.control.values, -1.0)
    assert res.cost_history[-1] == pytest.approx(1.0, abs=1e-12)
    assert res.cost_history[-1] == pytest.approx(p["handle"](0.0, p["m0"]), abs=1e-12)


def _lq_oracle(A, B, b, T, control_grid):
    """Per-interval minimisers of the linear terminal cost ``b . x(T)``."""
    out = []
    for a, c in zip(control_grid.nodes[:-1], control_grid.nodes[1:]):
        coeff = quad_vec(lambda s: b @ expm(A * (T - s)) @ B, a, c)[0]
        out.append(-np.sign(coeff))
    return np.array(out)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_sweep_matches_linear_cost_oracle(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(2, 2))
    B = rng.normal(size=(2, 1))
    b = rng.normal(size=2)
    f = builtin_field("linear", {"A": A.tolist(), "B": B.tolist(), "u_max": 1.0})
    cost = builtin_cost("potential", {"Q": 0.0, "b": b.tolist()})
    cg = TimeGrid(0.0, 1.0, 4)
    m0 = EmpiricalMeasure.uniform(rng.normal(size=(2, 2)))
    res = forward_backward_sweep(f, cost, m0, cg.refine(100), U3, control_grid=cg)
    assert res.converged
    np.testing.assert_array_equal(res.control.values, _lq_oracle(A, B, b, 1.0, cg))
    handle = ExhaustiveValue(f, cost, U3, cg).fit()
    assert res.cost_history[-1] == pytest.approx(handle(0.0, m0), abs=1e-6)


def test_hamiltonian_constant_along_autonomous_extremal():
    f = builtin_field("mean_attraction", {"strength": 1.0, "B": [[1.0], [0.5]]})
    cost = builtin_cost("potential", {"Q": [[1.0, 0.0], [0.0, 0.5]]})
    g = TimeGrid(0.0, 1.0, 500)
    m0 = EmpiricalMeasure.uniform([[0.0, 0.0], [2.0, 0.0], [1.0, 1.5]])
    ens = integrate_costate(integrate_flow(f, ControlSignal.constant(g, [0.5]), 0.0, m0, g), f, cost)
    H = ens.hamiltonian_path()
    assert np.max(np.abs(H - H[0])) < 1e-9 * max(1.0, abs(H[0]))


def test_estimator_interface(shift_problem, tmp_path):
    p = shift_problem
    est = ForwardBackwardSweep(p["field"], p["cost"], p["U"], p["grid"], p["control_grid"])
    assert est.get_params()["damping"] == 0.5
    est2 = clone(est).set_params(max_iter=1)
    est.fit(p["m0"])
    assert est.converged_ and est.cost_ == pytest.approx(1.0)
    est2.fit(p["m0"])
    assert not est2.converged_ and est2.n_iter_ == 1
    with pytest.raises(ValueError):
        ForwardBackwardSweep(p["field"], p["cost"], p["U"], p["grid"], damping=0.0).fit(p["m0"])
    with pytest.raises(ValueError):
        ForwardBackwardSweep().fit(p["m0"])
    est.ensemble_.to_csv(tmp_path / "e.csv")
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0] == ["t", "atom_index", "x_1", "r_1"]
    assert len(rows) == 1 + len(p["grid"].nodes)


def test_sweep_box_control_set():
    f = builtin_field("constant_control", {})
    cost = builtin_cost("potential", {"Q": [[1.0]]})
    box = ControlSet(low=[-1.0], high=[1.0], points_per_axis=3)
    cg = TimeGrid(0.0, 1.0, 4)
    res = forward_backward_sweep(f, cost, EmpiricalMeasure.dirac([2.0]), cg.refine(10), box, control_grid=cg,
                                 damping=1.0)
    assert res.converged
    np.testing.assert_allclose(res.control.values, -1.0)


@settings(max_examples=20)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_property_terminal_costate_matches_gradient(x1, x2):
    f = builtin_field("convolution", {})
    cost = builtin_cost("interaction", {"coefficient": 0.5})
    g = TimeGrid(0.0, 0.5, 10)
    flow = integrate_flow(f, ControlSignal.constant(g, [0.0]), 0.0, EmpiricalMeasure.uniform([[x1, 0.0], [x2, 1.0]]), g)
    assert integrate_costate(flow, f, cost).terminal_residual() == 0.0
