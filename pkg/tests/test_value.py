import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from mfcontrol.fields import ControlSet, builtin_cost, builtin_field
from mfcontrol.flow import ControlSignal, TimeGrid
from mfcontrol.measures import EmpiricalMeasure
from mfcontrol.scenarios import builtin_scenario
from mfcontrol.value import (
    BudgetExceededError,
    ExhaustiveValue,
    ValueQuery,
    lipschitz_probe,
    value_exhaustive,
    value_monotonicity_check,
)

from oracles import shift_value


def test_shift_value_and_argmin(shift_problem):
    p = shift_problem
    v, u = p["handle"].value(0.0, p["m0"])
    assert v == pytest.approx(1.0, abs=1e-12)
    assert u.encode(p["U"]) == "0-0-0-0"
    np.testing.assert_array_equal(u.values, -1.0)


def test_value_at_horizon_is_terminal_cost(shift_problem):
    p = shift_problem
    m = EmpiricalMeasure.uniform([[1.0], [3.0]])
    assert p["handle"](1.0, m) == pytest.approx(p["cost"](m))


def test_zero_field_value_is_terminal_cost_with_first_sample():
    cg = TimeGrid(0.0, 1.0, 3)
    cost = builtin_cost("potential", {"Q": [[1.0]]})
    h = ExhaustiveValue(builtin_field("zero"), cost, ControlSet([[-1.0], [0.0], [1.0]]), cg).fit()
    m = EmpiricalMeasure.uniform([[0.5, 1.0], [2.0, 0.0]])
    v, u = h.value(0.0, m)
    assert v == cost(m)
    assert u.encode(h.control_set) == "0-0-0"


def test_monotonicity_along_optimal_and_suboptimal_pairs(shift_problem):
    p = shift_problem
    cg = p["control_grid"]
    rep = value_monotonicity_check(p["handle"], 0.0, p["m0"], ControlSignal.constant(cg, [-1.0]))
    assert rep.nondecreasing and rep.constant
    np.testing.assert_allclose(rep.values, 1.0, atol=1e-12)
    rep = value_monotonicity_check(p["handle"], 0.0, p["m0"], ControlSignal.constant(cg, [0.0]))
    assert rep.nondecreasing and not rep.constant
    np.testing.assert_allclose(rep.values, [1.0, 1.5625, 2.25, 3.0625, 4.0], atol=1e-12)
    assert rep.max_increase == pytest.approx(3.0)


def test_budget_exceeded(shift_problem):
    p = shift_problem
    h = ExhaustiveValue(p["field"], p["cost"], p["U"], p["control_grid"], budget=80).fit()
    with pytest.raises(BudgetExceededError, match="81"):
        h(0.0, p["m0"])
    assert h(0.5, p["m0"]) == pytest.approx(shift_value(2.0, 0.0, 0.5))


def test_dynamic_programming_consistency():
    sc = builtin_scenario("linear_rotation")
    h = ExhaustiveValue(sc.field, sc.cost, sc.control_set, sc.control_grid).fit()
    nodes = sc.control_grid.nodes
    m = sc.initial
    for k in range(len(nodes) - 1):
        step = ExhaustiveValue(sc.field, sc.cost, sc.control_set, TimeGrid(nodes[k], nodes[k + 1], 1)).fit()
        nxt = [h(nodes[k + 1], step.rollout(nodes[k], m, [u])) for u in sc.control_set.samples()]
        assert h(nodes[k], m) == pytest.approx(min(nxt), abs=1e-12)


def test_relabeling_invariance(rng):
    sc = builtin_scenario("mean_attraction")
    h = ExhaustiveValue(sc.field, sc.cost, sc.control_set, sc.control_grid).fit()
    m = sc.initial
    perm = rng.permutation(m.n_atoms)
    mp = EmpiricalMeasure(m.atoms[perm], m.weights[perm])
    assert h(0.25, mp) == pytest.approx(h(0.25, m), abs=1e-12)


@settings(max_examples=25)
@given(st.floats(1.0, 3.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.sampled_from([-1, 1]))
def test_property_shift_analytic_family(mean, spread, tau, sign):
    cg = TimeGrid(0.0, 1.0, 4)
    h = ExhaustiveValue(builtin_field("constant_control", {}), builtin_cost("potential", {"Q": [[1.0]]}),
                        ControlSet([[-1.0], [0.0], [1.0]]), cg).fit()
    m = EmpiricalMeasure.uniform([[sign * mean - spread], [sign * mean + spread]])
    expected = max(mean - (1.0 - tau), 0.0) ** 2 + spread**2
    assert abs(h(tau, m) - expected) <= 1e-4


def test_lipschitz_probe_zero_field():
    cg = TimeGrid(0.0, 1.0, 2)
    h = ExhaustiveValue(builtin_field("zero"), builtin_cost("potential", {"Q": [[1.0]]}),
                        ControlSet([[0.0]]), cg).fit()
    qs = [(t, EmpiricalMeasure.dirac([x])) for t in (0.0, 0.5) for x in (-2.0, -0.5, 0.5, 1.5, 2.0)]
    est = lipschitz_probe(h, qs)
    assert est.measure_constant <= 4.0 + 1e-12
    assert est.time_constant == 0.0
    assert est.max_ratio <= 4.0 + 1e-12


def test_query_interface_and_csv(shift_problem, tmp_path):
    p = shift_problem
    q = ValueQuery(0.0, p["m0"], p["field"], p["cost"], p["control_grid"], p["U"])
    v, u = value_exhaustive(q)
    assert v == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ValueQuery(1.5, p["m0"], p["field"], p["cost"], p["control_grid"], p["U"])
    h = clone(p["handle"]).fit()
    assert h.get_params()["budget"] == 6561
    np.testing.assert_allclose(h.predict([(0.0, p["m0"]), (0.5, p["m0"])]), [1.0, 2.25])
    with pytest.raises(ValueError):
        h(-0.5, p["m0"])
    h.to_csv(tmp_path / "v.csv")
    rows = list(csv.reader(open(tmp_path / "v.csv")))
    assert rows[0] == ["tau", "measure_id", "value", "argmin_control_encoding"]
    assert rows[1][3] == "0-0-0-0" and rows[2][3] == "0-0"
    assert len(h.cache_) == 2


def test_off_node_query_uses_partial_first_segment(shift_problem):
    p = shift_problem
    for tau in (0.1, 0.3, 0.9):
        assert p["handle"](tau, p["m0"]) == pytest.approx(shift_value(2.0, 0.0, 1.0 - tau), abs=1e-12)
