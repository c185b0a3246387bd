import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mfcontrol.measures import (
    CouplingPlan,
    EmpiricalMeasure,
    barycentric_projection,
    disintegrate,
    moment,
    pushforward,
)
from mfcontrol.validation import check_atom_field, check_measure, check_scalar


def test_pushforward_examples():
    m = EmpiricalMeasure.uniform([[0.0], [2.0]])
    same = pushforward(m, lambda x: x)
    assert same.same_as(m)
    shifted = pushforward(EmpiricalMeasure.dirac([1.0, 2.0]), lambda x: x + np.array([0.5, -1.0]))
    np.testing.assert_allclose(shifted.atoms, [[1.5, 1.0]])
    sq = pushforward(m, lambda x: x**2)
    np.testing.assert_allclose(sq.atoms.ravel(), [0.0, 4.0])
    np.testing.assert_allclose(sq.weights, [0.5, 0.5])


def test_pushforward_keeps_coincident_atoms_separate():
    m = EmpiricalMeasure.uniform([[-1.0], [1.0]])
    img = pushforward(m, lambda x: x**2)
    assert img.n_atoms == 2


def test_moment_examples():
    assert moment(EmpiricalMeasure.dirac([0.0]), 2) == 0.0
    assert moment(EmpiricalMeasure.dirac([3.0, 4.0]), 1) == pytest.approx(5.0)
    assert moment(EmpiricalMeasure.uniform([[0.0], [2.0]]), 2) == pytest.approx(np.sqrt(2.0))
    with pytest.raises(ValueError):
        moment(EmpiricalMeasure.dirac([1.0]), 0.5)


def test_weights_must_sum_to_one():
    with pytest.raises(ValueError, match="sum"):
        EmpiricalMeasure([[0.0], [1.0]], [0.5, 0.6])
    with pytest.raises(ValueError):
        EmpiricalMeasure([[0.0]], [0.999])
    EmpiricalMeasure([[0.0], [1.0]], [0.5, 0.5 + 5e-13])


@pytest.mark.parametrize("atoms,weights", [
    ([], []),
    ([[np.inf]], [1.0]),
    ([[0.0], [1.0]], [1.0]),
    ([[0.0], [1.0]], [1.5, -0.5]),
])
def test_invalid_measures_rejected(atoms, weights):
    with pytest.raises(ValueError):
        EmpiricalMeasure(atoms, weights)


def test_measure_arrays_are_read_only():
    m = EmpiricalMeasure.uniform([[0.0, 1.0]])
    with pytest.raises(ValueError):
        m.atoms[0, 0] = 3.0


def test_disintegration_and_barycentre():
    src = EmpiricalMeasure([[0.0], [1.0], [5.0]], [0.5, 0.5, 0.0])
    tgt = EmpiricalMeasure.uniform([[0.0], [2.0]])
    plan = CouplingPlan(src, tgt, [[0.25, 0.25], [0.25, 0.25], [0.0, 0.0]])
    rows = disintegrate(plan)
    np.testing.assert_allclose(rows[0], [0.5, 0.5])
    assert rows[2] is None
    bary = barycentric_projection(plan)
    np.testing.assert_allclose(bary[:2].ravel(), [1.0, 1.0])
    assert np.all(np.isnan(bary[2]))


def test_plan_marginals_checked():
    a = EmpiricalMeasure.uniform([[0.0], [1.0]])
    with pytest.raises(ValueError, match="marginals"):
        CouplingPlan(a, a, [[0.5, 0.1], [0.0, 0.4]])
    with pytest.raises(ValueError):
        CouplingPlan(a, a, [[0.6, -0.1], [-0.1, 0.6]])


def test_plan_constructors():
    a = EmpiricalMeasure.uniform([[0.0], [1.0]])
    b = EmpiricalMeasure.uniform([[3.0], [4.0], [5.0]])
    assert CouplingPlan.product(a, b).mass.shape == (2, 3)
    assert CouplingPlan.diagonal(a).is_deterministic()
    det = CouplingPlan.deterministic(a, lambda x: x + 1)
    np.testing.assert_allclose(det.target.atoms.ravel(), [1.0, 2.0])
    assert not CouplingPlan.product(a, b).is_deterministic()


def test_text_roundtrips(tmp_path):
    m = EmpiricalMeasure([[0.1, -2.0], [1.0 / 3.0, 7.0]], [0.25, 0.75])
    path = tmp_path / "m.txt"
    m.save(path)
    back = EmpiricalMeasure.load(path)
    assert np.array_equal(back.atoms, m.atoms) and np.array_equal(back.weights, m.weights)
    plan = CouplingPlan.product(m, m)
    again = CouplingPlan.from_text(plan.to_text(), m, m)
    assert np.array_equal(again.mass, plan.mass)


@pytest.mark.parametrize("text", ["", "2\n", "1 2\n1.0 0.0\n", "1 1\n1.0 0.0 3.0\n"])
def test_bad_text_rejected(text):
    with pytest.raises(ValueError):
        EmpiricalMeasure.from_text(text)


def test_validation_helpers():
    m = check_measure({"atoms": [[0.0], [1.0]]})
    assert m.n_atoms == 2
    assert check_measure(([[0.0]], [1.0])).n_atoms == 1
    with pytest.raises(ValueError):
        check_measure(m, dim=3)
    F = check_atom_field(lambda x: 2 * x, m)
    np.testing.assert_allclose(F.ravel(), [0.0, 2.0])
    np.testing.assert_allclose(check_atom_field(1.5, m).ravel(), [1.5, 1.5])
    with pytest.raises(ValueError):
        check_atom_field(np.zeros((3, 1)), m)
    with pytest.raises(TypeError):
        check_scalar("a", "x")
    with pytest.raises(ValueError):
        check_scalar(2.0, "x", max_val=1.0)


clouds = st.integers(1, 6).flatmap(
    lambda n: st.tuples(
        arrays(float, (n, 2), elements=st.floats(-5, 5)),
        arrays(float, n, elements=st.floats(0.1, 1.0)),
    )
)


@given(clouds)
def test_property_pushforward_preserves_mass_and_index(data):
    atoms, w = data
    w = w / w.sum()
    w[-1] = 1.0 - w[:-1].sum()
    m = EmpiricalMeasure(atoms, w)
    img = pushforward(m, lambda x: 3 * x + 1)
    assert img.weights.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(img.atoms, 3 * atoms + 1)


@given(clouds)
def test_property_moments_monotone_in_order(data):
    atoms, w = data
    w = w / w.sum()
    w[-1] = 1.0 - w[:-1].sum()
    m = EmpiricalMeasure(atoms, w)
    assert moment(m, 1) <= moment(m, 2) + 1e-9 <= m.support_radius + 2e-9
