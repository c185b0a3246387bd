import numpy as np
import pytest

from mfcontrol.fields import (
    COST_CATALOGUE,
    FIELD_CATALOGUE,
    ControlSet,
    builtin_cost,
    builtin_field,
    interaction_cost,
    potential_cost,
    verify_derivatives,
)
from mfcontrol.measures import EmpiricalMeasure

FIELDS = [
    ("zero", {}),
    ("constant_control", {}),
    ("linear", {"A": [[0.0, 1.0], [-1.0, 0.0]], "B": [[1.0], [0.5]]}),
    ("mean_attraction", {"strength": 0.7, "B": [[1.0], [0.0]]}),
    ("convolution", {"amplitude": -1.0, "scale": 0.8, "B": [[0.0], [1.0]]}),
]


@pytest.mark.parametrize("name,params", FIELDS)
def test_field_derivatives_match_finite_differences(name, params):
    controls = [[0.3, -0.2]] if name == "constant_control" else [[0.5]]
    rep = verify_derivatives(builtin_field(name, params), controls=controls, rng=0)
    assert rep.passed, rep


@pytest.mark.parametrize("name,params", [
    ("potential", {"Q": [[1.0, 0.2], [0.0, 2.0]], "b": [1.0, -1.0]}),
    ("interaction", {"coefficient": 0.7}),
    ("w2_squared_to_target", {"target": {"atoms": [[0.0, 0.0], [3.0, 1.0], [1.0, -2.0]]}}),
])
def test_cost_gradients_match_finite_differences(name, params):
    rep = verify_derivatives(builtin_cost(name, params), n_atoms=3, rng=1)
    assert rep.passed, rep


def test_catalogue_contents():
    assert set(FIELD_CATALOGUE) == {"zero", "constant_control", "linear", "convolution", "mean_attraction"}
    assert set(COST_CATALOGUE) == {"potential", "interaction", "w2_squared_to_target"}
    with pytest.raises(ValueError, match="unknown field"):
        builtin_field("nope")
    with pytest.raises(ValueError, match="unknown cost"):
        builtin_cost("nope")
    with pytest.raises(ValueError):
        builtin_field("linear", {})
    with pytest.raises(ValueError):
        builtin_field("convolution", {"scale": -1.0})


def test_mean_attraction_values():
    f = builtin_field("mean_attraction", {})
    m = EmpiricalMeasure.uniform([[0.0], [2.0]])
    np.testing.assert_allclose(f.velocity(0.0, m, [0.0]).ravel(), [1.0, -1.0])


def test_convolution_constant_is_sup_of_kernel():
    a, s = -1.3, 0.7
    f = builtin_field("convolution", {"amplitude": a, "scale": s})
    r = np.linspace(0, 5, 20001)
    sup = np.max(abs(a) * r * np.exp(-r**2 / (2 * s * s)))
    assert f.sublinearity == pytest.approx(sup, rel=1e-6)
    assert f.constants["lip_DH"] > 0


def test_kernel_jacobian_lipschitz_estimate_dominates_random_samples(rng):
    from mfcontrol.fields import _gaussian_kernel

    a, s = -1.0, 1.0
    lip = builtin_field("convolution", {"amplitude": a, "scale": s}).constants["lip_DH"]
    _, DH = _gaussian_kernel(a, s)
    for _ in range(200):
        z = rng.normal(size=3) * 2
        e = rng.normal(size=3)
        e /= np.linalg.norm(e)
        dd = (DH(z + 1e-6 * e) - DH(z - 1e-6 * e)) / 2e-6
        assert np.linalg.norm(dd, 2) <= lip * (1 + 1e-3)


def test_potential_cost_value_and_semiconcavity():
    c = builtin_cost("potential", {"Q": [[1.0]]})
    m = EmpiricalMeasure.uniform([[1.0], [3.0]])
    assert c(m) == pytest.approx(5.0)
    assert c.semiconcavity == pytest.approx(2.0)


def test_interaction_cost_is_twice_variance():
    c = builtin_cost("interaction", {"coefficient": 1.0})
    m = EmpiricalMeasure.uniform([[0.0], [2.0], [4.0]])
    assert c(m) == pytest.approx(2 * m.variance())


def test_custom_costs():
    V = potential_cost(lambda X: np.sum(X**4, axis=1), lambda X: 4 * X**3, name="quartic")
    rep = verify_derivatives(V, dim=1, rng=3)
    assert rep.passed
    W = interaction_cost(lambda X, Y: np.sum(X * Y, axis=-1), lambda X, Y: Y + 0 * X, lambda X, Y: X + 0 * Y)
    assert verify_derivatives(W, dim=2, rng=4).passed


def test_control_sets():
    U = ControlSet([-1.0, 0.0, 1.0])
    assert U.kind == "finite" and U.dim == 1 and U.bound == 1.0
    assert U.contains([0.0]) and not U.contains([0.5])
    B = ControlSet(low=[-1, 0], high=[1, 2], points_per_axis=3)
    assert B.samples().shape == (9, 2)
    assert B.contains([0.5, 1.5]) and not B.contains([0.5, 3.0])
    assert ControlSet.singleton([2.0]).samples().shape == (1, 1)
    with pytest.raises(ValueError):
        ControlSet(low=[1.0], high=[0.0])
    with pytest.raises(ValueError):
        ControlSet([])


def test_sublinearity_holds_on_samples():
    for name, params in FIELDS[2:]:
        rep = verify_derivatives(builtin_field(name, params), controls=[[1.0], [-1.0]], n_samples=10, rng=7)
        assert rep.sublinearity_ratio <= 1.0
