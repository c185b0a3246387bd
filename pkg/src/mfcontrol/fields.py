"""Controlled non-local velocity fields, terminal costs and control sets.

Velocity fields are vectorised over evaluation points:

* ``eval(t, mu, u, X)`` returns an ``(K, d)`` array of velocities at the rows of ``X``;
* ``jac_x(t, mu, u, X)`` returns ``(K, d, d)`` spatial Jacobians;
* ``grad_mu(t, mu, u, X, Y)`` returns the ``(K, L, d, d)`` measure-derivative
  kernel ``D_mu v(t, mu, u, X[k])(Y[l])``.

The kernel convention: moving atom ``j`` of ``mu`` (weight ``w_j``) by a small
``delta`` changes ``v(x)`` by ``w_j * grad_mu(x, x_j) @ delta`` to first order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measures import EmpiricalMeasure
from .transport import wasserstein
from .validation import check_measure

FD_STEP = 1e-5
JAC_TOL = 1e-5
GRAD_MU_TOL = 1e-4
WGRAD_TOL = 1e-5


@dataclass(frozen=True)
class VelocityFieldSpec:
    """Evaluator bundle for ``v``, ``D_x v`` and ``D_mu v``.

    ``sublinearity`` is a constant ``m`` with ``|v| <= m (1 + |x| + M_1(mu))``
    for controls in the declared bound; ``time_regular`` marks fields that
    are autonomous with a time-independent sublinearity constant.
    """

    name: str
    eval: Callable
    jac_x: Callable
    grad_mu: Callable
    sublinearity: float | None = None
    time_regular: bool = True
    params: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)

    def velocity(self, t, mu, u, X=None) -> np.ndarray:
        return self.eval(t, mu, np.atleast_1d(u), mu.atoms if X is None else X)


@dataclass(frozen=True)
class FinalCostSpec:
    """Terminal cost ``phi`` with its Wasserstein gradient evaluated at the atoms.

    ``semiconcavity`` records a known semiconcavity constant when one is
    available (used as the expected bound in defect checks).
    """

    name: str
    eval: Callable
    wgrad: Callable
    params: dict = field(default_factory=dict)
    semiconcavity: float | None = None

    def __call__(self, mu: EmpiricalMeasure) -> float:
        return float(self.eval(mu))


class ControlSet:
    """Compact control set, either a finite list of values or a sampled box.

    Parameters
    ----------
    values : array-like of shape (k, m), optional
    low, high : array-like of shape (m,), optional
        Box bounds; ``points_per_axis`` grid points are sampled per axis.
    """

    def __init__(self, values=None, *, low=None, high=None, points_per_axis: int = 3):
        if values is not None:
            vals = np.asarray(values, dtype=float)
            if vals.ndim == 1:
                vals = vals[:, None]
            if vals.size == 0:
                raise ValueError("control set must be nonempty")
            self.kind = "finite"
            self._samples = vals
            self.low = vals.min(axis=0)
            self.high = vals.max(axis=0)
        else:
            if low is None or high is None:
                raise ValueError("give either values or box bounds")
            self.kind = "box"
            self.low = np.atleast_1d(np.asarray(low, dtype=float))
            self.high = np.atleast_1d(np.asarray(high, dtype=float))
            if np.any(self.high < self.low):
                raise ValueError("box upper bound below lower bound")
            if points_per_axis < 1:
                raise ValueError("points_per_axis must be positive")
            axes = [np.linspace(lo, hi, points_per_axis) if hi > lo else np.array([lo])
                    for lo, hi in zip(self.low, self.high)]
            self._samples = np.array(list(itertools.product(*axes)), dtype=float)
        self.points_per_axis = points_per_axis

    @classmethod
    def singleton(cls, value) -> "ControlSet":
        return cls(np.atleast_1d(np.asarray(value, dtype=float))[None, :])

    @property
    def dim(self) -> int:
        return self._samples.shape[1]

    def samples(self) -> np.ndarray:
        return self._samples.copy()

    @property
    def bound(self) -> float:
        return float(np.max(np.linalg.norm(self._samples, axis=1)))

    def contains(self, u, atol: float = 1e-12) -> bool:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if self.kind == "box":
            return bool(np.all(u >= self.low - atol) and np.all(u <= self.high + atol))
        return bool(np.any(np.all(np.abs(self._samples - u) <= atol, axis=1)))

    def __repr__(self) -> str:
        if self.kind == "box":
            return f"ControlSet(low={self.low.tolist()}, high={self.high.tolist()})"
        return f"ControlSet(values={self._samples.tolist()})"


# ---------------------------------------------------------------------------
# built-in velocity fields


def _as_matrix(a, d: int | None = None) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if d is not None and a.shape[0] != d:
        raise ValueError(f"matrix has {a.shape[0]} rows, expected {d}")
    return a


def _control_term(B):
    """Additive ``B u`` contribution, or nothing when ``B`` is None."""
    if B is None:
        return lambda u: 0.0, 0.0
    B = _as_matrix(B)
    return (lambda u: B @ u), float(np.linalg.norm(B, 2))


def _zero(params):
    def eval_(t, mu, u, X):
        return np.zeros_like(X, dtype=float)

    def jac(t, mu, u, X):
        K, d = X.shape
        return np.zeros((K, d, d))

    def gmu(t, mu, u, X, Y):
        return np.zeros((X.shape[0], Y.shape[0], X.shape[1], X.shape[1]))

    return VelocityFieldSpec("zero", eval_, jac, gmu, sublinearity=0.0, params=dict(params))


def _constant_control(params):
    u_max = float(params.get("u_max", 1.0))

    def eval_(t, mu, u, X):
        u = np.atleast_1d(u)
        if u.shape[0] != X.shape[1]:
            raise ValueError(f"constant_control needs a {X.shape[1]}-dim control, got {u.shape[0]}")
        return np.broadcast_to(u, X.shape).astype(float).copy()

    def jac(t, mu, u, X):
        K, d = X.shape
        return np.zeros((K, d, d))

    def gmu(t, mu, u, X, Y):
        return np.zeros((X.shape[0], Y.shape[0], X.shape[1], X.shape[1]))

    return VelocityFieldSpec("constant_control", eval_, jac, gmu, sublinearity=u_max, params=dict(params))


def _linear(params):
    if "A" not in params:
        raise ValueError("linear field needs parameter 'A'")
    A = _as_matrix(params["A"])
    if A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    d = A.shape[0]
    control, b_norm = _control_term(params.get("B"))
    u_max = float(params.get("u_max", 1.0))

    def eval_(t, mu, u, X):
        return X @ A.T + control(np.atleast_1d(u))

    def jac(t, mu, u, X):
        return np.broadcast_to(A, (X.shape[0], d, d)).copy()

    def gmu(t, mu, u, X, Y):
        return np.zeros((X.shape[0], Y.shape[0], d, d))

    m = max(float(np.linalg.norm(A, 2)), b_norm * u_max)
    return VelocityFieldSpec("linear", eval_, jac, gmu, sublinearity=m, params=dict(params))


def _mean_attraction(params):
    k = float(params.get("strength", 1.0))
    control, b_norm = _control_term(params.get("B"))
    u_max = float(params.get("u_max", 1.0))

    def eval_(t, mu, u, X):
        return k * (mu.weights @ mu.atoms - X) + control(np.atleast_1d(u))

    def jac(t, mu, u, X):
        K, d = X.shape
        return np.broadcast_to(-k * np.eye(d), (K, d, d)).copy()

    def gmu(t, mu, u, X, Y):
        d = X.shape[1]
        return np.broadcast_to(k * np.eye(d), (X.shape[0], Y.shape[0], d, d)).copy()

    m = max(k, b_norm * u_max)
    return VelocityFieldSpec("mean_attraction", eval_, jac, gmu, sublinearity=m, params=dict(params))


def _gaussian_kernel(a: float, s: float):
    """``H(z) = a z exp(-|z|^2 / (2 s^2))`` with its Jacobian."""

    def H(Z):
        g = np.exp(-np.sum(Z**2, axis=-1) / (2 * s * s))
        return a * Z * g[..., None]

    def DH(Z):
        d = Z.shape[-1]
        g = np.exp(-np.sum(Z**2, axis=-1) / (2 * s * s))
        outer = Z[..., :, None] * Z[..., None, :]
        return a * g[..., None, None] * (np.eye(d) - outer / (s * s))

    return H, DH


def _convolution(params):
    kernel = params.get("kernel", "gaussian")
    if kernel != "gaussian":
        raise ValueError(f"unknown convolution kernel {kernel!r}")
    a = float(params.get("amplitude", -1.0))
    s = float(params.get("scale", 1.0))
    if s <= 0:
        raise ValueError("kernel scale must be positive")
    H, DH = _gaussian_kernel(a, s)
    control, b_norm = _control_term(params.get("B"))
    u_max = float(params.get("u_max", 1.0))

    def eval_(t, mu, u, X):
        Z = X[:, None, :] - mu.atoms[None, :, :]
        return np.einsum("l,kld->kd", mu.weights, H(Z)) + control(np.atleast_1d(u))

    def jac(t, mu, u, X):
        Z = X[:, None, :] - mu.atoms[None, :, :]
        return np.einsum("l,klde->kde", mu.weights, DH(Z))

    def gmu(t, mu, u, X, Y):
        return -DH(X[:, None, :] - Y[None, :, :])

    # sup |H| = |a| s e^{-1/2}
    m = max(abs(a) * s * np.exp(-0.5), b_norm * u_max)
    constants = {"lip_DH": _lip_gaussian_jacobian(a, s)}
    return VelocityFieldSpec("convolution", eval_, jac, gmu, sublinearity=m, params=dict(params),
                             constants=constants)


def _lip_gaussian_jacobian(a: float, s: float) -> float:
    """Sampled estimate of ``sup |D^2 H|`` for the Gaussian kernel.

    ``D^2 H`` is rotation-equivariant, so scanning ``z = r e_1`` and unit
    directions in the plane of ``e_1, e_2`` covers the supremum.
    """
    _, DH = _gaussian_kernel(a, s)
    h = 1e-6 * s
    r = np.linspace(0.0, 5.0 * s, 501)
    th = np.linspace(0.0, np.pi, 91)
    z = np.zeros((r.size, 1, 3))
    z[:, 0, 0] = r
    e = np.stack([np.cos(th), np.sin(th), np.zeros_like(th)], axis=-1)[None, :, :]
    dd = (DH(z + h * e) - DH(z - h * e)) / (2 * h)
    return float(np.max(np.linalg.norm(dd, 2, axis=(-2, -1))))


FIELD_CATALOGUE: dict[str, Callable] = {
    "zero": _zero,
    "constant_control": _constant_control,
    "linear": _linear,
    "convolution": _convolution,
    "mean_attraction": _mean_attraction,
}


def builtin_field(name: str, params: dict | None = None) -> VelocityFieldSpec:
    """Build a catalogue velocity field with analytic derivatives.

    Names: ``zero``, ``constant_control`` (``v = u``), ``linear``
    (``v = A x + B u``), ``convolution`` (``v = int H(x - z) dmu(z)`` with a
    Gaussian-weighted kernel), ``mean_attraction`` (``v = int (z - x) dmu(z)``).
    """
    try:
        builder = FIELD_CATALOGUE[name]
    except KeyError:
        raise ValueError(f"unknown field {name!r}; known: {sorted(FIELD_CATALOGUE)}") from None
    return builder(dict(params or {}))


# ---------------------------------------------------------------------------
# built-in terminal costs


def potential_cost(V: Callable, gradV: Callable, name: str = "potential", semiconcavity=None,
                   params=None) -> FinalCostSpec:
    """``phi(mu) = int V dmu`` from vectorised ``V`` and ``grad V`` callables."""

    def eval_(mu):
        return float(mu.weights @ V(mu.atoms))

    def wgrad(mu):
        return np.asarray(gradV(mu.atoms), dtype=float)

    return FinalCostSpec(name, eval_, wgrad, params=dict(params or {}), semiconcavity=semiconcavity)


def _potential(params):
    Qm = np.atleast_2d(np.asarray(params.get("Q", 0.0), dtype=float))
    b = params.get("b")
    bv = None if b is None else np.atleast_1d(np.asarray(b, dtype=float))
    c = float(params.get("c", 0.0))
    scalar = Qm.shape == (1, 1)
    if not scalar and Qm.shape[0] != Qm.shape[1]:
        raise ValueError(f"Q must be square, got shape {Qm.shape}")
    if bv is not None and not scalar and bv.shape[0] != Qm.shape[0]:
        raise ValueError("b and Q disagree on the dimension")

    def coeffs(d):
        # a 1x1 Q acts as a multiple of the identity in any dimension
        Q = Qm[0, 0] * np.eye(d) if scalar else Qm
        if Q.shape[0] != d:
            raise ValueError(f"potential cost is {Q.shape[0]}-dimensional, measure is {d}-dimensional")
        if bv is not None and bv.shape[0] != d:
            raise ValueError(f"potential cost is {bv.shape[0]}-dimensional, measure is {d}-dimensional")
        return Q, np.zeros(d) if bv is None else bv

    def V(X):
        Q, bb = coeffs(X.shape[1])
        return np.einsum("kd,de,ke->k", X, Q, X) + X @ bb + c

    def gradV(X):
        Q, bb = coeffs(X.shape[1])
        return X @ (Q + Q.T).T + bb

    lip = float(np.linalg.norm(Qm + Qm.T, 2))
    return potential_cost(V, gradV, semiconcavity=lip, params=params)


def interaction_cost(W: Callable, grad1: Callable, grad2: Callable, name: str = "interaction",
                     semiconcavity=None, params=None) -> FinalCostSpec:
    """``phi(mu) = int int W(x, y) dmu(x) dmu(y)`` for vectorised pair functions.

    ``W(X, Y)`` maps ``(K, L, d)`` broadcastable pairs to ``(K, L)`` values;
    ``grad1``/``grad2`` return gradients in the first/second slot.
    """

    def eval_(mu):
        Xa = mu.atoms[:, None, :]
        Ya = mu.atoms[None, :, :]
        return float(mu.weights @ W(Xa, Ya) @ mu.weights)

    def wgrad(mu):
        Xa = mu.atoms[:, None, :]
        Ya = mu.atoms[None, :, :]
        # [k, l] entries: d1 W(x_k, x_l) + d2 W(x_l, x_k)
        g = grad1(Xa, Ya) + grad2(Ya, Xa)
        return np.einsum("l,kld->kd", mu.weights, g)

    return FinalCostSpec(name, eval_, wgrad, params=dict(params or {}), semiconcavity=semiconcavity)


def _interaction(params):
    c = float(params.get("coefficient", 1.0))

    def W(X, Y):
        return c * np.sum((X - Y) ** 2, axis=-1)

    def g1(X, Y):
        return 2 * c * (X - Y)

    def g2(X, Y):
        return -2 * c * (X - Y)

    return interaction_cost(W, g1, g2, semiconcavity=None, params=params)


def _w2_squared_to_target(params):
    if "target" not in params:
        raise ValueError("w2_squared_to_target needs a 'target' measure")
    target = check_measure(params["target"], name="target")

    def eval_(mu):
        return wasserstein(2, mu, target).distance ** 2

    def wgrad(mu):
        plan = wasserstein(2, mu, target).plan
        bary = np.zeros_like(mu.atoms)
        live = mu.weights > 0
        bary[live] = (plan.mass[live] @ target.atoms) / mu.weights[live, None]
        return 2.0 * (mu.atoms - bary)

    stored = {k: v for k, v in params.items() if k != "target"}
    stored["target"] = {"atoms": target.atoms.tolist(), "weights": target.weights.tolist()}
    return FinalCostSpec("w2_squared_to_target", eval_, wgrad, params=stored, semiconcavity=1.0)


COST_CATALOGUE: dict[str, Callable] = {
    "potential": _potential,
    "interaction": _interaction,
    "w2_squared_to_target": _w2_squared_to_target,
}


def builtin_cost(name: str, params: dict | None = None) -> FinalCostSpec:
    """Build a catalogue terminal cost.

    ``potential`` is ``int (x^T Q x + b.x + c) dmu``; ``interaction`` is
    ``c int int |x - y|^2 dmu dmu``; ``w2_squared_to_target`` is
    ``W_2^2(mu, target)`` with gradient ``2 (x - barycentric image)``.
    """
    try:
        builder = COST_CATALOGUE[name]
    except KeyError:
        raise ValueError(f"unknown cost {name!r}; known: {sorted(COST_CATALOGUE)}") from None
    return builder(dict(params or {}))


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class DerivativeReport:
    jac_x_mismatch: float = 0.0
    grad_mu_mismatch: float = 0.0
    wgrad_mismatch: float = 0.0
    sublinearity_ratio: float = 0.0
    passed: bool = True
    details: dict = field(default_factory=dict)


def _sample_measure(rng, n, d, radius):
    atoms = rng.uniform(-radius, radius, size=(n, d))
    w = rng.uniform(0.5, 1.5, size=n)
    w /= w.sum()
    # nudge so weights sum to one to machine precision
    w[-1] = 1.0 - w[:-1].sum()
    return EmpiricalMeasure(atoms, w)


def verify_derivatives(spec, *, dim: int = 2, n_atoms: int = 4, n_points: int = 3, n_samples: int = 3,
                       radius: float = 2.0, controls=None, rng=None, eps: float = FD_STEP) -> DerivativeReport:
    """Compare analytic derivatives with central finite differences.

    For a :class:`VelocityFieldSpec` the spatial Jacobian and the measure
    kernel are checked (the latter by moving one atom and dividing by its
    weight); for a :class:`FinalCostSpec` the Wasserstein gradient is checked
    the same way. The sublinearity bound is also sampled for fields.
    """
    rng = np.random.default_rng(rng)
    report = DerivativeReport()
    for _ in range(n_samples):
        mu = _sample_measure(rng, n_atoms, dim, radius)
        if isinstance(spec, FinalCostSpec):
            g = spec.wgrad(mu)
            for j in range(n_atoms):
                for k in range(dim):
                    up = mu.atoms.copy()
                    dn = mu.atoms.copy()
                    up[j, k] += eps
                    dn[j, k] -= eps
                    fd = (spec.eval(mu.with_atoms(up)) - spec.eval(mu.with_atoms(dn))) / (2 * eps)
                    report.wgrad_mismatch = max(report.wgrad_mismatch,
                                                abs(fd / mu.weights[j] - g[j, k]))
            continue
        t = float(rng.uniform(0.0, 1.0))
        if controls is None:
            u = np.zeros(dim)
        else:
            cs = np.asarray(controls, dtype=float)
            u = cs[rng.integers(len(cs))]
        X = rng.uniform(-radius, radius, size=(n_points, dim))
        J = spec.jac_x(t, mu, u, X)
        for k in range(dim):
            e = np.zeros(dim)
            e[k] = eps
            fd = (spec.eval(t, mu, u, X + e) - spec.eval(t, mu, u, X - e)) / (2 * eps)
            report.jac_x_mismatch = max(report.jac_x_mismatch, float(np.max(np.abs(fd - J[:, :, k]))))
        G = spec.grad_mu(t, mu, u, X, mu.atoms)
        for j in range(n_atoms):
            for k in range(dim):
                up = mu.atoms.copy()
                dn = mu.atoms.copy()
                up[j, k] += eps
                dn[j, k] -= eps
                fd = (spec.eval(t, mu.with_atoms(up), u, X) - spec.eval(t, mu.with_atoms(dn), u, X)) / (2 * eps)
                fd /= mu.weights[j]
                report.grad_mu_mismatch = max(report.grad_mu_mismatch,
                                              float(np.max(np.abs(fd - G[:, j, :, k]))))
        if spec.sublinearity is not None:
            v = np.linalg.norm(spec.eval(t, mu, u, X), axis=1)
            m1 = float(mu.weights @ np.linalg.norm(mu.atoms, axis=1))
            bound = spec.sublinearity * (1 + np.linalg.norm(X, axis=1) + m1)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(bound > 0, v / bound, np.where(v > 0, np.inf, 0.0))
            report.sublinearity_ratio = max(report.sublinearity_ratio, float(np.max(ratio)))
    report.passed = (
        report.jac_x_mismatch <= JAC_TOL
        and report.grad_mu_mismatch <= GRAD_MU_TOL
        and report.wgrad_mismatch <= WGRAD_TOL
        and report.sublinearity_ratio <= 1.0 + 1e-12
    )
    return report
