"""Finitely supported probability measures and discrete transport plans.

An :class:`EmpiricalMeasure` is a weighted cloud of atoms in R^d. Atoms are
never merged, so index ``i`` of a measure keeps referring to the same
particle through pushforwards, flows and interpolations.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

WEIGHT_TOL = 1e-12
MARGINAL_TOL = 1e-10


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Probability measure ``sum_i w_i delta_{x_i}`` on R^d.

    Parameters
    ----------
    atoms : array-like of shape (n_atoms, dim)
    weights : array-like of shape (n_atoms,)
        Nonnegative, summing to one within ``1e-12``. Inputs outside the
        tolerance are rejected rather than renormalised.
    """

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if atoms.ndim != 2 or atoms.shape[0] == 0 or atoms.shape[1] == 0:
            raise ValueError(f"atoms must be a nonempty (n, d) array, got shape {atoms.shape}")
        if weights.shape[0] != atoms.shape[0]:
            raise ValueError(
                f"got {atoms.shape[0]} atoms but {weights.shape[0]} weights"
            )
        if not np.all(np.isfinite(atoms)):
            raise ValueError("atoms must be finite (compact support)")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite and nonnegative")
        total = weights.sum()
        if abs(total - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {total!r}, expected 1 within {WEIGHT_TOL}")
        object.__setattr__(self, "atoms", _frozen(atoms))
        object.__setattr__(self, "weights", _frozen(weights))

    @classmethod
    def _trusted(cls, atoms: np.ndarray, weights: np.ndarray) -> "EmpiricalMeasure":
        # Hot-path constructor for integrators: skips validation and copies.
        obj = object.__new__(cls)
        object.__setattr__(obj, "atoms", atoms)
        object.__setattr__(obj, "weights", weights)
        return obj

    @classmethod
    def uniform(cls, atoms) -> "EmpiricalMeasure":
        atoms = np.asarray(atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        n = atoms.shape[0]
        return cls(atoms, np.full(n, 1.0 / n))

    @classmethod
    def dirac(cls, point) -> "EmpiricalMeasure":
        return cls(np.atleast_1d(np.asarray(point, dtype=float))[None, :], [1.0])

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    @property
    def support_radius(self) -> float:
        """Largest atom norm over atoms carrying positive mass."""
        live = self.weights > 0
        return float(np.max(np.linalg.norm(self.atoms[live], axis=1)))

    def mean(self) -> np.ndarray:
        return self.weights @ self.atoms

    def variance(self) -> float:
        centred = self.atoms - self.mean()
        return float(self.weights @ np.sum(centred**2, axis=1))

    def with_atoms(self, atoms) -> "EmpiricalMeasure":
        """Same weights, new atom positions (index-stable)."""
        return EmpiricalMeasure(atoms, self.weights)

    def same_as(self, other: "EmpiricalMeasure", atol: float = 1e-12) -> bool:
        return (
            self.atoms.shape == other.atoms.shape
            and np.allclose(self.atoms, other.atoms, atol=atol, rtol=0)
            and np.allclose(self.weights, other.weights, atol=atol, rtol=0)
        )

    def __repr__(self) -> str:
        return f"EmpiricalMeasure(n_atoms={self.n_atoms}, dim={self.dim})"

    # -- text serialisation -------------------------------------------------

    def to_text(self) -> str:
        lines = [f"{self.dim} {self.n_atoms}"]
        for w, x in zip(self.weights, self.atoms):
            lines.append(" ".join(repr(float(v)) for v in (w, *x)))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EmpiricalMeasure":
        rows = [ln.split() for ln in text.splitlines() if ln.strip()]
        if not rows or len(rows[0]) != 2:
            raise ValueError("first line must read 'd N'")
        d, n = int(rows[0][0]), int(rows[0][1])
        body = rows[1:]
        if len(body) != n:
            raise ValueError(f"header announces {n} atoms, found {len(body)} lines")
        data = np.array([[float(v) for v in row] for row in body]) if n else np.empty((0, d + 1))
        if data.shape[1] != d + 1:
            raise ValueError(f"each atom line needs 1 + {d} numbers")
        return cls(data[:, 1:], data[:, 0])

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "EmpiricalMeasure":
        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True, eq=False)
class CouplingPlan:
    """Discrete transport plan between two empirical measures.

    ``mass[i, j]`` is the mass sent from source atom ``i`` to target atom ``j``.
    """

    source: EmpiricalMeasure
    target: EmpiricalMeasure
    mass: np.ndarray

    def __post_init__(self):
        mass = np.asarray(self.mass, dtype=float)
        n, m = self.source.n_atoms, self.target.n_atoms
        if mass.shape != (n, m):
            raise ValueError(f"mass must have shape {(n, m)}, got {mass.shape}")
        if self.source.dim != self.target.dim:
            raise ValueError("source and target live in different dimensions")
        if np.any(mass < 0):
            raise ValueError("plan entries must be nonnegative")
        row_err = np.max(np.abs(mass.sum(axis=1) - self.source.weights))
        col_err = np.max(np.abs(mass.sum(axis=0) - self.target.weights))
        if row_err > MARGINAL_TOL or col_err > MARGINAL_TOL:
            raise ValueError(
                f"plan marginals off by {max(row_err, col_err):.3e} (tolerance {MARGINAL_TOL})"
            )
        object.__setattr__(self, "mass", _frozen(mass))

    @classmethod
    def product(cls, source: EmpiricalMeasure, target: EmpiricalMeasure) -> "CouplingPlan":
        return cls(source, target, np.outer(source.weights, target.weights))

    @classmethod
    def diagonal(cls, measure: EmpiricalMeasure) -> "CouplingPlan":
        return cls(measure, measure, np.diag(measure.weights))

    @classmethod
    def deterministic(cls, measure: EmpiricalMeasure, f: Callable) -> "CouplingPlan":
        """Plan ``(Id, f)_# mu``; target atoms are the images of the source atoms."""
        return cls(measure, pushforward(measure, f), np.diag(measure.weights))

    def entries(self):
        """Positive entries as ``(i, j, mass)`` index arrays, row-major order."""
        i, j = np.nonzero(self.mass > 0)
        return i, j, self.mass[i, j]

    def is_deterministic(self) -> bool:
        return bool(np.all(np.count_nonzero(self.mass > 0, axis=1) <= 1))

    # -- sparse triplet serialisation --------------------------------------

    def to_text(self) -> str:
        i, j, w = self.entries()
        lines = [f"{self.mass.shape[0]} {self.mass.shape[1]} {len(w)}"]
        lines += [f"{a} {b} {float(c)!r}" for a, b, c in zip(i, j, w)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: EmpiricalMeasure, target: EmpiricalMeasure) -> "CouplingPlan":
        rows = [ln.split() for ln in text.splitlines() if ln.strip()]
        n, m, nnz = (int(v) for v in rows[0])
        if (n, m) != (source.n_atoms, target.n_atoms):
            raise ValueError("plan header does not match the supplied marginals")
        if len(rows) - 1 != nnz:
            raise ValueError(f"header announces {nnz} entries, found {len(rows) - 1}")
        mass = np.zeros((n, m))
        for a, b, c in rows[1:]:
            mass[int(a), int(b)] += float(c)
        return cls(source, target, mass)


def pushforward(m: EmpiricalMeasure, f: Callable) -> EmpiricalMeasure:
    """Image measure ``f_# m``: each atom is mapped by ``f``, weights unchanged."""
    images = np.array([np.atleast_1d(np.asarray(f(x), dtype=float)) for x in m.atoms])
    return EmpiricalMeasure(images, m.weights)


def moment(m: EmpiricalMeasure, p: float) -> float:
    """Moment of order ``p``: ``(sum_i w_i |x_i|^p)^(1/p)``."""
    if p < 1:
        raise ValueError(f"moment order must be >= 1, got {p}")
    norms = np.linalg.norm(m.atoms, axis=1)
    return float((m.weights @ norms**p) ** (1.0 / p))


def disintegrate(plan: CouplingPlan) -> list[np.ndarray | None]:
    """Conditional target distributions, one per source atom.

    Entry ``i`` is the normalised row ``mass[i] / w_i``; rows of zero-weight
    atoms are reported as ``None``.
    """
    out: list[np.ndarray | None] = []
    for w, row in zip(plan.source.weights, plan.mass):
        out.append(row / w if w > 0 else None)
    return out


def barycentric_projection(plan: CouplingPlan) -> np.ndarray:
    """Conditional mean of the target given each source atom.

    Returns an ``(n, d)`` array; rows of zero-weight source atoms are NaN.
    """
    w = plan.source.weights
    bary = np.full((plan.source.n_atoms, plan.source.dim), np.nan)
    live = w > 0
    bary[live] = (plan.mass[live] @ plan.target.atoms) / w[live, None]
    return bary
