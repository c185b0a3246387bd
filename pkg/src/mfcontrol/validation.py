"""Input coercion helpers in the spirit of ``sklearn.utils.check_array``."""

from __future__ import annotations

import numbers

import numpy as np

from .measures import CouplingPlan, EmpiricalMeasure


def check_measure(obj, dim: int | None = None, name: str = "measure") -> EmpiricalMeasure:
    """Coerce ``obj`` to an :class:`EmpiricalMeasure`.

    Accepts an existing measure, an ``(atoms, weights)`` pair, a mapping with
    ``atoms``/``weights`` keys, or a bare atom array (uniform weights).
    """
    if isinstance(obj, EmpiricalMeasure):
        m = obj
    elif isinstance(obj, dict):
        atoms = obj["atoms"]
        weights = obj.get("weights")
        m = EmpiricalMeasure.uniform(atoms) if weights is None else EmpiricalMeasure(atoms, weights)
    elif isinstance(obj, tuple) and len(obj) == 2:
        m = EmpiricalMeasure(*obj)
    else:
        m = EmpiricalMeasure.uniform(obj)
    if dim is not None and m.dim != dim:
        raise ValueError(f"{name} has dimension {m.dim}, expected {dim}")
    return m


def check_plan(plan, source: EmpiricalMeasure | None = None) -> CouplingPlan:
    """Check that ``plan`` is a :class:`CouplingPlan`, optionally with a given source."""
    if not isinstance(plan, CouplingPlan):
        raise TypeError(f"expected a CouplingPlan, got {type(plan).__name__}")
    if source is not None and not plan.source.same_as(source):
        raise ValueError("plan source marginal does not match the base measure")
    return plan


def check_scalar(x, name: str, *, min_val=None, max_val=None, include_boundaries: bool = True) -> float:
    """Validate a real scalar against optional bounds."""
    if not isinstance(x, numbers.Real) or isinstance(x, bool):
        raise TypeError(f"{name} must be a real number, got {type(x).__name__}")
    x = float(x)
    if not np.isfinite(x):
        raise ValueError(f"{name} must be finite")
    if min_val is not None and (x < min_val or (not include_boundaries and x == min_val)):
        raise ValueError(f"{name}={x} is below {min_val}")
    if max_val is not None and (x > max_val or (not include_boundaries and x == max_val)):
        raise ValueError(f"{name}={x} is above {max_val}")
    return x


def check_atom_field(F, measure: EmpiricalMeasure, name: str = "F") -> np.ndarray:
    """Evaluate a perturbation direction on the atoms of ``measure``.

    ``F`` may be a callable point map, an ``(n, d)`` array of per-atom vectors,
    or a single vector broadcast to every atom.
    """
    if callable(F):
        vals = np.array([np.atleast_1d(F(x)) for x in measure.atoms], dtype=float)
    else:
        vals = np.asarray(F, dtype=float)
        if vals.ndim <= 1:
            vals = np.broadcast_to(np.atleast_1d(vals), measure.atoms.shape).copy()
    if vals.shape != measure.atoms.shape:
        raise ValueError(f"{name} has shape {vals.shape}, expected {measure.atoms.shape}")
    return vals
