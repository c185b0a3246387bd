"""Scenario files: parsing, validation and the built-in reference set.

A scenario is a JSON object::

    {
      "schema_version": 1,
      "name": "shift",
      "seed": 0,
      "dim": 1,
      "field": {"name": "constant_control", "params": {}},
      "cost": {"name": "potential", "params": {"Q": [[1.0]]}},
      "control_set": {"values": [[-1.0], [0.0], [1.0]]},
      "grid": {"t0": 0.0, "t1": 1.0, "intervals": 4, "substeps": 250},
      "initial_measure": {"atoms": [[2.0]], "weights": [1.0]},
      "control": "optimal",
      "value": {"max_step": 0.05, "budget": 6561},
      "checks": {"value": {"expected": 1.0, "tol": 1e-6}},
      "output_dir": "out/shift"
    }

``control`` is ``"optimal"`` (exhaustive argmin from the initial state),
``"sweep"`` (forward-backward sweep) or a list with one value per interval.
``initial_measure`` may instead be ``{"file": path}`` in the ``d N`` text
format, resolved relative to the scenario file.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fields import COST_CATALOGUE, FIELD_CATALOGUE, ControlSet, builtin_cost, builtin_field
from .flow import TimeGrid
from .measures import EmpiricalMeasure

SCHEMA_VERSION = 1
DEFAULT_SUBSTEPS = 250


class ScenarioError(ValueError):
    """Invalid scenario file or content."""


@dataclass
class Scenario:
    name: str
    seed: int
    field: object
    cost: object
    control_set: ControlSet
    control_grid: TimeGrid
    grid: TimeGrid
    initial: EmpiricalMeasure
    control: object
    checks: dict
    value_options: dict = field(default_factory=dict)
    output_dir: str | None = None
    raw: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.initial.dim


def _require(obj, key, where):
    if key not in obj:
        raise ScenarioError(f"{where}: missing required key {key!r}")
    return obj[key]


def parse_scenario(data: dict, base_dir: Path | None = None) -> Scenario:
    """Validate a scenario mapping and build its runtime objects."""
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a JSON object")
    version = _require(data, "schema_version", "scenario")
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    name = str(_require(data, "name", "scenario"))
    seed = int(data.get("seed", 0))

    fspec = _require(data, "field", "scenario")
    if fspec.get("name") not in FIELD_CATALOGUE:
        raise ScenarioError(f"field: unknown name {fspec.get('name')!r}; known {sorted(FIELD_CATALOGUE)}")
    cspec = _require(data, "cost", "scenario")
    if cspec.get("name") not in COST_CATALOGUE:
        raise ScenarioError(f"cost: unknown name {cspec.get('name')!r}; known {sorted(COST_CATALOGUE)}")
    try:
        fld = builtin_field(fspec["name"], fspec.get("params", {}))
        cost = builtin_cost(cspec["name"], cspec.get("params", {}))
    except (ValueError, TypeError) as exc:
        raise ScenarioError(f"catalogue construction failed: {exc}") from exc

    cs = _require(data, "control_set", "scenario")
    try:
        if "values" in cs:
            control_set = ControlSet(cs["values"])
        else:
            control_set = ControlSet(low=cs["low"], high=cs["high"], points_per_axis=cs.get("points_per_axis", 3))
    except (KeyError, ValueError) as exc:
        raise ScenarioError(f"control_set: {exc}") from exc

    g = _require(data, "grid", "scenario")
    try:
        control_grid = TimeGrid(float(g.get("t0", 0.0)), float(g["t1"]), int(g["intervals"]))
        grid = control_grid.refine(int(g.get("substeps", DEFAULT_SUBSTEPS)))
    except (KeyError, ValueError) as exc:
        raise ScenarioError(f"grid: {exc}") from exc

    im = _require(data, "initial_measure", "scenario")
    try:
        if "file" in im:
            path = Path(im["file"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            initial = EmpiricalMeasure.load(path)
        else:
            atoms = im["atoms"]
            weights = im.get("weights")
            initial = EmpiricalMeasure.uniform(atoms) if weights is None else EmpiricalMeasure(atoms, weights)
    except (KeyError, ValueError, OSError) as exc:
        raise ScenarioError(f"initial_measure: {exc}") from exc
    dim = data.get("dim")
    if dim is not None and int(dim) != initial.dim:
        raise ScenarioError(f"dim={dim} disagrees with initial measure dimension {initial.dim}")

    control = data.get("control", "optimal")
    if isinstance(control, str):
        if control not in ("optimal", "sweep"):
            raise ScenarioError(f"control: expected 'optimal', 'sweep' or a list, got {control!r}")
    else:
        vals = np.asarray(control, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.shape[0] != control_grid.steps:
            raise ScenarioError(f"control: need {control_grid.steps} values, got {vals.shape[0]}")
        for v in vals:
            if not control_set.contains(v):
                raise ScenarioError(f"control value {v.tolist()} is outside the control set")
        control = vals

    checks = data.get("checks", {})
    if not isinstance(checks, dict):
        raise ScenarioError("checks must be an object mapping check names to options")
    return Scenario(name, seed, fld, cost, control_set, control_grid, grid, initial, control, checks,
                    dict(data.get("value", {})), data.get("output_dir"), copy.deepcopy(data))


def load_scenario(path) -> Scenario:
    """Read and validate a scenario file; JSON errors carry line and column."""
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return parse_scenario(data, base_dir=path.parent)


# ---------------------------------------------------------------------------
# built-in scenarios

# Pointwise maximisation is only requested where the exhaustive optimum is
# bang-bang with a constant costate sign; elsewhere a piecewise-constant
# optimum need not maximise H at every node.
_ALL_CHECKS = {
    "semigroup": {},
    "apriori_support": {},
    "adjoint_gradient": {"tol": 1e-4},
    "value_monotonicity": {"expect_constant": True},
    "constancy_monitor": {"tol": 1e-5},
    "geodesic_semiconcavity_defect": {},
}

_U3 = {"values": [[-1.0], [0.0], [1.0]]}


def _scenario(name, dim, fld, cost, atoms, checks, weights=None, control="optimal", intervals=4, substeps=250,
              control_set=None):
    im = {"atoms": atoms}
    if weights is not None:
        im["weights"] = weights
    return {
        "schema_version": SCHEMA_VERSION,
        "name": name,
        "seed": 0,
        "dim": dim,
        "field": fld,
        "cost": cost,
        "control_set": control_set or _U3,
        "grid": {"t0": 0.0, "t1": 1.0, "intervals": intervals, "substeps": substeps},
        "initial_measure": im,
        "control": control,
        "value": {"max_step": 0.05, "budget": 6561},
        "checks": checks,
    }


BUILTIN_SCENARIOS: dict[str, dict] = {
    "zero": _scenario(
        "zero", 2, {"name": "zero", "params": {}}, {"name": "potential", "params": {"Q": [[1.0, 0.0], [0.0, 1.0]]}},
        [[0.0, 1.0], [1.0, -1.0], [-0.5, 0.5]],
        {**_ALL_CHECKS, "maximisation": {"tol": 1e-8}, "value": {}, "dini_sensitivity_check": {"directions": 5},
         "frechet_sensitivity_check": {}, "sufficiency_verdict": {}, "feedback_membership": {}},
    ),
    "shift": _scenario(
        "shift", 1, {"name": "constant_control", "params": {"u_max": 1.0}},
        {"name": "potential", "params": {"Q": [[1.0]]}},
        [[2.0]],
        {**_ALL_CHECKS, "maximisation": {"tol": 1e-8}, "value": {"expected": 1.0, "tol": 1e-6}, "dini_sensitivity_check": {"directions": 20},
         "frechet_sensitivity_check": {}, "sufficiency_verdict": {}, "feedback_membership": {}},
    ),
    "shift_suboptimal": _scenario(
        "shift_suboptimal", 1, {"name": "constant_control", "params": {"u_max": 1.0}},
        {"name": "potential", "params": {"Q": [[1.0]]}},
        [[2.0]],
        {"value_monotonicity": {"expect_constant": True}, "sufficiency_verdict": {}},
        control=[[0.0], [0.0], [0.0], [0.0]],
    ),
    "linear_rotation": _scenario(
        "linear_rotation", 2,
        {"name": "linear", "params": {"A": [[0.0, 1.0], [-1.0, 0.0]], "B": [[1.0], [0.0]], "u_max": 1.0}},
        {"name": "potential", "params": {"Q": [[0.5, 0.0], [0.0, 0.5]], "b": [0.3, -0.2]}},
        [[1.0, 0.0], [0.0, 0.5]],
        {**_ALL_CHECKS, "taylor_residual": {}},
    ),
    "mean_attraction": _scenario(
        "mean_attraction", 2,
        {"name": "mean_attraction", "params": {"strength": 1.0, "B": [[1.0], [0.5]], "u_max": 1.0}},
        {"name": "potential", "params": {"Q": [[1.0, 0.0], [0.0, 0.5]], "b": [0.2, 0.0]}},
        [[0.0, 0.0], [2.0, 0.0], [1.0, 1.5], [-0.5, 1.0]],
        {**_ALL_CHECKS, "taylor_residual": {}},
        weights=[0.25, 0.25, 0.3, 0.2],
    ),
    "convolution": _scenario(
        "convolution", 2,
        {"name": "convolution", "params": {"amplitude": -1.0, "scale": 1.0, "B": [[1.0], [0.0]], "u_max": 1.0}},
        {"name": "interaction", "params": {"coefficient": 0.5}},
        [[0.0, 0.0], [1.0, 0.2], [-0.4, 0.8], [0.3, -0.6], [1.2, 1.1]],
        {**_ALL_CHECKS, "taylor_residual": {}},
    ),
    "w2_target": _scenario(
        "w2_target", 2,
        {"name": "mean_attraction", "params": {"strength": 0.5, "B": [[1.0], [0.0]], "u_max": 1.0}},
        {"name": "w2_squared_to_target",
         "params": {"target": {"atoms": [[1.5, 0.5], [0.5, -1.0], [2.5, 1.0]]}}},
        [[0.0, 0.0], [1.0, 0.7], [-0.8, 0.9]],
        {k: v for k, v in _ALL_CHECKS.items() if k != "constancy_monitor"},
    ),
}


def builtin_scenario(name: str) -> Scenario:
    if name not in BUILTIN_SCENARIOS:
        raise ScenarioError(f"unknown scenario {name!r}; known {sorted(BUILTIN_SCENARIOS)}")
    return parse_scenario(copy.deepcopy(BUILTIN_SCENARIOS[name]))
