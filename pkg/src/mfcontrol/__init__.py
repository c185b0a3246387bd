"""Mean-field optimal control on empirical measures.

The main entry points are re-exported here; submodules hold the full API.
"""

__version__ = "0.1.0"

from .fields import ControlSet, builtin_cost, builtin_field
from .flow import ControlSignal, TimeGrid, integrate_flow
from .linearization import linearize, taylor_residual
from .measures import CouplingPlan, EmpiricalMeasure
from .pmp import ForwardBackwardSweep, integrate_costate
from .transport import OptimalTransport, wasserstein
from .value import ExhaustiveValue

__all__ = [
    "ControlSet",
    "ControlSignal",
    "CouplingPlan",
    "EmpiricalMeasure",
    "ExhaustiveValue",
    "ForwardBackwardSweep",
    "OptimalTransport",
    "TimeGrid",
    "builtin_cost",
    "builtin_field",
    "integrate_costate",
    "integrate_flow",
    "linearize",
    "taylor_residual",
    "wasserstein",
    "__version__",
]
