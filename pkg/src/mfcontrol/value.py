"""Value function by exhaustive enumeration of piecewise-constant controls.

``V(tau, mu)`` is approximated by the minimum of ``phi(mu(T))`` over every
control taking one sample value per control interval remaining after
``tau``. When ``tau`` falls strictly inside a control interval, the
remainder of that interval becomes a segment with its own value, so the
handle can be queried at arbitrary times in ``[t0, t1]``. The enumeration is
a depth-first tree search sharing the flow of common control prefixes.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .fields import ControlSet, FinalCostSpec, VelocityFieldSpec
from .flow import ControlSignal, TimeGrid, _check_finite, particle_rhs, rk4_step
from .measures import EmpiricalMeasure
from .transport import wasserstein
from .validation import check_measure

DEFAULT_BUDGET = 6561
DEFAULT_MAX_STEP = 0.05
TIME_SNAP = 1e-12


class BudgetExceededError(RuntimeError):
    """Raised when the number of control sequences exceeds the budget."""


@dataclass(frozen=True, eq=False)
class ValueQuery:
    """Bundle of everything needed to evaluate ``V(tau, m)``."""

    tau: float
    m: EmpiricalMeasure
    field: VelocityFieldSpec
    cost: FinalCostSpec
    grid: TimeGrid
    control_set: ControlSet
    max_step: float = DEFAULT_MAX_STEP
    budget: int = DEFAULT_BUDGET

    def __post_init__(self):
        if not (self.grid.t0 - TIME_SNAP <= self.tau <= self.grid.t1 + TIME_SNAP):
            raise ValueError(f"tau={self.tau} lies outside [{self.grid.t0}, {self.grid.t1}]")

    def handle(self) -> "ExhaustiveValue":
        return ExhaustiveValue(self.field, self.cost, self.control_set, self.grid, self.max_step, self.budget).fit()


@dataclass
class ValueRecord:
    tau: float
    measure_id: str
    value: float
    encoding: str
    key: tuple | None = None


def _segments(grid: TimeGrid, tau: float):
    """Control segments ``[(start, end, interval_index)]`` covering ``[tau, t1]``."""
    nodes = grid.nodes
    segs = []
    for k, (a, b) in enumerate(zip(nodes[:-1], nodes[1:])):
        if b <= tau + TIME_SNAP:
            continue
        segs.append((max(a, tau), b, k))
    return segs


class ExhaustiveValue(BaseEstimator):
    """Value-function handle backed by exhaustive control enumeration.

    Parameters
    ----------
    field : VelocityFieldSpec
    cost : FinalCostSpec
    control_set : ControlSet
        Its ``samples()`` are the per-interval candidates.
    control_grid : TimeGrid
        Piecewise-constant control intervals over ``[t0, T]``.
    max_step : float, default=0.05
        Largest RK4 step inside a control segment.
    budget : int, default=6561
        Maximum number of control sequences per query.

    Attributes
    ----------
    cache_ : dict
        Memoised ``(value, ControlSignal)`` per query.
    records_ : list of ValueRecord
        One entry per distinct query, for CSV export.
    """

    def __init__(self, field=None, cost=None, control_set=None, control_grid=None,
                 max_step=DEFAULT_MAX_STEP, budget=DEFAULT_BUDGET):
        self.field = field
        self.cost = cost
        self.control_set = control_set
        self.control_grid = control_grid
        self.max_step = max_step
        self.budget = budget

    def fit(self, X=None, y=None):
        for name in ("field", "cost", "control_set", "control_grid"):
            if getattr(self, name) is None:
                raise ValueError(f"{name} must be set before fit")
        if not self.max_step > 0:
            raise ValueError("max_step must be positive")
        self.cache_ = {}
        self.records_ = []
        self.n_rollouts_ = 0
        return self

    # -- evaluation ---------------------------------------------------------

    def _key(self, tau, m):
        return (round(float(tau), 12), m.atoms.shape, m.atoms.tobytes(), m.weights.tobytes())

    def _advance(self, X, w, a, b, u):
        n = max(1, math.ceil((b - a) / self.max_step - 1e-9))
        h = (b - a) / n
        rhs = particle_rhs(self.field, w, u)
        T = np.zeros((0, X.shape[1]))
        for s in range(n):
            X, T = rk4_step(rhs, a + s * h, [X, T], h)
        _check_finite((X,), b)
        return X

    def rollout(self, tau: float, m: EmpiricalMeasure, values) -> EmpiricalMeasure:
        """Terminal measure under the given per-segment control values."""
        segs = _segments(self.control_grid, tau)
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if values.shape[0] == 1 and len(segs) > 1:
            values = np.repeat(values, len(segs), axis=0)
        X = np.array(m.atoms, dtype=float)
        for (a, b, _), u in zip(segs, values):
            X = self._advance(X, m.weights, a, b, u)
        return EmpiricalMeasure._trusted(X, m.weights)

    def measure_along(self, tau: float, m: EmpiricalMeasure, control: ControlSignal):
        """States at ``tau`` and every later control node under ``control``."""
        segs = _segments(self.control_grid, tau)
        times = [tau]
        X = np.array(m.atoms, dtype=float)
        states = [EmpiricalMeasure._trusted(X.copy(), m.weights)]
        for a, b, k in segs:
            X = self._advance(X, m.weights, a, b, control.values[k])
            times.append(b)
            states.append(EmpiricalMeasure._trusted(X.copy(), m.weights))
        return np.array(times), states

    def value(self, tau: float, m) -> tuple[float, ControlSignal]:
        """``(V(tau, m), argmin control)`` with lexicographic tie-break."""
        if not hasattr(self, "cache_"):
            self.fit()
        m = check_measure(m)
        grid = self.control_grid
        if tau < grid.t0 - TIME_SNAP or tau > grid.t1 + TIME_SNAP:
            raise ValueError(f"tau={tau} lies outside [{grid.t0}, {grid.t1}]")
        key = self._key(tau, m)
        if key in self.cache_:
            return self.cache_[key]
        samples = self.control_set.samples()
        segs = _segments(grid, tau)
        n_seq = len(samples) ** len(segs)
        if n_seq > self.budget:
            raise BudgetExceededError(
                f"{len(samples)}^{len(segs)} = {n_seq} control sequences exceed the budget {self.budget}")
        best = [math.inf, None]
        X0 = np.array(m.atoms, dtype=float)
        w = m.weights

        def search(depth, X, prefix):
            if depth == len(segs):
                self.n_rollouts_ += 1
                val = float(self.cost(EmpiricalMeasure._trusted(X, w)))
                # strict improvement keeps the lexicographically first minimiser
                if not math.isfinite(best[0]) or val < best[0] - 1e-14 * max(1.0, abs(best[0])):
                    best[0], best[1] = val, list(prefix)
                return
            a, b, _ = segs[depth]
            for idx, u in enumerate(samples):
                search(depth + 1, self._advance(X, w, a, b, u), prefix + [idx])

        search(0, X0, [])
        vals = np.tile(samples[0], (grid.steps, 1))
        first = segs[0][2] if segs else grid.steps
        for (_, _, k), idx in zip(segs, best[1]):
            vals[k] = samples[idx]
        if segs:
            vals[:first] = samples[best[1][0]]
        control = ControlSignal(grid, vals)
        out = (best[0], control)
        self.cache_[key] = out
        self.records_.append(ValueRecord(float(tau), f"m{len(self.records_)}", best[0],
                                         "-".join(str(i) for i in best[1]), key))
        return out

    def __call__(self, tau: float, m) -> float:
        return self.value(tau, m)[0]

    def predict(self, queries) -> np.ndarray:
        """Values for an iterable of ``(tau, measure)`` pairs."""
        return np.array([self(t, m) for t, m in queries])

    def to_csv(self, path) -> None:
        write_value_table(path, self.records_)


def value_exhaustive(q: ValueQuery) -> tuple[float, ControlSignal]:
    """Exhaustive minimum of the terminal cost from ``(q.tau, q.m)``."""
    return q.handle().value(q.tau, q.m)


def write_value_table(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "measure_id", "value", "argmin_control_encoding"])
        for r in records:
            w.writerow([repr(r.tau), r.measure_id, repr(r.value), r.encoding])


@dataclass
class MonotonicityReport:
    """Value along an admissible pair at ``tau`` and later control nodes."""

    times: np.ndarray
    values: np.ndarray
    nondecreasing: bool
    constant: bool
    tol: float

    @property
    def max_increase(self) -> float:
        return float(self.values.max() - self.values[0]) if len(self.values) else 0.0


def value_monotonicity_check(handle: ExhaustiveValue, tau: float, m, u: ControlSignal,
                             tol: float = 1e-9) -> MonotonicityReport:
    """Sequence ``t -> V(t, mu(t))`` along the pair ``(mu, u)`` started at ``(tau, m)``.

    The sequence is flagged nondecreasing when no step drops by more than
    ``tol`` (scaled by ``max(1, |V|)``) and constant when every value stays
    within that tolerance of the first.
    """
    m = check_measure(m)
    times, states = handle.measure_along(tau, m, u)
    vals = np.array([handle(t, s) for t, s in zip(times, states)])
    scale = max(1.0, float(np.max(np.abs(vals))))
    nondec = bool(np.all(np.diff(vals) >= -tol * scale))
    const = bool(np.all(np.abs(vals - vals[0]) <= tol * scale))
    return MonotonicityReport(times, vals, nondec, const, tol)


@dataclass
class LipschitzEstimate:
    """Empirical constants of the value function.

    ``measure_constant`` is the largest ratio over pairs sharing ``tau``;
    ``time_constant`` over pairs sharing the measure; ``ratios`` covers every
    pair against ``|tau1 - tau2| + W_1``.
    """

    measure_constant: float
    time_constant: float
    ratios: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def max_ratio(self) -> float:
        return float(self.ratios.max()) if self.ratios.size else 0.0


def lipschitz_probe(handle: ExhaustiveValue, queries) -> LipschitzEstimate:
    """Ratios ``|V(tau1, mu1) - V(tau2, mu2)| / (|tau1 - tau2| + W_1(mu1, mu2))`` over all query pairs."""
    queries = [(float(t), check_measure(m)) for t, m in queries]
    vals = [handle(t, m) for t, m in queries]
    ratios, meas, times = [], [0.0], [0.0]
    for (i, (t1, m1)), (j, (t2, m2)) in itertools.combinations(enumerate(queries), 2):
        dt = abs(t1 - t2)
        dw = wasserstein(1, m1, m2).distance
        denom = dt + dw
        if denom <= 0:
            continue
        r = abs(vals[i] - vals[j]) / denom
        ratios.append(r)
        if dt <= TIME_SNAP:
            meas.append(r)
        if dw <= 1e-14:
            times.append(r)
    return LipschitzEstimate(max(meas), max(times), np.array(ratios))
