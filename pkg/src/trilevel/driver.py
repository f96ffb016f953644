"""Nested three-loop stochastic-gradient optimizer.

One upper-level iteration runs a full middle-level cycle (each of whose
iterations runs a full lower-level cycle), performs one extra lower-level
pass at the updated middle-level variables, computes the trilevel adjoint
gradient, and steps the upper-level variables. Iterates thread across
cycles: each new cycle starts from the last iterate of the previous one.

Bilevel reductions of the same problem run through :func:`run_bsg`:
``without-ul`` freezes x and optimizes the middle level as the outer
problem; ``without-ll`` freezes z at zero and tunes x against the middle
level only.
"""

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .adjoint import (
    AdjointConfig,
    bilevel_adjoint_gradient,
    ml_adjoint_gradient,
    ul_adjoint_gradient,
)
from .oracle import (
    DETERMINISTIC,
    MinibatchIndices,
    NoiseDraw,
    Point,
    ProblemOracle,
    SampleSpec,
    splitmix64,
    stream_gen,
)

Array = np.ndarray

REDUCTION_TRILEVEL = "trilevel"
REDUCTION_WITHOUT_UL = "without-ul"
REDUCTION_WITHOUT_LL = "without-ll"
REDUCTIONS = (REDUCTION_TRILEVEL, REDUCTION_WITHOUT_UL, REDUCTION_WITHOUT_LL)


class NonFiniteError(RuntimeError):
    """A gradient or objective evaluation produced NaN/Inf."""


def _fast_point(x: Array, y: Array, z: Array) -> Point:
    # Bypasses dataclass construction in the innermost loop; the driver
    # only ever passes 1-d float64 arrays here.
    p = object.__new__(Point)
    object.__setattr__(p, "x", x)
    object.__setattr__(p, "y", y)
    object.__setattr__(p, "z", z)
    return p


# ---------------------------------------------------------------------------
# step-size schedules


@dataclass(frozen=True)
class TheoremConstant:
    """Constant steps alpha = 1/sqrt(I), beta = alpha/sqrt(J),
    gamma = alpha/(sqrt(J) sqrt(K))."""

    I: int
    J: int
    K: int

    def __post_init__(self):
        if min(self.I, self.J, self.K) < 1:
            raise ValueError("I, J, K must be positive")

    def alpha(self, i: int) -> float:
        return 1.0 / math.sqrt(self.I)

    def beta(self, j: int) -> float:
        return self.alpha(1) / math.sqrt(self.J)

    def gamma(self, k: int) -> float:
        return self.alpha(1) / (math.sqrt(self.J) * math.sqrt(self.K))


@dataclass(frozen=True)
class Decaying:
    """Per-cycle decaying steps alpha_i = abar/i, beta_j = bbar/j,
    gamma_k = gbar/k with 1-based indices resetting each cycle."""

    alpha_bar: float
    beta_bar: float
    gamma_bar: float

    def __post_init__(self):
        for name in ("alpha_bar", "beta_bar", "gamma_bar"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")

    def alpha(self, i: int) -> float:
        return self.alpha_bar / i

    def beta(self, j: int) -> float:
        return self.beta_bar / j

    def gamma(self, k: int) -> float:
        return self.gamma_bar / k


StepSchedule = Union[TheoremConstant, Decaying]


def _step_fn(value) -> Callable[[int], float]:
    """Accept a constant step or a callable of the 1-based iteration index."""
    if callable(value):
        return value
    v = float(value)
    return lambda _k: v


# ---------------------------------------------------------------------------
# budgets and the increasing-accuracy controller


@dataclass(frozen=True)
class IterationBudget:
    ul_iters: int
    j0: int = 1
    k0: int = 1
    adaptive: bool = False
    ul_threshold: float = 1e-2
    ml_threshold: float = 1e-1

    def __post_init__(self):
        if self.ul_iters < 1 or self.j0 < 1 or self.k0 < 1:
            raise ValueError("iteration budgets must be positive")


@dataclass(frozen=True)
class BudgetState:
    J: int
    K: int


def adaptive_update(
    state: BudgetState,
    prev_f1: float,
    cur_f1: float,
    prev_f2: float,
    cur_f2: float,
    ul_threshold: float = 1e-2,
    ml_threshold: float = 1e-1,
) -> BudgetState:
    """Increasing-accuracy rule: J grows by one when the f1 change drops
    below ul_threshold, K grows by one when the f2 change drops below
    ml_threshold. At most one increment per level per call."""
    J = state.J + (1 if abs(cur_f1 - prev_f1) < ul_threshold else 0)
    K = state.K + (1 if abs(cur_f2 - prev_f2) < ml_threshold else 0)
    return BudgetState(J, K)


# ---------------------------------------------------------------------------
# sample factories


class DeterministicSamples:
    """Full-data / noise-free evaluation at every level."""

    def ul(self, i: int) -> SampleSpec:
        return DETERMINISTIC

    def ml(self, i: int, j: int) -> SampleSpec:
        return DETERMINISTIC

    def ll(self, i: int, j: int, k: int) -> SampleSpec:
        return DETERMINISTIC


class NoiseSamples:
    """Noise-draw descriptors keyed by level and iteration indices.

    Streams are pure functions of (level, i, j) with the inner index as
    the counter, so evaluation order never changes the draws. The run
    seed lives in the noise-wrapping oracle, not here.
    """

    _UL, _ML, _LL = 1, 2, 3

    def ul(self, i: int) -> SampleSpec:
        return NoiseDraw(stream=splitmix64(self._UL), counter=i)

    def ml(self, i: int, j: int) -> SampleSpec:
        return NoiseDraw(stream=splitmix64(self._ML, i), counter=j)

    def ll(self, i: int, j: int, k: int) -> SampleSpec:
        return NoiseDraw(stream=splitmix64(self._LL, i, j), counter=k)


class MinibatchSamples:
    """Uniform without-replacement minibatches drawn from seeded
    counter-based streams, one batch per (level, i, j, k) evaluation."""

    _UL, _ML, _LL = 4, 5, 6

    def __init__(self, n_rows: int, batch_size: int, seed: int):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.n_rows = int(n_rows)
        self.batch_size = min(int(batch_size), self.n_rows)
        self.seed = int(seed)

    def _draw(self, *tags) -> SampleSpec:
        gen = stream_gen(self.seed, *tags)
        idx = gen.choice(self.n_rows, size=self.batch_size, replace=False)
        return MinibatchIndices(tuple(int(v) for v in idx))

    def ul(self, i: int) -> SampleSpec:
        return self._draw(self._UL, i)

    def ml(self, i: int, j: int) -> SampleSpec:
        return self._draw(self._ML, i, j)

    def ll(self, i: int, j: int, k: int) -> SampleSpec:
        return self._draw(self._LL, i, j, k)


# ---------------------------------------------------------------------------
# traces


TRACE_COLUMNS = [
    "i", "cum_ml", "cum_ll", "wall_s", "f1", "f2", "f3",
    "gnorm", "J", "K", "alpha", "beta", "gamma",
]


@dataclass(frozen=True)
class TraceRecord:
    i: int
    cum_ml: int
    cum_ll: int
    wall_s: float
    f1: float
    f2: float
    f3: float
    gnorm: float
    J: int
    K: int
    alpha: float
    beta: float
    gamma: float
    flags: str = ""

    def row(self) -> list:
        return [getattr(self, c) for c in TRACE_COLUMNS]


@dataclass
class RunTrace:
    records: list = field(default_factory=list)
    aborted: Optional[str] = None
    iterates: Optional[list] = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def __len__(self):
        return len(self.records)


# ---------------------------------------------------------------------------
# the three loops


def _finite_or_raise(vec: Array, what: str) -> Array:
    if not np.all(np.isfinite(vec)):
        raise NonFiniteError(f"non-finite {what}")
    return vec


def ll_sg(
    oracle: ProblemOracle,
    x: Array,
    y: Array,
    z0: Array,
    gamma,
    K: int,
    sampler: Optional[Callable[[int], SampleSpec]] = None,
) -> Array:
    """K stochastic-gradient steps on the lower-level objective in z.

    ``gamma`` is a step value or a callable of the 1-based step index;
    ``sampler`` maps the 0-based step index to a SampleSpec.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    gamma_fn = _step_fn(gamma)
    grad = oracle.grad_z_f3
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z0, dtype=float).copy()
    for k in range(K):
        spec_k = DETERMINISTIC if sampler is None else sampler(k)
        g = grad(_fast_point(x, y, z), spec_k)
        # g @ g is finite iff every entry is (NaN/Inf propagate through the dot)
        if not math.isfinite(float(g @ g)):
            raise NonFiniteError(f"non-finite lower-level gradient at step {k}")
        z = z - gamma_fn(k + 1) * g
    return z


def ml_bsg(
    oracle: ProblemOracle,
    x: Array,
    y0: Array,
    z0: Array,
    beta,
    gamma,
    J: int,
    K: int,
    cfg: AdjointConfig,
    ml_sampler: Optional[Callable[[int], SampleSpec]] = None,
    ll_sampler: Optional[Callable[[int, int], SampleSpec]] = None,
    events: Optional[list] = None,
) -> tuple[Array, Array]:
    """Bilevel SG cycle for the middle-level problem.

    Each of the J iterations refreshes z with a lower-level cycle, forms
    the (inexact) middle-level adjoint gradient there, and steps y.
    Returns (y_J, z_J) with iterates threaded across cycles.
    """
    if J < 1:
        raise ValueError("J must be at least 1")
    beta_fn = _step_fn(beta)
    y = np.asarray(y0, dtype=float).copy()
    z = np.asarray(z0, dtype=float).copy()
    for j in range(J):
        ll_j = None if ll_sampler is None else (lambda k, _j=j: ll_sampler(_j, k))
        z = ll_sg(oracle, x, y, z, gamma, K, sampler=ll_j)
        ml_spec = DETERMINISTIC if ml_sampler is None else ml_sampler(j)
        g = ml_adjoint_gradient(oracle, Point(x, y, z), ml_spec, cfg, events)
        _finite_or_raise(g, f"middle-level adjoint gradient at step {j}")
        y = y - beta_fn(j + 1) * g
    return y, z


def run_tsg(
    oracle: ProblemOracle,
    init: Point,
    schedule: StepSchedule,
    budget: IterationBudget,
    cfg: AdjointConfig,
    samples=None,
    sink: Optional[Callable[[TraceRecord], None]] = None,
    exact_inner: Optional[Callable[[Array], tuple[Array, Array]]] = None,
    keep_iterates: bool = False,
) -> RunTrace:
    """Run the full trilevel stochastic-gradient method.

    Emits one trace record per upper-level iteration (objective values are
    deterministic evaluations at the current iterate). When the budget is
    adaptive, the increasing-accuracy rule is applied between iterations.
    ``exact_inner`` is a test hook mapping x to exact (y, z) inner
    solutions, bypassing the inner loops.
    """
    samples = samples or DeterministicSamples()
    deterministic = isinstance(samples, DeterministicSamples)
    trace = RunTrace(iterates=[] if keep_iterates else None)
    x = init.x.copy()
    y = init.y.copy()
    z = init.z.copy()
    state = BudgetState(budget.j0, budget.k0)
    cum_ml = cum_ll = 0
    prev_f1 = prev_f2 = None
    t0 = time.perf_counter()

    for i in range(1, budget.ul_iters + 1):
        events: list = []
        try:
            if exact_inner is not None:
                y, z = (np.asarray(v, float) for v in exact_inner(x))
            else:
                y, z = ml_bsg(
                    oracle, x, y, z,
                    schedule.beta, schedule.gamma, state.J, state.K, cfg,
                    ml_sampler=None if deterministic else (lambda j: samples.ml(i, j)),
                    ll_sampler=None if deterministic else (lambda j, k: samples.ll(i, j, k)),
                    events=events,
                )
                # extra lower-level pass at the updated middle iterate
                z = ll_sg(
                    oracle, x, y, z, schedule.gamma, state.K,
                    sampler=None if deterministic else (lambda k: samples.ll(i, state.J, k)),
                )
                cum_ml += state.J
                cum_ll += state.K * (state.J + 1)
            point = Point(x, y, z)
            g = ul_adjoint_gradient(oracle, point, samples.ul(i), cfg, events)
            _finite_or_raise(g, "upper-level adjoint gradient")
        except NonFiniteError as err:
            trace.aborted = str(err)
            return trace

        f1 = float(oracle.f1(point, DETERMINISTIC))
        f2 = float(oracle.f2(point, DETERMINISTIC))
        f3 = float(oracle.f3(point, DETERMINISTIC))
        if not math.isfinite(f1):
            trace.aborted = f"non-finite f1 at iteration {i}"
            return trace

        record = TraceRecord(
            i=i, cum_ml=cum_ml, cum_ll=cum_ll,
            wall_s=time.perf_counter() - t0,
            f1=f1, f2=f2, f3=f3, gnorm=float(np.linalg.norm(g)),
            J=state.J, K=state.K,
            alpha=schedule.alpha(i), beta=schedule.beta(1), gamma=schedule.gamma(1),
            flags=";".join(events),
        )
        trace.records.append(record)
        if keep_iterates:
            trace.iterates.append(point)
        if sink is not None:
            sink(record)

        x = x - schedule.alpha(i) * g

        if budget.adaptive and prev_f1 is not None:
            state = adaptive_update(
                state, prev_f1, f1, prev_f2, f2,
                budget.ul_threshold, budget.ml_threshold,
            )
        prev_f1, prev_f2 = f1, f2

    return trace


def run_bsg(
    reduction: str,
    oracle: ProblemOracle,
    init: Point,
    schedule: StepSchedule,
    budget: IterationBudget,
    cfg: AdjointConfig,
    samples=None,
    sink: Optional[Callable[[TraceRecord], None]] = None,
    keep_iterates: bool = False,
) -> RunTrace:
    """Run a bilevel reduction of the trilevel problem (same trace schema).

    ``without-ul`` holds x at its initial value and runs the middle-level
    bilevel cycle as the outer loop (f1 is evaluated, never optimized).
    ``without-ll`` holds z at zero and alternates middle-level SG on f2
    with upper-level steps along the bilevel adjoint gradient.
    """
    if reduction == REDUCTION_TRILEVEL:
        return run_tsg(oracle, init, schedule, budget, cfg, samples, sink,
                       keep_iterates=keep_iterates)
    if reduction not in REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}")

    samples = samples or DeterministicSamples()
    trace = RunTrace(iterates=[] if keep_iterates else None)
    x = init.x.copy()
    y = init.y.copy()
    z = init.z.copy() if reduction == REDUCTION_WITHOUT_UL else np.zeros_like(init.z)
    state = BudgetState(budget.j0, budget.k0)
    cum_ml = cum_ll = 0
    prev_f1 = prev_f2 = None
    t0 = time.perf_counter()

    for i in range(1, budget.ul_iters + 1):
        events: list = []
        try:
            if reduction == REDUCTION_WITHOUT_UL:
                # outer iteration i is middle-level iteration j = i-1
                j = i - 1
                z = ll_sg(
                    oracle, x, y, z, schedule.gamma, state.K,
                    sampler=lambda k: samples.ll(0, j, k),
                )
                cum_ll += state.K
                g = ml_adjoint_gradient(oracle, Point(x, y, z), samples.ml(0, j), cfg, events)
                _finite_or_raise(g, "middle-level adjoint gradient")
                step = schedule.beta(i)
                y = y - step * g
                cum_ml += 1
            else:  # without-ll
                for j in range(state.J):
                    g2 = np.asarray(
                        oracle.grad_y_f2(Point(x, y, z), samples.ml(i, j)), float
                    )
                    _finite_or_raise(g2, "middle-level gradient")
                    y = y - schedule.beta(j + 1) * g2
                cum_ml += state.J
                g = bilevel_adjoint_gradient(oracle, Point(x, y, z), samples.ul(i), cfg, events)
                _finite_or_raise(g, "bilevel adjoint gradient")
        except NonFiniteError as err:
            trace.aborted = str(err)
            return trace

        point = Point(x, y, z)
        f1 = float(oracle.f1(point, DETERMINISTIC))
        f2 = float(oracle.f2(point, DETERMINISTIC))
        f3 = float(oracle.f3(point, DETERMINISTIC))
        if not (math.isfinite(f1) and math.isfinite(f2)):
            trace.aborted = f"non-finite objective at iteration {i}"
            return trace

        record = TraceRecord(
            i=i, cum_ml=cum_ml, cum_ll=cum_ll,
            wall_s=time.perf_counter() - t0,
            f1=f1, f2=f2, f3=f3, gnorm=float(np.linalg.norm(g)),
            J=1 if reduction == REDUCTION_WITHOUT_UL else state.J,
            K=state.K if reduction == REDUCTION_WITHOUT_UL else 0,
            alpha=0.0 if reduction == REDUCTION_WITHOUT_UL else schedule.alpha(i),
            beta=schedule.beta(i if reduction == REDUCTION_WITHOUT_UL else 1),
            gamma=schedule.gamma(1) if reduction == REDUCTION_WITHOUT_UL else 0.0,
            flags=";".join(events),
        )
        trace.records.append(record)
        if keep_iterates:
            trace.iterates.append(point)
        if sink is not None:
            sink(record)

        if reduction == REDUCTION_WITHOUT_LL:
            x = x - schedule.alpha(i) * g

        if budget.adaptive and prev_f1 is not None:
            if reduction == REDUCTION_WITHOUT_UL:
                # only the lower-level budget rule applies (f2 is the outer objective)
                state = adaptive_update(state, 0.0, 1.0, prev_f2, f2,
                                        budget.ul_threshold, budget.ml_threshold)
            else:
                state = adaptive_update(state, prev_f1, f1, 0.0, 1.0,
                                        budget.ul_threshold, budget.ml_threshold)
        prev_f1, prev_f2 = f1, f2

    return trace
