"""Time grids, seeded streams, Brownian increments and coupled path simulation"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .ctmc import GeneratorMatrix, RegimePath, simulate_regime_paths
from .errors import NumericalError, ValidationError
from .models import LinearSwitchingModel, SwitchingModel
from .schemes import SchemeParams, StepInput, pcem_step


logger = logging.getLogger(__name__)

# Upper bound on per-batch noise elements (replications x steps) held in memory.
BATCH_ELEMENT_BUDGET = 20_000_000


class InvalidStep(ValidationError):
    """Step size is not in (0, T]"""

    pass


class PathOverflow(NumericalError):
    """A simulated state became non-finite"""

    pass


@dataclass(frozen=True)
class TimeGrid:
    """Equidistant grid on [0, T]; the last step is clamped so that t_n = T"""

    horizon: float
    dt: float
    n_steps: int
    final_step: float

    @property
    def n_points(self) -> int:
        return self.n_steps + 1

    @cached_property
    def steps(self) -> np.ndarray:
        steps = np.full(self.n_steps, self.dt)
        steps[-1] = self.final_step
        steps.setflags(write=False)
        return steps

    @cached_property
    def times(self) -> np.ndarray:
        times = np.arange(self.n_points, dtype=float) * self.dt
        times[-1] = self.horizon
        times.setflags(write=False)
        return times


def build_grid(horizon: float, dt: float) -> TimeGrid:
    """Build the equidistant grid t_k = k dt with the final point set to T

    Args:
        horizon: T > 0
        dt: Step size, 0 < dt <= T

    Returns:
        TimeGrid with ceil(T / dt) steps

    Raises:
        InvalidStep: If dt is not in (0, T]
    """
    if not (math.isfinite(horizon) and horizon > 0):
        raise InvalidStep(f"horizon T = {horizon!r} must be positive")
    if not (math.isfinite(dt) and 0 < dt <= horizon):
        raise InvalidStep(f"step dt = {dt!r} must satisfy 0 < dt <= T = {horizon!r}")

    ratio = horizon / dt
    nearest = round(ratio)
    if abs(ratio - nearest) <= 1e-9 * max(1.0, ratio):
        n_steps = int(nearest)
    else:
        n_steps = int(math.ceil(ratio))
    final_step = min(dt, horizon - (n_steps - 1) * dt)
    return TimeGrid(horizon=float(horizon), dt=float(dt), n_steps=max(n_steps, 1), final_step=final_step)


class StreamPurpose(Enum):
    """Independent stream roles; W(t) and r(t) must not share randomness"""

    BROWNIAN = 0
    REGIME = 1


@dataclass(frozen=True)
class SeedSpec:
    """Identifies one reproducible random stream"""

    master_seed: int
    replication_index: int
    purpose: StreamPurpose

    def __post_init__(self):
        if not 0 <= self.master_seed < 2**64:
            raise ValidationError(f"master seed {self.master_seed!r} must be an unsigned 64-bit integer")
        if self.replication_index < 0:
            raise ValidationError(f"replication index {self.replication_index!r} must be non-negative")

    def generator(self) -> np.random.Generator:
        """Counter-based Philox stream keyed by (master_seed, replication_index, purpose)"""
        key = np.random.SeedSequence([self.master_seed, self.replication_index, self.purpose.value])
        return np.random.Generator(np.random.Philox(key))


@dataclass(frozen=True)
class SeedPair:
    """Regime and Brownian seeds of one replication"""

    regime: SeedSpec
    brownian: SeedSpec

    def __post_init__(self):
        if self.regime == self.brownian:
            raise ValidationError("regime and Brownian streams must be distinct")

    @classmethod
    def for_replication(cls, master_seed: int, index: int) -> "SeedPair":
        return cls(
            regime=SeedSpec(master_seed, index, StreamPurpose.REGIME),
            brownian=SeedSpec(master_seed, index, StreamPurpose.BROWNIAN),
        )


@dataclass(frozen=True, eq=False)
class PathResult:
    """Grid, regimes, increments and states of one simulated path"""

    grid: TimeGrid
    regimes: RegimePath
    brownian_increments: np.ndarray
    states: np.ndarray
    overflow_index: Optional[int] = None

    @property
    def overflowed(self) -> bool:
        return self.overflow_index is not None

    def require_finite(self) -> "PathResult":
        if self.overflowed:
            raise PathOverflow(f"state became non-finite at grid index {self.overflow_index}")
        return self


@dataclass(frozen=True, eq=False)
class CoupledPaths:
    """Numeric and reference paths driven by the same regimes and increments"""

    numeric: PathResult
    reference: PathResult

    def __post_init__(self):
        if self.numeric.grid != self.reference.grid:
            raise ValidationError("coupled paths must share a grid")
        if not np.array_equal(self.numeric.regimes.states, self.reference.regimes.states):
            raise ValidationError("coupled paths must share a regime path")
        if not np.array_equal(self.numeric.brownian_increments, self.reference.brownian_increments):
            raise ValidationError("coupled paths must share Brownian increments")


def brownian_increments(grid: TimeGrid, m: int, stream: np.random.Generator) -> np.ndarray:
    """Independent N(0, step) increments, shape (n_steps, m)"""
    z = stream.standard_normal((grid.n_steps, m))
    return z * np.sqrt(grid.steps)[:, None]


def _state_vector(y0, d: int) -> np.ndarray:
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    if y0.shape != (d,):
        raise ValidationError(f"initial state must have {d} components, got shape {y0.shape}")
    if not np.all(np.isfinite(y0)):
        raise ValidationError("initial state must be finite")
    return y0


def _first_overflow(rows_finite: np.ndarray) -> np.ndarray:
    """Index of the first non-finite grid point per row, -1 when all finite"""
    bad = ~rows_finite
    return np.where(bad.any(axis=1), bad.argmax(axis=1), -1)


def _march(
    model: SwitchingModel,
    params: SchemeParams,
    grid: TimeGrid,
    y0: np.ndarray,
    regimes: np.ndarray,
    increments: np.ndarray,
) -> Iterator[Tuple[int, np.ndarray]]:
    """Yield (k + 1, states) for every step of a batch of paths

    Rows that turn non-finite are frozen at NaN so they stop propagating.
    """
    n_paths = regimes.shape[0]
    x = np.broadcast_to(y0, (n_paths, model.dimension)).copy()
    steps = grid.steps
    dead = np.zeros(n_paths, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(grid.n_steps):
            step = StepInput(state=x, regime=regimes[:, k], dt=float(steps[k]), dW=increments[:, k])
            x = pcem_step(model, params, step)
            dead |= ~np.all(np.isfinite(x), axis=-1)
            if dead.any():
                x[dead] = np.nan
            yield k + 1, x


def _exact_linear_states(
    model: LinearSwitchingModel,
    grid: TimeGrid,
    regimes: np.ndarray,
    increments: np.ndarray,
    y0: float,
) -> np.ndarray:
    """Batch of y(t_{k+1}) = y(t_k) exp[h a(r_k) + dW b(r_k) - h b(r_k)^2 / 2], shape (n, N+1)"""
    a = np.asarray(model.a)[regimes[:, :-1] - 1]
    b = np.asarray(model.b)[regimes[:, :-1] - 1]
    h = grid.steps
    exponents = h * a + increments[..., 0] * b - 0.5 * h * b * b
    with np.errstate(over="ignore", invalid="ignore"):
        factors = np.exp(exponents)
        start = np.full((regimes.shape[0], 1), float(y0))
        return np.cumprod(np.concatenate([start, factors], axis=1), axis=1)


def _wrap(grid, regime_row, increment_row, states) -> PathResult:
    finite = np.all(np.isfinite(states), axis=-1)
    overflow = int(_first_overflow(finite[None, :])[0])
    return PathResult(
        grid=grid,
        regimes=RegimePath(states=regime_row),
        brownian_increments=increment_row,
        states=states,
        overflow_index=None if overflow < 0 else overflow,
    )


def _draw_noise(
    generator: GeneratorMatrix, grid: TimeGrid, r0: int, m: int, seeds: Sequence[SeedPair]
) -> Tuple[np.ndarray, np.ndarray]:
    """Regime paths and Brownian increments for a list of replications"""
    uniforms = np.stack([s.regime.generator().random(grid.n_steps) for s in seeds])
    regimes = simulate_regime_paths(generator, grid, r0, uniforms)
    increments = np.stack([brownian_increments(grid, m, s.brownian.generator()) for s in seeds])
    return regimes, increments


def simulate_path(
    model: SwitchingModel,
    params: SchemeParams,
    grid: TimeGrid,
    y0,
    r0: int,
    seeds: SeedPair,
    generator: GeneratorMatrix,
) -> PathResult:
    """Iterate the PCEM step along one path

    Args:
        model: Switching model
        params: theta/eta degrees
        grid: Time grid
        y0: Initial state (d-vector or scalar when d = 1)
        r0: Initial regime label
        seeds: Regime and Brownian seeds
        generator: Generator of the regime chain

    Returns:
        PathResult; overflow is flagged on the result, not raised
    """
    y0 = _state_vector(y0, model.dimension)
    _check_regime_count(model, generator)
    regimes, increments = _draw_noise(generator, grid, r0, model.n_drivers, [seeds])
    return _path_from_noise(model, params, grid, y0, regimes[0], increments[0])


def _path_from_noise(model, params, grid, y0, regime_row, increment_row) -> PathResult:
    states = np.empty((grid.n_points, model.dimension))
    states[0] = y0
    for k, x in _march(model, params, grid, y0, regime_row[None, :], increment_row[None, :]):
        states[k] = x[0]
    result = _wrap(grid, regime_row, increment_row, states)
    if result.overflowed:
        logger.warning(f"Path overflowed at grid index {result.overflow_index}")
    return result


def exact_linear_path(
    model: LinearSwitchingModel,
    grid: TimeGrid,
    regimes: RegimePath,
    increments: np.ndarray,
    y0,
) -> PathResult:
    """Reference path from the explicit solution recursion, regime frozen per step

    Args:
        model: Linear switching model
        grid: Grid shared with the numeric path
        regimes: Regime path shared with the numeric path
        increments: Increments shared with the numeric path, shape (n_steps, 1)
        y0: Initial value

    Returns:
        PathResult of the reference solution
    """
    y0 = float(_state_vector(y0, 1)[0])
    increments = np.asarray(increments, dtype=float).reshape(grid.n_steps, 1)
    states = _exact_linear_states(model, grid, regimes.states[None, :], increments[None], y0)[0]
    return _wrap(grid, regimes.states, increments, states[:, None])


def simulate_coupled(
    model: LinearSwitchingModel,
    params: SchemeParams,
    grid: TimeGrid,
    y0,
    r0: int,
    seeds: SeedPair,
    generator: GeneratorMatrix,
) -> CoupledPaths:
    """Numeric PCEM path and reference path on one shared noise realisation"""
    y0 = _state_vector(y0, 1)
    _check_regime_count(model, generator)
    regimes, increments = _draw_noise(generator, grid, r0, 1, [seeds])
    numeric = _path_from_noise(model, params, grid, y0, regimes[0], increments[0])
    reference = exact_linear_path(model, grid, numeric.regimes, increments[0], y0)
    return CoupledPaths(numeric=numeric, reference=reference)


def _check_regime_count(model: SwitchingModel, generator: GeneratorMatrix) -> None:
    if model.n_regimes != generator.n_states:
        raise ValidationError(
            f"model has {model.n_regimes} regimes but the generator has {generator.n_states} states"
        )


@dataclass(frozen=True, eq=False)
class ReplicationErrors:
    """Per-replication sup-squared errors of one scheme, in replication order"""

    label: str
    params: SchemeParams
    sup_sq: np.ndarray
    overflowed: np.ndarray


def default_batch_size(grid: TimeGrid, n_replications: int) -> int:
    return max(1, min(n_replications, BATCH_ELEMENT_BUDGET // grid.n_steps))


def _batch_errors(
    model: LinearSwitchingModel,
    schemes: Sequence[Tuple[str, SchemeParams]],
    grid: TimeGrid,
    y0: np.ndarray,
    r0: int,
    generator: GeneratorMatrix,
    seeds: List[SeedPair],
) -> List[Tuple[np.ndarray, np.ndarray]]:
    regimes, increments = _draw_noise(generator, grid, r0, 1, seeds)
    with np.errstate(over="ignore", invalid="ignore"):
        reference = _exact_linear_states(model, grid, regimes, increments, float(y0[0]))
    reference_dead = _first_overflow(np.isfinite(reference)) >= 0

    out = []
    for _, params in schemes:
        sup_sq = np.zeros(len(seeds))
        dead = reference_dead.copy()
        with np.errstate(over="ignore", invalid="ignore"):
            for k, x in _march(model, params, grid, y0, regimes, increments):
                dead |= ~np.isfinite(x[:, 0]) | ~np.isfinite(reference[:, k])
                gap = (x[:, 0] - reference[:, k]) ** 2
                dead |= ~np.isfinite(gap)
                sup_sq = np.where(dead, sup_sq, np.maximum(sup_sq, gap))
        out.append((sup_sq, dead))
    return out


def run_replications(
    model: LinearSwitchingModel,
    schemes: Sequence[Tuple[str, SchemeParams]],
    grid: TimeGrid,
    y0,
    r0: int,
    generator: GeneratorMatrix,
    n_replications: int,
    master_seed: int,
    batch_size: Optional[int] = None,
    threads: int = 1,
) -> List[ReplicationErrors]:
    """Sup-squared errors of several schemes under common random numbers

    Every scheme consumes the identical regime path and increments of each
    replication. Batches run in parallel and are reduced in replication
    order, so results do not depend on the thread count or batch size.

    Args:
        model: Linear switching model (reference solution available)
        schemes: (label, params) pairs
        grid: Time grid
        y0: Initial value
        r0: Initial regime
        generator: Regime chain generator
        n_replications: Number of replications
        master_seed: Master seed
        batch_size: Replications integrated together; defaults to a memory budget
        threads: Worker threads

    Returns:
        One ReplicationErrors per scheme, in the given order
    """
    y0 = _state_vector(y0, 1)
    _check_regime_count(model, generator)
    if n_replications < 1:
        raise ValidationError("at least one replication is required")
    batch_size = batch_size or default_batch_size(grid, n_replications)
    batches = [
        [SeedPair.for_replication(master_seed, i) for i in range(start, min(start + batch_size, n_replications))]
        for start in range(0, n_replications, batch_size)
    ]
    logger.debug(
        f"Running {n_replications} replications on {grid.n_steps} steps "
        f"in {len(batches)} batches with {threads} threads"
    )

    def work(seeds):
        return _batch_errors(model, schemes, grid, y0, r0, generator, seeds)

    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, batches))
    else:
        results = [work(seeds) for seeds in batches]

    collected = []
    for index, (label, params) in enumerate(schemes):
        sup_sq = np.concatenate([r[index][0] for r in results])
        dead = np.concatenate([r[index][1] for r in results])
        if dead.any():
            logger.warning(f"{label}: {int(dead.sum())} of {n_replications} replications overflowed")
        collected.append(ReplicationErrors(label=label, params=params, sup_sq=sup_sq, overflowed=dead))
    return collected
