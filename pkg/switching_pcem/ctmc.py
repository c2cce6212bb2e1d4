"""Continuous-time Markov chain: generators, interval transitions, regime paths"""

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, Sequence

import numpy as np
from scipy.linalg import expm

from .errors import NumericalError, ValidationError

if TYPE_CHECKING:
    from .simulate import TimeGrid


logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-12
PROBABILITY_TOL = 1e-10


class NonSquare(ValidationError):
    """Generator is not an N×N matrix"""

    pass


class NegativeOffDiagonal(ValidationError):
    """Generator has a negative rate q_ij for i != j"""

    pass


class RowSumNonzero(ValidationError):
    """Generator row does not sum to zero"""

    pass


class NonConvergent(NumericalError):
    """Matrix exponential produced a non-stochastic matrix"""

    pass


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class GeneratorMatrix:
    """Validated infinitesimal generator Q = (q_ij) of the regime chain"""

    entries: np.ndarray

    @property
    def n_states(self) -> int:
        return self.entries.shape[0]

    def rate(self, i: int, j: int) -> float:
        """Transition rate from regime label i to regime label j (1-based)"""
        return float(self.entries[i - 1, j - 1])

    def to_list(self) -> list:
        return self.entries.tolist()


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """Interval transition probabilities P = e^{Q·interval}"""

    entries: np.ndarray
    interval: float
    cumulative: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "cumulative", _frozen(np.cumsum(self.entries, axis=1)))

    @property
    def n_states(self) -> int:
        return self.entries.shape[0]

    def row(self, label: int) -> np.ndarray:
        return self.entries[label - 1]


@dataclass(frozen=True, eq=False)
class RegimePath:
    """Regime labels r(t_k), one per grid point, labels in {1, ..., N}"""

    states: np.ndarray

    @property
    def n_points(self) -> int:
        return len(self.states)


def validate_generator(raw: Sequence[Sequence[float]]) -> GeneratorMatrix:
    """Validate a raw rate matrix and wrap it as a GeneratorMatrix

    Args:
        raw: N×N matrix of rates, row-major

    Returns:
        Validated GeneratorMatrix

    Raises:
        NonSquare: If the matrix is not square or empty
        NegativeOffDiagonal: If some q_ij < 0 for i != j
        RowSumNonzero: If some row sum exceeds ROW_SUM_TOL in magnitude
        ValidationError: If any entry is not finite
    """
    try:
        q = np.array(raw, dtype=float)
    except (TypeError, ValueError) as e:
        raise NonSquare(f"generator is not a numeric matrix: {e}")

    if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] < 1:
        raise NonSquare(f"generator must be a non-empty square matrix, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValidationError("generator entries must be finite")

    off_diagonal = q[~np.eye(q.shape[0], dtype=bool)]
    if np.any(off_diagonal < 0):
        raise NegativeOffDiagonal("off-diagonal rates must be non-negative")

    row_sums = q.sum(axis=1)
    worst = int(np.argmax(np.abs(row_sums)))
    if abs(row_sums[worst]) > ROW_SUM_TOL:
        raise RowSumNonzero(f"row {worst + 1} sums to {row_sums[worst]!r}, expected 0")

    return GeneratorMatrix(entries=_frozen(q))


def transition_matrix(q: GeneratorMatrix, delta: float) -> TransitionMatrix:
    """Compute the interval transition matrix e^{Q·delta}

    Tiny negative entries and row-sum drift below PROBABILITY_TOL left by
    floating point are clamped and renormalized.

    Args:
        q: Validated generator
        delta: Interval length, must be positive

    Returns:
        TransitionMatrix for the interval

    Raises:
        ValidationError: If delta is not positive
        NonConvergent: If the exponential is not a stochastic matrix
    """
    if not delta > 0:
        raise ValidationError(f"interval must be positive, got {delta!r}")

    with np.errstate(over="ignore", invalid="ignore"):
        p = expm(q.entries * delta)

    if not np.all(np.isfinite(p)):
        raise NonConvergent(f"matrix exponential not finite for delta={delta!r}")

    drift = max(float(np.max(np.abs(p.sum(axis=1) - 1.0))), float(-np.min(p)))
    if drift > PROBABILITY_TOL:
        raise NonConvergent(
            f"e^(Q*{delta!r}) is not stochastic (drift {drift:.3e}); check the scale of Q"
        )

    p = np.clip(p, 0.0, None)
    p = p / p.sum(axis=1, keepdims=True)
    return TransitionMatrix(entries=_frozen(p), interval=float(delta))


def stationary_distribution(q: GeneratorMatrix) -> np.ndarray:
    """Solve pi Q = 0 with sum(pi) = 1

    Args:
        q: Validated generator

    Returns:
        Stationary probability vector (least-squares solution for reducible chains)
    """
    n = q.n_states
    system = np.vstack([q.entries.T, np.ones((1, n))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


class TransitionCache:
    """Caches e^{QΔ} per distinct interval length of a grid"""

    def __init__(self, q: GeneratorMatrix):
        """Initialize TransitionCache

        Args:
            q: Generator whose exponentials are cached
        """
        self.q = q
        self._matrices: Dict[float, TransitionMatrix] = {}

    def get(self, delta: float) -> TransitionMatrix:
        """Return the transition matrix for an interval, computing it once"""
        delta = float(delta)
        matrix = self._matrices.get(delta)
        if matrix is None:
            matrix = transition_matrix(self.q, delta)
            self._matrices[delta] = matrix
            logger.debug(f"Computed transition matrix for interval {delta!r}")
        return matrix

    def __len__(self) -> int:
        return len(self._matrices)


def sample_next_regime(row: Sequence[float], xi: float) -> int:
    """Pick the next regime from a transition row by inverse cumulative sampling

    Returns i2 with sum_{j<i2} P(i1,j) <= xi < sum_{j<=i2} P(i1,j); the last
    state N is taken whenever xi >= sum_{j<=N-1} P(i1,j).

    Args:
        row: Probability row P(i1, ·)
        xi: Uniform variate in [0, 1)

    Returns:
        Regime label in {1, ..., N}
    """
    cumulative = np.cumsum(np.asarray(row, dtype=float))[:-1]
    return int(np.searchsorted(cumulative, xi, side="right")) + 1


def simulate_regime_paths(
    q: GeneratorMatrix, grid: "TimeGrid", initial: int, uniforms: np.ndarray
) -> np.ndarray:
    """Simulate a batch of regime paths, one uniform row per path

    Args:
        q: Validated generator
        grid: Time grid; transitions use each step's actual length
        initial: Starting regime label shared by all paths
        uniforms: Array (n_paths, n_steps) of variates in [0, 1)

    Returns:
        Integer array (n_paths, n_steps + 1) of regime labels
    """
    if not 1 <= initial <= q.n_states:
        raise ValidationError(f"initial regime {initial} outside 1..{q.n_states}")

    uniforms = np.atleast_2d(uniforms)
    n_paths, n_steps = uniforms.shape
    if n_steps != grid.n_steps:
        raise ValidationError(f"expected {grid.n_steps} uniforms per path, got {n_steps}")

    paths = np.empty((n_paths, n_steps + 1), dtype=np.int64)
    paths[:, 0] = initial
    if q.n_states == 1:
        paths[:, 1:] = 1
        return paths

    cache = TransitionCache(q)
    steps = grid.steps
    # Drop the last cumulative column: xi beyond every remaining boundary selects N.
    bounds = cache.get(steps[0]).cumulative[:, :-1]
    current = paths[:, 0] - 1
    for k in range(n_steps):
        if k == n_steps - 1 and steps[k] != steps[0]:
            bounds = cache.get(steps[k]).cumulative[:, :-1]
        current = np.sum(uniforms[:, k, None] >= bounds[current], axis=1)
        paths[:, k + 1] = current + 1
    return paths


def simulate_regime_path(
    q: GeneratorMatrix, grid: "TimeGrid", initial: int, stream: np.random.Generator
) -> RegimePath:
    """Simulate one regime path on a grid

    Args:
        q: Validated generator
        grid: Time grid
        initial: Regime label at t_0
        stream: Regime random stream; exactly one uniform is drawn per step

    Returns:
        RegimePath with one label per grid point
    """
    uniforms = stream.random(grid.n_steps)
    states = simulate_regime_paths(q, grid, initial, uniforms[None, :])[0]
    states.setflags(write=False)
    return RegimePath(states=states)
