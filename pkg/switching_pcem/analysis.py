"""Strong-error statistics, convergence-order fits and p-stability regions"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.integrate import quad

from .ctmc import GeneratorMatrix
from .errors import NumericalError, ValidationError
from .models import LinearSwitchingModel, StabilityTestModel
from .schemes import SchemeParams, transfer_coefficients
from .simulate import CoupledPaths, PathResult, ReplicationErrors, TimeGrid, run_replications


logger = logging.getLogger(__name__)

BOUNDARY_TOL = 1e-10
QUADRATURE_RTOL = 1e-8
QUADRATURE_START = 16
QUADRATURE_MAX = 256
QUADRATURE_ATOL = 1e-12
QUADRATURE_PIECE_RTOL = 1e-10
QUADRATURE_LIMIT = 200
SQRT_2PI = math.sqrt(2.0 * math.pi)


class OverflowPresent(NumericalError):
    """A coupled path overflowed; value holds the sup over the finite prefix"""

    def __init__(self, message: str, value: float, overflow_index: int):
        super().__init__(message)
        self.value = value
        self.overflow_index = overflow_index


class AllOverflowed(NumericalError):
    """No replication produced a finite error"""

    pass


class DegenerateFit(NumericalError):
    """Convergence fit impossible (non-positive error means)"""

    pass


class InsufficientLadder(ValidationError):
    """Step ladder too short or too narrow for an order fit"""

    pass


class QuadratureNonConvergent(NumericalError):
    """Moment quadrature did not reach its tolerance"""

    def __init__(self, message: str, lambda_dt: float = None, alpha: float = None):
        super().__init__(message)
        self.lambda_dt = lambda_dt
        self.alpha = alpha


@dataclass(frozen=True)
class ErrorStats:
    """Sample mean of sup_k |Y - y|^2 over the finite replications"""

    n_replications: int
    mean_sup_sq: float
    std_error: float
    overflow_count: int


@dataclass(frozen=True)
class ConvergenceFit:
    """Least-squares line through (log dt, log mean_sup_sq)"""

    points: Tuple[Tuple[float, float], ...]
    slope: float
    intercept: float
    r_squared: float

    @property
    def strong_order(self) -> float:
        # The statistic is a squared error.
        return self.slope / 2.0


@dataclass(frozen=True)
class StabilityPoint:
    lambda_dt: float
    alpha: float
    p: float
    moment: float
    stable: bool


@dataclass(frozen=True, eq=False)
class StabilityRegion:
    """Stability mask of one scheme over a (lambda dt, alpha) lattice"""

    scheme: str
    params: SchemeParams
    p: float
    lambda_dt: np.ndarray
    alpha: np.ndarray
    moments: np.ndarray
    mask: np.ndarray

    def point(self, i: int, j: int) -> StabilityPoint:
        return StabilityPoint(
            lambda_dt=float(self.lambda_dt[i]),
            alpha=float(self.alpha[j]),
            p=self.p,
            moment=float(self.moments[i, j]),
            stable=bool(self.mask[i, j]),
        )

    @property
    def stable_count(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class StateStability:
    """Per-regime p-stability verdicts of a switching test model"""

    per_regime: Tuple[bool, ...]
    moments: Tuple[float, ...]

    @property
    def overall(self) -> bool:
        return all(self.per_regime)


def sup_squared_error(coupled: CoupledPaths) -> float:
    """max_k |Y(t_k) - y(t_k)|^2 between the numeric and reference members

    Raises:
        OverflowPresent: If either member overflowed; carries the value over the finite prefix
    """
    gap = np.sum((coupled.numeric.states - coupled.reference.states) ** 2, axis=-1)
    cut = len(gap)
    for member in (coupled.numeric, coupled.reference):
        if member.overflowed:
            cut = min(cut, member.overflow_index)
    value = float(np.max(gap[:cut])) if cut > 0 else 0.0
    if cut < len(gap):
        raise OverflowPresent(f"coupled path overflowed at grid index {cut}", value=value, overflow_index=cut)
    return value


def error_stats(errors: ReplicationErrors) -> ErrorStats:
    """Reduce per-replication sup-squared errors to ErrorStats

    Raises:
        AllOverflowed: If no replication is finite
    """
    finite = errors.sup_sq[~errors.overflowed]
    n = len(errors.sup_sq)
    if len(finite) == 0:
        raise AllOverflowed(f"{errors.label}: all {n} replications overflowed")
    std_error = float(np.std(finite, ddof=1) / math.sqrt(len(finite))) if len(finite) > 1 else 0.0
    return ErrorStats(
        n_replications=n,
        mean_sup_sq=float(np.mean(finite)),
        std_error=std_error,
        overflow_count=int(errors.overflowed.sum()),
    )


def monte_carlo_error(
    model: LinearSwitchingModel,
    params: SchemeParams,
    grid: TimeGrid,
    y0,
    r0: int,
    n_replications: int,
    master_seed: int,
    generator: GeneratorMatrix,
    batch_size: Optional[int] = None,
    threads: int = 1,
) -> ErrorStats:
    """Mean and standard error of the sup-squared error over replications

    Args:
        model: Linear switching model
        params: Scheme degrees
        grid: Time grid
        y0: Initial value
        r0: Initial regime
        n_replications: At least 2
        master_seed: Master seed; the result is a pure function of it
        generator: Regime chain generator
        batch_size: Replications integrated together
        threads: Worker threads

    Returns:
        ErrorStats over the finite replications
    """
    if n_replications < 2:
        raise ValidationError("monte carlo error needs at least 2 replications")
    (errors,) = run_replications(
        model, [("scheme", params)], grid, y0, r0, generator,
        n_replications, master_seed, batch_size=batch_size, threads=threads,
    )
    return error_stats(errors)


def check_ladder(deltas: Sequence[float]) -> None:
    """Raise InsufficientLadder unless the steps support a log-log order fit"""
    deltas = np.asarray(deltas, dtype=float)
    if len(deltas) < 3:
        raise InsufficientLadder(f"need at least 3 steps for an order fit, got {len(deltas)}")
    if np.any(deltas <= 0) or len(np.unique(deltas)) != len(deltas):
        raise InsufficientLadder("steps must be positive and distinct")
    if math.log10(deltas.max() / deltas.min()) < 2.0 - 1e-9:
        raise InsufficientLadder("step ladder must span at least 2 decades")


def fit_strong_order(points: Sequence[Tuple[float, float]]) -> ConvergenceFit:
    """Ordinary least squares of log(mean_sup_sq) on log(dt)

    A slope of 1 corresponds to strong order 1/2.

    Raises:
        InsufficientLadder: Fewer than 3 points, repeated or non-positive steps,
            or a ladder spanning less than 2 decades
        DegenerateFit: If some mean is not positive and finite
    """
    points = tuple((float(dt), float(mean)) for dt, mean in points)
    check_ladder([dt for dt, _ in points])
    deltas = np.array([dt for dt, _ in points])
    means = np.array([mean for _, mean in points])
    if np.any(~np.isfinite(means)) or np.any(means <= 0):
        raise DegenerateFit("error means must be positive and finite for a log-log fit")

    x, y = np.log(deltas), np.log(means)
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    total = np.sum((y - y.mean()) ** 2)
    r_squared = 1.0 - float(np.sum(residual**2) / total) if total > 0 else 1.0
    return ConvergenceFit(points=points, slope=float(slope), intercept=float(intercept), r_squared=r_squared)


@lru_cache(maxsize=None)
def _normal_rule(n: int) -> Tuple[np.ndarray, np.ndarray]:
    nodes, weights = hermegauss(n)
    return nodes, weights / SQRT_2PI


def _check_stability_domain(lambda_dt: np.ndarray, alpha: np.ndarray, p: float) -> None:
    if not p > 0:
        raise ValidationError(f"p = {p!r} must be positive")
    if np.any(~(lambda_dt < 0)):
        raise ValidationError("lambda*dt must be negative")
    if np.any(~((alpha >= 0) & (alpha < 1))):
        raise ValidationError("alpha must lie in [0, 1)")


def _real_roots(c0: float, c1: float, c2: float) -> Tuple[float, ...]:
    """Sorted real roots of c2 z^2 + c1 z + c0, where |G|^p has its kinks"""
    if c2 == 0.0:
        return (-c0 / c1,) if c1 != 0.0 else ()
    disc = c1 * c1 - 4.0 * c2 * c0
    if disc < 0.0:
        return ()
    if disc == 0.0:
        return (-c1 / (2.0 * c2),)
    q = -0.5 * (c1 + math.copysign(math.sqrt(disc), c1))
    return tuple(sorted((q / c2, c0 / q)))


def _piecewise_moment(c0: float, c1: float, c2: float, p: float) -> Optional[float]:
    """E|c0 + c1 Z + c2 Z^2|^p with adaptive quadrature between consecutive real roots

    Returns:
        The moment, or None if some piece did not reach the requested accuracy
    """
    if c1 == 0.0 and c2 == 0.0:
        return abs(c0) ** p

    def integrand(z):
        g = abs(c0 + c1 * z + c2 * z * z)
        # g overflows only where the normal density is already zero.
        if g == 0.0 or not math.isfinite(g):
            return 0.0
        return math.exp(p * math.log(g) - 0.5 * z * z) / SQRT_2PI

    edges = (-math.inf, *_real_roots(c0, c1, c2), math.inf)
    total = 0.0
    for lo, hi in zip(edges, edges[1:]):
        if lo == hi:
            continue
        result = quad(
            integrand, lo, hi,
            epsabs=QUADRATURE_ATOL, epsrel=QUADRATURE_PIECE_RTOL, limit=QUADRATURE_LIMIT, full_output=1,
        )
        # A fourth element is quad's warning message.
        if len(result) > 3 and result[1] > QUADRATURE_RTOL * max(abs(result[0]), QUADRATURE_ATOL):
            logger.debug(f"quad on [{lo}, {hi}]: {result[3]}")
            return None
        total += result[0]
    return total


def _hermite_moments(c0: np.ndarray, c1: np.ndarray, c2: np.ndarray, p: float):
    """Gauss-Hermite with node doubling; exact once n exceeds p for even integer p

    Returns:
        (moments, settled) arrays
    """
    c0, c1, c2 = (c[..., None] for c in (c0, c1, c2))

    def integrate(n):
        z, w = _normal_rule(n)
        return np.sum(w * np.abs(c0 + c1 * z + c2 * z * z) ** p, axis=-1)

    n = QUADRATURE_START
    previous = integrate(n)
    while True:
        n *= 2
        current = integrate(n)
        settled = np.abs(current - previous) <= QUADRATURE_RTOL * np.abs(current)
        if np.all(settled) or n >= QUADRATURE_MAX:
            return current, settled
        logger.debug(f"Refining quadrature to {n * 2} nodes")
        previous = current


def transfer_moments(params: SchemeParams, lambda_dt, alpha, p: float) -> np.ndarray:
    """E|G(Z)|^p for arrays of (lambda dt, alpha)

    For even integer p, |G|^p is a polynomial and Gauss-Hermite is exact. Any
    other p puts a kink at every real root of G, so each node is integrated
    piece by piece between the roots with scipy.integrate.quad.

    Raises:
        QuadratureNonConvergent: With the coordinates of the first node that did not settle
    """
    lambda_dt, alpha = np.broadcast_arrays(np.asarray(lambda_dt, dtype=float), np.asarray(alpha, dtype=float))
    _check_stability_domain(lambda_dt, alpha, p)
    c0, c1, c2 = (np.asarray(c, dtype=float) for c in transfer_coefficients(params, lambda_dt, alpha))
    c0, c1, c2 = np.broadcast_arrays(c0, c1, c2)

    if float(p).is_integer() and int(p) % 2 == 0:
        moments, settled = _hermite_moments(c0, c1, c2, p)
    else:
        moments = np.empty(lambda_dt.shape)
        settled = np.ones(lambda_dt.shape, dtype=bool)
        for index in np.ndindex(lambda_dt.shape):
            value = _piecewise_moment(float(c0[index]), float(c1[index]), float(c2[index]), float(p))
            if value is None:
                settled[index] = False
                moments[index] = np.nan
                break
            moments[index] = value

    if not np.all(settled):
        index = next(i for i in np.ndindex(settled.shape) if not settled[i])
        raise QuadratureNonConvergent(
            f"quadrature did not converge at lambda*dt={lambda_dt[index]!r}, alpha={alpha[index]!r}, p={p!r}",
            lambda_dt=float(lambda_dt[index]),
            alpha=float(alpha[index]),
        )
    return moments


def transfer_moment(params: SchemeParams, lambda_dt: float, alpha: float, p: float) -> float:
    """E[G^p] of one scheme on the linear test equation at (lambda dt, alpha)

    G is the one-step ratio |Y_{n+1} / Y_n|; the scheme is p-stable iff the result is < 1.
    """
    return float(transfer_moments(params, lambda_dt, alpha, p))


def closed_form_second_moment(params: SchemeParams, lambda_dt, alpha) -> np.ndarray:
    """E[G^2] = c0^2 + c1^2 + 3 c2^2 + 2 c0 c2 from the normal moments 1, 0, 1, 0, 3"""
    c0, c1, c2 = transfer_coefficients(params, lambda_dt, alpha)
    return c0 * c0 + c1 * c1 + 3.0 * c2 * c2 + 2.0 * c0 * c2


def is_stable(moment) -> np.ndarray:
    # Strict inequality; a moment within BOUNDARY_TOL of 1 counts as unstable.
    return np.asarray(moment) < 1.0 - BOUNDARY_TOL


def scan_stability_region(
    params: SchemeParams,
    p: float,
    lambda_dt: Sequence[float],
    alpha: Sequence[float],
    scheme: Optional[str] = None,
) -> StabilityRegion:
    """Evaluate p-stability over the lattice lambda_dt x alpha

    Args:
        params: Scheme degrees
        p: Moment order
        lambda_dt: Negative lattice coordinates
        alpha: Lattice coordinates in [0, 1)
        scheme: Label stored on the region

    Returns:
        StabilityRegion with moments and mask of shape (len(lambda_dt), len(alpha))
    """
    lambda_dt = np.asarray(lambda_dt, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    grid_l, grid_a = np.meshgrid(lambda_dt, alpha, indexing="ij")
    moments = transfer_moments(params, grid_l, grid_a, p)
    region = StabilityRegion(
        scheme=scheme or params.describe(),
        params=params,
        p=float(p),
        lambda_dt=lambda_dt,
        alpha=alpha,
        moments=moments,
        mask=is_stable(moments),
    )
    logger.info(f"{region.scheme}: {region.stable_count} of {region.mask.size} lattice nodes stable at p={p}")
    return region


def state_p_stable(
    model: StabilityTestModel, params: SchemeParams, dt: float, p: float
) -> StateStability:
    """Check p-stability of the scheme in every regime of a switching test model

    The model is state-p-stable iff each triplet (lambda(i) dt, alpha(i), p)
    is a stable point of the scalar test equation.
    """
    if not dt > 0:
        raise ValidationError(f"dt = {dt!r} must be positive")
    lambda_dt = np.asarray(model.lam) * dt
    moments = transfer_moments(params, lambda_dt, np.asarray(model.alpha), p)
    return StateStability(
        per_regime=tuple(bool(s) for s in is_stable(moments)),
        moments=tuple(float(m) for m in moments),
    )


def continuous_stability_boundary(p: float) -> float:
    """alpha below which the continuous test equation is p-stable: 1 / (1 + p/2)"""
    if not p > 0:
        raise ValidationError(f"p = {p!r} must be positive")
    return 1.0 / (1.0 + p / 2.0)


def stability_boundary(
    params: SchemeParams, alpha: float, p: float, lo: float = -50.0, tol: float = 1e-12
) -> Optional[float]:
    """lambda dt at which E[G^p] crosses 1 for fixed alpha, by bisection

    Returns:
        The crossing in (lo, 0); None if the scheme is unstable right next to 0;
        lo itself if the scheme stays stable down to lo
    """
    hi = -1e-9

    def stable(x):
        return bool(is_stable(transfer_moment(params, x, alpha, p)))

    if not stable(hi):
        return None
    if stable(lo):
        return lo
    while hi - lo > tol * max(1.0, abs(lo)):
        mid = 0.5 * (lo + hi)
        if stable(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def path_spread(paths: Sequence[PathResult]) -> float:
    """sup_k of the largest pairwise distance between scheme paths sharing noise

    Overflowed grid points are ignored.
    """
    if len(paths) < 2:
        return 0.0
    states = np.stack([path.states for path in paths])
    with np.errstate(invalid="ignore"):
        distances = np.sqrt(np.sum((states[:, None] - states[None, :]) ** 2, axis=-1))
    finite = distances[np.isfinite(distances)]
    return float(finite.max()) if finite.size else 0.0
