"""Switching models: drift, diffusion and diffusion derivative per regime

A model evaluates on a state array of shape (..., d) and a regime label (an
int, or an int array matching the leading batch shape). Diffusion returns
shape (..., d, m), column j being the driver vector g^j. The diffusion
derivative returns the Jacobian J[..., k, j, l] = dg^{k,j}/dx^l, shape
(..., d, m, d).

Conditions (H1)-(H4) of the strong convergence result (local Lipschitz
drift and diffusion, linear growth, and their corrected-drift analogues)
are not checked at runtime; they are the caller's obligation.
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Sequence, Tuple, Union

import numpy as np

from .errors import ValidationError


Regime = Union[int, np.ndarray]


class LengthMismatch(ValidationError):
    """Per-regime coefficient lists have different lengths"""

    pass


class DomainError(ValidationError):
    """Coefficient outside its admissible domain"""

    pass


class SwitchingModel(ABC):
    """Problem definition dy = f(y, r) dt + sum_j g^j(y, r) dW^j"""

    dimension: int
    n_drivers: int
    n_regimes: int

    @abstractmethod
    def drift(self, x: np.ndarray, i: Regime) -> np.ndarray:
        """f(x, i), shape (..., d)"""

    @abstractmethod
    def diffusion(self, x: np.ndarray, i: Regime) -> np.ndarray:
        """g(x, i), shape (..., d, m)"""

    @abstractmethod
    def diffusion_derivative(self, x: np.ndarray, i: Regime) -> np.ndarray:
        """dg^{k,j}/dx^l, shape (..., d, m, d)"""


@dataclass(frozen=True)
class CallableModel(SwitchingModel):
    """Switching model assembled from user supplied pure functions"""

    dimension: int
    n_drivers: int
    n_regimes: int
    drift_fn: Callable[[np.ndarray, Regime], np.ndarray]
    diffusion_fn: Callable[[np.ndarray, Regime], np.ndarray]
    derivative_fn: Callable[[np.ndarray, Regime], np.ndarray]

    def drift(self, x, i):
        return np.asarray(self.drift_fn(np.asarray(x, dtype=float), i), dtype=float)

    def diffusion(self, x, i):
        return np.asarray(self.diffusion_fn(np.asarray(x, dtype=float), i), dtype=float)

    def diffusion_derivative(self, x, i):
        return np.asarray(self.derivative_fn(np.asarray(x, dtype=float), i), dtype=float)


def _per_regime(values: Tuple[float, ...], i: Regime) -> np.ndarray:
    # Trailing axis broadcasts against the state component axis.
    return np.asarray(values, dtype=float)[np.asarray(i) - 1][..., None]


@dataclass(frozen=True)
class LinearSwitchingModel(SwitchingModel):
    """Scalar linear model dy = a(r) y dt + b(r) y dW"""

    a: Tuple[float, ...]
    b: Tuple[float, ...]

    dimension = 1
    n_drivers = 1

    @property
    def n_regimes(self) -> int:
        return len(self.a)

    def drift(self, x, i):
        return _per_regime(self.a, i) * np.asarray(x, dtype=float)

    def diffusion(self, x, i):
        return (_per_regime(self.b, i) * np.asarray(x, dtype=float))[..., None]

    def diffusion_derivative(self, x, i):
        x = np.asarray(x, dtype=float)
        slope = np.broadcast_to(_per_regime(self.b, i), x.shape)
        return slope[..., None, None].copy()

    def stability_parameters(self) -> "StabilityTestModel":
        """Read (alpha, lambda) back from the coefficients

        Inverts a = (1 - 1.5 alpha) lambda, b^2 = alpha |lambda|, which gives
        lambda = a - 1.5 b^2 and alpha = b^2 / |lambda|.
        """
        lam = tuple(a - 1.5 * b * b for a, b in zip(self.a, self.b))
        alpha = tuple(b * b / abs(l) for b, l in zip(self.b, lam))
        return StabilityTestModel(alpha=alpha, lam=lam)


@dataclass(frozen=True)
class StabilityTestModel:
    """Per-regime parameters (alpha(i), lambda(i)) of the multiplicative test equation"""

    alpha: Tuple[float, ...]
    lam: Tuple[float, ...]

    def __post_init__(self):
        if len(self.alpha) != len(self.lam):
            raise LengthMismatch(
                f"alpha has {len(self.alpha)} regimes, lambda has {len(self.lam)}"
            )
        if not self.alpha:
            raise LengthMismatch("at least one regime is required")
        for k, (alpha, lam) in enumerate(zip(self.alpha, self.lam), start=1):
            if not (math.isfinite(alpha) and 0.0 <= alpha < 1.0):
                raise DomainError(f"alpha({k}) = {alpha!r} must lie in [0, 1)")
            if not (math.isfinite(lam) and lam < 0.0):
                raise DomainError(f"lambda({k}) = {lam!r} must be negative")

    @property
    def n_regimes(self) -> int:
        return len(self.alpha)

    def regime(self, i: int) -> Tuple[float, float]:
        """(alpha(i), lambda(i)) for a 1-based regime label"""
        return self.alpha[i - 1], self.lam[i - 1]

    def to_linear(self) -> LinearSwitchingModel:
        a = tuple((1.0 - 1.5 * alpha) * lam for alpha, lam in zip(self.alpha, self.lam))
        b = tuple(math.sqrt(alpha * abs(lam)) for alpha, lam in zip(self.alpha, self.lam))
        return LinearSwitchingModel(a=a, b=b)


def _coefficients(name: str, values: Sequence[float]) -> Tuple[float, ...]:
    try:
        coefficients = tuple(float(v) for v in values)
    except (TypeError, ValueError):
        raise ValidationError(f"{name} must be a list of numbers")
    if not all(math.isfinite(c) for c in coefficients):
        raise DomainError(f"{name} coefficients must be finite")
    return coefficients


def linear_model(a: Sequence[float], b: Sequence[float]) -> LinearSwitchingModel:
    """Build the linear switching model dy = a(r) y dt + b(r) y dW

    Args:
        a: Drift coefficient per regime
        b: Diffusion coefficient per regime

    Returns:
        LinearSwitchingModel with drift a(i) x, diffusion b(i) x, derivative b(i)

    Raises:
        LengthMismatch: If a and b differ in length or are empty
        DomainError: If a coefficient is not finite
    """
    a = _coefficients("a", a)
    b = _coefficients("b", b)
    if len(a) != len(b):
        raise LengthMismatch(f"a has {len(a)} regimes, b has {len(b)}")
    if not a:
        raise LengthMismatch("at least one regime is required")
    return LinearSwitchingModel(a=a, b=b)


def stability_model(alpha: Sequence[float], lam: Sequence[float]) -> LinearSwitchingModel:
    """Build the linear test model with a = (1 - 1.5 alpha) lambda, b = sqrt(alpha |lambda|)

    Raises:
        DomainError: If some alpha is outside [0, 1) or some lambda >= 0
        LengthMismatch: If the lists differ in length
    """
    params = StabilityTestModel(alpha=_coefficients("alpha", alpha), lam=_coefficients("lambda", lam))
    return params.to_linear()


def exact_linear_moment(model: StabilityTestModel, p: float, t: float, x0: float) -> float:
    """p-th moment E|X_t|^p of the single-regime test equation

    The explicit solution X_t = X_0 exp{(1 - alpha) lambda t + sqrt(alpha |lambda|) W_t}
    is lognormal, so E|X_t|^p = x0^p exp(p lambda t [(1 - alpha) - p alpha / 2]).

    Args:
        model: Test parameters with exactly one regime
        p: Moment order, positive
        t: Time, non-negative
        x0: Initial value, non-negative

    Returns:
        The p-th moment at time t
    """
    if model.n_regimes != 1:
        raise ValidationError("exact moment is defined for a single regime only")
    if x0 < 0:
        raise DomainError(f"x0 = {x0!r} must be non-negative")
    alpha, lam = model.regime(1)
    exponent = p * lam * t * ((1.0 - alpha) - p * alpha / 2.0)
    return float(x0**p * math.exp(exponent))
