"""Predictor-corrector Euler-Maruyama (PCEM) family

One step from (Y, r) with step dt and increments dW:

    predictor  Y~ = Y + f(Y, r) dt + sum_j g^j(Y, r) dW^j
    corrector  Y' = Y + {theta fbar(Y~, r) + (1 - theta) fbar(Y, r)} dt
                      + sum_j {eta g^j(Y~, r) + (1 - eta) g^j(Y, r)} dW^j

with the corrected drift fbar = f - eta * sum_{j1,j2} sum_l g^{l,j1} dg^{l,j2}/dx^l.
The regime r is held at its value at the start of the step in both stages.
theta = eta = 0 reduces to Euler-Maruyama. Every function accepts a leading
batch axis on states, regimes and increments.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Tuple, Union

import numpy as np

from .errors import ValidationError
from .models import Regime, SwitchingModel


logger = logging.getLogger(__name__)


class InvalidSchemeParams(ValidationError):
    """Implicitness degrees outside [0, 1] or of the wrong length"""

    pass


class DimensionUnsupported(ValidationError):
    """Operation is only defined for scalar models"""

    pass


def _degrees(name: str, values: Union[float, Sequence[float]]) -> Tuple[float, ...]:
    values = tuple(float(v) for v in np.atleast_1d(values))
    if not values:
        raise InvalidSchemeParams(f"{name} must not be empty")
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise InvalidSchemeParams(f"{name} = {v!r} must lie in [0, 1]")
    return values


@dataclass(frozen=True)
class SchemeParams:
    """Implicitness degrees theta_k (drift) and eta_k (diffusion) per component"""

    theta: Tuple[float, ...]
    eta: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "theta", _degrees("theta", self.theta))
        object.__setattr__(self, "eta", _degrees("eta", self.eta))
        if len(self.theta) != len(self.eta):
            raise InvalidSchemeParams(
                f"theta has {len(self.theta)} components, eta has {len(self.eta)}"
            )

    @classmethod
    def scalar(cls, theta: float, eta: float) -> "SchemeParams":
        return cls(theta=(theta,), eta=(eta,))

    @property
    def dimension(self) -> int:
        return len(self.theta)

    def vectors(self, d: int) -> Tuple[np.ndarray, np.ndarray]:
        """theta and eta as length-d arrays; length-1 params broadcast to any d"""
        if self.dimension not in (1, d):
            raise InvalidSchemeParams(f"params have {self.dimension} components, model has {d}")
        return (
            np.broadcast_to(np.asarray(self.theta), (d,)),
            np.broadcast_to(np.asarray(self.eta), (d,)),
        )

    def describe(self) -> str:
        theta = ";".join(repr(t) for t in self.theta)
        eta = ";".join(repr(e) for e in self.eta)
        return f"custom[{theta}|{eta}]"


class SchemePreset(Enum):
    """Named members of the PCEM family"""

    EM = "EM"
    SYMMETRIC = "symmetric-PCEM"
    SEMI_DRIFT_IMPLICIT = "semi-drift-implicit-PCEM"
    DRIFT_IMPLICIT = "drift-implicit-PCEM"
    SEMI_DIFFUSION_IMPLICIT = "semi-diffusion-implicit-PCEM"
    FULLY_IMPLICIT = "fully-implicit-PCEM"

    @property
    def params(self) -> SchemeParams:
        theta, eta = _PRESET_DEGREES[self]
        return SchemeParams.scalar(theta, eta)


_PRESET_DEGREES = {
    SchemePreset.EM: (0.0, 0.0),
    SchemePreset.SYMMETRIC: (0.5, 0.5),
    SchemePreset.SEMI_DRIFT_IMPLICIT: (0.5, 0.0),
    SchemePreset.DRIFT_IMPLICIT: (1.0, 0.0),
    SchemePreset.SEMI_DIFFUSION_IMPLICIT: (0.0, 0.5),
    SchemePreset.FULLY_IMPLICIT: (1.0, 1.0),
}


def resolve_scheme(
    scheme: Union[str, SchemePreset, SchemeParams, Tuple[float, float]],
) -> Tuple[str, SchemeParams]:
    """Turn a preset name, preset, params object or (theta, eta) pair into (label, params)

    Raises:
        InvalidSchemeParams: If the name is unknown or the degrees are invalid
    """
    if isinstance(scheme, SchemePreset):
        return scheme.value, scheme.params
    if isinstance(scheme, SchemeParams):
        return scheme.describe(), scheme
    if isinstance(scheme, str):
        try:
            preset = SchemePreset(scheme)
        except ValueError:
            names = ", ".join(p.value for p in SchemePreset)
            raise InvalidSchemeParams(f"unknown scheme {scheme!r}; expected one of {names}")
        return preset.value, preset.params
    theta, eta = scheme
    params = SchemeParams(theta=theta, eta=eta)
    return params.describe(), params


@dataclass(frozen=True)
class StepInput:
    """State Y_{t_k}, regime r_{t_k}, step dt and increments dW_{t_k} of one step"""

    state: np.ndarray
    regime: Regime
    dt: float
    dW: np.ndarray

    def __post_init__(self):
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValidationError(f"step dt = {self.dt!r} must be positive and finite")
        object.__setattr__(self, "state", np.asarray(self.state, dtype=float))
        object.__setattr__(self, "dW", np.asarray(self.dW, dtype=float))


@dataclass(frozen=True)
class ResidualDecomposition:
    """EM step plus the four residuals that turn it into the PCEM step"""

    em_step: np.ndarray
    residuals: Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]

    def total(self) -> np.ndarray:
        return self.em_step + sum(self.residuals)


def _noise(g: np.ndarray, dW: np.ndarray) -> np.ndarray:
    return (g * dW[..., None, :]).sum(axis=-1)


def _blend(weight: np.ndarray, new: np.ndarray, old: np.ndarray) -> np.ndarray:
    if not np.any(weight):
        return old
    if np.all(weight == 1.0):
        return new
    return weight * new + (1.0 - weight) * old


def _correction(model: SwitchingModel, x: np.ndarray, i: Regime) -> np.ndarray:
    """sum_{j1,j2} sum_l g^{l,j1} dg^{l,j2}/dx^l, shape (...)"""
    g = model.diffusion(x, i)
    jacobian_diagonal = np.einsum("...ljl->...lj", model.diffusion_derivative(x, i))
    return np.einsum("...la,...lb->...", g, jacobian_diagonal)


def corrected_drift(
    model: SwitchingModel, eta: Union[float, Sequence[float]], x: np.ndarray, i: Regime
) -> np.ndarray:
    """Corrected drift fbar_eta(x, i)

    Args:
        model: Switching model
        eta: Diffusion implicitness, scalar or one value per component
        x: State, shape (..., d)
        i: Regime label(s)

    Returns:
        f(x, i) - eta_k * correction(x, i) componentwise, shape (..., d)
    """
    x = np.asarray(x, dtype=float)
    f = model.drift(x, i)
    eta = np.asarray(eta, dtype=float)
    if not np.any(eta):
        return f
    return f - eta * _correction(model, x, i)[..., None]


def predictor_step(model: SwitchingModel, step: StepInput) -> np.ndarray:
    """Explicit Euler-Maruyama predictor Y + f(Y, r) dt + sum_j g^j(Y, r) dW^j"""
    x, i = step.state, step.regime
    return x + model.drift(x, i) * step.dt + _noise(model.diffusion(x, i), step.dW)


def corrector_step(
    model: SwitchingModel, params: SchemeParams, step: StepInput, predictor: np.ndarray
) -> np.ndarray:
    """Corrector stage blending current and predicted evaluations

    Args:
        model: Switching model
        params: theta/eta degrees
        step: Step input (regime held at r_{t_k})
        predictor: Output of predictor_step for the same input

    Returns:
        Y_{t_{k+1}}, shape (..., d)
    """
    x, i = step.state, step.regime
    theta, eta = params.vectors(model.dimension)

    current_drift = corrected_drift(model, eta, x, i)
    if np.any(theta):
        drift = _blend(theta, corrected_drift(model, eta, predictor, i), current_drift)
    else:
        drift = current_drift

    current_diffusion = model.diffusion(x, i)
    if np.any(eta):
        diffusion = _blend(eta[:, None], model.diffusion(predictor, i), current_diffusion)
    else:
        diffusion = current_diffusion

    return x + drift * step.dt + _noise(diffusion, step.dW)


def pcem_step(model: SwitchingModel, params: SchemeParams, step: StepInput) -> np.ndarray:
    """One full PCEM step: predictor followed by corrector"""
    return corrector_step(model, params, step, predictor_step(model, step))


def residual_decomposition(
    model: SwitchingModel, params: SchemeParams, step: StepInput
) -> ResidualDecomposition:
    """Split a scalar PCEM step into the EM step and four residuals

    R1 = theta {f(Y~) - f(Y)} dt
    R2 = -theta eta {g g'(Y~) - g g'(Y)} dt
    R3 = -eta g g'(Y) dt
    R4 = eta {g(Y~) - g(Y)} dW

    Raises:
        DimensionUnsupported: If the model is not scalar (d = m = 1)
    """
    if model.dimension != 1 or model.n_drivers != 1:
        raise DimensionUnsupported("residual decomposition requires d = m = 1")

    theta, eta = params.vectors(1)
    theta, eta = float(theta[0]), float(eta[0])
    x, i, dt = step.state, step.regime, step.dt
    dW = step.dW[..., 0]
    predicted = predictor_step(model, step)

    def gg(y):
        return _correction(model, y, i)[..., None]

    def g(y):
        return model.diffusion(y, i)[..., 0]

    em_step = predicted
    r1 = theta * (model.drift(predicted, i) - model.drift(x, i)) * dt
    r2 = -theta * eta * (gg(predicted) - gg(x)) * dt
    r3 = -eta * gg(x) * dt
    r4 = eta * (g(predicted) - g(x)) * dW[..., None]
    return ResidualDecomposition(em_step=em_step, residuals=(r1, r2, r3, r4))


def transfer_coefficients(
    params: SchemeParams, lambda_dt: Union[float, np.ndarray], alpha: Union[float, np.ndarray]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Coefficients of the one-step ratio G(Z) = c0 + c1 Z + c2 Z^2 on the test equation

    With A = a dt = (1 - 1.5 alpha) lambda dt, s = b sqrt(dt) = sqrt(alpha |lambda dt|)
    and Abar = A - eta s^2 the PCEM step on dy = a y dt + b y dW, dW = sqrt(dt) Z, gives

        G = 1 + Abar (1 + theta A) + s (1 + eta A + theta Abar) Z + eta s^2 Z^2

    Only the first component of params is used; the test equation is scalar.
    """
    theta, eta = float(params.theta[0]), float(params.eta[0])
    lambda_dt = np.asarray(lambda_dt, dtype=float)
    alpha = np.asarray(alpha, dtype=float)

    big_a = (1.0 - 1.5 * alpha) * lambda_dt
    s_sq = alpha * np.abs(lambda_dt)
    s = np.sqrt(s_sq)
    a_bar = big_a - eta * s_sq

    c0 = 1.0 + a_bar * (1.0 + theta * big_a)
    c1 = s * (1.0 + eta * big_a + theta * a_bar)
    c2 = eta * s_sq
    return c0, c1, c2
