import copy
import json
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .ctmc import GeneratorMatrix, validate_generator
from .errors import ConfigError, ValidationError
from .models import LinearSwitchingModel, StabilityTestModel, linear_model
from .schemes import SchemeParams, SchemePreset, resolve_scheme


CONFIG_DIR = Path(__file__).parent / "configs"

EXAMPLES = {
    "ex1-case1": "ex1_case1.json",
    "ex1-case2": "ex1_case2.json",
    "ex1-case3": "ex1_case3.json",
    "ex2": "ex2.json",
}

MODEL_FAMILIES = ("linear", "stability-test")


@dataclass(frozen=True)
class LatticeSpec:
    """Rectangular (lambda dt, alpha) lattice, both axes inclusive linspaces"""

    lambda_dt: Tuple[float, float, int]
    alpha: Tuple[float, float, int]

    def axes(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.linspace(*self.lambda_dt), np.linspace(*self.alpha)


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, immutable view of an experiment file"""

    family: str
    coefficients: Dict[str, Tuple[float, ...]]
    generator: GeneratorMatrix
    y0: float
    r0: int
    horizon: float
    deltas: Tuple[float, ...]
    schemes: Tuple[Tuple[str, SchemeParams], ...]
    replications: int
    seed: int
    batch_size: Optional[int]
    stability_p: float
    lattice: LatticeSpec
    output_dir: Optional[str]
    source: Optional[str] = None

    def model(self) -> LinearSwitchingModel:
        if self.family == "stability-test":
            return self.stability_test_model().to_linear()
        return linear_model(self.coefficients["a"], self.coefficients["b"])

    def stability_test_model(self) -> Optional[StabilityTestModel]:
        """Test parameters when the family is stability-test, None otherwise"""
        if self.family != "stability-test":
            return None
        return StabilityTestModel(alpha=self.coefficients["alpha"], lam=self.coefficients["lambda"])


class ConfigManager:
    """Loads, merges and validates JSON experiment configurations"""

    DEFAULT_CONFIG = {
        "model": {"family": "linear", "a": [0.15, 0.05], "b": [0.1, 0.1]},
        "generator": [[-0.5, 0.5], [0.5, -0.5]],
        "initial": {"y0": 10.0, "r0": 1},
        "horizon": 10.0,
        "deltas": [0.1, 0.02, 0.004, 0.0008],
        "schemes": [preset.value for preset in SchemePreset],
        "replications": 200,
        "seed": 42,
        "batch_size": None,
        "stability": {"p": 2.0, "lambda_dt": [-3.0, -0.01, 30], "alpha": [0.0, 0.97, 30]},
        "output_dir": "results",
    }

    def __init__(self, config_path: Optional[str] = None):
        """Initialize ConfigManager

        Args:
            config_path: JSON experiment file; None uses the defaults only
        """
        self.config_path = Path(config_path).expanduser() if config_path else None
        self._lock = threading.Lock()
        self.config = self._load_config()

    def _load_config(self) -> Dict[str, Any]:
        """Load the file and merge its top-level sections over the defaults

        Raises:
            ConfigError: If the file is missing or not valid JSON
        """
        config = copy.deepcopy(self.DEFAULT_CONFIG)
        if self.config_path is None:
            return config
        if not self.config_path.exists():
            raise ConfigError("config file not found", source=str(self.config_path))
        try:
            with open(self.config_path, "r") as f:
                loaded = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(
                f"invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}", source=str(self.config_path)
            )
        if not isinstance(loaded, dict):
            raise ConfigError("top level must be an object", source=str(self.config_path))
        config.update(loaded)
        return config

    @property
    def source(self) -> Optional[str]:
        return str(self.config_path) if self.config_path else None

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value

        Args:
            key: Configuration key (supports dot notation for nested keys)
            default: Default value if key not found

        Returns:
            Configuration value or default
        """
        if "." in key:
            value = self.config
            for k in key.split("."):
                if isinstance(value, dict) and k in value:
                    value = value[k]
                else:
                    return default
            return value
        return self.config.get(key, default)

    def set(self, key: str, value: Any) -> None:
        """Set configuration value

        Args:
            key: Configuration key (supports dot notation for nested keys)
            value: Value to set
        """
        with self._lock:
            if "." in key:
                keys = key.split(".")
                config = self.config
                for k in keys[:-1]:
                    if k not in config or not isinstance(config[k], dict):
                        config[k] = {}
                    config = config[k]
                config[keys[-1]] = value
            else:
                self.config[key] = value

    def merge(self, new_config: Dict[str, Any]) -> None:
        """Merge top-level sections over the current configuration"""
        with self._lock:
            self.config.update(copy.deepcopy(new_config))

    def export(self) -> str:
        """Export configuration as JSON string"""
        return json.dumps(self.config, indent=2)

    def save(self, path: Optional[str] = None) -> None:
        """Write the configuration as JSON

        Args:
            path: Target file, defaults to the file it was loaded from
        """
        target = Path(path) if path else self.config_path
        if target is None:
            raise ConfigError("no path to save the configuration to")
        with self._lock:
            text = self.export()
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w") as f:
            f.write(text + "\n")

    def validate(self) -> bool:
        """True if the configuration converts to an ExperimentConfig"""
        return not self.problems()

    def problems(self) -> List[str]:
        """All validation problems, one message per offending field"""
        try:
            self.to_experiment()
        except ConfigError as e:
            return [str(e)]
        return []

    def apply_paper_scale(self) -> None:
        """Replace horizon, deltas and replications by the file's `paper` section

        Raises:
            ConfigError: If the configuration has no paper section
        """
        paper = self.get("paper")
        if not isinstance(paper, dict) or not paper:
            raise self._fail("paper", "no paper-scale section in this configuration")
        unknown = set(paper) - {"horizon", "deltas", "replications"}
        if unknown:
            raise self._fail("paper", f"unexpected keys {sorted(unknown)}")
        self.merge(paper)

    def _fail(self, field: str, message: str) -> ConfigError:
        return ConfigError(message, field=field, source=self.source)

    def _number(self, field: str, positive: bool = False) -> float:
        value = self.get(field)
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise self._fail(field, f"expected a finite number, got {value!r}")
        if positive and value <= 0:
            raise self._fail(field, f"must be positive, got {value!r}")
        return float(value)

    def _integer(self, field: str, minimum: int) -> int:
        value = self.get(field)
        if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
            raise self._fail(field, f"expected an integer >= {minimum}, got {value!r}")
        return value

    def _numbers(self, field: str) -> Tuple[float, ...]:
        values = self.get(field)
        if not isinstance(values, list) or not values:
            raise self._fail(field, "expected a non-empty array of numbers")
        for v in values:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise self._fail(field, f"expected finite numbers, got {v!r}")
        return tuple(float(v) for v in values)

    def _range(self, field: str) -> Tuple[float, float, int]:
        value = self.get(field)
        if (
            not isinstance(value, list)
            or len(value) != 3
            or not isinstance(value[2], int)
            or value[2] < 1
        ):
            raise self._fail(field, "expected [low, high, count]")
        return float(value[0]), float(value[1]), value[2]

    def _schemes(self) -> Tuple[Tuple[str, SchemeParams], ...]:
        entries = self.get("schemes")
        if not isinstance(entries, list) or not entries:
            raise self._fail("schemes", "expected a non-empty array")
        schemes = []
        for k, entry in enumerate(entries):
            try:
                if isinstance(entry, dict):
                    schemes.append(resolve_scheme((entry["theta"], entry["eta"])))
                else:
                    schemes.append(resolve_scheme(entry))
            except (KeyError, TypeError, ValidationError) as e:
                raise self._fail(f"schemes.{k}", f"invalid scheme {entry!r}: {e}")
        return tuple(schemes)

    def to_experiment(self) -> ExperimentConfig:
        """Validate and freeze the configuration

        Raises:
            ConfigError: Naming the first offending field
        """
        family = self.get("model.family")
        if family not in MODEL_FAMILIES:
            raise self._fail("model.family", f"expected one of {MODEL_FAMILIES}, got {family!r}")
        if family == "linear":
            coefficients = {"a": self._numbers("model.a"), "b": self._numbers("model.b")}
        else:
            coefficients = {"alpha": self._numbers("model.alpha"), "lambda": self._numbers("model.lambda")}

        try:
            generator = validate_generator(self.get("generator"))
        except ValidationError as e:
            raise self._fail("generator", str(e))

        first, second = coefficients.values()
        if len(first) != len(second):
            raise self._fail("model", "per-regime coefficient arrays differ in length")
        if len(first) != generator.n_states:
            raise self._fail(
                "model", f"{len(first)} regimes in the model but {generator.n_states} in the generator"
            )

        horizon = self._number("horizon", positive=True)
        deltas = self._numbers("deltas")
        for k, delta in enumerate(deltas):
            if not 0 < delta <= horizon:
                raise self._fail(f"deltas.{k}", f"step {delta!r} must satisfy 0 < dt <= horizon")
        if len(set(deltas)) != len(deltas):
            raise self._fail("deltas", "steps must be distinct")

        r0 = self._integer("initial.r0", 1)
        if r0 > generator.n_states:
            raise self._fail("initial.r0", f"regime {r0} outside 1..{generator.n_states}")

        seed = self._integer("seed", 0)
        if seed >= 2**64:
            raise self._fail("seed", "must fit in an unsigned 64-bit integer")

        batch_size = self.get("batch_size")
        if batch_size is not None:
            batch_size = self._integer("batch_size", 1)

        stability_p = self._number("stability.p", positive=True)
        lattice = LatticeSpec(lambda_dt=self._range("stability.lambda_dt"), alpha=self._range("stability.alpha"))

        experiment = ExperimentConfig(
            family=family,
            coefficients=coefficients,
            generator=generator,
            y0=self._number("initial.y0"),
            r0=r0,
            horizon=horizon,
            deltas=deltas,
            schemes=self._schemes(),
            replications=self._integer("replications", 2),
            seed=seed,
            batch_size=batch_size,
            stability_p=stability_p,
            lattice=lattice,
            output_dir=self.get("output_dir"),
            source=self.source,
        )
        if family == "stability-test":
            try:
                experiment.stability_test_model()
            except ValidationError as e:
                raise self._fail("model", str(e))
        return experiment


def example_config_path(name: str) -> Path:
    """Committed config of a named example

    Raises:
        ConfigError: If the example is unknown
    """
    if name not in EXAMPLES:
        raise ConfigError(f"unknown example {name!r}; expected one of {', '.join(EXAMPLES)}")
    return CONFIG_DIR / EXAMPLES[name]
