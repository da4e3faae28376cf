"""Run configuration: presets, file loading and environment overrides."""

import copy
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import structlog
from cachetools import TTLCache
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .allocation import PenaltySchedule
from .error_handler import ConfigError
from .scenario import Point, Scenario, receivers_on_ring

try:
    import tomllib
except ImportError:  # Python < 3.11
    tomllib = None  # type: ignore[assignment]

logger = structlog.get_logger(__name__)


class ReceiverRing(BaseModel):
    model_config = ConfigDict(extra="forbid")

    center: Point = (0.0, 0.0)
    radius: float = Field(gt=0)
    angles_deg: List[float] = Field(min_length=1)


class ScenarioSettings(BaseModel):
    """Scenario block; receivers come either as positions or as a ring."""

    model_config = ConfigDict(extra="forbid")

    bs_position: Point = (0.0, 0.0)
    receiver_positions: Optional[List[Point]] = None
    receiver_ring: Optional[ReceiverRing] = None
    target_positions: List[Point] = Field(default_factory=list)
    target_velocities: List[Point] = Field(default_factory=list)
    user_positions: List[Point] = Field(default_factory=list)
    carrier_hz: float = Field(default=3e9, gt=0)
    subcarrier_spacing_hz: float = Field(default=15e3, gt=0)
    num_subcarriers: int = Field(default=64, ge=1)
    num_tx_antennas: int = Field(default=32, ge=2)
    num_symbols: int = Field(default=32, ge=1)
    cp_duration_s: float = Field(default=4.7e-6, ge=0)
    total_power_w: float = Field(default=5.0, gt=0)
    radar_noise_var: float = Field(default=1.5e-18, gt=0)
    comm_noise_var: float = Field(default=1.5e-14, gt=0)
    rcs_per_receiver: Optional[List[float]] = None
    rcs_range: Tuple[float, float] = (0.09, 0.1)
    detection_subarea_angles: List[Tuple[float, float]] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_receivers(self) -> "ScenarioSettings":
        if (self.receiver_positions is None) == (self.receiver_ring is None):
            raise ValueError("give exactly one of receiver_positions or receiver_ring")
        lo, hi = self.rcs_range
        if not 0 < lo <= hi:
            raise ValueError("rcs_range must satisfy 0 < lo <= hi")
        return self

    def receivers(self) -> List[Point]:
        if self.receiver_positions is not None:
            return list(self.receiver_positions)
        ring = self.receiver_ring
        return receivers_on_ring(ring.center, ring.radius, ring.angles_deg)

    def to_scenario(self, rng: np.random.Generator) -> Scenario:
        """Build the scenario, drawing RCS values from ``rcs_range`` if absent."""
        receivers = self.receivers()
        rcs = self.rcs_per_receiver
        if rcs is None:
            rcs = [float(v) for v in rng.uniform(*self.rcs_range, size=len(receivers))]
        fields = self.model_dump(
            exclude={"receiver_positions", "receiver_ring", "rcs_per_receiver", "rcs_range"}
        )
        return Scenario(receiver_positions=receivers, rcs_per_receiver=rcs, **fields)


class PenaltySettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    beta0: float = Field(default=1e-3, gt=0)
    gamma: float = Field(default=3.0, gt=1)
    beta_max: float = Field(default=1e3, gt=0)
    epsilon: float = Field(default=1e-4, gt=0)
    max_outer: int = Field(default=30, ge=1)

    def to_schedule(self) -> PenaltySchedule:
        return PenaltySchedule(**self.model_dump())


class SystemSettings(BaseModel):
    """CRB bounds and selection settings.

    With ``eta_reference="baseline"`` the bounds are multiples of the CRB of
    an equal-power round-robin detection frame over all receivers; unset
    bounds are unconstrained.
    """

    model_config = ConfigDict(extra="forbid")

    objective: Literal["minimize_d", "minimize_v"] = "minimize_d"
    eta_d: Optional[float] = Field(default=None, gt=0)
    eta_v: Optional[float] = Field(default=None, gt=0)
    eta_reference: Literal["absolute", "baseline"] = "absolute"
    num_selected_receivers: int = Field(default=1, ge=1)
    comm_illumination: bool = False
    index_convention: Literal["literal", "offset"] = "literal"


class SolverSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tol: float = Field(default=1e-7, gt=0)
    max_iter: int = Field(default=500, ge=1)
    penalty: PenaltySettings = Field(default_factory=PenaltySettings)
    bisection_tol: float = Field(default=1e-3, gt=0)
    pattern_tol: float = Field(default=1e-8, gt=0)
    pattern_samples: int = Field(default=181, ge=3)
    pattern_max_iter: int = Field(default=3000, ge=1)
    oversample: int = Field(default=8, ge=2)


class HeatmapSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    span_m: float = Field(default=20.0, gt=0)
    steps: int = Field(default=11, ge=1)


class ExperimentSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    sweep: List[float] = Field(default_factory=list)
    sweep_mode: Literal["eta_d", "eta_v"] = "eta_d"
    allocation_only: bool = False
    seed: int = 0
    output_dir: str = "results"
    heatmap: HeatmapSettings = Field(default_factory=HeatmapSettings)

    @model_validator(mode="after")
    def _check_sweep(self) -> "ExperimentSettings":
        if any(v <= 0 for v in self.sweep):
            raise ValueError("sweep values must be positive")
        if self.sweep != sorted(self.sweep):
            raise ValueError("sweep values must be sorted")
        return self


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scenario: ScenarioSettings
    system: SystemSettings = Field(default_factory=SystemSettings)
    solver: SolverSettings = Field(default_factory=SolverSettings)
    experiment: ExperimentSettings = Field(default_factory=ExperimentSettings)

    @model_validator(mode="after")
    def _check_selection(self) -> "RunConfig":
        num_receivers = len(self.scenario.receivers())
        if self.system.num_selected_receivers > num_receivers:
            raise ValueError(
                f"num_selected_receivers ({self.system.num_selected_receivers}) "
                f"exceeds the number of receivers ({num_receivers})"
            )
        return self

    @property
    def eta_d(self) -> float:
        return self.system.eta_d if self.system.eta_d is not None else np.inf

    @property
    def eta_v(self) -> float:
        return self.system.eta_v if self.system.eta_v is not None else np.inf


_TARGETS = [[289.8, 77.6], [212.1, 212.1]]
_VELOCITIES = [[20.0, 0.0], [20.0, 0.0]]
_USERS = [[24.8, 283.2], [109.5, 300.8]]
_SUBAREAS = [[0.0, 30.0], [30.0, 60.0]]

PRESETS: Dict[str, Dict[str, Any]] = {
    "paper_default": {
        "scenario": {
            "receiver_ring": {"radius": 50.0, "angles_deg": [0.0, 60.0, 180.0, 240.0]},
            "target_positions": _TARGETS,
            "target_velocities": _VELOCITIES,
            "user_positions": _USERS,
            "detection_subarea_angles": _SUBAREAS,
        },
        "system": {"eta_d": 2.0, "eta_reference": "baseline", "num_selected_receivers": 2},
        "experiment": {"sweep": [1.5, 2.0, 4.0, 8.0, 16.0]},
    },
    "desk_default": {
        "scenario": {
            "receiver_ring": {"radius": 50.0, "angles_deg": [0.0, 72.0, 144.0, 216.0, 288.0]},
            "target_positions": _TARGETS,
            "target_velocities": _VELOCITIES,
            "user_positions": _USERS,
            "detection_subarea_angles": _SUBAREAS,
            "num_subcarriers": 16,
            "num_tx_antennas": 8,
            "num_symbols": 8,
        },
        "system": {"eta_d": 2.0, "eta_reference": "baseline", "num_selected_receivers": 3},
        "experiment": {"sweep": [1.5, 2.0, 4.0, 8.0, 16.0]},
    },
    "lemma_default": {
        "scenario": {
            "receiver_ring": {"radius": 50.0, "angles_deg": [0.0, 180.0]},
            "target_positions": [[1732.1, 1000.0]],
            "target_velocities": [[0.0, 0.0]],
            "user_positions": [[100.0, 300.0]],
            "detection_subarea_angles": [[15.0, 45.0]],
            "num_subcarriers": 16,
            "num_tx_antennas": 4,
            "num_symbols": 8,
        },
        "system": {"num_selected_receivers": 2},
    },
}


def _set_dotted(config: Dict[str, Any], dotted: str, value: Any) -> None:
    node = config
    *parents, leaf = dotted.split(".")
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value


def _format_validation_error(error: ValidationError) -> str:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first["loc"])
    message = first["msg"]
    if location:
        return f"Invalid configuration at {location}: {message}"
    return f"Invalid configuration: {message}"


class ConfigManager:
    """Loads a :class:`RunConfig` from a file or preset with env overrides."""

    ENV_MAPPING = {
        "DFRC_SEED": "experiment.seed",
        "DFRC_OUTPUT_DIR": "experiment.output_dir",
        "DFRC_TOL": "solver.tol",
    }

    def __init__(
        self,
        config_path: Optional[Union[str, Path]] = None,
        overrides: Optional[Dict[str, Any]] = None,
    ):
        """Initialize the config manager.

        Args:
            config_path: JSON/TOML file or a preset name. Defaults to
                ``desk_default``.
            overrides: Dotted keys (``"experiment.seed"``) applied last.
        """
        self.config_path = config_path
        self.overrides = overrides or {}
        self._scenario_cache: TTLCache = TTLCache(maxsize=16, ttl=3600)
        self._load_config()

    def _read_source(self) -> Dict[str, Any]:
        source = self.config_path or "desk_default"
        if isinstance(source, str) and source in PRESETS:
            return copy.deepcopy(PRESETS[source])

        path = Path(source)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}", path=str(path))
        try:
            if path.suffix == ".toml":
                if tomllib is None:
                    raise ConfigError("TOML configs need Python 3.11+", path=str(path))
                with open(path, "rb") as f:
                    return tomllib.load(f)
            with open(path) as f:
                return json.load(f)
        except ValueError as e:
            raise ConfigError(f"Cannot parse config file {path}: {e}", path=str(path)) from e

    def _load_config(self) -> None:
        raw = self._read_source()

        load_dotenv()
        for env_key, dotted in self.ENV_MAPPING.items():
            if env_value := os.getenv(env_key):
                _set_dotted(raw, dotted, env_value)
        for dotted, value in self.overrides.items():
            if value is not None:
                _set_dotted(raw, dotted, value)

        try:
            self.config = RunConfig.model_validate(raw)
        except ValidationError as e:
            message = _format_validation_error(e)
            logger.error("Configuration rejected", error=message)
            raise ConfigError(message) from e

        logger.info(
            "Configuration loaded",
            source=str(self.config_path or "desk_default"),
            seed=self.config.experiment.seed,
        )

    def build_scenario(self, seed: Optional[int] = None) -> Scenario:
        """Scenario for ``seed`` (config seed by default), cached per seed."""
        seed = self.config.experiment.seed if seed is None else seed
        if cached := self._scenario_cache.get(seed):
            return cached
        rng = np.random.default_rng(seed)
        try:
            scenario = self.config.scenario.to_scenario(rng)
        except ValidationError as e:
            raise ConfigError(_format_validation_error(e)) from e
        self._scenario_cache[seed] = scenario
        return scenario
