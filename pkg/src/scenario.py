"""Scene geometry, RF constants, channels and bistatic path partials."""

from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .error_handler import DegenerateGeometryError

logger = structlog.get_logger(__name__)

SPEED_OF_LIGHT = 299_792_458.0

# Distances below this are treated as coincident points.
COINCIDENCE_TOL_M = 1e-9

Point = Tuple[float, float]


class Scenario(BaseModel):
    """Geometry and RF parameters of a single-BS distributed DFRC deployment.

    Indices are zero-based everywhere: subcarrier ``k`` sits at carrier
    offset ``k * subcarrier_spacing_hz``.
    """

    model_config = ConfigDict(frozen=True)

    bs_position: Point = (0.0, 0.0)
    receiver_positions: List[Point] = Field(min_length=1)
    target_positions: List[Point] = Field(default_factory=list)
    target_velocities: List[Point] = Field(default_factory=list)
    user_positions: List[Point] = Field(default_factory=list)
    carrier_hz: float = Field(gt=0)
    subcarrier_spacing_hz: float = Field(gt=0)
    num_subcarriers: int = Field(ge=1)
    num_tx_antennas: int = Field(ge=2)
    num_symbols: int = Field(ge=1)
    cp_duration_s: float = Field(ge=0)
    total_power_w: float = Field(gt=0)
    radar_noise_var: float = Field(gt=0)
    comm_noise_var: float = Field(gt=0)
    rcs_per_receiver: List[float]
    detection_subarea_angles: List[Tuple[float, float]] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_consistency(self) -> "Scenario":
        if len(self.rcs_per_receiver) != len(self.receiver_positions):
            raise ValueError(
                "rcs_per_receiver must have one entry per receiver "
                f"({len(self.rcs_per_receiver)} != {len(self.receiver_positions)})"
            )
        if any(rcs <= 0 for rcs in self.rcs_per_receiver):
            raise ValueError("rcs_per_receiver entries must be positive")
        if len(self.target_velocities) != len(self.target_positions):
            raise ValueError("target_velocities must match target_positions")
        if len(self.detection_subarea_angles) != len(self.target_positions):
            raise ValueError(
                "detection_subarea_angles needs exactly one subarea per target"
            )

        ordered = sorted(self.detection_subarea_angles)
        for lo, hi in ordered:
            if not -90.0 <= lo < hi <= 90.0:
                raise ValueError(
                    f"detection_subarea_angles interval [{lo}, {hi}] must satisfy "
                    "-90 <= lo < hi <= 90"
                )
        for (_, hi), (lo_next, _) in zip(ordered, ordered[1:]):
            if hi > lo_next:
                raise ValueError("detection_subarea_angles intervals overlap")

        for n, (lo, hi) in enumerate(self.detection_subarea_angles):
            aod = np.degrees(target_aod(self, n))
            if not lo - 1e-9 <= aod <= hi + 1e-9:
                raise ValueError(
                    f"target {n} AOD {aod:.3f} deg lies outside its "
                    f"detection_subarea_angles interval [{lo}, {hi}]"
                )
        return self

    @property
    def num_receivers(self) -> int:
        return len(self.receiver_positions)

    @property
    def num_targets(self) -> int:
        return len(self.target_positions)

    @property
    def num_users(self) -> int:
        return len(self.user_positions)

    @property
    def symbol_duration_s(self) -> float:
        """Useful symbol duration T = 1/Δf."""
        return 1.0 / self.subcarrier_spacing_hz

    @property
    def symbol_period_s(self) -> float:
        """Full symbol period T_s = T + T_cp."""
        return self.symbol_duration_s + self.cp_duration_s

    @property
    def wavelength_m(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz

    @property
    def element_spacing_m(self) -> float:
        """Half carrier wavelength array spacing."""
        return SPEED_OF_LIGHT / (2.0 * self.carrier_hz)

    def subcarrier_wavelength(self, k: int) -> float:
        return SPEED_OF_LIGHT / (self.carrier_hz + k * self.subcarrier_spacing_hz)

    def spacing_ratio(self, k: int) -> float:
        """Element spacing over the subcarrier wavelength, d / λ_k."""
        return self.element_spacing_m / self.subcarrier_wavelength(k)

    def with_target(self, n: int, position: Sequence[float]) -> "Scenario":
        """Copy of the scenario with target ``n`` moved to ``position``.

        The copy skips validation so hypothetical positions may leave the
        target's detection subarea.
        """
        targets = list(self.target_positions)
        targets[n] = (float(position[0]), float(position[1]))
        return self.model_copy(update={"target_positions": targets})


@dataclass(frozen=True)
class PathGeometry:
    """Bistatic delay/Doppler of one (target, receiver) path and their partials."""

    delay_s: float
    doppler_hz: float
    aod_rad: float
    delay_grad: np.ndarray
    doppler_grad_pos: np.ndarray
    doppler_grad_vel: np.ndarray


def _points(scenario: Scenario, n: int, r: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        np.asarray(scenario.bs_position, dtype=float),
        np.asarray(scenario.target_positions[n], dtype=float),
        np.asarray(scenario.receiver_positions[r], dtype=float),
    )


def _unit(vector: np.ndarray, what: str) -> Tuple[np.ndarray, float]:
    distance = float(np.linalg.norm(vector))
    if distance < COINCIDENCE_TOL_M:
        raise DegenerateGeometryError(f"Coincident points on the {what} leg", leg=what)
    return vector / distance, distance


def bistatic_delay(scenario: Scenario, n: int, r: int) -> float:
    """Propagation delay BS → target ``n`` → receiver ``r`` in seconds."""
    p0, d, pr = _points(scenario, n, r)
    return float((np.linalg.norm(p0 - d) + np.linalg.norm(d - pr)) / SPEED_OF_LIGHT)


def bistatic_doppler(scenario: Scenario, n: int, r: int) -> float:
    """Doppler shift of the path through target ``n`` seen at receiver ``r``.

    Uses the carrier wavelength for both legs.

    Raises:
        DegenerateGeometryError: If the target coincides with the BS or receiver.
    """
    p0, d, pr = _points(scenario, n, r)
    v = np.asarray(scenario.target_velocities[n], dtype=float)
    u_tx, _ = _unit(p0 - d, "transmit")
    u_rx, _ = _unit(pr - d, "receive")
    return float(v @ (u_tx + u_rx) / scenario.wavelength_m)


def target_aod(scenario: Scenario, n: int) -> float:
    """Angle of departure of target ``n`` from the BS, radians (atan2)."""
    dx, dy = np.subtract(scenario.target_positions[n], scenario.bs_position)
    return float(np.arctan2(dy, dx))


def user_angle(scenario: Scenario, m: int) -> float:
    dx, dy = np.subtract(scenario.user_positions[m], scenario.bs_position)
    return float(np.arctan2(dy, dx))


def array_steering(
    num_antennas: int, spacing_ratio: float, angles: Union[float, np.ndarray]
) -> np.ndarray:
    """Uniform linear array response.

    Args:
        num_antennas: Number of transmit antennas T_x.
        spacing_ratio: Element spacing over wavelength.
        angles: Scalar angle or array of angles in radians.

    Returns:
        ``(T_x,)`` vector for a scalar angle, ``(T_x, Q)`` for Q angles.
    """
    elements = np.arange(num_antennas)
    phase = -2.0 * np.pi * spacing_ratio * np.multiply.outer(elements, np.sin(angles))
    return np.exp(1j * phase)


def steering_vector(
    scenario: Scenario, k: int, angle: Union[float, np.ndarray]
) -> np.ndarray:
    """Steering vector a_k(θ) of subcarrier ``k``."""
    if not 0 <= k < scenario.num_subcarriers:
        raise ValueError(f"Subcarrier index {k} outside [0, {scenario.num_subcarriers})")
    return array_steering(scenario.num_tx_antennas, scenario.spacing_ratio(k), angle)


def radar_pathloss(scenario: Scenario, n: int, r: int) -> float:
    """Bistatic amplitude attenuation c_{n,r} (radar equation, carrier λ)."""
    p0, d, pr = _points(scenario, n, r)
    _, d_tx = _unit(p0 - d, "transmit")
    _, d_rx = _unit(pr - d, "receive")
    lam = scenario.wavelength_m
    rcs = scenario.rcs_per_receiver[r]
    return float(np.sqrt(lam**2 * rcs / ((4 * np.pi) ** 3 * d_tx**2 * d_rx**2)))


def comm_channel(scenario: Scenario, k: int, m: int) -> np.ndarray:
    """Line-of-sight channel h_{k,m} from the BS array to user ``m``."""
    offset = np.subtract(scenario.user_positions[m], scenario.bs_position)
    _, distance = _unit(offset, "user")
    amplitude = scenario.wavelength_m / (4 * np.pi * distance)
    return amplitude * steering_vector(scenario, k, user_angle(scenario, m))


def channel_gain_matrix(scenario: Scenario) -> np.ndarray:
    """Normalized channel gains ‖h_{k,m}‖²/σ_z² as a (K, M) array."""
    gains = np.zeros((scenario.num_subcarriers, scenario.num_users))
    for k in range(scenario.num_subcarriers):
        for m in range(scenario.num_users):
            h = comm_channel(scenario, k, m)
            gains[k, m] = np.vdot(h, h).real / scenario.comm_noise_var
    return gains


def geometry_partials(scenario: Scenario, n: int, r: int) -> PathGeometry:
    """Delay/Doppler of path (n, r) with analytic gradients w.r.t. d_n and v_n.

    The delay does not depend on velocity, so its velocity gradient is zero
    and omitted.
    """
    p0, d, pr = _points(scenario, n, r)
    v = np.asarray(scenario.target_velocities[n], dtype=float)
    lam = scenario.wavelength_m

    u_tx, dist_tx = _unit(p0 - d, "transmit")
    u_rx, dist_rx = _unit(pr - d, "receive")

    delay_grad = -(u_tx + u_rx) / SPEED_OF_LIGHT
    doppler_grad_vel = (u_tx + u_rx) / lam

    # d/dd of v·(p-d)/|p-d| = -(I - u u^T) v / |p-d|
    eye = np.eye(2)
    doppler_grad_pos = -(
        (eye - np.outer(u_tx, u_tx)) @ v / dist_tx
        + (eye - np.outer(u_rx, u_rx)) @ v / dist_rx
    ) / lam

    return PathGeometry(
        delay_s=(dist_tx + dist_rx) / SPEED_OF_LIGHT,
        doppler_hz=float(v @ (u_tx + u_rx) / lam),
        aod_rad=target_aod(scenario, n),
        delay_grad=delay_grad,
        doppler_grad_pos=doppler_grad_pos,
        doppler_grad_vel=doppler_grad_vel,
    )


def receivers_on_ring(
    center: Sequence[float],
    radius: Union[float, Sequence[float]],
    angles_deg: Sequence[float],
) -> List[Point]:
    """Place receivers on a circle (or several radii) around ``center``.

    Args:
        center: Ring center.
        radius: Common radius, or one radius per angle for mixed rings.
        angles_deg: Receiver angles in degrees.

    Returns:
        Receiver positions as (x, y) tuples.
    """
    angles = np.radians(np.asarray(angles_deg, dtype=float))
    radii = np.broadcast_to(np.asarray(radius, dtype=float), angles.shape)
    cx, cy = float(center[0]), float(center[1])
    return [
        (cx + rad * np.cos(a), cy + rad * np.sin(a)) for rad, a in zip(radii, angles)
    ]
