"""Shared fixtures: small scenarios with isotropic covariances."""

from typing import Any, Callable

import numpy as np
import pytest

from src.beampattern import CovarianceSet
from src.fim import FimBlocks, compute_blocks
from src.scenario import SPEED_OF_LIGHT, Scenario

RING = [(50.0, 0.0), (0.0, 50.0), (-50.0, 0.0), (0.0, -50.0)]


def build_scenario(**overrides: Any) -> Scenario:
    fields = dict(
        receiver_positions=RING,
        target_positions=[(289.8, 77.6)],
        target_velocities=[(20.0, 0.0)],
        user_positions=[(24.8, 283.2)],
        detection_subarea_angles=[(0.0, 30.0)],
        carrier_hz=3e9,
        subcarrier_spacing_hz=15e3,
        num_subcarriers=4,
        num_tx_antennas=4,
        num_symbols=4,
        cp_duration_s=4.7e-6,
        total_power_w=5.0,
        radar_noise_var=1.5e-18,
        comm_noise_var=1.5e-14,
    )
    fields.update(overrides)
    fields.setdefault("rcs_per_receiver", [0.1] * len(fields["receiver_positions"]))
    return Scenario(**fields)


@pytest.fixture
def make_scenario() -> Callable[..., Scenario]:
    return build_scenario


@pytest.fixture
def scenario() -> Scenario:
    return build_scenario()


@pytest.fixture
def tenth_meter_carrier() -> float:
    """Carrier frequency with a wavelength of exactly 0.1 m."""
    return SPEED_OF_LIGHT / 0.1


def isotropic(scenario: Scenario) -> CovarianceSet:
    return CovarianceSet.isotropic(
        scenario.num_subcarriers,
        max(len(scenario.detection_subarea_angles), 1),
        scenario.num_tx_antennas,
    )


@pytest.fixture
def blocks(scenario: Scenario) -> FimBlocks:
    return compute_blocks(scenario, isotropic(scenario))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
