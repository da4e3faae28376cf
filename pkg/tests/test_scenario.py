"""Geometry, channel and path-partial tests."""

import numpy as np
import pytest
from pydantic import ValidationError

from src.error_handler import DegenerateGeometryError
from src.scenario import (
    SPEED_OF_LIGHT,
    array_steering,
    bistatic_delay,
    bistatic_doppler,
    comm_channel,
    geometry_partials,
    radar_pathloss,
    receivers_on_ring,
    steering_vector,
)


def test_bistatic_delay_sums_both_legs(make_scenario):
    scenario = make_scenario(receiver_positions=[(50.0, 0.0)])
    expected = (np.hypot(289.8, 77.6) + np.hypot(239.8, 77.6)) / SPEED_OF_LIGHT
    assert bistatic_delay(scenario, 0, 0) == pytest.approx(expected, rel=1e-12)
    assert bistatic_delay(scenario, 0, 0) == pytest.approx(1.8415e-6, rel=1e-3)


def test_bistatic_delay_receiver_on_target(make_scenario):
    scenario = make_scenario(receiver_positions=[(289.8, 77.6)])
    assert bistatic_delay(scenario, 0, 0) == pytest.approx(
        np.hypot(289.8, 77.6) / SPEED_OF_LIGHT, rel=1e-12
    )


def test_bistatic_doppler_reference_value(make_scenario, tenth_meter_carrier):
    scenario = make_scenario(receiver_positions=[(50.0, 0.0)], carrier_hz=tenth_meter_carrier)
    assert bistatic_doppler(scenario, 0, 0) == pytest.approx(-383.5, abs=0.1)


def test_stationary_target_has_no_doppler(make_scenario):
    scenario = make_scenario(target_velocities=[(0.0, 0.0)])
    assert all(bistatic_doppler(scenario, 0, r) == 0.0 for r in range(4))


def test_orthogonal_velocity_has_no_doppler(make_scenario):
    # Target on the x axis, receiver behind the BS: both legs are horizontal.
    scenario = make_scenario(
        target_positions=[(300.0, 0.0)],
        target_velocities=[(0.0, 15.0)],
        receiver_positions=[(-50.0, 0.0)],
        detection_subarea_angles=[(-15.0, 15.0)],
    )
    assert bistatic_doppler(scenario, 0, 0) == pytest.approx(0.0, abs=1e-12)


def test_doppler_raises_on_coincident_receiver(make_scenario):
    scenario = make_scenario(receiver_positions=[(289.8, 77.6)])
    with pytest.raises(DegenerateGeometryError):
        bistatic_doppler(scenario, 0, 0)


def test_steering_vector_broadside_is_all_ones(scenario):
    np.testing.assert_allclose(steering_vector(scenario, 2, 0.0), np.ones(4))


def test_steering_phases_at_thirty_degrees():
    a = array_steering(4, 0.5, np.radians(30.0))
    expected = np.exp(1j * np.array([0.0, -np.pi / 2, -np.pi, -1.5 * np.pi]))
    np.testing.assert_allclose(a, expected, atol=1e-12)


def test_first_subcarrier_has_half_wavelength_spacing(scenario):
    assert scenario.spacing_ratio(0) == pytest.approx(0.5, rel=1e-12)
    assert scenario.spacing_ratio(3) > 0.5


def test_steering_vector_rejects_bad_subcarrier(scenario):
    with pytest.raises(ValueError):
        steering_vector(scenario, 4, 0.0)


def test_radar_pathloss_matches_radar_equation(make_scenario, tenth_meter_carrier):
    scenario = make_scenario(
        target_positions=[(300.0, 0.0)],
        receiver_positions=[(300.0, 300.0)],
        detection_subarea_angles=[(-15.0, 15.0)],
        carrier_hz=tenth_meter_carrier,
    )
    expected = np.sqrt(0.1**2 * 0.1 / ((4 * np.pi) ** 3 * 300.0**4))
    assert radar_pathloss(scenario, 0, 0) == pytest.approx(expected, rel=1e-9)


def test_radar_pathloss_scaling(make_scenario):
    base = make_scenario(
        target_positions=[(300.0, 0.0)],
        receiver_positions=[(300.0, 100.0)],
        detection_subarea_angles=[(-15.0, 15.0)],
    )
    farther = make_scenario(
        target_positions=[(300.0, 0.0)],
        receiver_positions=[(300.0, 200.0)],
        detection_subarea_angles=[(-15.0, 15.0)],
    )
    brighter = base.model_copy(update={"rcs_per_receiver": [0.4]})
    assert radar_pathloss(farther, 0, 0) == pytest.approx(0.5 * radar_pathloss(base, 0, 0))
    assert radar_pathloss(brighter, 0, 0) == pytest.approx(2.0 * radar_pathloss(base, 0, 0))


def test_comm_channel_norm_and_broadside(make_scenario):
    scenario = make_scenario(user_positions=[(200.0, 0.0)])
    h = comm_channel(scenario, 1, 0)
    amplitude = scenario.wavelength_m / (4 * np.pi * 200.0)
    assert np.linalg.norm(h) == pytest.approx(amplitude * 2.0)
    np.testing.assert_allclose(h, amplitude * np.ones(4), atol=1e-15)

    farther = make_scenario(user_positions=[(400.0, 0.0)])
    assert np.linalg.norm(comm_channel(farther, 1, 0)) == pytest.approx(0.5 * np.linalg.norm(h))


def _moved(scenario, position=None, velocity=None):
    update = {}
    if position is not None:
        update["target_positions"] = [tuple(position)]
    if velocity is not None:
        update["target_velocities"] = [tuple(velocity)]
    return scenario.model_copy(update=update)


@pytest.mark.parametrize("r", [0, 1, 2, 3])
def test_partials_match_finite_differences(scenario, r):
    geom = geometry_partials(scenario, 0, r)
    d = np.array(scenario.target_positions[0])
    v = np.array(scenario.target_velocities[0])
    step = 1e-3

    delay_fd = np.zeros(2)
    doppler_fd = np.zeros(2)
    velocity_fd = np.zeros(2)
    for i in range(2):
        e = np.eye(2)[i] * step
        plus, minus = _moved(scenario, d + e), _moved(scenario, d - e)
        delay_fd[i] = (bistatic_delay(plus, 0, r) - bistatic_delay(minus, 0, r)) / (2 * step)
        doppler_fd[i] = (bistatic_doppler(plus, 0, r) - bistatic_doppler(minus, 0, r)) / (2 * step)
        plus, minus = _moved(scenario, velocity=v + e), _moved(scenario, velocity=v - e)
        velocity_fd[i] = (bistatic_doppler(plus, 0, r) - bistatic_doppler(minus, 0, r)) / (2 * step)

    for analytic, numeric in (
        (geom.delay_grad, delay_fd),
        (geom.doppler_grad_pos, doppler_fd),
        (geom.doppler_grad_vel, velocity_fd),
    ):
        assert np.linalg.norm(analytic - numeric) <= 1e-6 * np.linalg.norm(analytic)


def _shifted(scenario, offset):
    def move(points):
        return [tuple(np.add(p, offset)) for p in points]

    return scenario.model_copy(
        update={
            "bs_position": tuple(np.add(scenario.bs_position, offset)),
            "receiver_positions": move(scenario.receiver_positions),
            "target_positions": move(scenario.target_positions),
            "user_positions": move(scenario.user_positions),
        }
    )


@pytest.mark.parametrize("r", [0, 1, 2, 3])
def test_path_geometry_is_translation_invariant(scenario, r):
    shifted = _shifted(scenario, (100.0, -40.0))
    assert bistatic_delay(shifted, 0, r) == pytest.approx(bistatic_delay(scenario, 0, r), rel=1e-9)
    assert bistatic_doppler(shifted, 0, r) == pytest.approx(
        bistatic_doppler(scenario, 0, r), rel=1e-9
    )
    moved, base = geometry_partials(shifted, 0, r), geometry_partials(scenario, 0, r)
    assert moved.aod_rad == pytest.approx(base.aod_rad, rel=1e-9)
    for name in ("delay_grad", "doppler_grad_pos", "doppler_grad_vel"):
        expected = getattr(base, name)
        np.testing.assert_allclose(
            getattr(moved, name), expected, rtol=1e-9, atol=1e-9 * np.linalg.norm(expected)
        )
    np.testing.assert_allclose(comm_channel(shifted, 0, 0), comm_channel(scenario, 0, 0), rtol=1e-9)


def test_delay_never_below_direct_path(scenario, rng):
    bs = np.asarray(scenario.bs_position)
    for _ in range(200):
        target, receiver = rng.uniform(-500.0, 500.0, size=(2, 2))
        placed = scenario.model_copy(
            update={"target_positions": [tuple(target)], "receiver_positions": [tuple(receiver)]}
        )
        direct = np.linalg.norm(bs - receiver) / SPEED_OF_LIGHT
        assert bistatic_delay(placed, 0, 0) >= direct * (1 - 1e-12)


def test_zero_velocity_has_no_position_doppler_gradient(make_scenario):
    scenario = make_scenario(target_velocities=[(0.0, 0.0)])
    np.testing.assert_array_equal(geometry_partials(scenario, 0, 1).doppler_grad_pos, 0.0)


def test_scenario_validation(make_scenario):
    with pytest.raises(ValidationError, match="rcs_per_receiver"):
        make_scenario(rcs_per_receiver=[0.1])
    with pytest.raises(ValidationError, match="outside"):
        make_scenario(detection_subarea_angles=[(30.0, 60.0)])
    with pytest.raises(ValidationError, match="overlap"):
        make_scenario(
            target_positions=[(289.8, 77.6), (212.1, 212.1)],
            target_velocities=[(20.0, 0.0), (20.0, 0.0)],
            detection_subarea_angles=[(0.0, 50.0), (30.0, 60.0)],
        )


def test_with_target_skips_subarea_check(scenario):
    moved = scenario.with_target(0, (0.0, 300.0))
    assert moved.target_positions[0] == (0.0, 300.0)
    assert scenario.target_positions[0] == (289.8, 77.6)


def test_receivers_on_ring_mixed_radii():
    points = receivers_on_ring((10.0, 0.0), [50.0, 100.0], [0.0, 90.0])
    np.testing.assert_allclose(points[0], (60.0, 0.0), atol=1e-12)
    np.testing.assert_allclose(points[1], (10.0, 100.0), atol=1e-12)


def test_timing_properties(scenario):
    assert scenario.symbol_duration_s == pytest.approx(1 / 15e3)
    assert scenario.symbol_period_s == pytest.approx(1 / 15e3 + 4.7e-6)
