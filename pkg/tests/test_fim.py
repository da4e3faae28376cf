"""Information blocks, CRB matrices and agreement with a numerical FIM."""

import numpy as np
import pytest

from src.error_handler import SamplingError, SingularInformationError
from src.fim import (
    compute_blocks,
    crb_frame,
    crb_matrices,
    fim_numerical,
    information_sums,
    target_crb,
)
from src.scenario import geometry_partials, radar_pathloss
from src.waveform import detection_only_assignment, make_symbol_grid
from tests.conftest import isotropic

ALL = np.ones(4)


@pytest.fixture
def pbar(scenario):
    return np.full((scenario.num_subcarriers, 1), scenario.total_power_w / scenario.num_subcarriers)


def test_doubling_power_halves_the_bound(blocks, pbar):
    base = crb_matrices(blocks, pbar, ALL)[0]
    doubled = crb_matrices(blocks, 2.0 * pbar, ALL)[0]
    np.testing.assert_allclose(doubled.C_d, 0.5 * base.C_d, rtol=1e-10)
    np.testing.assert_allclose(doubled.C_v, 0.5 * base.C_v, rtol=1e-10)


def test_crb_is_inverse_of_information_sum(blocks, pbar):
    F_d, F_v = information_sums(blocks, pbar, ALL)
    pair = crb_matrices(blocks, pbar, ALL)[0]
    np.testing.assert_allclose(pair.C_d @ F_d[0], np.eye(2), atol=1e-8)
    np.testing.assert_allclose(pair.C_v, np.linalg.inv(F_v[0]), rtol=1e-10)
    assert pair.worst_location == max(pair.C_d[0, 0], pair.C_d[1, 1])


def test_target_crb_matches_crb_matrices(blocks, pbar):
    pair = target_crb(blocks, 0, pbar, ALL)
    reference = crb_matrices(blocks, pbar, ALL)[0]
    np.testing.assert_allclose(pair.C_d, reference.C_d)
    np.testing.assert_allclose(pair.C_v, reference.C_v)


def test_singular_diagnostics(blocks, pbar):
    with pytest.raises(SingularInformationError) as info:
        crb_matrices(blocks, pbar, np.zeros(4))
    assert info.value.diagnostic == "no active receiver"

    with pytest.raises(SingularInformationError) as info:
        crb_matrices(blocks, np.zeros_like(pbar), ALL)
    assert info.value.diagnostic == "no detection power"

    # One receiver observes a single Doppler direction.
    with pytest.raises(SingularInformationError) as info:
        crb_matrices(blocks, pbar, np.array([1, 0, 0, 0]))
    assert info.value.diagnostic == "degenerate geometry"
    assert info.value.exit_code == 4


def test_more_receivers_never_hurt(blocks, pbar):
    two = crb_matrices(blocks, pbar, np.array([1, 1, 0, 0]))[0]
    three = crb_matrices(blocks, pbar, np.array([1, 1, 1, 0]))[0]
    four = crb_matrices(blocks, pbar, ALL)[0]
    assert two.worst_location >= three.worst_location >= four.worst_location
    assert two.worst_velocity >= three.worst_velocity >= four.worst_velocity
    assert np.linalg.eigvalsh(two.C_d - four.C_d).min() >= -1e-12 * np.abs(two.C_d).max()


def test_zero_velocity_location_block_is_pure_delay(make_scenario):
    scenario = make_scenario(target_velocities=[(0.0, 0.0)])
    blocks = compute_blocks(scenario, isotropic(scenario))
    r = 1
    geom = geometry_partials(scenario, 0, r)
    prefactor = 8 * np.pi**2 * radar_pathloss(scenario, 0, r) ** 2 / scenario.radar_noise_var
    for k in range(scenario.num_subcarriers):
        expected = (
            prefactor
            * (k + 1) ** 2
            * scenario.subcarrier_spacing_hz**2
            * scenario.num_symbols
            * np.outer(geom.delay_grad, geom.delay_grad)
        )
        np.testing.assert_allclose(blocks.D[0, r, k, 0], expected, rtol=1e-10)
    np.testing.assert_allclose(blocks.beam_gain, 1.0)


def test_velocity_block_symbol_sums(scenario):
    covariances = isotropic(scenario)
    literal = compute_blocks(scenario, covariances, convention="literal")
    offset = compute_blocks(scenario, covariances, convention="offset")
    # L = 4: Σ l² is 30 over 1..4 and 14 over 0..3.
    np.testing.assert_allclose(literal.V, offset.V * 30 / 14, rtol=1e-12)
    with pytest.raises(ValueError):
        compute_blocks(scenario, covariances, convention="zero")


def test_comm_illumination_adds_information(scenario, pbar):
    blocks = compute_blocks(scenario, isotropic(scenario), include_comm=True)
    assert blocks.comm_D.shape == (1, 4, 4, 1, 2, 2)
    without = crb_matrices(blocks, pbar, ALL)[0]
    with_comm = crb_matrices(blocks, pbar, ALL, pbar_c=np.ones((4, 1)))[0]
    assert with_comm.worst_location < without.worst_location
    assert with_comm.worst_velocity < without.worst_velocity


def test_crb_frame_columns(blocks, pbar):
    frame = crb_frame(crb_matrices(blocks, pbar, ALL))
    assert list(frame.columns) == ["n", "crb_x", "crb_y", "crb_vx", "crb_vy"]
    assert len(frame) == 1
    assert (frame[["crb_x", "crb_y", "crb_vx", "crb_vy"]].to_numpy() > 0).all()


@pytest.fixture
def two_receiver_scene(make_scenario):
    return make_scenario(
        receiver_positions=[(50.0, 0.0), (0.0, 50.0)],
        num_subcarriers=8,
        num_symbols=4,
    )


def test_analytic_blocks_match_numerical_fim(two_receiver_scene, rng):
    scenario = two_receiver_scene
    covariances = isotropic(scenario)
    assignment, powers = detection_only_assignment(scenario)
    grid = make_symbol_grid(scenario, assignment, powers, rng)
    mask = np.ones(2)

    numerical = fim_numerical(scenario, grid, covariances, mask)
    F_d, F_v = information_sums(
        compute_blocks(scenario, covariances), grid.detection_weights(), mask
    )
    for got, want in ((numerical[:2, :2], F_d[0]), (numerical[2:, 2:], F_v[0])):
        np.testing.assert_allclose(got, want, rtol=1e-3, atol=1e-6 * np.abs(want).max())


def test_numerical_fim_is_symmetric_psd(two_receiver_scene, rng):
    scenario = two_receiver_scene
    assignment, powers = detection_only_assignment(scenario)
    grid = make_symbol_grid(scenario, assignment, powers, rng)
    F = fim_numerical(scenario, grid, isotropic(scenario), np.ones(2), amplitude="realized")
    np.testing.assert_allclose(F, F.T, rtol=1e-10, atol=1e-12 * np.abs(F).max())
    assert np.linalg.eigvalsh(F).min() >= -1e-9 * np.abs(F).max()


def test_numerical_fim_rejects_tiny_steps(two_receiver_scene, rng):
    scenario = two_receiver_scene
    assignment, powers = detection_only_assignment(scenario)
    grid = make_symbol_grid(scenario, assignment, powers, rng)
    with pytest.raises(SamplingError):
        fim_numerical(scenario, grid, isotropic(scenario), np.ones(2), tau_step=1e-25)


def test_wider_band_sharpens_location_only(make_scenario):
    crbs = []
    for num_subcarriers in (32, 64):
        scenario = make_scenario(num_subcarriers=num_subcarriers)
        blocks = compute_blocks(scenario, isotropic(scenario))
        pbar = np.full((num_subcarriers, 1), scenario.total_power_w / num_subcarriers)
        crbs.append(crb_matrices(blocks, pbar, ALL)[0])
    narrow, wide = crbs
    np.testing.assert_allclose(wide.C_v, narrow.C_v, rtol=1e-6)
    assert all(w < n for w, n in zip(wide.location_diag, narrow.location_diag))
