"""Alternation, sweeps and experiment tables on a small scene."""

import dataclasses

import numpy as np
import pytest

from src.allocation import CRB_SLACK, Allocation
from src.beampattern import CovarianceSet
from src.config import ConfigManager, RunConfig
from src.error_handler import InfeasibleAllocationError, SamplingError
from src.fim import compute_blocks, crb_matrices, target_crb
from src.pipeline import (
    HEATMAP_COLUMNS,
    SELECTION_COLUMNS,
    TRADEOFF_COLUMNS,
    PipelineContext,
    TradeoffPoint,
    allocate_fixed,
    alternate,
    baseline_powers,
    crb_heatmap,
    first_mask,
    ici_frame,
    monotone_envelope,
    prepare_context,
    receiver_count_sweep,
    run_failed,
    select_for,
    tradeoff_frame,
    tradeoff_sweep,
)
from tests.conftest import build_scenario

SMALL_RUN = {
    "scenario": {
        "receiver_ring": {"radius": 50.0, "angles_deg": [0.0, 90.0, 180.0, 270.0]},
        "target_positions": [[289.8, 77.6]],
        "target_velocities": [[20.0, 0.0]],
        "user_positions": [[24.8, 283.2]],
        "detection_subarea_angles": [[0.0, 30.0]],
        "rcs_per_receiver": [0.1, 0.1, 0.1, 0.1],
        "num_subcarriers": 8,
        "num_tx_antennas": 4,
        "num_symbols": 4,
    },
    "system": {"eta_d": 4.0, "eta_reference": "baseline", "num_selected_receivers": 2},
    "solver": {"pattern_samples": 91, "pattern_max_iter": 500},
    "experiment": {"sweep": [2.0, 4.0, 8.0]},
}


def with_system(context: PipelineContext, **updates) -> PipelineContext:
    system = context.config.system.model_copy(update=updates)
    return dataclasses.replace(context, config=context.config.model_copy(update={"system": system}))


@pytest.fixture(scope="module")
def context() -> PipelineContext:
    config = RunConfig.model_validate(SMALL_RUN)
    scenario = config.scenario.to_scenario(np.random.default_rng(0))
    return prepare_context(config, scenario)


@pytest.fixture(scope="module")
def alternated(context):
    return alternate(context)


def test_baseline_bounds(context):
    pbar = baseline_powers(context.scenario, context.blocks)
    assert pbar.sum() == pytest.approx(context.scenario.total_power_w)
    assert np.count_nonzero(pbar) == context.scenario.num_subcarriers
    crbs = crb_matrices(context.blocks, pbar, np.ones(4))
    assert context.baseline_crb_d == pytest.approx(crbs[0].worst_location)
    assert context.eta_d == pytest.approx(4.0 * context.baseline_crb_d)
    assert context.eta_v == np.inf


def test_absolute_mode_keeps_bounds(context):
    absolute = with_system(context, eta_reference="absolute")
    assert absolute.absolute(3.0, "d") == 3.0
    assert context.absolute(np.inf, "v") == np.inf


def test_first_mask_is_lexicographic():
    np.testing.assert_array_equal(first_mask(4, 2), [1, 1, 0, 0])


def test_alternation_result_is_consistent(context, alternated):
    mask = alternated.mask.s
    assert mask.sum() == 2
    assert 1 <= alternated.rounds <= 10
    assert alternated.point.mask == alternated.mask.bits

    crbs = crb_matrices(context.blocks, alternated.allocation.pbar_r, mask)
    assert alternated.point.crb_out["crb_x"] == pytest.approx(crbs[0].C_d[0, 0])
    assert alternated.point.crb_out["crb_y"] == pytest.approx(crbs[0].C_d[1, 1])
    assert crbs[0].worst_location <= context.eta_d + CRB_SLACK
    assert alternated.point.rate_bits_per_s == pytest.approx(
        alternated.allocation.rate * context.scenario.subcarrier_spacing_hz
    )


def test_alternation_never_lowers_the_first_rate(context, alternated):
    first = alternated.history[0]["rate"]
    assert alternated.allocation.rate >= first - 1e-9
    assert alternated.history[0]["mask"] == "1100"


def test_all_receivers_selected_skips_selection(context):
    everyone = with_system(context, num_selected_receivers=4)
    result = alternate(everyone)
    assert result.rounds == 1
    assert result.point.mask == "1111"


def test_infeasible_bound_raises_from_alternation(context):
    with pytest.raises(InfeasibleAllocationError):
        alternate(context, eta_d=1e-6 * context.baseline_crb_d)


@pytest.mark.slow
async def test_sweep_records_failed_points(context):
    points = await tradeoff_sweep(context, values=[8.0, 1e-6])
    assert [p.eta_in for p in points] == sorted(p.eta_in for p in points)
    failed, solved = points
    assert failed.status == "infeasible"
    assert np.isnan(failed.rate_bits_per_s)
    assert solved.status in ("optimal", "non_binary")
    assert solved.eta_in == pytest.approx(8.0 * context.baseline_crb_d)
    frame = tradeoff_frame(points)
    assert list(frame.columns) == TRADEOFF_COLUMNS
    assert frame["mask_bits"].iloc[0] == ""


async def test_empty_sweep_is_rejected(context):
    with pytest.raises(ValueError):
        await tradeoff_sweep(context, values=[])


def test_heatmap_center_matches_target_crb(context, alternated):
    frame = crb_heatmap(context, alternated.allocation, alternated.mask.s, span_m=10.0, steps=3)
    assert list(frame.columns) == HEATMAP_COLUMNS
    assert len(frame) == 9
    center = frame.iloc[4]
    x0, y0 = context.scenario.target_positions[0]
    assert (center["x"], center["y"]) == pytest.approx((x0, y0))
    pair = target_crb(context.blocks, 0, alternated.allocation.pbar_r, alternated.mask.s)
    assert center["crb_loc"] == pytest.approx(pair.worst_location, rel=1e-12)
    assert not frame["singular"].any()


def test_heatmap_is_mirror_symmetric(context):
    scenario = build_scenario(
        receiver_positions=[(0.0, 50.0), (0.0, -50.0)],
        target_positions=[(300.0, 0.0)],
        detection_subarea_angles=[(-15.0, 15.0)],
    )
    covariances = CovarianceSet.isotropic(4, 1, 4)
    blocks = compute_blocks(scenario, covariances)
    mirrored = dataclasses.replace(
        context, scenario=scenario, covariances=covariances, blocks=blocks
    )
    allocation = Allocation(
        sigma_c=np.zeros((4, 1)),
        sigma_r=np.ones((4, 1)),
        pbar_c=np.zeros((4, 1)),
        pbar_r=np.full((4, 1), 1.25),
        rate=0.0,
        violation=0.0,
        binary=True,
    )
    frame = crb_heatmap(mirrored, allocation, np.ones(2), span_m=20.0, steps=5)
    grid = frame.pivot(index="x", columns="y", values="crb_loc").to_numpy()
    np.testing.assert_allclose(grid, grid[:, ::-1], rtol=1e-9)


def test_receiver_count_sweep_is_monotone(context, alternated):
    frame = receiver_count_sweep(context, alternated.allocation)
    assert list(frame.columns) == SELECTION_COLUMNS
    assert list(frame["N_r"]) == [1, 2, 3, 4]
    values = frame["eta_star"].to_numpy()
    finite = values[np.isfinite(values)]
    assert np.all(np.diff(finite) <= 1e-12)
    assert frame["mask_bits"].iloc[-1] == "1111"


def test_select_for_returns_one_row(context, alternated):
    frame = select_for(context, alternated.allocation)
    assert list(frame.columns) == SELECTION_COLUMNS
    assert len(frame) == 1
    assert frame["mask_bits"].iloc[0].count("1") == 2


def test_allocate_fixed_uses_first_subset(context):
    result = allocate_fixed(context)
    assert result.point.mask == "1100"
    assert result.rounds == 1
    row = tradeoff_frame([result.point]).iloc[0]
    assert row["subcarriers_comm"] + row["subcarriers_radar"] == 8


def test_ici_frame_layout(context):
    frame = ici_frame(context, np.random.default_rng(3))
    assert list(frame.columns) == ["r", "k", "l", "mode", "residual", "relative"]
    assert set(frame["mode"]) == {"cp_extension", "random"}
    assert len(frame) == 2 * 4 * 8 * 4
    assert (frame["relative"] >= 0).all()


def test_failure_labels():
    assert run_failed(InfeasibleAllocationError("no")) == "infeasible"
    assert run_failed(SamplingError("no")) == "numerical_failure"


def test_preset_context_resolves_bounds():
    manager = ConfigManager("lemma_default", overrides={"solver.pattern_samples": 61})
    context = prepare_context(manager.config, manager.build_scenario())
    assert context.eta_d == np.inf
    assert context.baseline_crb_d > 0


def sweep_record(eta: float, rate: float, status: str = "optimal") -> TradeoffPoint:
    return TradeoffPoint(
        eta_in=eta,
        eta_d=eta,
        eta_v=np.inf,
        rate_bits_per_s=rate,
        crb_out={"crb_x": eta / 2},
        mask="1111",
        status=status,
    )


def test_envelope_reuses_tighter_allocation():
    points = [sweep_record(1.0, 10.0), sweep_record(2.0, 8.0), sweep_record(4.0, 12.0)]
    envelope = monotone_envelope(points)
    assert [p.rate_bits_per_s for p in envelope] == [10.0, 10.0, 12.0]
    assert [p.eta_in for p in envelope] == [1.0, 2.0, 4.0]
    assert envelope[1].eta_d == 2.0
    assert envelope[1].crb_out == {"crb_x": 0.5}


def test_envelope_fills_failed_points_after_a_feasible_one():
    points = [
        sweep_record(1.0, np.nan, "infeasible"),
        sweep_record(2.0, 5.0),
        sweep_record(4.0, np.nan, "numerical_failure"),
    ]
    envelope = monotone_envelope(points)
    assert envelope[0].status == "infeasible"
    assert np.isnan(envelope[0].rate_bits_per_s)
    assert envelope[2].rate_bits_per_s == 5.0
    assert envelope[2].status == "optimal"
    assert envelope[2].eta_in == 4.0


def desk_context(num_subcarriers: int) -> PipelineContext:
    run = {
        "scenario": {
            **SMALL_RUN["scenario"],
            "num_subcarriers": num_subcarriers,
            "num_tx_antennas": 8,
        },
        "system": {"eta_reference": "absolute", "num_selected_receivers": 4},
        "solver": {"pattern_samples": 91, "pattern_max_iter": 500},
        "experiment": {"allocation_only": True},
    }
    config = RunConfig.model_validate(run)
    return prepare_context(config, config.scenario.to_scenario(np.random.default_rng(0)))


@pytest.mark.slow
async def test_more_subcarriers_raise_rate_at_every_bound():
    narrow, wide = desk_context(32), desk_context(64)
    etas = [factor * narrow.baseline_crb_d for factor in (2.0, 4.0, 8.0)]
    narrow_points = await tradeoff_sweep(narrow, values=etas)
    wide_points = await tradeoff_sweep(wide, values=etas)
    for points in (narrow_points, wide_points):
        rates = np.array([p.rate_bits_per_s for p in points])
        assert np.all(np.isfinite(rates))
        assert np.all(np.diff(rates) >= 0.0)
    for low, high in zip(narrow_points, wide_points):
        assert high.eta_in == pytest.approx(low.eta_in)
        assert high.rate_bits_per_s > low.rate_bits_per_s
