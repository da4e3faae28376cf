"""Alternating allocation/selection and the experiment drivers built on it."""

import asyncio
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog

from .allocation import Allocation, algorithm1
from .beampattern import CovarianceSet, design_covariances
from .config import RunConfig
from .error_handler import (
    BracketError,
    DfrcError,
    InfeasibleAllocationError,
    InfeasibleError,
    NumericalError,
    SingularInformationError,
)
from .fim import CrbPair, FimBlocks, compute_blocks, crb_matrices, target_crb
from .scenario import Scenario
from .selection import (
    ReceiverMask,
    SelectionResult,
    best_subset,
    build_instance,
    evaluate_mask,
    select_receivers,
    subsets,
)
from .utils import mask_bits
from .waveform import detection_only_assignment, ici_residual, make_symbol_grid

logger = structlog.get_logger(__name__)

MAX_ROUNDS = 10
RATE_PLATEAU = 1e-4

TRADEOFF_COLUMNS = [
    "eta_in",
    "eta_d",
    "eta_v",
    "rate_bits_s",
    "crb_x",
    "crb_y",
    "crb_vx",
    "crb_vy",
    "subcarriers_comm",
    "subcarriers_radar",
    "power_comm_frac",
    "power_radar_frac",
    "mask_bits",
    "status",
]
SELECTION_COLUMNS = ["N_r", "R_x", "eta_star", "mask_bits"]
HEATMAP_COLUMNS = ["target", "x", "y", "crb_loc", "crb_vel", "singular"]


@dataclass
class PipelineContext:
    """Read-only inputs shared by every solve of one run.

    ``eta_d``/``eta_v`` are absolute bounds; in baseline mode they were
    scaled by the baseline CRBs when the context was prepared.
    """

    config: RunConfig
    scenario: Scenario
    covariances: CovarianceSet
    blocks: FimBlocks
    baseline_pbar_r: np.ndarray
    baseline_crb_d: float
    baseline_crb_v: float
    eta_d: float
    eta_v: float

    @property
    def include_comm(self) -> bool:
        return self.config.system.comm_illumination

    @property
    def num_selected(self) -> int:
        return self.config.system.num_selected_receivers

    def absolute(self, value: float, which: str) -> float:
        """Convert a configured bound to an absolute one."""
        if self.config.system.eta_reference == "absolute" or not np.isfinite(value):
            return float(value)
        base = self.baseline_crb_d if which == "d" else self.baseline_crb_v
        return float(value) * base

    def comm_powers(self, allocation: Allocation) -> Optional[np.ndarray]:
        return allocation.pbar_c if self.include_comm else None


@dataclass
class TradeoffPoint:
    eta_in: float
    eta_d: float
    eta_v: float
    rate_bits_per_s: float
    crb_out: Dict[str, float]
    mask: str
    summary: Dict[str, float] = field(default_factory=dict)
    status: str = "optimal"

    def to_row(self) -> Dict[str, Any]:
        row: Dict[str, Any] = {
            "eta_in": self.eta_in,
            "eta_d": self.eta_d,
            "eta_v": self.eta_v,
            "rate_bits_s": self.rate_bits_per_s,
            "mask_bits": self.mask,
            "status": self.status,
        }
        for key in ("crb_x", "crb_y", "crb_vx", "crb_vy"):
            row[key] = self.crb_out.get(key, np.nan)
        for key in ("subcarriers_comm", "subcarriers_radar", "power_comm_frac", "power_radar_frac"):
            row[key] = self.summary.get(key, np.nan)
        return row


@dataclass
class AlternationResult:
    allocation: Allocation
    mask: ReceiverMask
    point: TradeoffPoint
    rounds: int
    history: List[Dict[str, Any]] = field(default_factory=list)


def baseline_powers(scenario: Scenario, blocks: FimBlocks) -> np.ndarray:
    """(K, N') detection powers of an equal-power round-robin frame."""
    K = scenario.num_subcarriers
    num_subareas = blocks.beam_gain.shape[2]
    pbar_r = np.zeros((K, num_subareas))
    pbar_r[np.arange(K), np.arange(K) % num_subareas] = scenario.total_power_w / K
    return pbar_r


def prepare_context(config: RunConfig, scenario: Scenario) -> PipelineContext:
    """Design covariances, evaluate the information blocks and resolve the bounds.

    Raises:
        SingularInformationError: In baseline mode, if the equal-power frame
            over all receivers has singular information.
    """
    solver = config.solver
    covariances = design_covariances(
        scenario,
        num_samples=solver.pattern_samples,
        tol=solver.pattern_tol,
        max_iter=solver.pattern_max_iter,
    )
    blocks = compute_blocks(
        scenario,
        covariances,
        convention=config.system.index_convention,
        include_comm=config.system.comm_illumination,
    )
    pbar_r = baseline_powers(scenario, blocks)

    base_d = base_v = np.nan
    if scenario.num_targets:
        try:
            crbs = crb_matrices(blocks, pbar_r, np.ones(scenario.num_receivers))
            base_d = max(pair.worst_location for pair in crbs)
            base_v = max(pair.worst_velocity for pair in crbs)
        except SingularInformationError:
            if config.system.eta_reference == "baseline":
                raise
            logger.warning("Baseline CRB is singular")

    context = PipelineContext(
        config=config,
        scenario=scenario,
        covariances=covariances,
        blocks=blocks,
        baseline_pbar_r=pbar_r,
        baseline_crb_d=float(base_d),
        baseline_crb_v=float(base_v),
        eta_d=np.inf,
        eta_v=np.inf,
    )
    context.eta_d = context.absolute(config.eta_d, "d")
    context.eta_v = context.absolute(config.eta_v, "v")
    logger.info(
        "Pipeline context prepared",
        eta_d=context.eta_d,
        eta_v=context.eta_v,
        baseline_crb_d=context.baseline_crb_d,
        baseline_crb_v=context.baseline_crb_v,
    )
    return context


def worst_crbs(crbs: Sequence[CrbPair]) -> Dict[str, float]:
    """Largest value of each CRB diagonal over the targets."""
    return {
        "crb_x": max(float(pair.C_d[0, 0]) for pair in crbs),
        "crb_y": max(float(pair.C_d[1, 1]) for pair in crbs),
        "crb_vx": max(float(pair.C_v[0, 0]) for pair in crbs),
        "crb_vy": max(float(pair.C_v[1, 1]) for pair in crbs),
    }


def make_point(
    context: PipelineContext,
    allocation: Allocation,
    mask: np.ndarray,
    eta_d: float,
    eta_v: float,
    eta_in: Optional[float] = None,
) -> TradeoffPoint:
    """Tradeoff record of an allocation; CRBs are re-evaluated from the blocks."""
    crb_out: Dict[str, float] = {}
    if context.scenario.num_targets:
        crbs = crb_matrices(
            context.blocks, allocation.pbar_r, mask, context.comm_powers(allocation)
        )
        crb_out = worst_crbs(crbs)
    return TradeoffPoint(
        eta_in=eta_d if eta_in is None else eta_in,
        eta_d=eta_d,
        eta_v=eta_v,
        rate_bits_per_s=allocation.rate / context.scenario.symbol_duration_s,
        crb_out=crb_out,
        mask=mask_bits(mask),
        summary=allocation.summary(),
        status=allocation.status,
    )


def failed_point(eta_in: float, eta_d: float, eta_v: float, status: str) -> TradeoffPoint:
    return TradeoffPoint(
        eta_in=eta_in,
        eta_d=eta_d,
        eta_v=eta_v,
        rate_bits_per_s=np.nan,
        crb_out={},
        mask="",
        status=status,
    )


def _allocate(
    context: PipelineContext,
    mask: np.ndarray,
    eta_d: float,
    eta_v: float,
    initial_sigma: Optional[np.ndarray] = None,
) -> Allocation:
    solver = context.config.solver
    return algorithm1(
        context.scenario,
        context.blocks,
        mask,
        eta_d,
        eta_v,
        schedule=solver.penalty.to_schedule(),
        initial_sigma=initial_sigma,
        include_comm=context.include_comm,
        tol=solver.tol,
        max_iter=solver.max_iter,
    )


def _select(
    context: PipelineContext, allocation: Allocation, eta_d: float, eta_v: float
) -> SelectionResult:
    objective = context.config.system.objective
    instance = build_instance(
        context.blocks,
        allocation.pbar_r,
        context.num_selected,
        eta_fixed=eta_v if objective == "minimize_d" else eta_d,
        objective=objective,
        pbar_c=context.comm_powers(allocation),
    )
    return select_receivers(instance, context.config.solver.bisection_tol)


def _final_mask(context: PipelineContext, allocation: Allocation, s: np.ndarray) -> ReceiverMask:
    instance = build_instance(
        context.blocks,
        allocation.pbar_r,
        int(np.sum(s)),
        pbar_c=context.comm_powers(allocation),
    )
    return evaluate_mask(instance, s)


def first_mask(num_receivers: int, num_selected: int) -> np.ndarray:
    return next(subsets(num_receivers, num_selected))


def allocate_fixed(
    context: PipelineContext,
    eta_d: Optional[float] = None,
    eta_v: Optional[float] = None,
    mask: Optional[np.ndarray] = None,
) -> AlternationResult:
    """Subcarrier and power allocation for a fixed receiver mask.

    The mask defaults to the lexicographically first N_r subset.
    """
    eta_d = context.eta_d if eta_d is None else eta_d
    eta_v = context.eta_v if eta_v is None else eta_v
    s = first_mask(context.scenario.num_receivers, context.num_selected) if mask is None else mask
    allocation = _allocate(context, s, eta_d, eta_v)
    return AlternationResult(
        allocation=allocation,
        mask=_final_mask(context, allocation, s),
        point=make_point(context, allocation, s, eta_d, eta_v),
        rounds=1,
    )


def alternate(
    context: PipelineContext,
    eta_d: Optional[float] = None,
    eta_v: Optional[float] = None,
    max_rounds: int = MAX_ROUNDS,
) -> AlternationResult:
    """Alternate between allocation and receiver selection.

    Starts from the lexicographically first N_r subset and warm-starts each
    allocation from the previous assignment fractions. A round is accepted
    only if the rate does not drop; the loop stops at a mask fixed point, a
    relative rate gain below 1e-4, or after ``max_rounds`` allocations.

    Raises:
        InfeasibleAllocationError: If the first allocation is infeasible.
    """
    eta_d = context.eta_d if eta_d is None else eta_d
    eta_v = context.eta_v if eta_v is None else eta_v
    R_x, N_r = context.scenario.num_receivers, context.num_selected

    if N_r == R_x:
        return allocate_fixed(context, eta_d, eta_v, np.ones(R_x, dtype=int))

    mask = first_mask(R_x, N_r)
    allocation = _allocate(context, mask, eta_d, eta_v)
    history = [{"round": 1, "rate": allocation.rate, "mask": mask_bits(mask)}]
    rounds = 1

    while rounds < max_rounds:
        try:
            selected = _select(context, allocation, eta_d, eta_v).mask.s
        except BracketError as e:
            logger.warning("Receiver selection stopped the alternation", error=e.message)
            break
        if np.array_equal(selected, mask):
            break
        try:
            candidate = _allocate(context, selected, eta_d, eta_v, initial_sigma=allocation.sigma)
        except InfeasibleAllocationError as e:
            logger.warning("Allocation for the selected mask failed", mask=mask_bits(selected), error=e.message)
            break
        rounds += 1
        history.append({"round": rounds, "rate": candidate.rate, "mask": mask_bits(selected)})
        if candidate.rate < allocation.rate:
            logger.info("Round rejected: rate decreased", round=rounds, rate=candidate.rate)
            break
        gain = (candidate.rate - allocation.rate) / max(abs(allocation.rate), 1e-12)
        allocation, mask = candidate, selected
        if gain < RATE_PLATEAU:
            break

    logger.info(
        "Alternation finished",
        rounds=rounds,
        rate=allocation.rate,
        mask=mask_bits(mask),
    )
    return AlternationResult(
        allocation=allocation,
        mask=_final_mask(context, allocation, mask),
        point=make_point(context, allocation, mask, eta_d, eta_v),
        rounds=rounds,
        history=history,
    )


def _sweep_bounds(context: PipelineContext, value: float) -> Tuple[float, float]:
    if context.config.experiment.sweep_mode == "eta_d":
        return context.absolute(value, "d"), context.eta_v
    return context.eta_d, context.absolute(value, "v")


def _sweep_point(context: PipelineContext, value: float) -> TradeoffPoint:
    eta_d, eta_v = _sweep_bounds(context, value)
    eta_in = eta_d if context.config.experiment.sweep_mode == "eta_d" else eta_v
    solve = allocate_fixed if context.config.experiment.allocation_only else alternate
    try:
        result = solve(context, eta_d, eta_v)
    except (InfeasibleError, NumericalError) as e:
        status = run_failed(e)
        logger.warning("Sweep point failed", eta=eta_in, status=status, error=e.message)
        return failed_point(eta_in, eta_d, eta_v, status)
    point = result.point
    point.eta_in = eta_in
    return point


def monotone_envelope(points: Sequence[TradeoffPoint]) -> List[TradeoffPoint]:
    """Carry feasible allocations forward to looser bounds.

    ``points`` must be sorted by ``eta_in``. An allocation that meets a
    tighter bound meets every looser one, so a point whose rate is lower (or
    missing) takes over the best record seen so far under its own bounds.
    """
    envelope: List[TradeoffPoint] = []
    best: Optional[TradeoffPoint] = None
    for point in points:
        rate = point.rate_bits_per_s
        if best is not None and not (np.isfinite(rate) and rate >= best.rate_bits_per_s):
            logger.info(
                "Sweep point reuses a tighter allocation",
                eta=point.eta_in,
                rate=rate,
                reused_from=best.eta_in,
            )
            point = replace(
                best, eta_in=point.eta_in, eta_d=point.eta_d, eta_v=point.eta_v
            )
        elif np.isfinite(rate):
            best = point
        envelope.append(point)
    return envelope


async def tradeoff_sweep(
    context: PipelineContext, values: Optional[Sequence[float]] = None
) -> List[TradeoffPoint]:
    """Solve every sweep point concurrently; points come back sorted by η.

    Rates are made non-decreasing in η with :func:`monotone_envelope`.

    ``values`` are in configured units (multiples of the baseline CRB in
    baseline mode) and default to ``experiment.sweep``.
    """
    values = list(context.config.experiment.sweep if values is None else values)
    if not values:
        raise ValueError("Sweep has no values")
    points = await asyncio.gather(
        *(asyncio.to_thread(_sweep_point, context, value) for value in values)
    )
    return monotone_envelope(sorted(points, key=lambda point: point.eta_in))


def tradeoff_frame(points: Sequence[TradeoffPoint]) -> pd.DataFrame:
    return pd.DataFrame([point.to_row() for point in points], columns=TRADEOFF_COLUMNS)


def crb_heatmap(
    context: PipelineContext,
    allocation: Allocation,
    mask: np.ndarray,
    span_m: Optional[float] = None,
    steps: Optional[int] = None,
) -> pd.DataFrame:
    """Re-evaluate the CRBs of a fixed allocation on a grid around each target.

    ``crb_loc``/``crb_vel`` are the larger location/velocity diagonal of the
    moved target. Singular points are kept with NaN values.
    """
    settings = context.config.experiment.heatmap
    span_m = settings.span_m if span_m is None else span_m
    steps = settings.steps if steps is None else steps
    pbar_c = context.comm_powers(allocation)

    rows = []
    for n, (x0, y0) in enumerate(context.scenario.target_positions):
        for x in np.linspace(x0 - span_m, x0 + span_m, steps):
            for y in np.linspace(y0 - span_m, y0 + span_m, steps):
                moved = context.scenario.with_target(n, (x, y))
                try:
                    blocks = compute_blocks(
                        moved,
                        context.covariances,
                        convention=context.config.system.index_convention,
                        include_comm=context.include_comm,
                        targets=[n],
                    )
                    pair = target_crb(blocks, n, allocation.pbar_r, mask, pbar_c)
                    crb_loc, crb_vel, singular = pair.worst_location, pair.worst_velocity, False
                except NumericalError:
                    crb_loc, crb_vel, singular = np.nan, np.nan, True
                rows.append(
                    {
                        "target": n,
                        "x": float(x),
                        "y": float(y),
                        "crb_loc": crb_loc,
                        "crb_vel": crb_vel,
                        "singular": singular,
                    }
                )
    frame = pd.DataFrame(rows, columns=HEATMAP_COLUMNS)
    logger.info("CRB heatmap evaluated", points=len(frame), singular=int(frame["singular"].sum()))
    return frame


def selection_row(num_receivers: int, num_selected: int, mask: Optional[ReceiverMask], eta_star: float) -> Dict[str, Any]:
    return {
        "N_r": num_selected,
        "R_x": num_receivers,
        "eta_star": eta_star,
        "mask_bits": mask.bits if mask is not None else "",
    }


def select_for(context: PipelineContext, allocation: Allocation) -> pd.DataFrame:
    """Bisection selection for a fixed allocation as a one-row table.

    Raises:
        BracketError: If no subset meets the fixed bound.
    """
    result = _select(context, allocation, context.eta_d, context.eta_v)
    row = selection_row(context.scenario.num_receivers, context.num_selected, result.mask, result.eta_star)
    return pd.DataFrame([row], columns=SELECTION_COLUMNS)


def receiver_count_sweep(context: PipelineContext, allocation: Allocation) -> pd.DataFrame:
    """Optimal-mask bound for every N_r = 1..R_x under a fixed allocation."""
    objective = context.config.system.objective
    R_x = context.scenario.num_receivers
    rows = []
    for num_selected in range(1, R_x + 1):
        instance = build_instance(
            context.blocks,
            allocation.pbar_r,
            num_selected,
            eta_fixed=context.eta_v if objective == "minimize_d" else context.eta_d,
            objective=objective,
            pbar_c=context.comm_powers(allocation),
        )
        mask = best_subset(instance)
        eta_star = np.nan
        if mask is not None:
            eta_star = mask.achieved_eta_d if objective == "minimize_d" else mask.achieved_eta_v
        rows.append(selection_row(R_x, num_selected, mask, eta_star))
    return pd.DataFrame(rows, columns=SELECTION_COLUMNS)


def run_failed(error: DfrcError) -> str:
    """Status label of a failed solve."""
    if isinstance(error, InfeasibleError):
        return "infeasible"
    return "numerical_failure"


def ici_frame(context: PipelineContext, rng: np.random.Generator) -> pd.DataFrame:
    """Noise-free demodulation residuals of a detection-only frame per receiver.

    Both CP-extension sequences and random symbols are evaluated so the two
    residual levels can be compared in one table.
    """
    scenario = context.scenario
    assignment, powers = detection_only_assignment(scenario)
    frames = []
    for mode in ("cp_extension", "random"):
        grid = make_symbol_grid(scenario, assignment, powers, rng, mode=mode)
        for r in range(scenario.num_receivers):
            report = ici_residual(
                scenario, grid, context.covariances, r, oversample=context.config.solver.oversample
            )
            k, l = np.indices(report.residual.shape)
            frames.append(
                pd.DataFrame(
                    {
                        "r": r,
                        "k": k.ravel(),
                        "l": l.ravel(),
                        "mode": mode,
                        "residual": report.residual.ravel(),
                        "relative": report.relative.ravel(),
                    }
                )
            )
        logger.info("ICI residuals evaluated", mode=mode)
    return pd.concat(frames, ignore_index=True)
