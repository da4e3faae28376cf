"""Fisher information blocks and Cramér-Rao bounds for target location/velocity."""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog

from .beampattern import CovarianceSet
from .error_handler import SamplingError, SingularInformationError
from .scenario import (
    Scenario,
    bistatic_delay,
    bistatic_doppler,
    comm_channel,
    geometry_partials,
    radar_pathloss,
    steering_vector,
    target_aod,
)
from .waveform import SymbolGrid, _illumination, mrt_beamformer

logger = structlog.get_logger(__name__)

INDEX_CONVENTIONS = ("literal", "offset")
# Information sums with a larger condition number are reported as singular.
MAX_CONDITION = 1e12


@dataclass
class FimBlocks:
    """Per-(target, receiver, subcarrier, beam) 2×2 information blocks.

    Shapes: ``D``/``V`` are (N, R_x, K, N', 2, 2); ``beam_gain`` is (N, K, N').
    The optional ``comm_*`` arrays carry the same quantities for
    communication beams, indexed by user instead of subarea.
    """

    D: np.ndarray
    V: np.ndarray
    beam_gain: np.ndarray
    convention: str = "literal"
    comm_D: Optional[np.ndarray] = None
    comm_V: Optional[np.ndarray] = None
    comm_gain: Optional[np.ndarray] = None

    @property
    def num_targets(self) -> int:
        return self.D.shape[0]

    @property
    def num_receivers(self) -> int:
        return self.D.shape[1]

    @property
    def num_subcarriers(self) -> int:
        return self.D.shape[2]


@dataclass
class CrbPair:
    """Location and velocity CRB matrices of one target."""

    C_d: np.ndarray
    C_v: np.ndarray

    @property
    def location_diag(self) -> Tuple[float, float]:
        return float(self.C_d[0, 0]), float(self.C_d[1, 1])

    @property
    def velocity_diag(self) -> Tuple[float, float]:
        return float(self.C_v[0, 0]), float(self.C_v[1, 1])

    @property
    def worst_location(self) -> float:
        return max(self.location_diag)

    @property
    def worst_velocity(self) -> float:
        return max(self.velocity_diag)


def _counters(
    num_subcarriers: int, num_symbols: int, convention: str
) -> Tuple[np.ndarray, np.ndarray]:
    """Subcarrier and symbol counters entering the phase terms."""
    if convention not in INDEX_CONVENTIONS:
        raise ValueError(f"Unknown index convention: {convention}")
    offset = 1 if convention == "literal" else 0
    return (
        np.arange(num_subcarriers) + offset,
        np.arange(num_symbols) + offset,
    )


def _symbol_sums(num_symbols: int, convention: str) -> Tuple[float, float, float]:
    """Closed-form Σ1, Σl, Σl² over the symbol counters."""
    L = num_symbols
    if convention == "literal":
        return float(L), L * (L + 1) / 2.0, L * (L + 1) * (2 * L + 1) / 6.0
    return float(L), L * (L - 1) / 2.0, (L - 1) * L * (2 * L - 1) / 6.0


def _unit_blocks(
    scenario: Scenario, n: int, r: int, convention: str
) -> Tuple[np.ndarray, np.ndarray]:
    """D and V of path (n, r) per subcarrier for unit beam gain and power.

    Returns:
        D as (K, 2, 2) and V as (2, 2).
    """
    geom = geometry_partials(scenario, n, r)
    amplitude = radar_pathloss(scenario, n, r)
    prefactor = 8.0 * np.pi**2 * amplitude**2 / scenario.radar_noise_var
    spacing = scenario.subcarrier_spacing_hz
    duration = scenario.symbol_duration_s
    s0, s1, s2 = _symbol_sums(scenario.num_symbols, convention)
    k, _ = _counters(scenario.num_subcarriers, scenario.num_symbols, convention)

    tau, f_pos = geom.delay_grad, geom.doppler_grad_pos
    delay_term = np.outer(tau, tau)
    cross_term = np.outer(f_pos, tau) + np.outer(tau, f_pos)
    doppler_term = np.outer(f_pos, f_pos)

    D = prefactor * (
        (k**2)[:, None, None] * spacing**2 * s0 * delay_term
        - k[:, None, None] * spacing * duration * s1 * cross_term
        + duration**2 * s2 * doppler_term
    )
    V = prefactor * duration**2 * s2 * np.outer(geom.doppler_grad_vel, geom.doppler_grad_vel)
    return D, V


def _beam_gains(scenario: Scenario, covariances: CovarianceSet, n: int) -> np.ndarray:
    """β_{k,n}^H R_{k,n'} β_{k,n} as a (K, N') array."""
    aod = target_aod(scenario, n)
    gains = np.zeros((scenario.num_subcarriers, covariances.num_subareas))
    for k in range(scenario.num_subcarriers):
        beta = steering_vector(scenario, k, aod)
        gains[k] = np.real(
            np.einsum("i,nij,j->n", beta.conj(), covariances.R[k], beta)
        )
    return gains


def info_blocks(
    scenario: Scenario,
    covariances: CovarianceSet,
    n: int,
    r: int,
    k: int,
    n_beam: int,
    convention: str = "literal",
) -> Tuple[np.ndarray, np.ndarray]:
    """Location and velocity information blocks (D, V) of one (n, r, k, n')."""
    D_unit, V_unit = _unit_blocks(scenario, n, r, convention)
    gain = _beam_gains(scenario, covariances, n)[k, n_beam]
    return gain * D_unit[k], gain * V_unit


def compute_blocks(
    scenario: Scenario,
    covariances: CovarianceSet,
    convention: str = "literal",
    include_comm: bool = False,
    targets: Optional[Sequence[int]] = None,
) -> FimBlocks:
    """Evaluate the information blocks for every (n, r, k, n').

    Args:
        scenario: Scenario geometry.
        covariances: Detection covariances R*_{k,n'}.
        convention: ``"literal"`` (one-based counters) or ``"offset"``.
        include_comm: Also compute blocks for communication MRT beams.
        targets: Optional subset of targets to evaluate (others left zero).
    """
    N, R_x, K = scenario.num_targets, scenario.num_receivers, scenario.num_subcarriers
    N_beam, M = covariances.num_subareas, scenario.num_users
    D = np.zeros((N, R_x, K, N_beam, 2, 2))
    V = np.zeros_like(D)
    beam_gain = np.zeros((N, K, N_beam))
    comm_D = np.zeros((N, R_x, K, M, 2, 2)) if include_comm else None
    comm_V = np.zeros_like(comm_D) if include_comm else None
    comm_gain = np.zeros((N, K, M)) if include_comm else None

    beams = None
    if include_comm:
        beams = np.array(
            [[mrt_beamformer(comm_channel(scenario, k, m)) for m in range(M)] for k in range(K)]
        ).reshape(K, M, scenario.num_tx_antennas)

    for n in targets if targets is not None else range(N):
        beam_gain[n] = _beam_gains(scenario, covariances, n)
        if include_comm:
            aod = target_aod(scenario, n)
            for k in range(K):
                beta = steering_vector(scenario, k, aod)
                comm_gain[n, k] = np.abs(beams[k] @ beta.conj()) ** 2
        for r in range(R_x):
            D_unit, V_unit = _unit_blocks(scenario, n, r, convention)
            D[n, r] = beam_gain[n][:, :, None, None] * D_unit[:, None]
            V[n, r] = beam_gain[n][:, :, None, None] * V_unit
            if include_comm:
                comm_D[n, r] = comm_gain[n][:, :, None, None] * D_unit[:, None]
                comm_V[n, r] = comm_gain[n][:, :, None, None] * V_unit

    return FimBlocks(
        D=D,
        V=V,
        beam_gain=beam_gain,
        convention=convention,
        comm_D=comm_D,
        comm_V=comm_V,
        comm_gain=comm_gain,
    )


def information_sums(
    blocks: FimBlocks,
    pbar_r: np.ndarray,
    mask: np.ndarray,
    pbar_c: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Weighted information sums F_d, F_v of shape (N, 2, 2).

    Args:
        blocks: Information blocks.
        pbar_r: (K, N') detection powers p_k σ^R_{k,n'}.
        mask: (R_x,) receiver selection s.
        pbar_c: Optional (K, M) communication powers; adds comm-beam
            illumination when the blocks carry it.
    """
    s = np.asarray(mask, dtype=float)
    F_d = np.einsum("r,kj,nrkjab->nab", s, pbar_r, blocks.D)
    F_v = np.einsum("r,kj,nrkjab->nab", s, pbar_r, blocks.V)
    if pbar_c is not None and blocks.comm_D is not None:
        F_d = F_d + np.einsum("r,km,nrkmab->nab", s, pbar_c, blocks.comm_D)
        F_v = F_v + np.einsum("r,km,nrkmab->nab", s, pbar_c, blocks.comm_V)
    return F_d, F_v


def _invert(info: np.ndarray, what: str, n: int) -> np.ndarray:
    condition = float(np.linalg.cond(info))
    if not np.isfinite(condition) or condition > MAX_CONDITION or np.linalg.det(info) <= 0:
        raise SingularInformationError(
            f"{what} information of target {n} is singular",
            diagnostic="degenerate geometry",
            condition_number=condition,
        )
    return np.linalg.inv(info)


def crb_matrices(
    blocks: FimBlocks,
    pbar_r: np.ndarray,
    mask: np.ndarray,
    pbar_c: Optional[np.ndarray] = None,
) -> List[CrbPair]:
    """Location and velocity CRB matrices of every target.

    Raises:
        SingularInformationError: With diagnostic ``no active receiver``,
            ``no detection power`` or ``degenerate geometry``.
    """
    mask = np.asarray(mask)
    if not np.any(mask):
        raise SingularInformationError(
            "No radar receiver is active", diagnostic="no active receiver"
        )
    total = float(np.sum(pbar_r))
    if pbar_c is not None and blocks.comm_D is not None:
        total += float(np.sum(pbar_c))
    if total <= 0.0:
        raise SingularInformationError(
            "No power illuminates the targets", diagnostic="no detection power"
        )

    F_d, F_v = information_sums(blocks, pbar_r, mask, pbar_c)
    return [
        CrbPair(C_d=_invert(F_d[n], "location", n), C_v=_invert(F_v[n], "velocity", n))
        for n in range(blocks.num_targets)
    ]


def target_crb(
    blocks: FimBlocks,
    n: int,
    pbar_r: np.ndarray,
    mask: np.ndarray,
    pbar_c: Optional[np.ndarray] = None,
) -> CrbPair:
    """CRB of target ``n`` alone; other targets may carry empty blocks."""
    F_d, F_v = information_sums(blocks, pbar_r, mask, pbar_c)
    return CrbPair(C_d=_invert(F_d[n], "location", n), C_v=_invert(F_v[n], "velocity", n))


def crb_frame(crbs: Sequence[CrbPair]) -> pd.DataFrame:
    """Per-target CRB table with columns (n, crb_x, crb_y, crb_vx, crb_vy)."""
    rows = [
        {
            "n": n,
            "crb_x": pair.C_d[0, 0],
            "crb_y": pair.C_d[1, 1],
            "crb_vx": pair.C_v[0, 0],
            "crb_vy": pair.C_v[1, 1],
        }
        for n, pair in enumerate(crbs)
    ]
    return pd.DataFrame(rows, columns=["n", "crb_x", "crb_y", "crb_vx", "crb_vy"])


def fim_numerical(
    scenario: Scenario,
    grid: SymbolGrid,
    covariances: CovarianceSet,
    mask: np.ndarray,
    tau_step: float = 1e-11,
    doppler_step: float = 1e-3,
    convention: str = "literal",
    amplitude: str = "expected",
) -> np.ndarray:
    """Full 4N×4N FIM from central differences of the demodulated mean.

    The mean of receiver r is Σ_n c_{n,r} A_{n}(k, l) e^{j2π f l T} e^{-j2π k Δf τ}
    with counters per ``convention``. ``amplitude="expected"`` uses the
    symbol-averaged amplitude sqrt(Σ_n' p̄ β^H R β); ``"realized"`` uses the
    grid's detection symbols. Parameters are ordered (d_x, d_y, v_x, v_y)
    per target.

    Raises:
        SamplingError: If a step is too small to resolve the parameter.
    """
    N, R_x = scenario.num_targets, scenario.num_receivers
    K, L = scenario.num_subcarriers, scenario.num_symbols
    if K * L * R_x > 100_000:
        raise ValueError("Numerical FIM is limited to R_x·K·L ≤ 1e5")

    delays = np.array([[bistatic_delay(scenario, n, r) for r in range(R_x)] for n in range(N)])
    dopplers = np.array(
        [[bistatic_doppler(scenario, n, r) for r in range(R_x)] for n in range(N)]
    )
    eps = np.finfo(float).eps
    if tau_step <= 64 * eps * max(float(np.max(delays, initial=0.0)), 1e-300):
        raise SamplingError("Delay step underflows", tau_step=tau_step)
    if doppler_step <= 64 * eps * max(float(np.max(np.abs(dopplers), initial=0.0)), 1.0):
        raise SamplingError("Doppler step underflows", doppler_step=doppler_step)

    k, l = _counters(K, L, convention)
    spacing = scenario.subcarrier_spacing_hz
    duration = scenario.symbol_duration_s
    pbar_r = grid.detection_weights()

    amplitudes = []
    for n in range(N):
        if amplitude == "expected":
            gains = _beam_gains(scenario, covariances, n)
            amp = np.sqrt(np.sum(pbar_r * gains, axis=1))[:, None] * np.ones((1, L))
        elif amplitude == "realized":
            amp = _illumination(scenario, grid, covariances, n)[:, 1:]
        else:
            raise ValueError(f"Unknown amplitude model: {amplitude}")
        amplitudes.append(amp)

    def term(n: int, r: int, delay: float, doppler: float) -> np.ndarray:
        phase = np.exp(
            2j * np.pi * doppler * l[None, :] * duration
            - 2j * np.pi * k[:, None] * spacing * delay
        )
        return radar_pathloss(scenario, n, r) * amplitudes[n] * phase

    num_phi = 2 * N * R_x
    G = np.zeros((R_x, K, L, num_phi), dtype=complex)
    for n in range(N):
        for r in range(R_x):
            if not mask[r]:
                continue
            col = 2 * (n * R_x + r)
            tau, f = delays[n, r], dopplers[n, r]
            G[r, :, :, col] = (
                term(n, r, tau + tau_step, f) - term(n, r, tau - tau_step, f)
            ) / (2 * tau_step)
            G[r, :, :, col + 1] = (
                term(n, r, tau, f + doppler_step) - term(n, r, tau, f - doppler_step)
            ) / (2 * doppler_step)

    G = G.reshape(-1, num_phi)
    F_phi = 2.0 / scenario.radar_noise_var * np.real(G.conj().T @ G)

    J = np.zeros((4 * N, num_phi))
    for n in range(N):
        for r in range(R_x):
            geom = geometry_partials(scenario, n, r)
            col = 2 * (n * R_x + r)
            J[4 * n : 4 * n + 2, col] = geom.delay_grad
            J[4 * n : 4 * n + 2, col + 1] = geom.doppler_grad_pos
            J[4 * n + 2 : 4 * n + 4, col + 1] = geom.doppler_grad_vel

    return J @ F_phi @ J.T
