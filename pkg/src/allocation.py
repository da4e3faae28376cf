"""Subcarrier and power allocation under CRB constraints.

The binary assignment is relaxed to σ ∈ [0, 1] and pushed back to binary by a
difference-of-convex penalty: σ − σ² ≤ slack is linearized at the previous
iterate and the total slack is penalized with a growing weight β.
"""

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import structlog

from .conic import SIGMA_FLOOR, ConicProblem, ConicSolution, perspective_rate, solve
from .error_handler import InfeasibleAllocationError, NumericalError
from .fim import FimBlocks, crb_matrices
from .scenario import Scenario, channel_gain_matrix

logger = structlog.get_logger(__name__)

# Total slack below this counts as a binary relaxed solution.
BINARY_VIOLATION = 1e-4
# Absolute slack allowed when re-checking CRB diagonals.
CRB_SLACK = 1e-6
# Rounding expects total slack at most this fraction of K.
PRECONDITION_VIOLATION = 0.25


@dataclass
class PenaltySchedule:
    beta0: float = 1e-3
    gamma: float = 3.0
    beta_max: float = 1e3
    epsilon: float = 1e-4
    max_outer: int = 30

    def __post_init__(self) -> None:
        if self.gamma <= 1.0:
            raise ValueError("gamma must exceed 1")
        if not 0 < self.beta0 <= self.beta_max:
            raise ValueError("Need 0 < beta0 <= beta_max")

    def next(self, beta: float) -> float:
        return min(self.gamma * beta, self.beta_max)


@dataclass
class Allocation:
    """Assignment fractions σ and powers p̄ = p·σ per subcarrier.

    Columns of the combined ``sigma``/``pbar`` arrays list users first, then
    detection subareas, matching ``SymbolGrid.assignment`` owner codes.
    """

    sigma_c: np.ndarray
    sigma_r: np.ndarray
    pbar_c: np.ndarray
    pbar_r: np.ndarray
    rate: float
    violation: float
    binary: bool
    status: str = "optimal"
    history: List[Dict[str, float]] = field(default_factory=list)

    @property
    def num_users(self) -> int:
        return self.sigma_c.shape[1]

    @property
    def sigma(self) -> np.ndarray:
        return np.hstack([self.sigma_c, self.sigma_r])

    @property
    def pbar(self) -> np.ndarray:
        return np.hstack([self.pbar_c, self.pbar_r])

    @property
    def owners(self) -> np.ndarray:
        return np.argmax(self.sigma, axis=1)

    @property
    def total_power(self) -> float:
        return float(self.pbar.sum())

    def assignment(self) -> Tuple[np.ndarray, np.ndarray]:
        """(owners, per-subcarrier powers) for building a symbol grid."""
        return self.owners, self.pbar.sum(axis=1)

    def summary(self) -> Dict[str, float]:
        comm = int(np.sum(self.owners < self.num_users))
        total = self.total_power
        return {
            "subcarriers_comm": comm,
            "subcarriers_radar": int(self.owners.size - comm),
            "power_comm_frac": float(self.pbar_c.sum() / total) if total > 0 else 0.0,
            "power_radar_frac": float(self.pbar_r.sum() / total) if total > 0 else 0.0,
        }


@dataclass
class AllocationLayout:
    """Variable indices of a built subproblem; -1 marks an absent variable."""

    sigma: np.ndarray
    power: np.ndarray
    slack: np.ndarray
    num_users: int


def _num_subareas(blocks: FimBlocks) -> int:
    return blocks.beam_gain.shape[2] if blocks.num_targets else 0


def _crb_coefficients(
    blocks: FimBlocks, mask: np.ndarray, n: int, num_users: int, include_comm: bool
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Mask-weighted information per unit power: comm D, detection D, comm V, detection V."""
    s = np.asarray(mask, dtype=float)
    D = np.einsum("r,rkjab->kjab", s, blocks.D[n])
    V = np.einsum("r,rkjab->kjab", s, blocks.V[n])
    K = D.shape[0]
    if include_comm and blocks.comm_D is not None:
        comm_D = np.einsum("r,rkmab->kmab", s, blocks.comm_D[n])
        comm_V = np.einsum("r,rkmab->kmab", s, blocks.comm_V[n])
    else:
        comm_D = np.zeros((K, num_users, 2, 2))
        comm_V = np.zeros_like(comm_D)
    return comm_D, D, comm_V, V


def _add_crb_constraints(
    problem: ConicProblem,
    blocks: FimBlocks,
    mask: np.ndarray,
    power: np.ndarray,
    num_users: int,
    eta_d: float,
    eta_v: float,
    include_comm: bool,
) -> None:
    """Four CRB LMIs per target, each reduced to a rotated cone.

    [C]_11 ≤ η  ⇔  [[a − 1/η, b], [b, d]] ⪰ 0 and
    [C]_22 ≤ η  ⇔  [[a, b], [b, d − 1/η]] ⪰ 0 for F = [[a, b], [b, d]].
    """
    for n in range(blocks.num_targets):
        comm_D, D, comm_V, V = _crb_coefficients(blocks, mask, n, num_users, include_comm)
        for label, eta, comm_info, info in (
            ("d", eta_d, comm_D, D),
            ("v", eta_v, comm_V, V),
        ):
            if not np.isfinite(eta):
                continue
            a: Dict[int, float] = {}
            b: Dict[int, float] = {}
            d: Dict[int, float] = {}
            for (k, j), idx in np.ndenumerate(power):
                if idx < 0:
                    continue
                block = comm_info[k, j] if j < num_users else info[k, j - num_users]
                if not np.any(block):
                    continue
                a[int(idx)] = eta * block[0, 0]
                b[int(idx)] = eta * block[0, 1]
                d[int(idx)] = eta * block[1, 1]
            coeffs = [abs(c) for form in (a, b, d) for c in form.values()]
            scale = 1.0 / max(max(coeffs, default=1.0), 1.0)

            def form(coef: Dict[int, float], const: float) -> Tuple[Dict[int, float], float]:
                return {i: c * scale for i, c in coef.items()}, const * scale

            problem.add_lmi(
                [[form(a, -1.0), form(b, 0.0)], [form(b, 0.0), form(d, 0.0)]],
                tag=f"crb_{label}{n}_x",
            )
            problem.add_lmi(
                [[form(a, 0.0), form(b, 0.0)], [form(b, 0.0), form(d, -1.0)]],
                tag=f"crb_{label}{n}_y",
            )


def build_subproblem(
    scenario: Scenario,
    blocks: FimBlocks,
    mask: np.ndarray,
    eta_d: float,
    eta_v: float,
    sigma_point: np.ndarray,
    beta: float,
    gains: Optional[np.ndarray] = None,
    include_comm: bool = False,
    penalized: bool = True,
) -> Tuple[ConicProblem, AllocationLayout]:
    """Convex subproblem at linearization point ``sigma_point`` (K, M+N').

    Objective: Σ σ^C log2(1 + g p̄^C/σ^C) − β Σ slack. Constraints are the
    per-subcarrier row sums, the total power, the coupling p̄ ≤ P_max σ, one
    Taylor cut σ(1 − 2σ^{(j)}) − slack ≤ −(σ^{(j)})² per entry and the CRB cones.
    With ``penalized=False`` the slacks and cuts are left out, giving the
    plain continuous relaxation.
    """
    gains = channel_gain_matrix(scenario) if gains is None else gains
    K, M = scenario.num_subcarriers, scenario.num_users
    columns = M + _num_subareas(blocks)
    if columns == 0:
        raise ValueError("Nothing to allocate: no users and no targets")
    if sigma_point.shape != (K, columns):
        raise ValueError(f"sigma_point must have shape {(K, columns)}")

    problem = ConicProblem()
    sigma = np.zeros((K, columns), dtype=int)
    power = np.zeros_like(sigma)
    slack = -np.ones_like(sigma)
    for k in range(K):
        for j in range(columns):
            kind = ("c", j) if j < M else ("r", j - M)
            sigma[k, j] = problem.add_variable(f"sigma_{kind[0]}[{k},{kind[1]}]", SIGMA_FLOOR)
            power[k, j] = problem.add_variable(f"pbar_{kind[0]}[{k},{kind[1]}]", 0.0)
            if penalized:
                name = "delta" if j < M else "alpha"
                slack[k, j] = problem.add_variable(f"{name}[{k},{kind[1]}]", 0.0)

    for k in range(K):
        for m in range(M):
            problem.add_log_term(1.0, gains[k, m], int(power[k, m]), int(sigma[k, m]))
        problem.add_equality({int(i): 1.0 for i in sigma[k]}, 1.0, tag="row_sum")
    if penalized:
        problem.add_linear_objective({int(i): -beta for i in slack.ravel()})
    problem.add_inequality({int(i): 1.0 for i in power.ravel()}, scenario.total_power_w, "power")

    for (k, j), idx in np.ndenumerate(sigma):
        problem.add_inequality(
            {int(power[k, j]): 1.0, int(idx): -scenario.total_power_w}, 0.0, "coupling"
        )
        if not penalized:
            continue
        point = float(sigma_point[k, j])
        problem.add_inequality(
            {int(idx): 1.0 - 2.0 * point, int(slack[k, j]): -1.0}, -point * point, "dc_cut"
        )

    _add_crb_constraints(problem, blocks, mask, power, M, eta_d, eta_v, include_comm)
    return problem, AllocationLayout(sigma=sigma, power=power, slack=slack, num_users=M)


def _extract(
    solution: ConicSolution, layout: AllocationLayout, gains: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, float, float]:
    x = solution.values
    sigma = np.clip(x[layout.sigma], 0.0, 1.0)
    pbar = np.maximum(x[layout.power], 0.0)
    M = layout.num_users
    rate = sum(
        perspective_rate(sigma[k, m], pbar[k, m], gains[k, m])
        for k in range(sigma.shape[0])
        for m in range(M)
    )
    violation = float(np.sum(x[layout.slack[layout.slack >= 0]]))
    return sigma, pbar, float(rate), violation


def _infeasible(message: str, solution: ConicSolution) -> InfeasibleAllocationError:
    return InfeasibleAllocationError(
        message, violated=solution.violated, certificate=solution.certificate
    )


def check_feasibility(
    scenario: Scenario,
    blocks: FimBlocks,
    mask: np.ndarray,
    eta_d: float,
    eta_v: float,
    tol: float = 1e-4,
    max_iter: int = 500,
) -> None:
    """Check the CRB targets are reachable with all power on detection.

    Raises:
        InfeasibleAllocationError: With the violated constraint tags.
    """
    num_subareas = _num_subareas(blocks)
    if num_subareas == 0 or not (np.isfinite(eta_d) or np.isfinite(eta_v)):
        return
    K = scenario.num_subcarriers
    problem = ConicProblem()
    power = -np.ones((K, num_subareas), dtype=int)
    for k in range(K):
        for n in range(num_subareas):
            power[k, n] = problem.add_variable(f"pbar_r[{k},{n}]", 0.0)
    problem.add_inequality({int(i): 1.0 for i in power.ravel()}, scenario.total_power_w, "power")
    _add_crb_constraints(problem, blocks, mask, power, 0, eta_d, eta_v, False)
    solution = solve(problem, tol=tol, max_iter=max_iter)
    if solution.status == "infeasible":
        logger.info("CRB targets unreachable", eta_d=eta_d, eta_v=eta_v, violated=solution.violated)
        raise _infeasible("CRB targets unreachable even with all power on detection", solution)


def solve_power(
    scenario: Scenario,
    blocks: FimBlocks,
    mask: np.ndarray,
    owners: np.ndarray,
    eta_d: float,
    eta_v: float,
    gains: Optional[np.ndarray] = None,
    include_comm: bool = False,
    tol: float = 1e-7,
    max_iter: int = 500,
) -> Allocation:
    """Power-only solve for a fixed binary assignment.

    Args:
        owners: (K,) owner per subcarrier; < M is a user, M + n a subarea.

    Raises:
        InfeasibleAllocationError: If the assignment cannot meet the CRB bounds.
    """
    gains = channel_gain_matrix(scenario) if gains is None else gains
    K, M = scenario.num_subcarriers, scenario.num_users
    columns = M + _num_subareas(blocks)
    owners = np.asarray(owners, dtype=int)

    problem = ConicProblem()
    power = -np.ones((K, columns), dtype=int)
    for k, owner in enumerate(owners):
        power[k, owner] = problem.add_variable(f"p[{k}]", 0.0)
        if owner < M:
            problem.add_log_term(1.0, gains[k, owner], int(power[k, owner]))
    problem.add_inequality(
        {int(i): 1.0 for i in power.ravel() if i >= 0}, scenario.total_power_w, "power"
    )
    _add_crb_constraints(problem, blocks, mask, power, M, eta_d, eta_v, include_comm)

    solution = solve(problem, tol=tol, max_iter=max_iter)
    if solution.status == "infeasible":
        raise _infeasible("Assignment cannot meet the CRB bounds", solution)
    solution.raise_for_status()

    sigma = np.zeros((K, columns))
    sigma[np.arange(K), owners] = 1.0
    pbar = np.zeros((K, columns))
    pbar[np.arange(K), owners] = np.maximum(solution.values[power[np.arange(K), owners]], 0.0)
    rate = float(
        sum(np.log2(1.0 + gains[k, o] * pbar[k, o]) for k, o in enumerate(owners) if o < M)
    )
    return Allocation(
        sigma_c=sigma[:, :M],
        sigma_r=sigma[:, M:],
        pbar_c=pbar[:, :M],
        pbar_r=pbar[:, M:],
        rate=rate,
        violation=0.0,
        binary=True,
    )


def round_and_restore(
    relaxed: Allocation,
    scenario: Scenario,
    blocks: FimBlocks,
    mask: np.ndarray,
    eta_d: float,
    eta_v: float,
    gains: Optional[np.ndarray] = None,
    include_comm: bool = False,
    tol: float = 1e-7,
    max_iter: int = 500,
) -> Allocation:
    """Round σ by per-subcarrier argmax and re-solve the powers.

    When the rounded assignment misses the CRB bounds, communication
    subcarriers are converted to detection one at a time, largest σ^R first.
    Once feasible, detection subcarriers are handed back to the user with the
    strongest channel, lowest σ^R first, whenever the bounds still hold and
    the rate goes up.

    Raises:
        InfeasibleAllocationError: If no conversion sequence restores feasibility.
    """
    if relaxed.binary:
        return relaxed

    K = scenario.num_subcarriers
    if relaxed.violation > PRECONDITION_VIOLATION * K:
        logger.warning(
            "Rounding a far from binary assignment",
            violation=relaxed.violation,
            limit=PRECONDITION_VIOLATION * K,
        )

    gains = channel_gain_matrix(scenario) if gains is None else gains
    M = relaxed.num_users
    owners = relaxed.owners.copy()
    while True:
        try:
            restored = solve_power(
                scenario, blocks, mask, owners, eta_d, eta_v, gains, include_comm, tol, max_iter
            )
            break
        except InfeasibleAllocationError as e:
            candidates = np.flatnonzero(owners < M)
            if candidates.size == 0 or relaxed.sigma_r.shape[1] == 0:
                logger.error("Rounded assignment is infeasible", violated=e.details.get("violated"))
                raise
            best_r = relaxed.sigma_r[candidates].max(axis=1)
            k = int(candidates[np.argmax(best_r)])
            owners[k] = M + int(np.argmax(relaxed.sigma_r[k]))
            logger.warning("Converting subcarrier to detection", subcarrier=k, owner=int(owners[k]))

    if M > 0:
        restored = _return_to_comm(
            restored, relaxed, owners, scenario, blocks, mask, eta_d, eta_v,
            gains, include_comm, tol, max_iter,
        )
    restored.history = list(relaxed.history)
    restored.status = relaxed.status
    return restored


def _return_to_comm(
    restored: Allocation,
    relaxed: Allocation,
    owners: np.ndarray,
    scenario: Scenario,
    blocks: FimBlocks,
    mask: np.ndarray,
    eta_d: float,
    eta_v: float,
    gains: np.ndarray,
    include_comm: bool,
    tol: float,
    max_iter: int,
) -> Allocation:
    M = relaxed.num_users
    detection = np.flatnonzero(owners >= M)
    if detection.size == 0:
        return restored
    order = detection[np.argsort(relaxed.sigma_r[detection].max(axis=1), kind="stable")]
    for k in order:
        trial = owners.copy()
        trial[k] = int(np.argmax(gains[k, :M]))
        try:
            candidate = solve_power(
                scenario, blocks, mask, trial, eta_d, eta_v, gains, include_comm, tol, max_iter
            )
        except (InfeasibleAllocationError, NumericalError):
            continue
        if candidate.rate > restored.rate:
            logger.debug("Returned subcarrier to communication", subcarrier=int(k))
            owners, restored = trial, candidate
    return restored


def relaxation_bound(
    scenario: Scenario,
    blocks: FimBlocks,
    mask: np.ndarray,
    eta_d: float,
    eta_v: float,
    include_comm: bool = False,
    tol: float = 1e-7,
    max_iter: int = 500,
) -> float:
    """Rate of the continuous relaxation with no binary penalty.

    Every binary assignment is feasible for the relaxation, so the value
    bounds the rate of any allocation from above.

    Raises:
        InfeasibleAllocationError: If even the relaxation misses the bounds.
    """
    gains = channel_gain_matrix(scenario)
    columns = scenario.num_users + _num_subareas(blocks)
    sigma_point = np.full((scenario.num_subcarriers, columns), 1.0 / columns)
    problem, layout = build_subproblem(
        scenario, blocks, mask, eta_d, eta_v, sigma_point, 0.0, gains, include_comm,
        penalized=False,
    )
    solution = solve(problem, tol=tol, max_iter=max_iter)
    if solution.status == "infeasible":
        raise _infeasible("Relaxed allocation is infeasible", solution)
    solution.raise_for_status()
    _, _, rate, _ = _extract(solution, layout, gains)
    return rate


def algorithm1(
    scenario: Scenario,
    blocks: FimBlocks,
    mask: np.ndarray,
    eta_d: float,
    eta_v: float,
    schedule: Optional[PenaltySchedule] = None,
    initial_sigma: Optional[np.ndarray] = None,
    include_comm: bool = False,
    tol: float = 1e-7,
    max_iter: int = 500,
) -> Allocation:
    """Penalty iteration on the relaxed problem followed by rounding.

    Starts from uniform σ = 1/(M+N) unless ``initial_sigma`` is given. Each
    outer step solves the convexified subproblem, moves the linearization
    point and raises β; the loop ends when the rate changes by at most ε with
    the slack below 1e-4, or after ``max_outer`` steps.

    Raises:
        InfeasibleAllocationError: From the up-front feasibility check, a subproblem or
            the rounding repair.
    """
    schedule = schedule or PenaltySchedule()
    gains = channel_gain_matrix(scenario)
    K, M = scenario.num_subcarriers, scenario.num_users
    columns = M + _num_subareas(blocks)

    if not include_comm:
        check_feasibility(scenario, blocks, mask, eta_d, eta_v, max_iter=max_iter)

    sigma_point = (
        np.full((K, columns), 1.0 / columns) if initial_sigma is None else np.array(initial_sigma)
    )
    beta = schedule.beta0
    previous_rate: Optional[float] = None
    history: List[Dict[str, float]] = []
    sigma = pbar = None
    rate = violation = 0.0

    for outer in range(1, schedule.max_outer + 1):
        problem, layout = build_subproblem(
            scenario, blocks, mask, eta_d, eta_v, sigma_point, beta, gains, include_comm
        )
        solution = solve(problem, tol=tol, max_iter=max_iter)
        if solution.status == "infeasible":
            raise _infeasible("Relaxed allocation subproblem is infeasible", solution)
        sigma, pbar, rate, violation = _extract(solution, layout, gains)
        history.append(
            {
                "outer": outer,
                "beta": beta,
                "rate": rate,
                "violation": violation,
                "objective": rate - beta * violation,
            }
        )
        logger.debug("Penalty iteration", outer=outer, beta=beta, rate=rate, violation=violation)

        if (
            previous_rate is not None
            and abs(rate - previous_rate) <= schedule.epsilon
            and violation <= BINARY_VIOLATION
        ):
            break
        previous_rate = rate
        sigma_point = sigma
        beta = schedule.next(beta)

    status = "optimal" if violation <= BINARY_VIOLATION else "non_binary"
    if status != "optimal":
        logger.warning("Penalty loop ended with non-binary assignment", violation=violation)

    relaxed = Allocation(
        sigma_c=sigma[:, :M],
        sigma_r=sigma[:, M:],
        pbar_c=pbar[:, :M],
        pbar_r=pbar[:, M:],
        rate=rate,
        violation=violation,
        binary=False,
        status=status,
        history=history,
    )
    final = round_and_restore(
        relaxed, scenario, blocks, mask, eta_d, eta_v, gains, include_comm, tol, max_iter
    )
    logger.info(
        "Allocation finished",
        outer_iterations=len(history),
        rate=final.rate,
        relaxed_rate=rate,
        violation=violation,
        **final.summary(),
    )
    return final


def exhaustive_allocation(
    scenario: Scenario,
    blocks: FimBlocks,
    mask: np.ndarray,
    eta_d: float,
    eta_v: float,
    include_comm: bool = False,
    tol: float = 1e-7,
    max_iter: int = 500,
) -> Allocation:
    """Best binary assignment by enumerating all (M+N)^K owner vectors.

    Raises:
        InfeasibleAllocationError: If no assignment meets the CRB bounds.
    """
    gains = channel_gain_matrix(scenario)
    K = scenario.num_subcarriers
    columns = scenario.num_users + _num_subareas(blocks)
    if columns**K > 100_000:
        raise ValueError("Exhaustive search is limited to (M+N)^K ≤ 1e5")

    best: Optional[Allocation] = None
    for owners in itertools.product(range(columns), repeat=K):
        try:
            candidate = solve_power(
                scenario, blocks, mask, np.array(owners), eta_d, eta_v, gains,
                include_comm, tol, max_iter,
            )
        except InfeasibleAllocationError:
            continue
        if best is None or candidate.rate > best.rate:
            best = candidate
    if best is None:
        raise InfeasibleAllocationError("No assignment meets the CRB bounds", violated=[])
    return best


def crb_excess(
    allocation: Allocation,
    blocks: FimBlocks,
    mask: np.ndarray,
    eta_d: float,
    eta_v: float,
    include_comm: bool = False,
) -> float:
    """Largest amount by which a CRB diagonal exceeds its bound (≤ 0 if met)."""
    crbs = crb_matrices(
        blocks, allocation.pbar_r, mask, allocation.pbar_c if include_comm else None
    )
    excess = -np.inf
    for pair in crbs:
        excess = max(excess, max(pair.location_diag) - eta_d, max(pair.velocity_diag) - eta_v)
    return float(excess)
