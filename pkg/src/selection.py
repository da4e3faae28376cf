"""Radar receiver selection by bisection over exact subset feasibility.

For a receiver mask s the information of target n is Σ_r s_r B_r, so each
CRB diagonal is a ratio of a linear and a quadratic form in s:

    [C]_11 = sᵀp¹ / sᵀQs,  [C]_22 = sᵀp² / sᵀQs,

with [Q]_{r,r'} = [B_r]_11 [B_r']_22 − [B_r]_12 [B_r']_21, p¹ the [B_r]_22
entries and p² the [B_r]_11 entries.
"""

import dataclasses
import itertools
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np
import structlog
from scipy import linalg

from .error_handler import BracketError, SingularInformationError
from .fim import FimBlocks

logger = structlog.get_logger(__name__)

OBJECTIVES = ("minimize_d", "minimize_v")
MAX_ENUMERATED_RECEIVERS = 20


@dataclass(frozen=True)
class SelectionInstance:
    """Per-(target, receiver) information matrices with the selection settings.

    ``objective`` names the bound being minimized; the other bound is held
    at ``eta_fixed``.
    """

    B_d: np.ndarray
    B_v: np.ndarray
    num_selected: int
    eta_fixed: float = np.inf
    objective: str = "minimize_d"

    def __post_init__(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if not 1 <= self.num_selected <= self.num_receivers:
            raise ValueError("num_selected must lie in [1, R_x]")

    @property
    def num_targets(self) -> int:
        return self.B_d.shape[0]

    @property
    def num_receivers(self) -> int:
        return self.B_d.shape[1]

    def Q(self, which: str) -> np.ndarray:
        """(N, R_x, R_x) quadratic forms of the information determinant."""
        B = self.B_d if which == "d" else self.B_v
        return np.einsum("nr,ns->nrs", B[:, :, 0, 0], B[:, :, 1, 1]) - np.einsum(
            "nr,ns->nrs", B[:, :, 0, 1], B[:, :, 1, 0]
        )

    def p(self, which: str, entry: int) -> np.ndarray:
        """(N, R_x) numerator vector of diagonal ``entry`` (1 or 2)."""
        B = self.B_d if which == "d" else self.B_v
        if entry == 1:
            return B[:, :, 1, 1]
        if entry == 2:
            return B[:, :, 0, 0]
        raise ValueError("entry must be 1 or 2")


@dataclass
class ReceiverMask:
    s: np.ndarray
    achieved_eta_d: float
    achieved_eta_v: float

    @property
    def bits(self) -> str:
        return "".join(str(int(v)) for v in self.s)

    @property
    def count(self) -> int:
        return int(np.sum(self.s))


@dataclass
class SelectionResult:
    eta_star: float
    mask: ReceiverMask
    iterations: int
    bracket: Tuple[float, float]


@dataclass
class QuadraticConstraint:
    """sᵀPs + qᵀs + const ≤ 0 with P ⪰ 0."""

    P: np.ndarray
    q: np.ndarray
    const: float
    shift: float

    def evaluate(self, s: np.ndarray) -> float:
        s = np.asarray(s, dtype=float)
        return float(s @ self.P @ s + self.q @ s + self.const)

    def holds(self, s: np.ndarray) -> bool:
        return self.evaluate(s) <= 0.0


def build_instance(
    blocks: FimBlocks,
    pbar_r: np.ndarray,
    num_selected: int,
    eta_fixed: float = np.inf,
    objective: str = "minimize_d",
    pbar_c: Optional[np.ndarray] = None,
) -> SelectionInstance:
    """Sum the information blocks over subcarriers for a fixed allocation."""
    B_d = np.einsum("kj,nrkjab->nrab", pbar_r, blocks.D)
    B_v = np.einsum("kj,nrkjab->nrab", pbar_r, blocks.V)
    if pbar_c is not None and blocks.comm_D is not None:
        B_d = B_d + np.einsum("km,nrkmab->nrab", pbar_c, blocks.comm_D)
        B_v = B_v + np.einsum("km,nrkmab->nrab", pbar_c, blocks.comm_V)
    return SelectionInstance(
        B_d=B_d,
        B_v=B_v,
        num_selected=num_selected,
        eta_fixed=eta_fixed,
        objective=objective,
    )


def rational_crb(
    instance: SelectionInstance, s: np.ndarray, which: str, entry: int, n: int = 0
) -> float:
    """CRB diagonal ``entry`` of target ``n`` as sᵀp / sᵀQs.

    Raises:
        SingularInformationError: If the denominator vanishes.
    """
    s = np.asarray(s, dtype=float)
    Q = instance.Q(which)[n]
    p = instance.p(which, entry)[n]
    denominator = float(s @ Q @ s)
    scale = float(np.abs(s) @ np.abs(Q) @ np.abs(s))
    if abs(denominator) <= 1e-15 * scale or scale == 0.0:
        raise SingularInformationError(
            "Selected receivers carry singular information",
            diagnostic="degenerate geometry",
        )
    return float(s @ p) / denominator


def _achieved(instance: SelectionInstance, s: np.ndarray, which: str) -> float:
    """Worst CRB diagonal over all targets, inf when singular."""
    worst = -np.inf
    for n in range(instance.num_targets):
        for entry in (1, 2):
            try:
                value = rational_crb(instance, s, which, entry, n)
            except SingularInformationError:
                return np.inf
            if value <= 0.0:
                return np.inf
            worst = max(worst, value)
    return float(worst)


def evaluate_mask(instance: SelectionInstance, s: np.ndarray) -> ReceiverMask:
    s = np.asarray(s, dtype=int)
    return ReceiverMask(
        s=s,
        achieved_eta_d=_achieved(instance, s, "d"),
        achieved_eta_v=_achieved(instance, s, "v"),
    )


def _objective_bounds(instance: SelectionInstance, mask: ReceiverMask) -> Tuple[float, float]:
    """(achieved objective bound, achieved fixed bound)."""
    if instance.objective == "minimize_d":
        return mask.achieved_eta_d, mask.achieved_eta_v
    return mask.achieved_eta_v, mask.achieved_eta_d


def convexify(Q: np.ndarray, p: np.ndarray, eta: float, num_selected: int) -> QuadraticConstraint:
    """Convex surrogate of sᵀp / sᵀQs ≤ η on binary s with Σs = N_r.

    With Z = −(Q + Qᵀ) and λ its smallest eigenvalue, the rational bound is
    sᵀ(Z − λI)s + (2/η)sᵀp + λN_r ≤ 0, exact because sᵀs = N_r.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    Z = -(Q + Q.T)
    shift = float(linalg.eigvalsh(Z)[0])
    return QuadraticConstraint(
        P=Z - shift * np.eye(Z.shape[0]),
        q=(2.0 / eta) * np.asarray(p, dtype=float),
        const=shift * num_selected,
        shift=shift,
    )


def subsets(num_receivers: int, num_selected: int) -> Iterator[np.ndarray]:
    """Binary masks with ``num_selected`` ones in lexicographic index order."""
    if num_receivers > MAX_ENUMERATED_RECEIVERS:
        raise ValueError(f"Subset enumeration is limited to R_x ≤ {MAX_ENUMERATED_RECEIVERS}")
    for chosen in itertools.combinations(range(num_receivers), num_selected):
        s = np.zeros(num_receivers, dtype=int)
        s[list(chosen)] = 1
        yield s


def feasibility(instance: SelectionInstance, eta: float) -> Optional[ReceiverMask]:
    """First mask (lexicographic) meeting ``eta`` on the objective and the fixed bound."""
    for s in subsets(instance.num_receivers, instance.num_selected):
        mask = evaluate_mask(instance, s)
        target, fixed = _objective_bounds(instance, mask)
        if target <= eta and fixed <= instance.eta_fixed:
            return mask
    return None


def best_subset(instance: SelectionInstance) -> Optional[ReceiverMask]:
    """Mask minimizing the objective bound subject to the fixed bound."""
    best: Optional[ReceiverMask] = None
    best_value = np.inf
    for s in subsets(instance.num_receivers, instance.num_selected):
        mask = evaluate_mask(instance, s)
        target, fixed = _objective_bounds(instance, mask)
        if fixed <= instance.eta_fixed and target < best_value:
            best, best_value = mask, target
    return best


def algorithm2(
    instance: SelectionInstance, eta_low: float, eta_high: float, epsilon: float
) -> SelectionResult:
    """Bisection on the objective bound until the bracket is at most ``epsilon`` wide.

    Raises:
        BracketError: If ``eta_low`` is feasible or ``eta_high`` is not.
    """
    if not 0 <= eta_low < eta_high:
        raise BracketError("Bracket must satisfy 0 <= eta_low < eta_high", bracket=[eta_low, eta_high])
    if feasibility(instance, eta_low) is not None:
        raise BracketError("Lower bracket end is already feasible", bracket=[eta_low, eta_high])
    witness = feasibility(instance, eta_high)
    if witness is None:
        raise BracketError("Upper bracket end is infeasible", bracket=[eta_low, eta_high])

    start = (eta_low, eta_high)
    iterations = 0
    while eta_high - eta_low > epsilon:
        middle = 0.5 * (eta_low + eta_high)
        found = feasibility(instance, middle)
        if found is None:
            eta_low = middle
        else:
            eta_high, witness = middle, found
        iterations += 1
        logger.debug("Bisection step", iteration=iterations, low=eta_low, high=eta_high)

    return SelectionResult(eta_star=eta_high, mask=witness, iterations=iterations, bracket=start)


def select_velocity_variant(
    instance: SelectionInstance,
    eta_d: float,
    bracket: Tuple[float, float],
    epsilon: float,
) -> SelectionResult:
    """Bisect on the velocity bound with the location bound held at ``eta_d``."""
    swapped = dataclasses.replace(instance, objective="minimize_v", eta_fixed=eta_d)
    return algorithm2(swapped, bracket[0], bracket[1], epsilon)


def default_bracket(instance: SelectionInstance, max_doublings: int = 60) -> Tuple[float, float]:
    """Bracket from the all-receivers and worst-subset bounds, widened until valid.

    Raises:
        BracketError: If no subset meets the fixed bound.
    """
    all_on = evaluate_mask(instance, np.ones(instance.num_receivers, dtype=int))
    lowest = _objective_bounds(instance, all_on)[0]
    finite: List[float] = []
    for s in subsets(instance.num_receivers, instance.num_selected):
        target, fixed = _objective_bounds(instance, evaluate_mask(instance, s))
        if np.isfinite(target) and fixed <= instance.eta_fixed:
            finite.append(target)
    if not finite or not np.isfinite(lowest):
        raise BracketError("No receiver subset meets the fixed CRB bound", eta_fixed=instance.eta_fixed)

    eta_low, eta_high = 0.5 * lowest, 2.0 * max(finite)
    for _ in range(max_doublings):
        if feasibility(instance, eta_low) is None:
            break
        eta_low *= 0.5
    for _ in range(max_doublings):
        if feasibility(instance, eta_high) is not None:
            break
        eta_high *= 2.0
    return eta_low, eta_high


def select_receivers(instance: SelectionInstance, epsilon: float) -> SelectionResult:
    """Default bracket followed by bisection on the instance objective."""
    eta_low, eta_high = default_bracket(instance)
    result = algorithm2(instance, eta_low, eta_high, epsilon)
    logger.info(
        "Receiver selection finished",
        objective=instance.objective,
        eta_star=result.eta_star,
        mask=result.mask.bits,
        iterations=result.iterations,
    )
    return result
