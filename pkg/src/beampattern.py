"""Wide-beam transmit covariance design for detection subareas."""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog
from cachetools import LRUCache, cached
from cachetools.keys import hashkey
from scipy import linalg

from .error_handler import IndefiniteMatrixError
from .scenario import Scenario, array_steering, steering_vector

logger = structlog.get_logger(__name__)

DEFAULT_NUM_SAMPLES = 181
# Floor for diagonal entries before the congruence rescale.
_DIAG_FLOOR = 1e-12


@dataclass(frozen=True)
class PatternSpec:
    """Desired 0/1 beampattern of one detection subarea on an angle grid."""

    subarea: Tuple[float, float]
    sample_angles_deg: np.ndarray
    desired: np.ndarray


@dataclass
class CovarianceDesign:
    """Result of one (subcarrier, subarea) covariance design."""

    R: np.ndarray
    omega: np.ndarray
    scale: float
    objective: float
    converged: bool
    iterations: int
    history: List[float] = field(default_factory=list)


@dataclass
class CovarianceSet:
    """Per-(k, n) covariances R*_{k,n} and their square roots Ω_{k,n}."""

    R: np.ndarray
    omega: np.ndarray
    scale: np.ndarray
    objective: np.ndarray
    converged: np.ndarray

    @property
    def num_subcarriers(self) -> int:
        return self.R.shape[0]

    @property
    def num_subareas(self) -> int:
        return self.R.shape[1]

    @classmethod
    def isotropic(
        cls, num_subcarriers: int, num_subareas: int, num_antennas: int
    ) -> "CovarianceSet":
        """R = I/T_x everywhere (flat unit beampattern)."""
        eye = np.eye(num_antennas, dtype=complex) / num_antennas
        R = np.broadcast_to(eye, (num_subcarriers, num_subareas) + eye.shape).copy()
        shape = (num_subcarriers, num_subareas)
        return cls(
            R=R,
            omega=np.sqrt(1.0 / num_antennas) * np.broadcast_to(
                np.eye(num_antennas, dtype=complex), R.shape
            ).copy(),
            scale=np.ones(shape),
            objective=np.zeros(shape),
            converged=np.ones(shape, dtype=bool),
        )


def equal_subareas(lo: float, hi: float, count: int) -> List[Tuple[float, float]]:
    """Split [lo, hi] degrees into ``count`` equal adjacent subareas."""
    edges = np.linspace(lo, hi, count + 1)
    return [(float(a), float(b)) for a, b in zip(edges[:-1], edges[1:])]


def pattern_spec(
    subarea: Sequence[float], num_samples: int = DEFAULT_NUM_SAMPLES, level: float = 1.0
) -> PatternSpec:
    """Desired pattern equal to ``level`` on the subarea, 0 elsewhere."""
    lo, hi = float(subarea[0]), float(subarea[1])
    angles = np.linspace(-90.0, 90.0, num_samples)
    desired = level * ((angles >= lo) & (angles <= hi)).astype(float)
    return PatternSpec(subarea=(lo, hi), sample_angles_deg=angles, desired=desired)


def project_covariance(matrix: np.ndarray) -> np.ndarray:
    """Map a Hermitian matrix onto {R ⪰ 0, diag(R) = 1/T_x}.

    Negative eigenvalues are clipped, then a diagonal congruence rescales the
    diagonal to 1/T_x, which keeps the result PSD.
    """
    num_antennas = matrix.shape[0]
    herm = 0.5 * (matrix + matrix.conj().T)
    w, v = linalg.eigh(herm)
    psd = (v * np.clip(w, 0.0, None)) @ v.conj().T
    diag = np.maximum(np.real(np.diag(psd)), _DIAG_FLOOR)
    scale = 1.0 / np.sqrt(num_antennas * diag)
    out = scale[:, None] * psd * scale[None, :]
    out = 0.5 * (out + out.conj().T)
    np.fill_diagonal(out, 1.0 / num_antennas)
    return out


def matrix_sqrt(R: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Hermitian PSD square root Ω with Ω Ω^H = R.

    Raises:
        IndefiniteMatrixError: If an eigenvalue is below ``-tol``.
    """
    herm = 0.5 * (R + R.conj().T)
    w, v = linalg.eigh(herm)
    if w.min() < -tol:
        raise IndefiniteMatrixError(
            "Covariance is significantly indefinite", min_eigenvalue=float(w.min())
        )
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.conj().T


def pattern_gain(
    scenario: Scenario, R: np.ndarray, k: int, angle: Union[float, np.ndarray]
) -> np.ndarray:
    """Transmit beampattern a_k^H(θ) R a_k(θ) at one or several angles."""
    a = steering_vector(scenario, k, angle)
    return np.real(np.sum(a.conj() * (R @ a), axis=0))


def _grid_gains(R: np.ndarray, steering: np.ndarray) -> np.ndarray:
    return np.real(np.sum(steering.conj() * (R @ steering), axis=0))


def design_covariance(
    spec: PatternSpec,
    num_antennas: int,
    spacing_ratio: float,
    tol: float = 1e-8,
    max_iter: int = 3000,
    initial: Optional[np.ndarray] = None,
) -> CovarianceDesign:
    """Fit (a, R) to the desired pattern under fixed diagonal and PSD constraints.

    Alternates the closed-form scale a = Σ P g / Σ P² (clamped at 0) with a
    projected-gradient step on R. A step is accepted only if the objective
    does not increase; otherwise it is halved.

    Args:
        spec: Desired pattern on the angle grid.
        num_antennas: T_x.
        spacing_ratio: Element spacing over the subcarrier wavelength.
        tol: Relative objective decrease over 10 iterations that counts as converged.
        max_iter: Iteration cap.
        initial: Optional feasible starting covariance (defaults to I/T_x).

    Returns:
        The best design found; ``converged`` is False if the cap was hit.
    """
    if spec.sample_angles_deg.size < 2 * num_antennas:
        raise ValueError("Need at least 2·T_x sample angles")

    steering = array_steering(num_antennas, spacing_ratio, np.radians(spec.sample_angles_deg))
    desired = spec.desired
    desired_energy = float(desired @ desired)

    def best_scale(gains: np.ndarray) -> float:
        if desired_energy == 0.0:
            return 0.0
        return max(0.0, float(desired @ gains) / desired_energy)

    def objective(scale: float, gains: np.ndarray) -> float:
        residual = scale * desired - gains
        return float(residual @ residual)

    gram = np.abs(steering.conj().T @ steering) ** 2
    lipschitz = 2.0 * float(linalg.eigvalsh(gram)[-1])
    step = 1.0 / lipschitz

    R = project_covariance(initial) if initial is not None else (
        np.eye(num_antennas, dtype=complex) / num_antennas
    )
    gains = _grid_gains(R, steering)
    scale = best_scale(gains)
    value = objective(scale, gains)
    history = [value]
    converged = False
    iterations = 0

    for iterations in range(1, max_iter + 1):
        weights = 2.0 * (gains - scale * desired)
        grad = (steering * weights) @ steering.conj().T

        accepted = False
        for _ in range(40):
            candidate = project_covariance(R - step * grad)
            cand_gains = _grid_gains(candidate, steering)
            cand_scale = best_scale(cand_gains)
            cand_value = objective(cand_scale, cand_gains)
            if cand_value <= value:
                R, gains, scale, value = candidate, cand_gains, cand_scale, cand_value
                step = min(step * 1.25, 1e3 / lipschitz)
                accepted = True
                break
            step *= 0.5

        history.append(value)
        if not accepted:
            converged = True
            break
        if len(history) > 10 and history[-11] - history[-1] <= tol * (1.0 + history[-1]):
            converged = True
            break

    if not converged:
        logger.warning(
            "Covariance design hit iteration cap",
            subarea=spec.subarea,
            iterations=iterations,
            objective=value,
        )

    return CovarianceDesign(
        R=R,
        omega=matrix_sqrt(R),
        scale=scale,
        objective=value,
        converged=converged,
        iterations=iterations,
        history=history,
    )


_design_cache: LRUCache = LRUCache(maxsize=32)


@cached(
    _design_cache,
    key=lambda num_antennas, ratios, subareas, num_samples, tol, max_iter: hashkey(
        num_antennas, ratios, subareas, num_samples, tol, max_iter
    ),
)
def _design_all(
    num_antennas: int,
    ratios: Tuple[float, ...],
    subareas: Tuple[Tuple[float, float], ...],
    num_samples: int,
    tol: float,
    max_iter: int,
) -> CovarianceSet:
    shape = (len(ratios), len(subareas))
    R = np.zeros(shape + (num_antennas, num_antennas), dtype=complex)
    omega = np.zeros_like(R)
    scale = np.zeros(shape)
    objective = np.zeros(shape)
    converged = np.zeros(shape, dtype=bool)

    for n, subarea in enumerate(subareas):
        spec = pattern_spec(subarea, num_samples)
        previous = None
        for k, ratio in enumerate(ratios):
            design = design_covariance(
                spec, num_antennas, ratio, tol=tol, max_iter=max_iter, initial=previous
            )
            previous = design.R
            R[k, n] = design.R
            omega[k, n] = design.omega
            scale[k, n] = design.scale
            objective[k, n] = design.objective
            converged[k, n] = design.converged
        logger.info(
            "Designed subarea covariances",
            subarea=subarea,
            subcarriers=len(ratios),
            worst_objective=float(objective[:, n].max()),
        )

    for array in (R, omega, scale, objective, converged):
        array.setflags(write=False)
    return CovarianceSet(
        R=R, omega=omega, scale=scale, objective=objective, converged=converged
    )


def design_covariances(
    scenario: Scenario,
    num_samples: int = DEFAULT_NUM_SAMPLES,
    tol: float = 1e-8,
    max_iter: int = 3000,
) -> CovarianceSet:
    """Design R*_{k,n} for every subcarrier and detection subarea.

    Designs are warm-started across subcarriers (k-dependence enters only
    through λ_k) and memoized per array/grid/subarea configuration. The
    returned arrays are read-only.
    """
    ratios = tuple(scenario.spacing_ratio(k) for k in range(scenario.num_subcarriers))
    subareas = tuple(
        (float(lo), float(hi)) for lo, hi in scenario.detection_subarea_angles
    )
    if not subareas:
        return CovarianceSet.isotropic(
            scenario.num_subcarriers, 1, scenario.num_tx_antennas
        )
    return _design_all(
        scenario.num_tx_antennas, ratios, subareas, num_samples, tol, max_iter
    )


def pattern_frame(
    scenario: Scenario,
    covariances: CovarianceSet,
    num_samples: int = DEFAULT_NUM_SAMPLES,
) -> pd.DataFrame:
    """Beampattern table with columns (k, n, theta_deg, gain)."""
    angles = np.linspace(-90.0, 90.0, num_samples)
    frames = []
    for k in range(covariances.num_subcarriers):
        for n in range(covariances.num_subareas):
            gains = pattern_gain(scenario, covariances.R[k, n], k, np.radians(angles))
            frames.append(
                pd.DataFrame({"k": k, "n": n, "theta_deg": angles, "gain": gains})
            )
    return pd.concat(frames, ignore_index=True)
