"""Barrier interior-point solver for perspective-log objectives with rotated cones.

Problems have the form

    maximize    Σ w_i σ_i log2(1 + c_i p_i / σ_i) + cᵀx
    subject to  A x = b,  G x ≤ h,  lb ≤ x ≤ ub,
                u_j(x) v_j(x) ≥ w_j(x)²,  u_j, v_j ≥ 0,

with u, v, w affine. Every 2×2 LMI reduces to one rotated cone plus two
sign rows, so no semidefinite cone is needed.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog
from scipy import linalg

from .error_handler import ErrorHandler, InfeasibleProblemError, NonConvergenceError

logger = structlog.get_logger(__name__)

LN2 = np.log(2.0)
SIGMA_FLOOR = 1e-9
# Phase-I slack above -PHASE_ONE_MARGIN certifies infeasibility.
PHASE_ONE_MARGIN = 1e-9

Coefficients = Dict[int, float]
Affine = Tuple[Coefficients, float]


@dataclass
class RotatedCone:
    """u(x)·v(x) ≥ w(x)², u, v ≥ 0."""

    u: Affine
    v: Affine
    w: Affine
    tag: str = "cone"


@dataclass
class LogTerm:
    """weight·σ·log2(1 + gain·p/σ), or weight·log2(1 + gain·p) without σ."""

    weight: float
    gain: float
    numerator: int
    denominator: Optional[int] = None


@dataclass
class ConicSolution:
    values: np.ndarray
    objective_value: float
    kkt_residual: float
    status: str
    iterations: int = 0
    certificate: Optional[float] = None
    violated: List[str] = field(default_factory=list)
    names: List[str] = field(default_factory=list)

    def value(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def raise_for_status(self) -> "ConicSolution":
        """Raise the matching pipeline error unless the solve is optimal."""
        if self.status == "infeasible":
            raise InfeasibleProblemError(
                "Conic problem is infeasible",
                certificate=float(self.certificate if self.certificate is not None else np.inf),
                point=self.values,
                violated=self.violated,
            )
        if self.status == "max_iter":
            raise NonConvergenceError(
                "Conic solver hit its iteration cap",
                iterations=self.iterations,
                kkt_residual=self.kkt_residual,
            )
        return self


def affine_value(form: Affine, x: np.ndarray) -> float:
    coeffs, const = form
    return float(const + sum(c * x[i] for i, c in coeffs.items()))


def lmi_to_rsoc(
    matrix: Sequence[Sequence[Affine]], tag: str = "lmi"
) -> Tuple[RotatedCone, List[Affine]]:
    """Reduce a symmetric 2×2 affine LMI to a rotated cone and two sign rows.

    M ⪰ 0  ⇔  M11 ≥ 0, M22 ≥ 0, M11·M22 ≥ M12².

    Returns:
        The cone (u=M11, v=M22, w=M12) and the affine forms that must be
        nonnegative.
    """
    m11, m12, m22 = matrix[0][0], matrix[0][1], matrix[1][1]
    return RotatedCone(u=m11, v=m22, w=m12, tag=tag), [m11, m22]


def lmi_holds(matrix: np.ndarray) -> bool:
    """Verdict of the cone reduction on a numeric symmetric 2×2 matrix."""
    as_affine = [[({}, float(matrix[i][j])) for j in range(2)] for i in range(2)]
    cone, signs = lmi_to_rsoc(as_affine)
    empty = np.zeros(0)
    if any(affine_value(s, empty) < 0 for s in signs):
        return False
    u, v, w = (affine_value(f, empty) for f in (cone.u, cone.v, cone.w))
    return u * v >= w * w


def perspective_rate(sigma: float, pbar: float, gain: float) -> float:
    """σ·log2(1 + gain·p̄/σ), extended by 0 for σ ≤ 1e-12."""
    if sigma <= 1e-12:
        return 0.0
    return float(sigma * np.log2(1.0 + gain * pbar / sigma))


class ConicProblem:
    """Incremental builder for a maximization problem solved by :func:`solve`."""

    def __init__(self) -> None:
        self.names: List[str] = []
        self.lower: List[float] = []
        self.upper: List[float] = []
        self.eq_rows: List[Coefficients] = []
        self.eq_rhs: List[float] = []
        self.eq_tags: List[str] = []
        self.ineq_rows: List[Coefficients] = []
        self.ineq_rhs: List[float] = []
        self.ineq_tags: List[str] = []
        self.cones: List[RotatedCone] = []
        self.log_terms: List[LogTerm] = []
        self.linear: Coefficients = {}

    @property
    def num_variables(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def add_variable(
        self, name: str, lower: float = 0.0, upper: float = np.inf
    ) -> int:
        if name in self.names:
            raise ValueError(f"Duplicate variable: {name}")
        if not lower < upper:
            raise ValueError(f"Empty bounds for {name}: [{lower}, {upper}]")
        self.names.append(name)
        self.lower.append(float(lower))
        self.upper.append(float(upper))
        return len(self.names) - 1

    def _check(self, coeffs: Coefficients) -> Coefficients:
        for i in coeffs:
            if not 0 <= i < self.num_variables:
                raise ValueError(f"Unknown variable index {i}")
        return {int(i): float(c) for i, c in coeffs.items() if c != 0.0}

    def add_equality(self, coeffs: Coefficients, rhs: float, tag: str = "eq") -> None:
        self.eq_rows.append(self._check(coeffs))
        self.eq_rhs.append(float(rhs))
        self.eq_tags.append(tag)

    def add_inequality(self, coeffs: Coefficients, rhs: float, tag: str = "ineq") -> None:
        """Σ coeffs·x ≤ rhs."""
        self.ineq_rows.append(self._check(coeffs))
        self.ineq_rhs.append(float(rhs))
        self.ineq_tags.append(tag)

    def add_nonnegative(self, form: Affine, tag: str) -> None:
        """affine(x) ≥ 0."""
        coeffs, const = form
        self.add_inequality({i: -c for i, c in coeffs.items()}, const, tag)

    def add_cone(self, cone: RotatedCone) -> None:
        for coeffs, _ in (cone.u, cone.v, cone.w):
            self._check(coeffs)
        self.cones.append(cone)

    def add_lmi(self, matrix: Sequence[Sequence[Affine]], tag: str = "lmi") -> None:
        cone, signs = lmi_to_rsoc(matrix, tag)
        self.add_cone(cone)
        for form in signs:
            self.add_nonnegative(form, "lmi_sign")

    def add_log_term(
        self,
        weight: float,
        gain: float,
        numerator: int,
        denominator: Optional[int] = None,
    ) -> None:
        self._check({numerator: 1.0})
        if denominator is not None:
            self._check({denominator: 1.0})
        self.log_terms.append(LogTerm(float(weight), float(gain), numerator, denominator))

    def add_linear_objective(self, coeffs: Coefficients) -> None:
        for i, c in self._check(coeffs).items():
            self.linear[i] = self.linear.get(i, 0.0) + c

    def count(self, tag: str) -> int:
        """Number of inequality rows and cones carrying ``tag``."""
        return self.ineq_tags.count(tag) + sum(cone.tag == tag for cone in self.cones)

    def objective(self, x: np.ndarray) -> float:
        total = sum(c * x[i] for i, c in self.linear.items())
        for term in self.log_terms:
            if term.denominator is None:
                total += term.weight * np.log2(1.0 + term.gain * x[term.numerator])
            else:
                total += term.weight * perspective_rate(
                    x[term.denominator], x[term.numerator], term.gain
                )
        return float(total)

    def violations(self, x: np.ndarray, tol: float = 0.0) -> List[str]:
        """Tags of constraints violated by more than ``tol`` at ``x``."""
        tags = set()
        for row, rhs, tag in zip(self.ineq_rows, self.ineq_rhs, self.ineq_tags):
            if sum(c * x[i] for i, c in row.items()) - rhs > tol:
                tags.add(tag)
        for row, rhs, tag in zip(self.eq_rows, self.eq_rhs, self.eq_tags):
            if abs(sum(c * x[i] for i, c in row.items()) - rhs) > tol:
                tags.add(tag)
        for cone in self.cones:
            u, v, w = (affine_value(f, x) for f in (cone.u, cone.v, cone.w))
            if u < -tol or v < -tol or u * v - w * w < -tol:
                tags.add(cone.tag)
        lower, upper = np.asarray(self.lower), np.asarray(self.upper)
        if np.any(x < lower - tol) or np.any(x > upper + tol):
            tags.add("bound")
        return sorted(tags)


@dataclass
class _Compiled:
    """Dense arrays of a problem; phase one appends a slack column."""

    A: np.ndarray
    b: np.ndarray
    G: np.ndarray
    h: np.ndarray
    Cu: np.ndarray
    cu: np.ndarray
    Cv: np.ndarray
    cv: np.ndarray
    Cw: np.ndarray
    cw: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    c: np.ndarray
    log_weight: np.ndarray
    log_gain: np.ndarray
    log_num: np.ndarray
    log_den: np.ndarray

    @property
    def degree(self) -> int:
        return int(
            np.isfinite(self.lower).sum()
            + np.isfinite(self.upper).sum()
            + self.G.shape[0]
            + 2 * self.Cu.shape[0]
        )


def _dense(rows: Sequence[Coefficients], n: int) -> np.ndarray:
    out = np.zeros((len(rows), n))
    for r, row in enumerate(rows):
        for i, c in row.items():
            out[r, i] = c
    return out


def _compile(problem: ConicProblem) -> _Compiled:
    n = problem.num_variables
    cones = problem.cones
    c = np.zeros(n)
    for i, coef in problem.linear.items():
        c[i] = coef
    terms = problem.log_terms
    return _Compiled(
        A=_dense(problem.eq_rows, n),
        b=np.asarray(problem.eq_rhs, dtype=float),
        G=_dense(problem.ineq_rows, n),
        h=np.asarray(problem.ineq_rhs, dtype=float),
        Cu=_dense([cone.u[0] for cone in cones], n),
        cu=np.array([cone.u[1] for cone in cones], dtype=float),
        Cv=_dense([cone.v[0] for cone in cones], n),
        cv=np.array([cone.v[1] for cone in cones], dtype=float),
        Cw=_dense([cone.w[0] for cone in cones], n),
        cw=np.array([cone.w[1] for cone in cones], dtype=float),
        lower=np.asarray(problem.lower, dtype=float),
        upper=np.asarray(problem.upper, dtype=float),
        c=c,
        log_weight=np.array([t.weight for t in terms], dtype=float),
        log_gain=np.array([t.gain for t in terms], dtype=float),
        log_num=np.array([t.numerator for t in terms], dtype=int),
        log_den=np.array(
            [-1 if t.denominator is None else t.denominator for t in terms], dtype=int
        ),
    )


def _slacks(prob: _Compiled, x: np.ndarray) -> Optional[Dict[str, np.ndarray]]:
    """Constraint slacks at x, or None outside the barrier domain."""
    lo_mask = np.isfinite(prob.lower)
    up_mask = np.isfinite(prob.upper)
    s_lo = x[lo_mask] - prob.lower[lo_mask]
    s_up = prob.upper[up_mask] - x[up_mask]
    s_in = prob.h - prob.G @ x
    u = prob.Cu @ x + prob.cu
    v = prob.Cv @ x + prob.cv
    w = prob.Cw @ x + prob.cw
    q = u * v - w * w
    for arr in (s_lo, s_up, s_in, u, v, q):
        if arr.size and not np.all(arr > 0):
            return None
    den = np.where(prob.log_den >= 0, x[np.maximum(prob.log_den, 0)], 1.0)
    if np.any(den <= 0):
        return None
    return {"lo": s_lo, "up": s_up, "in": s_in, "u": u, "v": v, "w": w, "q": q}


def _objective(prob: _Compiled, x: np.ndarray) -> float:
    value = float(prob.c @ x)
    if prob.log_weight.size:
        num = x[prob.log_num]
        persp = prob.log_den >= 0
        den = np.where(persp, x[np.maximum(prob.log_den, 0)], 1.0)
        value += float(
            np.sum(prob.log_weight * den * np.log1p(prob.log_gain * num / den)) / LN2
        )
    return value


def _barrier(slacks: Dict[str, np.ndarray]) -> float:
    return float(
        -np.sum(np.log(slacks["lo"]))
        - np.sum(np.log(slacks["up"]))
        - np.sum(np.log(slacks["in"]))
        - np.sum(np.log(slacks["q"]))
    )


def _derivatives(
    prob: _Compiled, x: np.ndarray, t: float, slacks: Dict[str, np.ndarray]
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient and Hessian of t·(−f) + barrier."""
    n = x.size
    grad = -t * prob.c.copy()
    hess = np.zeros((n, n))

    for k in range(prob.log_weight.size):
        wgt, gain = prob.log_weight[k], prob.log_gain[k]
        i, j = prob.log_num[k], prob.log_den[k]
        if j < 0:
            denom = 1.0 + gain * x[i]
            grad[i] -= t * wgt * gain / (denom * LN2)
            hess[i, i] += t * wgt * gain**2 / (denom**2 * LN2)
            continue
        q = x[i] / x[j]
        z = gain * q
        grad[i] -= t * wgt * gain / ((1.0 + z) * LN2)
        grad[j] -= t * wgt * (np.log1p(z) - z / (1.0 + z)) / LN2
        curv = t * wgt * gain**2 / ((1.0 + z) ** 2 * x[j] * LN2)
        hess[i, i] += curv
        hess[i, j] -= curv * q
        hess[j, i] -= curv * q
        hess[j, j] += curv * q * q

    lo_idx = np.flatnonzero(np.isfinite(prob.lower))
    up_idx = np.flatnonzero(np.isfinite(prob.upper))
    grad[lo_idx] -= 1.0 / slacks["lo"]
    grad[up_idx] += 1.0 / slacks["up"]
    hess[lo_idx, lo_idx] += 1.0 / slacks["lo"] ** 2
    hess[up_idx, up_idx] += 1.0 / slacks["up"] ** 2

    if prob.G.shape[0]:
        inv = 1.0 / slacks["in"]
        grad += prob.G.T @ inv
        hess += (prob.G.T * inv**2) @ prob.G

    u, v, w, q = slacks["u"], slacks["v"], slacks["w"], slacks["q"]
    for k in range(u.size):
        J = np.vstack([prob.Cu[k], prob.Cv[k], prob.Cw[k]])
        dq = np.array([v[k], u[k], -2.0 * w[k]])
        ddq = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -2.0]])
        grad += J.T @ (-dq / q[k])
        local = np.outer(dq, dq) / q[k] ** 2 - ddq / q[k]
        hess += J.T @ local @ J

    return grad, hess


def _newton_step(
    handler: ErrorHandler,
    hess: np.ndarray,
    grad: np.ndarray,
    A: np.ndarray,
    residual: np.ndarray,
) -> np.ndarray:
    """Solve the equality-constrained Newton system with Jacobi scaling."""
    scale = 1.0 / np.sqrt(np.maximum(np.diag(hess), 1e-300))
    H = hess * scale[:, None] * scale[None, :]
    g = grad * scale
    As = A * scale[None, :]
    factor, _ = handler.regularized_cholesky(H)
    h_inv_g = linalg.cho_solve(factor, g)
    if As.shape[0] == 0:
        return -h_inv_g * scale
    h_inv_at = linalg.cho_solve(factor, As.T)
    schur, _ = handler.regularized_cholesky(As @ h_inv_at)
    nu = linalg.cho_solve(schur, -As @ h_inv_g - residual)
    return -(h_inv_g + h_inv_at @ nu) * scale


def _barrier_method(
    prob: _Compiled,
    x0: np.ndarray,
    tol: float,
    max_iter: int,
    handler: ErrorHandler,
    trace: Optional[List[dict]] = None,
    early_exit=None,
) -> Tuple[np.ndarray, float, int, bool]:
    """Run centering steps with t ← 10·t until ν/t ≤ tol.

    Returns:
        (x, final t, Newton iterations used, converged flag)
    """
    x = x0.copy()
    nu = max(prob.degree, 1)
    t = 1.0
    iterations = 0

    def phi(point: np.ndarray) -> float:
        sl = _slacks(prob, point)
        if sl is None:
            return np.inf
        return -t * _objective(prob, point) + _barrier(sl)

    while True:
        for _ in range(100):
            slacks = _slacks(prob, x)
            grad, hess = _derivatives(prob, x, t, slacks)
            residual = prob.b - prob.A @ x if prob.A.shape[0] else np.zeros(0)
            dx = _newton_step(handler, hess, grad, prob.A, residual)
            decrement = float(dx @ hess @ dx)
            iterations += 1
            if trace is not None:
                trace.append(
                    {
                        "iteration": iterations,
                        "t": t,
                        "objective": _objective(prob, x),
                        "gap": nu / t,
                        "decrement": decrement,
                        "primal_residual": float(np.max(np.abs(residual), initial=0.0)),
                    }
                )
            if decrement / 2.0 <= 1e-10:
                break

            step = 1.0
            current = phi(x)
            slope = float(grad @ dx)
            while step > 1e-14:
                candidate = x + step * dx
                value = phi(candidate)
                if np.isfinite(value) and value <= current + 0.25 * step * slope:
                    break
                step *= 0.5
            if step <= 1e-14:
                break
            x = x + step * dx
            if iterations >= max_iter:
                return x, t, iterations, False

        if early_exit is not None and early_exit(x, t):
            return x, t, iterations, True
        if nu / t <= tol:
            return x, t, iterations, True
        if iterations >= max_iter:
            return x, t, iterations, False
        t *= 10.0


def _phase_one(
    problem: ConicProblem, prob: _Compiled, handler: ErrorHandler, max_iter: int
) -> Tuple[np.ndarray, float]:
    """Minimize a common slack s added to every inequality and cone side.

    Returns:
        (strictly feasible point or Phase-I minimizer, optimal slack)
    """
    n = prob.c.size
    if prob.A.shape[0]:
        x0 = np.linalg.lstsq(prob.A, prob.b, rcond=None)[0]
    else:
        x0 = np.zeros(n)
    lo_idx = np.flatnonzero(np.isfinite(prob.lower))
    up_idx = np.flatnonzero(np.isfinite(prob.upper))
    free_lo = np.flatnonzero(~np.isfinite(prob.lower))
    free_up = np.flatnonzero(~np.isfinite(prob.upper))
    box = 1e6 * (1.0 + float(np.max(np.abs(x0), initial=0.0)))

    rows = [prob.G]
    rhs = [prob.h]
    if lo_idx.size:
        rows.append(-np.eye(n)[lo_idx])
        rhs.append(-prob.lower[lo_idx])
    if up_idx.size:
        rows.append(np.eye(n)[up_idx])
        rhs.append(prob.upper[up_idx])
    if free_up.size:
        rows.append(np.eye(n)[free_up])
        rhs.append(x0[free_up] + box)
    if free_lo.size:
        rows.append(-np.eye(n)[free_lo])
        rhs.append(box - x0[free_lo])
    G = np.vstack(rows) if rows else np.zeros((0, n))
    h = np.concatenate(rhs) if rhs else np.zeros(0)

    def widen(mat: np.ndarray, col: float) -> np.ndarray:
        return np.hstack([mat, np.full((mat.shape[0], 1), col)])

    aux = _Compiled(
        A=widen(prob.A, 0.0),
        b=prob.b,
        G=widen(G, -1.0),
        h=h,
        Cu=widen(prob.Cu, 1.0),
        cu=prob.cu,
        Cv=widen(prob.Cv, 1.0),
        cv=prob.cv,
        Cw=widen(prob.Cw, 0.0),
        cw=prob.cw,
        lower=np.append(np.full(n, -np.inf), -1.0),
        upper=np.full(n + 1, np.inf),
        c=np.append(np.zeros(n), -1.0),
        log_weight=np.zeros(0),
        log_gain=np.zeros(0),
        log_num=np.zeros(0, dtype=int),
        log_den=np.zeros(0, dtype=int),
    )

    u = prob.Cu @ x0 + prob.cu
    v = prob.Cv @ x0 + prob.cv
    w = prob.Cw @ x0 + prob.cw
    needed = np.concatenate(
        [G @ x0 - h, np.abs(w) + 1.0 - u, np.abs(w) + 1.0 - v, [0.0]]
    )
    s0 = float(np.max(needed)) + 1.0
    z0 = np.append(x0, s0)

    z, _, _, _ = _barrier_method(
        aux,
        z0,
        tol=1e-9,
        max_iter=max_iter,
        handler=handler,
        early_exit=lambda point, t: point[-1] < -1e-3,
    )
    logger.debug("Phase I finished", slack=float(z[-1]))
    return z[:n], float(z[-1])


def solve(
    problem: ConicProblem,
    tol: float = 1e-7,
    max_iter: int = 500,
    trace_path: Optional[Union[str, Path]] = None,
    x0: Optional[np.ndarray] = None,
    handler: Optional[ErrorHandler] = None,
) -> ConicSolution:
    """Maximize the problem objective by a log-barrier interior-point method.

    Args:
        problem: Problem built with :class:`ConicProblem`.
        tol: Duality-measure target ν/t.
        max_iter: Cap on Newton iterations (Phase I and main phase each).
        trace_path: Optional CSV path receiving the iterate trace.
        x0: Optional strictly feasible starting point; skips Phase I.
        handler: Error handler providing the regularized factorization.

    Returns:
        Solution with status ``optimal``, ``infeasible`` or ``max_iter``.
    """
    handler = handler or ErrorHandler()
    prob = _compile(problem)

    if x0 is not None and _slacks(prob, np.asarray(x0, dtype=float)) is not None:
        start = np.asarray(x0, dtype=float)
    else:
        start, certificate = _phase_one(problem, prob, handler, max_iter)
        if certificate > -PHASE_ONE_MARGIN or _slacks(prob, start) is None:
            violated = problem.violations(start)
            logger.info(
                "Conic problem infeasible",
                certificate=certificate,
                violated=violated,
            )
            return ConicSolution(
                values=start,
                objective_value=float("nan"),
                kkt_residual=float("inf"),
                status="infeasible",
                certificate=certificate,
                violated=violated,
                names=list(problem.names),
            )

    trace: Optional[List[dict]] = [] if trace_path is not None else None
    x, t, iterations, converged = _barrier_method(
        prob, start, tol, max_iter, handler, trace=trace
    )

    primal = float(np.max(np.abs(prob.A @ x - prob.b), initial=0.0))
    primal = max(primal, float(np.max(prob.G @ x - prob.h, initial=0.0)))
    kkt = max(primal, max(prob.degree, 1) / t) if prob.degree else primal
    status = "optimal" if converged and kkt <= tol else "max_iter"

    if trace is not None:
        pd.DataFrame(trace).to_csv(trace_path, index=False)
    if status != "optimal":
        logger.warning(
            "Conic solve did not reach tolerance",
            iterations=iterations,
            kkt_residual=kkt,
        )

    return ConicSolution(
        values=x,
        objective_value=problem.objective(x),
        kkt_residual=kkt,
        status=status,
        iterations=iterations,
        names=list(problem.names),
    )
