"""
Strictly convex quadratic programs with affine constraints

    min  0.5 x'Hx + g'x + c0
    s.t. Aeq x = beq,  Aineq x <= bineq

Solved by a Mehrotra predictor-corrector interior-point method followed by an
exact KKT solve on the identified active set, so that the multipliers are
accurate to round-off. A guessed active set can be tried first.
"""
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Literal, Optional

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgWarning, eigvalsh, lu_factor, lu_solve, null_space, qr
from scipy.sparse.linalg import splu

from src.config import settings
from src.utils.logging import get_logger
from src.utils.metrics import (
    qp_degenerate_constraints_total,
    qp_solve_duration_seconds,
    qp_solves_total,
)

logger = get_logger(__name__)

STEP_TO_BOUNDARY = 0.995
WARM_START_ROUNDS = 5
# Relative pivot below which an active row counts as linearly dependent
DEPENDENCE_TOLERANCE = 1e-9

# Sizes already reported as unchecked, to warn once per problem shape
_SKIPPED_CONVEXITY_SIZES: set[int] = set()


class QpError(Exception):
    """Base class for QP solver failures."""

    outcome = "error"


class InfeasibleProblem(QpError):
    """No point satisfies the constraints."""

    outcome = "infeasible"


class NotStrictlyConvex(QpError):
    """Reduced Hessian is not positive definite."""

    outcome = "nonconvex"


class MaxIterationsExceeded(QpError):
    """Solver stalled above the requested tolerance."""

    outcome = "max_iter"


Matrix = np.ndarray | sp.spmatrix


@dataclass(eq=False)
class QuadProgram:
    """
    QP data. Matrices may be dense arrays or scipy sparse matrices.
    Missing constraint blocks are stored as empty (0 x d) matrices.
    """

    H: Matrix
    g: np.ndarray
    c0: float = 0.0
    Aeq: Optional[Matrix] = None
    beq: Optional[np.ndarray] = None
    Aineq: Optional[Matrix] = None
    bineq: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        d = self.g.size
        self.H = _as_float_matrix(self.H)
        if self.H.shape != (d, d):
            raise ValueError(f"H must be {d}x{d}, got {self.H.shape}")
        asym = abs(self.H - self.H.T)
        if (asym.max() if d else 0.0) > 1e-12 * max(1.0, abs(self.H).max() if d else 1.0):
            raise ValueError("H must be symmetric")
        self.c0 = float(self.c0)
        self.Aeq, self.beq = _constraint_block(self.Aeq, self.beq, d, "eq")
        self.Aineq, self.bineq = _constraint_block(self.Aineq, self.bineq, d, "ineq")

    @property
    def num_vars(self) -> int:
        return self.g.size

    @property
    def num_eq(self) -> int:
        return self.Aeq.shape[0]

    @property
    def num_ineq(self) -> int:
        return self.Aineq.shape[0]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.H)

    def scale(self) -> float:
        """Magnitude of the problem data used for relative tolerances."""
        return max(_norm_inf(self.g), _norm_inf(self.beq), _norm_inf(self.bineq))


@dataclass(eq=False)
class KktSolution:
    """Primal-dual solution. ineq_duals are nonnegative."""

    x_opt: np.ndarray
    eq_duals: np.ndarray
    ineq_duals: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int = 0
    method: str = "interior_point"
    active_set: tuple[int, ...] = ()
    degenerate: tuple[int, ...] = field(default_factory=tuple)

    def slack(self, qp: QuadProgram) -> np.ndarray:
        return qp.bineq - qp.Aineq @ self.x_opt


def objective_value(qp: QuadProgram, x: np.ndarray) -> float:
    """0.5 x'Hx + g'x + c0."""
    x = np.asarray(x, dtype=float)
    if x.shape != (qp.num_vars,):
        raise ValueError(f"Expected a vector of length {qp.num_vars}, got {x.shape}")
    return float(0.5 * x @ (qp.H @ x) + qp.g @ x + qp.c0)


def kkt_residual(qp: QuadProgram, x: np.ndarray, eq_duals: np.ndarray, ineq_duals: np.ndarray) -> float:
    """
    Largest violation among stationarity, primal feasibility, dual
    feasibility and complementary slackness (infinity norms).
    """
    stationarity = qp.H @ x + qp.g + qp.Aeq.T @ eq_duals + qp.Aineq.T @ ineq_duals
    slack = qp.bineq - qp.Aineq @ x
    return max(
        _norm_inf(stationarity),
        _norm_inf(qp.Aeq @ x - qp.beq),
        _norm_inf(np.maximum(0.0, -slack)),
        _norm_inf(np.maximum(0.0, -ineq_duals)),
        _norm_inf(ineq_duals * slack),
    )


def check_strict_convexity(qp: QuadProgram, threshold: Optional[float] = None) -> float:
    """
    Smallest eigenvalue of the Hessian reduced to the nullspace of Aeq.

    Raises:
        NotStrictlyConvex: If it does not exceed the threshold
    """
    threshold = settings.convexity_threshold if threshold is None else threshold
    H = _dense(qp.H)
    if qp.num_eq:
        Z = null_space(_dense(qp.Aeq))
    else:
        Z = np.eye(qp.num_vars)
    if Z.shape[1] == 0:
        return float("inf")
    reduced = Z.T @ H @ Z
    min_eig = float(eigvalsh(0.5 * (reduced + reduced.T))[0])
    if min_eig <= threshold:
        raise NotStrictlyConvex(
            f"Reduced Hessian min eigenvalue {min_eig:.3e} <= {threshold:.1e}"
        )
    return min_eig


def solve(
    qp: QuadProgram,
    tol: Optional[float] = None,
    *,
    max_iter: Optional[int] = None,
    warm_active: Optional[Iterable[int]] = None,
    check_convexity: bool | Literal["auto"] = "auto",
) -> KktSolution:
    """
    Solve a strictly convex QP to a KKT residual within tol.

    Args:
        qp: Problem data
        tol: KKT tolerance relative to 1 + data scale (default settings.qp_tolerance)
        max_iter: Interior-point iteration cap (default settings.qp_max_iterations)
        warm_active: Guessed active inequality rows tried before the interior point
        check_convexity: Run the reduced-Hessian check; "auto" checks dense problems only

    Returns:
        KktSolution with clipped nonnegative inequality duals

    Raises:
        InfeasibleProblem: Inconsistent equalities or empty feasible set
        NotStrictlyConvex: Reduced Hessian check failed
        MaxIterationsExceeded: Interior point did not reach tol
    """
    tol = settings.qp_tolerance if tol is None else tol
    max_iter = settings.qp_max_iterations if max_iter is None else max_iter
    sparse = qp.num_vars > settings.qp_dense_threshold
    backend = "sparse" if sparse else "dense"
    method = "warm" if warm_active is not None else "interior_point"

    with qp_solve_duration_seconds.labels(backend=backend).time():
        try:
            solution = _Solver(qp, tol, max_iter, sparse).run(warm_active, check_convexity)
        except QpError as exc:
            qp_solves_total.labels(method=method, outcome=exc.outcome).inc()
            logger.debug(f"QP solve failed ({exc.outcome}): {exc}")
            raise

    qp_solves_total.labels(method=solution.method, outcome="ok").inc()
    return solution


class _Solver:
    """One solve of one QP; holds the backend-specific matrices."""

    def __init__(self, qp: QuadProgram, tol: float, max_iter: int, sparse: bool):
        self.qp = qp
        self.tol = tol
        self.max_iter = max_iter
        self.sparse = sparse
        self.accept = tol * (1.0 + qp.scale())
        convert = _sparse if sparse else _dense
        self.H = convert(qp.H)
        self.C = convert(qp.Aineq)
        self.d = qp.bineq
        self.g = qp.g
        self.eq_rows = np.arange(qp.num_eq)
        self.A = convert(qp.Aeq)
        self.b = qp.beq
        self._eq_basis: Optional[np.ndarray] = None

    def run(self, warm_active: Optional[Iterable[int]], check_convexity: bool | str) -> KktSolution:
        if not self.sparse:
            self._drop_redundant_equalities()
        if check_convexity is True or (check_convexity == "auto" and not self.sparse):
            check_strict_convexity(QuadProgram(H=self.H, g=self.g, Aeq=self.A, beq=self.b))
        elif check_convexity == "auto" and self.qp.num_vars not in _SKIPPED_CONVEXITY_SIZES:
            _SKIPPED_CONVEXITY_SIZES.add(self.qp.num_vars)
            logger.warning(
                f"Skipping convexity check on sparse QP with {self.qp.num_vars} variables"
            )

        if warm_active is not None:
            result = self._active_set(sorted(set(int(k) for k in warm_active)))
            if result is not None:
                return self._finalize(*result, iterations=0, method="warm")
            logger.debug("Warm active set did not settle, falling back to interior point")

        if self.qp.num_ineq == 0:
            result = self._equality_kkt(np.arange(0))
            if result is None:
                raise NotStrictlyConvex("Singular KKT system")
            return self._finalize(*result, iterations=0, method="direct")

        return self._interior_point()

    # Equality handling

    def _drop_redundant_equalities(self) -> None:
        """Keep a maximal independent subset of equality rows."""
        p = self.qp.num_eq
        if p == 0:
            return
        A = self.A
        _, R, piv = qr(A.T, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        cutoff = (diag[0] if diag.size else 0.0) * max(A.shape) * np.finfo(float).eps
        rank = int(np.sum(diag > max(cutoff, 1e-14)))
        if rank == p:
            return
        rows = np.sort(piv[:rank])
        if rank:
            x_ls = np.linalg.lstsq(A[rows], self.b[rows], rcond=None)[0]
        else:
            x_ls = np.zeros(self.qp.num_vars)
        mismatch = _norm_inf(A @ x_ls - self.b)
        if mismatch > 1e-9 * (1.0 + _norm_inf(self.b)):
            raise InfeasibleProblem(f"Equality constraints are inconsistent (mismatch {mismatch:.3e})")
        logger.debug(f"Dropped {p - rank} redundant equality rows")
        self.eq_rows = rows
        self.A = A[rows]
        self.b = self.b[rows]

    def _independent_active(self, active: np.ndarray) -> np.ndarray:
        """
        Largest subset of the active inequality rows that is linearly
        independent of the equality rows and of each other.

        Dropped rows are implied by the kept ones and get a zero multiplier,
        e.g. an input bound that coincides with u(0) = a.
        """
        if active.size == 0:
            return active
        original = _dense(self.C[active])
        rows = original
        if self.A.shape[0]:
            if self._eq_basis is None:
                Q, R, _ = qr(_dense(self.A).T, mode="economic", pivoting=True)
                diag = np.abs(np.diag(R))
                rank = int(np.sum(diag > DEPENDENCE_TOLERANCE * max(1.0, diag[0])))
                self._eq_basis = Q[:, :rank]
            rows = rows - (rows @ self._eq_basis) @ self._eq_basis.T
        _, R, piv = qr(rows.T, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        row_scale = max(1.0, float(np.max(np.abs(original))))
        rank = int(np.sum(diag > DEPENDENCE_TOLERANCE * row_scale))
        return np.sort(active[piv[:rank]])

    def _factorize(self, K: Matrix) -> Callable[[np.ndarray], np.ndarray]:
        if self.sparse:
            try:
                lu = splu(sp.csc_matrix(K))
            except RuntimeError as exc:
                raise np.linalg.LinAlgError(str(exc)) from exc
            return lu.solve
        with warnings.catch_warnings():
            warnings.simplefilter("error", LinAlgWarning)
            try:
                factors = lu_factor(K, check_finite=False)
            except LinAlgWarning as exc:
                raise np.linalg.LinAlgError(str(exc)) from exc
        return lambda rhs: lu_solve(factors, rhs, check_finite=False)

    def _kkt_matrix(self, top_left: Matrix, E: Matrix) -> Matrix:
        if E.shape[0] == 0:
            return top_left
        if self.sparse:
            return sp.bmat([[top_left, E.T], [E, None]], format="csc")
        k = E.shape[0]
        return np.block([[top_left, E.T], [E, np.zeros((k, k))]])

    def _equality_kkt(self, active: np.ndarray):
        """
        Solve the KKT system with the given inequality rows held at equality.

        Returns (x, eq_duals, ineq_duals, active) or None on a singular system.
        """
        n = self.qp.num_vars
        C_active = self.C[active] if active.size else self.C[:0]
        if self.sparse:
            E = sp.vstack([self.A, C_active], format="csr")
        else:
            E = np.vstack([self.A, C_active])
        K = self._kkt_matrix(self.H, E)
        rhs = np.concatenate([-self.g, self.b, self.d[active]])
        try:
            sol = self._factorize(K)(rhs)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(sol)):
            return None
        p = self.A.shape[0]
        lam = np.zeros(self.qp.num_ineq)
        lam[active] = sol[n + p:]
        return sol[:n], sol[n:n + p], lam, active

    def _active_set(self, active: list[int]):
        """Primal-dual active-set refinement starting from a guess."""
        feas_tol = self.accept
        W = np.array(active, dtype=int)
        for _ in range(WARM_START_ROUNDS):
            result = self._equality_kkt(W)
            if result is None:
                return None
            x, _, lam, _ = result
            slack = self.d - self.C @ x
            violated = np.flatnonzero(slack < -feas_tol)
            negative = W[lam[W] < -feas_tol]
            if violated.size == 0 and negative.size == 0:
                if self._accepts(result):
                    return result
                return None
            W = np.union1d(np.setdiff1d(W, negative), violated)
        return None

    # Interior point

    def _interior_point(self) -> KktSolution:
        n, q = self.qp.num_vars, self.qp.num_ineq
        H, A, C, b, d, g = self.H, self.A, self.C, self.b, self.d, self.g
        scale = 1.0 + self.qp.scale()
        polish_trigger = np.sqrt(self.tol) * scale

        # Starting point from the least-squares regularized KKT system
        try:
            start = self._factorize(self._kkt_matrix(H + C.T @ C, A))(
                np.concatenate([-g + C.T @ d, b])
            )
        except np.linalg.LinAlgError as exc:
            raise NotStrictlyConvex(f"Singular KKT system at start: {exc}") from exc
        x = start[:n]
        mu = np.zeros(A.shape[0])
        s = np.maximum(d - C @ x, 1.0)
        lam = np.ones(q)
        best_primal = np.inf

        for iteration in range(1, self.max_iter + 1):
            rd = H @ x + g + A.T @ mu + C.T @ lam
            rp = A @ x - b
            ri = C @ x + s - d
            gap = float(s @ lam) / q
            primal = max(_norm_inf(rp), _norm_inf(ri))
            best_primal = min(best_primal, primal)
            res = max(_norm_inf(rd), primal, _norm_inf(s * lam))
            logger.debug(f"IPM iter {iteration}: residual {res:.3e}, gap {gap:.3e}")

            if res <= polish_trigger:
                polished = self._polish(s, lam)
                if polished is not None:
                    return self._finalize(*polished, iterations=iteration, method="interior_point")
            if res <= self.accept:
                active = np.flatnonzero(lam > s)
                return self._finalize(x, mu, lam, active, iterations=iteration, method="interior_point")

            D = lam / s
            if self.sparse:
                top_left = H + C.T @ sp.diags(D) @ C
            else:
                top_left = H + (C.T * D) @ C
            try:
                newton_solve = self._factorize(self._kkt_matrix(top_left, A))
            except np.linalg.LinAlgError:
                break

            def newton(rs: np.ndarray):
                rhs_x = -rd - C.T @ ((-rs + lam * ri) / s)
                sol = newton_solve(np.concatenate([rhs_x, -rp]))
                dx, dmu = sol[:n], sol[n:]
                Cdx = C @ dx
                ds = -ri - Cdx
                dlam = (-rs + lam * ri + lam * Cdx) / s
                return dx, dmu, ds, dlam

            # Predictor
            _, _, ds_aff, dlam_aff = newton(s * lam)
            alpha_aff = min(_max_step(s, ds_aff), _max_step(lam, dlam_aff))
            gap_aff = float((s + alpha_aff * ds_aff) @ (lam + alpha_aff * dlam_aff)) / q
            sigma = (gap_aff / gap) ** 3 if gap > 0 else 0.0

            # Corrector
            dx, dmu, ds, dlam = newton(s * lam + ds_aff * dlam_aff - sigma * gap)
            alpha = min(1.0, STEP_TO_BOUNDARY * min(_max_step(s, ds), _max_step(lam, dlam)))
            x_new, mu_new = x + alpha * dx, mu + alpha * dmu
            s_new, lam_new = s + alpha * ds, lam + alpha * dlam
            if not all(np.all(np.isfinite(v)) for v in (x_new, mu_new, s_new, lam_new)):
                break
            x, mu, s, lam = x_new, mu_new, s_new, lam_new

        polished = self._polish(s, lam)
        if polished is not None:
            return self._finalize(*polished, iterations=self.max_iter, method="interior_point")
        if best_primal > 1e-6 * scale:
            raise InfeasibleProblem(
                f"Primal infeasibility stalled at {best_primal:.3e}"
            )
        raise MaxIterationsExceeded(
            f"Interior point did not reach {self.accept:.1e} within {self.max_iter} iterations"
        )

    def _polish(self, s: np.ndarray, lam: np.ndarray):
        """
        Exact KKT solve on the active set identified by lam > s. When that
        set has dependent rows the solve is repeated on an independent subset.
        """
        active = np.flatnonzero(lam > s)
        result = self._equality_kkt(active)
        if result is not None and self._accepts(result):
            return result
        independent = self._independent_active(active)
        if independent.size == active.size:
            return None
        logger.debug(f"Dropped {active.size - independent.size} dependent active rows")
        result = self._equality_kkt(independent)
        if result is None or not self._accepts(result):
            return None
        return result

    def _accepts(self, result) -> bool:
        x, mu, lam, _ = result
        return self._residual(x, mu, np.maximum(lam, 0.0)) <= self.accept

    def _residual(self, x: np.ndarray, mu: np.ndarray, lam: np.ndarray) -> float:
        stationarity = self.H @ x + self.g + self.A.T @ mu + self.C.T @ lam
        slack = self.d - self.C @ x
        return max(
            _norm_inf(stationarity),
            _norm_inf(self.A @ x - self.b),
            _norm_inf(np.maximum(0.0, -slack)),
            _norm_inf(lam * slack),
        )

    def _finalize(
        self,
        x: np.ndarray,
        mu: np.ndarray,
        lam: np.ndarray,
        active: np.ndarray,
        iterations: int,
        method: str,
    ) -> KktSolution:
        lam = np.maximum(lam, 0.0)
        eq_duals = np.zeros(self.qp.num_eq)
        eq_duals[self.eq_rows] = mu
        residual = kkt_residual(self.qp, x, eq_duals, lam)

        slack = self.d - self.C @ x
        threshold = settings.degeneracy_threshold
        degenerate = tuple(int(k) for k in np.flatnonzero((np.abs(slack) < threshold) & (lam < threshold)))
        if degenerate:
            qp_degenerate_constraints_total.inc(len(degenerate))
            logger.debug(f"Weakly active constraints {list(degenerate)}")

        solution = KktSolution(
            x_opt=x,
            eq_duals=eq_duals,
            ineq_duals=lam,
            objective=objective_value(self.qp, x),
            kkt_residual=residual,
            iterations=iterations,
            method=method,
            active_set=tuple(int(k) for k in active),
            degenerate=degenerate,
        )
        if settings.check_kkt:
            _assert_kkt(solution, self.accept)
        return solution


def _assert_kkt(solution: KktSolution, accept: float) -> None:
    if np.any(solution.ineq_duals < -1e-9):
        raise AssertionError("Negative inequality multiplier after solve")
    if not solution.kkt_residual <= accept:
        raise AssertionError(
            f"KKT residual {solution.kkt_residual:.3e} exceeds {accept:.3e}"
        )


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    """Largest alpha in [0, 1] with v + alpha dv >= 0."""
    neg = dv < 0.0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _norm_inf(v: np.ndarray) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0


def _dense(M: Matrix) -> np.ndarray:
    return M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)


def _sparse(M: Matrix) -> sp.csr_matrix:
    return sp.csr_matrix(M, dtype=float)


def _as_float_matrix(M: Matrix) -> Matrix:
    if sp.issparse(M):
        return sp.csr_matrix(M, dtype=float)
    return np.atleast_2d(np.asarray(M, dtype=float))


def _constraint_block(M: Optional[Matrix], v: Optional[np.ndarray], d: int, kind: str):
    if M is None:
        if v is not None and np.size(v):
            raise ValueError(f"b{kind} given without A{kind}")
        return np.zeros((0, d)), np.zeros(0)
    if sp.issparse(M):
        M = sp.csr_matrix(M, dtype=float)
    else:
        M = np.asarray(M, dtype=float).reshape(-1, d)
    v = np.zeros(M.shape[0]) if v is None else np.asarray(v, dtype=float).reshape(-1)
    if M.shape != (v.size, d):
        raise ValueError(f"A{kind} must be {v.size}x{d}, got {M.shape}")
    return M, v
