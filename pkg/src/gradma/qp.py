"""Projection QP used to correct update directions.

Given a vector ``p`` and constraint columns ``M[0..C-1]`` we look for the
closest vector ``p_tilde`` to ``p`` with ``<p_tilde, M[j]> >= 0`` for all j.
The problem is solved in its dual form

    min_z  0.5 z^T A z + b^T z   s.t.  z >= 0,   A = M M^T,  b = M p

(columns are stored as rows of a ``C x d`` array), after which the primal
solution is ``p_tilde = p + sum_j z[j] M[j]``.  C is tiny (3 on the worker,
at most the memory size on the server) so the dual is solved by cyclic
coordinate descent on a dense Gram matrix. Descent alone crawls when
columns are nearly parallel or wildly different in length, so an unfinished
solve gets one exact non-negative least squares pass on a square-root factor
of the unit-diagonal Gram matrix.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
ORACLE_MAX_COLUMNS = 12
# eigenvalues of the unit-diagonal Gram matrix below this fraction of the
# largest are treated as exact zeros when factoring
FACTOR_RCOND = 1e-13
# give up early once the residual has stopped improving for this many sweeps
STALL_SWEEPS = 100


class QpError(ValueError):
    """Malformed QP input."""


class QpNotConverged(RuntimeError):
    """Coordinate descent ran out of sweeps.

    Carries the best iterate found so the caller can decide whether to use
    it or fall back to the uncorrected vector.
    """

    def __init__(self, solution: "DualSolution"):
        super().__init__(
            f"dual QP did not converge after {solution.iterations} sweeps "
            f"(kkt residual {solution.kkt_residual:.3e})"
        )
        self.solution = solution


@dataclass(frozen=True)
class QpInstance:
    """Vector ``p`` of length d and ``M`` of shape (C, d), one constraint per row."""

    p: np.ndarray
    M: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        M = np.asarray(self.M, dtype=np.float64)
        if p.ndim != 1:
            raise QpError(f"p must be a vector, got shape {p.shape}")
        if M.size == 0:
            M = M.reshape(0, p.shape[0])
        if M.ndim != 2 or M.shape[1] != p.shape[0]:
            raise QpError(
                f"constraint columns must all have dimension {p.shape[0]}, got array of shape {M.shape}"
            )
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(M))):
            raise QpError("QP input contains non-finite entries")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "M", M)

    @classmethod
    def from_columns(cls, p, columns) -> "QpInstance":
        p = np.asarray(p, dtype=np.float64)
        columns = [np.asarray(c, dtype=np.float64) for c in columns]
        for j, c in enumerate(columns):
            if c.shape != p.shape:
                raise QpError(f"column {j} has shape {c.shape}, expected {p.shape}")
        if not columns:
            return cls(p, np.zeros((0, p.shape[0])))
        return cls(p, np.stack(columns))

    @property
    def num_constraints(self) -> int:
        return self.M.shape[0]


@dataclass(frozen=True)
class GramSystem:
    A: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class DualSolution:
    z: np.ndarray
    kkt_residual: float
    iterations: int
    converged: bool = True


def symmetrize_upper(A: np.ndarray) -> np.ndarray:
    """Mirror the upper triangle so that ``A[i, j]`` and ``A[j, i]`` are the same number."""
    upper = np.triu(A)
    return upper + np.triu(A, 1).T


def build_gram(inst: QpInstance) -> GramSystem:
    M = inst.M
    A = symmetrize_upper(M @ M.T)
    b = M @ inst.p
    return GramSystem(A=A, b=b)


def kkt_residual(A: np.ndarray, b: np.ndarray, z: np.ndarray) -> float:
    """Scaled natural residual ``max_j |min(z_j, (Az+b)_j)|``.

    Each coordinate is put in the units of ``p`` first (``z_j * |M_j|`` and
    ``(Az+b)_j / |M_j|``) and the maximum is divided by ``max_j |b_j| / |M_j|``,
    so the value is invariant to rescaling ``p`` and ``M``.  Zero columns are
    ignored.
    """
    if b.size == 0:
        return 0.0
    diag = np.diag(A)
    live = diag > 0
    if not np.any(live):
        return 0.0
    s = np.sqrt(diag[live])
    w = (A @ z + b)[live]
    scale = np.max(np.abs(b[live]) / s)
    if scale == 0.0:
        return 0.0
    r = np.abs(np.minimum(z[live] * s, w / s))
    return float(np.max(r) / scale)


def solve_dual(system: GramSystem, tol: float = DEFAULT_TOL, max_sweeps: int | None = None,
               z0: np.ndarray | None = None) -> DualSolution:
    """Cyclic coordinate descent on the non-negative dual.

    Every coordinate update ``z_j <- max(0, z_j - (Az+b)_j / A_jj)`` is the
    exact minimiser along that coordinate. Coordinates whose column is zero
    (``A_jj == 0``) are pinned to 0. ``z0`` warm-starts the iteration.
    If one sweep does not reach ``tol``, the exact factored solve is tried
    once and descent continues from whichever point is better. The solve is abandoned before ``max_sweeps`` once the residual has
    stalled, which on a numerically singular Gram matrix it eventually does.
    """
    if tol <= 0:
        raise QpError("tol must be positive")
    A = np.asarray(system.A, dtype=np.float64)
    b = np.asarray(system.b, dtype=np.float64)
    C = b.shape[0]
    if A.shape != (C, C):
        raise QpError(f"Gram matrix shape {A.shape} does not match b of length {C}")
    if C == 0:
        return DualSolution(z=np.zeros(0), kkt_residual=0.0, iterations=0)
    if max_sweeps is None:
        max_sweeps = 1000 * C

    diag = np.diag(A).copy()
    live = np.flatnonzero(diag > 0)
    z = np.zeros(C) if z0 is None else np.maximum(np.asarray(z0, dtype=np.float64), 0.0)
    z[diag <= 0] = 0.0
    w = A @ z + b

    res = kkt_residual(A, b, z)
    if res <= tol:
        return DualSolution(z=z, kkt_residual=res, iterations=0)

    best_z, best_res = z.copy(), res
    last_gain = 0
    cols = [A[:, j].copy() for j in range(C)]
    for sweep in range(1, max_sweeps + 1):
        for j in live:
            zj = z[j]
            new = zj - w[j] / diag[j]
            if new < 0.0:
                new = 0.0
            delta = new - zj
            if delta != 0.0:
                z[j] = new
                w += delta * cols[j]
        # refresh to keep the maintained gradient from drifting
        w = A @ z + b
        res = kkt_residual(A, b, z)
        if res > tol and sweep == 1:
            z_ref = _factor_refine(A, b)
            res_ref = kkt_residual(A, b, z_ref)
            if res_ref < res:
                z, res = z_ref, res_ref
                w = A @ z + b
        if res < 0.99 * best_res:
            last_gain = sweep
        if res < best_res:
            best_z, best_res = z.copy(), res
        if res <= tol:
            return DualSolution(z=z, kkt_residual=res, iterations=sweep)
        if sweep - last_gain >= STALL_SWEEPS:
            break
    raise QpNotConverged(DualSolution(z=best_z, kkt_residual=best_res,
                                      iterations=sweep, converged=False))


def _factor_refine(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve the dual as NNLS on ``R`` with ``R^T R`` the unit-diagonal Gram matrix.

    Rescaling each column to unit length leaves the constraint cone unchanged
    but removes the spread in column norms (memory columns decay
    geometrically) that makes the raw Gram matrix numerically singular.
    Directions with a zero eigenvalue carry no information and are dropped;
    ``b`` lies in the range of ``A`` so nothing is lost.
    """
    C = b.shape[0]
    z = np.zeros(C)
    live = np.flatnonzero(np.diag(A) > 0)
    if live.size == 0:
        return z
    s = np.sqrt(np.diag(A)[live])
    lam, V = np.linalg.eigh(A[np.ix_(live, live)] / np.outer(s, s))
    keep = lam > FACTOR_RCOND * lam[-1]
    root = np.sqrt(lam[keep])
    R = root[:, None] * V[:, keep].T
    c = -(V[:, keep].T @ (b[live] / s)) / root
    try:
        zn, _ = nnls(R, c, maxiter=50 * C)
    except RuntimeError:
        return z
    z[live] = zn / s
    return z


def recover_primal(p: np.ndarray, M: np.ndarray, z: np.ndarray) -> np.ndarray:
    if not np.any(z > 0):
        return p.copy()
    return p + z @ M


def solve(inst: QpInstance, tol: float = DEFAULT_TOL, max_sweeps: int | None = None,
          z0: np.ndarray | None = None, gram: np.ndarray | None = None):
    """Return ``(p_tilde, DualSolution)``; ``gram`` may supply a cached ``M M^T``."""
    if inst.num_constraints == 0:
        return inst.p.copy(), DualSolution(z=np.zeros(0), kkt_residual=0.0, iterations=0)
    if gram is None:
        system = build_gram(inst)
    else:
        system = GramSystem(A=gram, b=inst.M @ inst.p)
    sol = solve_dual(system, tol=tol, max_sweeps=max_sweeps, z0=z0)
    return recover_primal(inst.p, inst.M, sol.z), sol


def correct(inst: QpInstance, tol: float = DEFAULT_TOL, max_sweeps: int | None = None) -> np.ndarray:
    """Closest vector to ``inst.p`` that has a non-negative inner product with every column."""
    p_tilde, _ = solve(inst, tol=tol, max_sweeps=max_sweeps)
    return p_tilde


def oracle_solve(inst: QpInstance, feas_tol: float = 1e-9) -> np.ndarray:
    """Brute-force projection onto the cone ``{v : M v >= 0}``.

    For every subset of constraints taken as equalities, ``p`` is projected
    onto the null space of those rows by least squares. The closest candidate
    that satisfies every inequality is the projection. Exponential in C; test
    use only.
    """
    C = inst.num_constraints
    if C > ORACLE_MAX_COLUMNS:
        raise QpError(f"oracle_solve enumerates 2^C active sets; C={C} exceeds {ORACLE_MAX_COLUMNS}")
    p, M = inst.p, inst.M
    if C == 0:
        return p.copy()
    norms = np.linalg.norm(M, axis=1)
    scale = max(np.linalg.norm(p), np.finfo(float).tiny)
    best, best_dist = None, np.inf
    for k in range(C + 1):
        for active in itertools.combinations(range(C), k):
            if active:
                Ms = M[list(active)]
                coef, *_ = np.linalg.lstsq(Ms @ Ms.T, -(Ms @ p), rcond=None)
                cand = p + coef @ Ms
            else:
                cand = p.copy()
            slack = M @ cand
            if np.all(slack >= -feas_tol * scale * norms):
                dist = float(np.linalg.norm(cand - p))
                if dist < best_dist - 1e-15 * scale:
                    best, best_dist = cand, dist
    # projecting onto the common null space of all rows is always feasible
    return best
