"""Restarted GMRES and the forward/adjoint steady-state solves."""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .domain import StateField
from .errors import NonConvergenceError, ParameterError, SingularSystemError

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-6
DEFAULT_RESTART = 30
DEFAULT_CYCLES = 5


@dataclass
class SolveReport:
    iterations: int = 0
    restarts_used: int = 0
    final_relative_residual: float = np.inf
    wall_time: float = 0.0
    converged: bool = False
    history: list = field(default_factory=list)

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "restarts_used": self.restarts_used,
            "final_relative_residual": float(self.final_relative_residual),
            "wall_time": self.wall_time,
            "converged": self.converged,
            "history": [float(h) for h in self.history],
        }


def _as_matrix(M):
    if hasattr(M, "matrix"):
        return M.matrix
    return M


def _diagonal(A):
    if sp.issparse(A):
        return A.diagonal()
    return np.diag(np.asarray(A))


def gmres(M, rhs, restart=DEFAULT_RESTART, tol=DEFAULT_TOL, maxiter=DEFAULT_CYCLES, x0=None, jacobi=False):
    """Solve ``M x = rhs`` by restarted GMRES(restart).

    ``maxiter`` is the number of restart cycles, each building a Krylov space
    of dimension ``restart`` with modified Gram-Schmidt and solving the small
    least-squares problem by Givens rotations. With ``jacobi`` the system is
    right-preconditioned by the inverse diagonal, so the monitored residual is
    still the true one.

    Returns ``(x, report)``; raises :class:`NonConvergenceError` (carrying
    the report) if ``||M x - rhs|| / ||rhs|| > tol`` after all cycles.
    """
    if restart < 1 or maxiter < 1:
        raise ParameterError("restart and maxiter must be positive")
    if tol <= 0:
        raise ParameterError("tolerance must be positive")
    A = _as_matrix(M)
    as_field = isinstance(rhs, StateField)
    b = rhs.values if as_field else np.asarray(rhs, dtype=float)
    n = b.shape[0]
    if A.shape != (n, n):
        raise ParameterError(f"matrix shape {A.shape} does not match rhs length {n}")
    t0 = time.perf_counter()
    report = SolveReport()
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)

    def wrap(v):
        return StateField(v, rhs.domain) if as_field else v

    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        report.final_relative_residual = 0.0
        report.converged = True
        report.history = [0.0]
        return wrap(np.zeros(n)), report
    dinv = None
    if jacobi:
        d = _diagonal(A)
        if np.any(d == 0):
            raise SingularSystemError("zero diagonal entry; Jacobi preconditioner undefined")
        dinv = 1.0 / d

    r = b - A @ x
    beta = np.linalg.norm(r)
    report.history.append(beta / bnorm)
    m = min(restart, n)
    V = np.empty((m + 1, n))
    for cycle in range(maxiter):
        if beta / bnorm <= tol:
            break
        report.restarts_used = cycle + 1
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        k = 0
        for j in range(m):
            w = A @ (V[j] * dinv if dinv is not None else V[j])
            for i in range(j + 1):
                H[i, j] = w @ V[i]
                w -= H[i, j] * V[i]
            hnext = np.linalg.norm(w)
            H[j + 1, j] = hnext
            for i in range(j):
                hi, hi1 = H[i, j], H[i + 1, j]
                H[i, j] = cs[i] * hi + sn[i] * hi1
                H[i + 1, j] = -sn[i] * hi + cs[i] * hi1
            denom = np.hypot(H[j, j], H[j + 1, j])
            if denom == 0:
                raise SingularSystemError("Krylov breakdown with zero pivot; the system is singular")
            cs[j] = H[j, j] / denom
            sn[j] = H[j + 1, j] / denom
            H[j, j] = denom
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            k = j + 1
            report.iterations += 1
            report.history.append(abs(g[j + 1]) / bnorm)
            if abs(g[j + 1]) / bnorm <= tol or hnext <= 1e-14 * beta:
                break
            V[j + 1] = w / hnext
        y = np.zeros(k)
        for i in range(k - 1, -1, -1):
            y[i] = (g[i] - H[i, i + 1:k] @ y[i + 1:]) / H[i, i]
        dx = V[:k].T @ y
        x += dx * dinv if dinv is not None else dx
        r = b - A @ x
        new_beta = np.linalg.norm(r)
        if new_beta >= beta * (1.0 - 1e-12) and new_beta / bnorm > tol:
            beta = new_beta
            log.debug("GMRES stagnated in cycle %d", cycle + 1)
            break
        beta = new_beta
    report.final_relative_residual = beta / bnorm
    report.wall_time = time.perf_counter() - t0
    report.converged = bool(beta / bnorm <= tol)
    if not report.converged:
        raise NonConvergenceError(
            f"GMRES reached relative residual {beta / bnorm:.3e} > {tol:g} after "
            f"{report.iterations} iterations in {report.restarts_used} cycles", report)
    return wrap(x), report


def solve_steady(M, a, **kw):
    """Steady state ``p`` with ``M p = a`` for ``M = -H - kappa``.

    Returns ``(p, report)`` as :func:`gmres`.
    """
    return gmres(M, a, **kw)


class _Transposed:
    def __init__(self, op):
        A = _as_matrix(op)
        self.matrix = A.T.tocsr() if sp.issparse(A) else np.asarray(A).T


def solve_adjoint(M, a, via_z=False, **kw):
    """Solve ``M^T x = a``.

    With ``via_z`` the identity ``M^T = Z M Z`` is used instead, i.e. the
    result is ``Z solve_steady(M, Z a)``; this needs a StateField seed on an
    exactly reflection-symmetric operator.
    """
    if via_z:
        if not isinstance(a, StateField):
            raise ParameterError("solving through Z needs a StateField right-hand side")
        x, report = gmres(M, a.reflect(), **kw)
        return x.reflect(), report
    return gmres(_Transposed(M), a, **kw)


def dense_solve(M, rhs):
    """Direct dense solve used for small cross-checks."""
    A = _as_matrix(M)
    A = A.toarray() if sp.issparse(A) else np.asarray(A)
    b = rhs.values if isinstance(rhs, StateField) else np.asarray(rhs)
    return np.linalg.solve(A, b)
