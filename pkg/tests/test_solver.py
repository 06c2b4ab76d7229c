import numpy as np
import pytest
import scipy.sparse as sp
from scipy.linalg import lu_factor, lu_solve

from fpconn.domain import StateField
from fpconn.errors import NonConvergenceError, ParameterError, SingularSystemError
from fpconn.solver import SolveReport, dense_solve, gmres, solve_adjoint, solve_steady


def dd_system(n, rng):
    M = rng.standard_normal((n, n)) * (rng.uniform(size=(n, n)) < 8.0 / n)
    M[np.diag_indices(n)] = np.abs(M).sum(1) + 1.0
    return M


def test_identity_one_iteration():
    b = np.arange(1.0, 6.0)
    x, rep = gmres(np.eye(5), b)
    assert np.allclose(x, b)
    assert rep.iterations == 1 and rep.converged


def test_diagonal_two():
    x, _ = gmres(sp.identity(10, format="csr") * 2.0, np.ones(10))
    assert np.allclose(x, 0.5)


def test_dense_lu_oracle_200():
    rng = np.random.default_rng(0)
    M = dd_system(200, rng)
    b = rng.standard_normal(200)
    ref = lu_solve(lu_factor(M), b)
    x, rep = gmres(M, b, tol=1e-12)
    assert np.linalg.norm(x - ref) / np.linalg.norm(ref) <= 1e-8
    assert rep.final_relative_residual <= 1e-12


def test_jacobi_preconditioner_true_residual():
    rng = np.random.default_rng(1)
    M = dd_system(150, rng) * np.logspace(0, 3, 150)[:, None]
    b = rng.standard_normal(150)
    x, rep = gmres(M, b, tol=1e-10, jacobi=True)
    assert np.linalg.norm(M @ x - b) / np.linalg.norm(b) <= 1e-10
    with pytest.raises(SingularSystemError):
        gmres(np.zeros((3, 3)) + np.triu(np.ones((3, 3)), 1), np.ones(3), jacobi=True)


def test_residual_history_monotone_within_cycle():
    rng = np.random.default_rng(2)
    M = dd_system(300, rng)
    _, rep = gmres(M, rng.standard_normal(300), tol=1e-12, restart=10, maxiter=20)
    h = np.array(rep.history)
    assert np.all(np.diff(h) <= 1e-12)
    assert rep.restarts_used >= 2


def test_non_convergence_carries_report():
    rng = np.random.default_rng(3)
    M = rng.standard_normal((80, 80)) + 0.1 * np.eye(80)
    with pytest.raises(NonConvergenceError) as exc:
        gmres(M, np.ones(80), tol=1e-14, restart=3, maxiter=2)
    rep = exc.value.report
    assert isinstance(rep, SolveReport) and not rep.converged
    assert len(rep.history) > 1 and rep.final_relative_residual > 1e-14


def test_singular_zero_matrix():
    with pytest.raises(SingularSystemError):
        gmres(sp.csr_matrix((4, 4)), np.ones(4))


def test_zero_rhs():
    x, rep = gmres(np.eye(3), np.zeros(3))
    assert np.all(x == 0) and rep.converged


def test_parameter_checks():
    with pytest.raises(ParameterError):
        gmres(np.eye(3), np.ones(4))
    with pytest.raises(ParameterError):
        gmres(np.eye(3), np.ones(3), restart=0)
    with pytest.raises(ParameterError):
        gmres(np.eye(3), np.ones(3), tol=0)


def test_single_unknown_absorption():
    x, _ = gmres(np.array([[4.0]]), np.array([1.0]))
    assert x[0] == pytest.approx(0.25)


def test_deterministic(phantom_op, phantom):
    a = phantom_op.domain.region_seed(phantom[2][0])
    x1, r1 = solve_steady(phantom_op, a)
    x2, r2 = solve_steady(phantom_op, a)
    assert np.array_equal(x1.values, x2.values)
    assert r1.history == r2.history


def test_steady_state_nonnegative(phantom_op, phantom):
    a = phantom_op.domain.region_seed(phantom[2][2])
    p, _ = solve_steady(phantom_op, a)
    assert isinstance(p, StateField)
    assert p.values.min() >= -1e-8 * p.values.max()


def test_adjoint_symmetric_matrix_equals_forward():
    rng = np.random.default_rng(4)
    M = dd_system(60, rng)
    M = M + M.T
    b = rng.standard_normal(60)
    x1, _ = gmres(M, b, tol=1e-12)
    x2, _ = solve_adjoint(M, b, tol=1e-12)
    assert np.allclose(x1, x2, rtol=1e-9, atol=1e-12)


def test_adjoint_dense_transpose_oracle():
    rng = np.random.default_rng(5)
    M = dd_system(90, rng)
    b = rng.standard_normal(90)
    x, _ = solve_adjoint(sp.csr_matrix(M), b, tol=1e-12)
    assert np.allclose(x, np.linalg.solve(M.T, b), rtol=1e-9, atol=1e-12)


def test_adjoint_via_reflection(phantom_op, phantom):
    a = phantom_op.domain.region_seed(phantom[2][4])
    x1, _ = solve_adjoint(phantom_op, a, tol=1e-8)
    x2, _ = solve_adjoint(phantom_op, a, via_z=True, tol=1e-8)
    assert np.linalg.norm(x1.values - x2.values) <= 10 * 1e-8 * np.linalg.norm(x1.values)
    with pytest.raises(ParameterError):
        solve_adjoint(phantom_op, a.values, via_z=True)


def test_forward_adjoint_consistency(phantom_op):
    rng = np.random.default_rng(6)
    U = phantom_op.U
    q, b = rng.uniform(size=U), rng.uniform(size=U)
    tol = 1e-8
    y, _ = solve_adjoint(phantom_op, q, tol=tol, restart=60, maxiter=10)
    x, _ = solve_steady(phantom_op, b, tol=tol, restart=60, maxiter=10)
    assert abs(y @ b - q @ x) <= 10 * tol * abs(q @ x)


def test_dense_solve_matches():
    rng = np.random.default_rng(7)
    M = dd_system(40, rng)
    b = rng.standard_normal(40)
    assert np.allclose(dense_solve(sp.csr_matrix(M), b), np.linalg.solve(M, b))


def test_report_dict():
    _, rep = gmres(np.eye(2) * 3, np.ones(2))
    d = rep.to_dict()
    assert set(d) == {"iterations", "restarts_used", "final_relative_residual", "wall_time", "converged", "history"}
