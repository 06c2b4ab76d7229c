"""Sparse assembly of the symmetrized Fokker-Planck generator.

Sign conventions: the angular block is returned positive semidefinite (it
represents minus the angular part of the generator); spatial diffusion and
convection are returned with the generator's sign. :func:`assemble_H` combines
them into the system matrix ``M = -H - kappa`` that the solvers invert.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .domain import StateField
from .errors import AssemblyError, CalibrationError, ParameterError, SpectralShiftError

THRESHOLD_RULES = ("symmetric", "absorb", "literal")


@dataclass(eq=False)
class SparseOperator:
    """CSR matrix over the unknowns of ``domain`` plus assembly metadata."""

    matrix: sp.csr_matrix
    domain: object
    metadata: dict = field(default_factory=dict)

    @property
    def U(self):
        return self.matrix.shape[0]

    @property
    def zperm(self):
        return self.domain.zperm

    def triplets(self):
        """Sorted (row, col, value) arrays without duplicates."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order], coo.col[order], coo.data[order]

    def reflect(self):
        """Matrix of Z M Z."""
        z = self.zperm
        return self.matrix[z][:, z]

    def dump(self, path):
        """Write the sorted triplet text format, one ``row col value`` per line."""
        r, c, v = self.triplets()
        with open(path, "w") as fh:
            fh.write(f"# U={self.U} nnz={len(v)}\n")
            for a, b, x in zip(r.tolist(), c.tolist(), v.tolist()):
                fh.write(f"{a} {b} {x!r}\n")

    def __matmul__(self, x):
        return self.matrix @ x


def load_triplets(path):
    rows, cols, vals = [], [], []
    U = None
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                U = int(line.split()[1].split("=")[1])
                continue
            a, b, x = line.split()
            rows.append(int(a))
            cols.append(int(b))
            vals.append(float(x))
    return sp.csr_matrix((vals, (rows, cols)), shape=(U, U))


def _index_dtype(U):
    return np.int32 if U < 2**31 - 1 else np.int64


def _csr(rows, cols, vals, U):
    m = sp.coo_matrix((vals, (rows, cols)), shape=(U, U)).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return m


def apply_Z(field):
    """Point reflection ``(Z a)(r, n) = a(r, -n)`` as an exact permutation."""
    if isinstance(field, StateField):
        return field.reflect()
    raise TypeError("apply_Z expects a StateField")


def angular_difference(grids):
    """The one-sided interpolated angular difference matrix (unscaled).

    Row ``(i, r)`` holds ``|N(i)|`` on the diagonal and ``-w`` for each
    trilinear corner of position ``r`` in every neighbour volume. Corners that
    are not valid are dropped (absorbing). Rows of the reflected directions are
    copied through the unknown permutation so the matrix commutes with Z
    bit-exactly.
    """
    dirs = grids.dirs
    U = grids.U
    z = grids.zperm
    idt = _index_dtype(U)
    rows, cols, vals = [], [], []
    diag = np.zeros(U)
    for i in dirs.primary:
        g = grids.grids[i]
        if not len(g):
            continue
        gid = g.global_index
        deg = len(dirs.neighbors[i])
        diag[gid] = deg
        diag[z[gid]] = deg
        for k in dirs.neighbors[i]:
            gk = grids.grids[k]
            if not len(gk):
                continue
            ids, w = gk.stencil(g.positions)
            keep = (ids >= 0) & (w > 0)
            if not keep.any():
                continue
            r = np.broadcast_to(gid[:, None], ids.shape)[keep].astype(idt)
            c = ids[keep].astype(idt)
            v = -w[keep]
            rows += [r, z[r].astype(idt)]
            cols += [c, z[c].astype(idt)]
            vals += [v, v]
    ar = np.arange(U, dtype=idt)
    rows.append(ar)
    cols.append(ar)
    vals.append(diag)
    return _csr(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), U)


def assemble_angular_laplacian(grids, sigma_n, A=1.0):
    """Symmetric angular block ``sigma_n^2 / (2A) * (D + D^T)`` (positive semidefinite)."""
    if A <= 0:
        raise ParameterError("calibration factor A must be positive")
    if sigma_n < 0:
        raise ParameterError("sigma_n must be non-negative")
    U = grids.U
    meta = {"kind": "angular", "sigma_n": sigma_n, "A": A}
    if sigma_n == 0:
        return SparseOperator(sp.csr_matrix((U, U)), grids, meta)
    D = angular_difference(grids)
    L = (D + D.T).tocsr() * (sigma_n ** 2 / (2.0 * A))
    L.sort_indices()
    return SparseOperator(L, grids, meta)


def sphere_graph_laplacian(dirs):
    """Dense graph Laplacian (degree minus adjacency) of the direction neighbourhoods."""
    G = np.zeros((dirs.N, dirs.N))
    for i, nb in enumerate(dirs.neighbors):
        G[i, nb] = -1.0
        G[i, i] = len(nb)
    return G


def continuum_rms_angle(sigma_n, t=1.0, lmax=600, nquad=6000):
    """RMS great-circle angle of spherical Brownian motion after time ``t``.

    The generator is ``sigma_n^2 / 2`` times the Laplace-Beltrami operator,
    i.e. each tangential component has variance ``sigma_n^2`` per unit time
    (the RMS angle is close to ``sigma_n * sqrt(2 t)`` for small times).
    """
    if sigma_n == 0:
        return 0.0
    D = sigma_n ** 2 / 2.0
    theta = (np.arange(nquad) + 0.5) * np.pi / nquad
    x = np.cos(theta)
    # Legendre recurrence for the heat kernel on the unit sphere.
    p_prev, p_cur = np.ones_like(x), x.copy()
    kernel = (1.0 + 3.0 * np.exp(-2.0 * D * t) * x) / (4.0 * np.pi)
    for l in range(2, lmax + 1):
        p_prev, p_cur = p_cur, ((2 * l - 1) * x * p_cur - (l - 1) * p_prev) / l
        decay = np.exp(-l * (l + 1) * D * t)
        if decay < 1e-300:
            break
        kernel += (2 * l + 1) / (4.0 * np.pi) * decay * p_cur
    w = 2.0 * np.pi * np.sin(theta) * (np.pi / nquad)
    kernel = np.maximum(kernel, 0.0)
    mass = np.sum(kernel * w)
    return float(np.sqrt(np.sum(kernel * w * theta ** 2) / mass))


def euler_rms_angle(dirs, sigma_n, A, steps=60, t=1.0, G=None):
    """RMS angle of explicit-Euler angular diffusion from every point source.

    Returns ``inf`` when the Euler scheme is unstable for this A.
    """
    G = sphere_graph_laplacian(dirs) if G is None else G
    L = (sigma_n ** 2 / A) * G
    dt = t / steps
    step = np.eye(dirs.N) - dt * L
    P = np.linalg.matrix_power(step, steps)
    if np.any(P < -1e-12) or not np.all(np.isfinite(P)):
        return np.inf
    ang2 = np.arccos(np.clip(dirs.n @ dirs.n.T, -1.0, 1.0)) ** 2
    msq = np.sum(P * ang2, axis=0) / np.sum(P, axis=0)
    return float(np.sqrt(np.mean(msq)))


def calibrate_A(dirs, sigma_n, steps=60, lo=1e-3, hi=1e3, rtol=1e-10, max_iter=50, target=None):
    """Calibration factor A of the angular block.

    A is chosen by bisection (in log A) so that explicit-Euler diffusion on
    the direction graph for unit time reproduces the RMS angle of continuous
    spherical Brownian motion whose tangential components each have standard
    deviation ``sigma_n`` after unit time.
    """
    if sigma_n < 0:
        raise ParameterError("sigma_n must be non-negative")
    if sigma_n == 0:
        return 1.0
    goal = continuum_rms_angle(sigma_n) if target is None else target
    G = sphere_graph_laplacian(dirs)

    def excess(A):
        return euler_rms_angle(dirs, sigma_n, A, steps, G=G) - goal

    a, b = np.log(lo), np.log(hi)
    fa, fb = excess(lo), excess(hi)
    if not (fa > 0 > fb):
        raise CalibrationError(f"target RMS angle {goal:.4g} not bracketed by A in [{lo}, {hi}]")
    for _ in range(max_iter):
        m = 0.5 * (a + b)
        fm = excess(np.exp(m))
        if fm > 0:
            a = m
        else:
            b = m
        if b - a < rtol:
            return float(np.exp(0.5 * (a + b)))
    raise CalibrationError(f"bisection did not converge in {max_iter} iterations")


def convection_difference(grids, rule="symmetric"):
    """Upwind difference matrix ``-grad`` along each grid's local +x axis.

    Inflow from ``x-1`` is kept when that point is valid. The outflow term
    ``-p/h`` is kept except next to thresholding boundaries (b = +1):
    ``literal`` drops it when ``x+1`` is such a boundary, ``symmetric`` when
    either neighbour is, ``absorb`` never.
    """
    if rule not in THRESHOLD_RULES:
        raise ParameterError(f"unknown threshold rule {rule!r}")
    U = grids.U
    idt = _index_dtype(U)
    h = grids.spacing
    rows, cols, vals = [], [], []
    ex = np.array([1, 0, 0])
    for g in grids.grids:
        if not len(g):
            continue
        gid = g.global_index.astype(idt)
        left = g.coords - ex
        right = g.coords + ex
        lrow = g.lookup(left)
        b_left = g.boundary_at(left)
        b_right = g.boundary_at(right)
        if np.any((lrow >= 0) != (b_left == 0)):
            raise AssemblyError("unclassified boundary point")
        has_left = lrow >= 0
        rows.append(gid[has_left])
        cols.append((lrow[has_left] + g.offset).astype(idt))
        vals.append(np.full(has_left.sum(), 1.0 / h))
        if rule == "literal":
            keep_out = b_right != 1
        elif rule == "symmetric":
            keep_out = (b_right != 1) & (b_left != 1)
        else:
            keep_out = np.ones(len(g), dtype=bool)
        rows.append(gid[keep_out])
        cols.append(gid[keep_out])
        vals.append(np.full(keep_out.sum(), -1.0 / h))
    if not rows:
        return sp.csr_matrix((U, U))
    return _csr(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), U)


def assemble_convection(speed, rule="symmetric"):
    """Symmetrized convection ``(F D + D F) / 2`` with D the upwind ``-grad``.

    For constant speed this approximates ``-v . grad`` with the generator's
    sign. With shared antipodal grids it satisfies ``Z C Z = C^T`` exactly for
    the ``symmetric`` and ``absorb`` rules.
    """
    grids = speed.grids
    U = grids.U
    f = np.asarray(speed.f, dtype=float)
    if np.any(f < 0) or not np.all(np.isfinite(f)):
        raise AssemblyError("speed must be finite and non-negative")
    D = convection_difference(grids, rule).tocoo()
    # (F D + D F)_{uv} = (f_u + f_v) D_{uv} / 2 entrywise for diagonal F.
    vals = 0.5 * (f[D.row] + f[D.col]) * D.data
    C = _csr(D.row, D.col, vals, U)
    C.eliminate_zeros()
    return SparseOperator(C, grids, {"kind": "convection", "rule": rule})


def assemble_spatial_laplacian(grids, sigma_r):
    """Six-neighbour Laplacian per steered lattice, scaled ``sigma_r^2 / 2`` (generator sign)."""
    if sigma_r < 0:
        raise ParameterError("sigma_r must be non-negative")
    U = grids.U
    meta = {"kind": "spatial", "sigma_r": sigma_r}
    if sigma_r == 0:
        return SparseOperator(sp.csr_matrix((U, U)), grids, meta)
    idt = _index_dtype(U)
    c = sigma_r ** 2 / (2.0 * grids.spacing ** 2)
    rows, cols, vals = [], [], []
    for g in grids.grids:
        if not len(g):
            continue
        gid = g.global_index.astype(idt)
        rows.append(gid)
        cols.append(gid)
        vals.append(np.full(len(g), -6.0 * c))
        for axis in range(3):
            for s in (-1, 1):
                step = np.zeros(3, dtype=np.int64)
                step[axis] = s
                nb = g.lookup(g.coords + step)
                ok = nb >= 0
                rows.append(gid[ok])
                cols.append((nb[ok] + g.offset).astype(idt))
                vals.append(np.full(ok.sum(), c))
    return SparseOperator(_csr(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), U), grids, meta)


def assemble_H(speed, sigma_n=np.pi / 12, sigma_r=0.0, kappa=0.0, A=None, rule="symmetric"):
    """System matrix ``M = -H - kappa`` on the thresholded domain of ``speed``.

    ``A=None`` calibrates the angular factor on the direction set. Raises
    :class:`SpectralShiftError` if ``kappa > 0`` makes any diagonal entry
    non-positive.
    """
    grids = speed.grids
    dirs = grids.dirs
    t0 = time.perf_counter()
    if A is None:
        A = calibrate_A(dirs, sigma_n)
    L = assemble_angular_laplacian(grids, sigma_n, A).matrix
    S = assemble_spatial_laplacian(grids, sigma_r).matrix
    C = assemble_convection(speed, rule).matrix
    M = (L - S - C).tocsr()
    diag = M.diagonal()
    if kappa:
        if np.any(diag - kappa <= 0):
            raise SpectralShiftError(
                f"spectral shift too large: kappa={kappa} >= min diagonal {diag.min():.4g}")
        M = (M - kappa * sp.identity(grids.U, format="csr")).tocsr()
    M.sum_duplicates()
    M.sort_indices()
    if not np.all(np.isfinite(M.data)):
        raise AssemblyError("non-finite operator entries")
    meta = {
        "sigma_n": float(sigma_n), "sigma_r": float(sigma_r), "kappa": float(kappa), "A": float(A),
        "h": grids.spacing, "N": dirs.N, "U": grids.U, "rule": rule,
        "assembly_seconds": time.perf_counter() - t0,
    }
    return SparseOperator(M, grids, meta)


def symmetry_defect(op):
    """``||Z M Z - M^T||_inf / ||M||_inf`` (0 for an exactly reflection-symmetric operator)."""
    M = op.matrix
    diff = (op.reflect() - M.T).tocsr()
    norm = abs(M).sum(axis=1).max()
    if norm == 0:
        return 0.0
    return float(abs(diff).sum(axis=1).max() / norm)
