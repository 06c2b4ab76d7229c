"""Connectivity amplitudes, normalized scores, trail images and region matrices.

Inner products are plain sums over unknowns (unit measure). Multiplying by
:attr:`GridFamily.cell_measure` gives the continuum normalization; it cancels
in every normalized quantity.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .domain import StateField
from .errors import DegenerateRegionError, ParameterError
from .solver import solve_adjoint, solve_steady

VARIANTS = ("plain", "kappa", "linear")


def _seed(M, a):
    if isinstance(a, StateField):
        return a
    a = np.asarray(a)
    dom = M.domain
    if a.shape == tuple(dom.mask.dims):
        return dom.region_seed(a)
    return StateField(a, dom)


def amplitude(M, a, b, **solver_kw):
    """``c(a, b) = <Z a, M^-1 b>``."""
    a, b = _seed(M, a), _seed(M, b)
    p, _ = solve_steady(M, b, **solver_kw)
    return float(a.reflect().values @ p.values)


def normalized_amplitude(M, a, b, **solver_kw):
    """``c(a, b) / sqrt(c(a, a) c(b, b))``; raises for non-positive self terms."""
    a, b = _seed(M, a), _seed(M, b)
    pa, _ = solve_steady(M, a, **solver_kw)
    pb, _ = solve_steady(M, b, **solver_kw)
    za = a.reflect().values
    caa = float(za @ pa.values)
    cbb = float(b.reflect().values @ pb.values)
    if caa <= 0 or cbb <= 0:
        raise DegenerateRegionError(f"non-positive self connectivity (c_aa={caa:.3g}, c_bb={cbb:.3g})")
    return float(za @ pb.values) / np.sqrt(caa * cbb)


def trail_image(M, a, b, **solver_kw):
    """Mean path trail between ``a`` and ``b``.

    ``tau = (M^-T Z a) * (M^-1 b)`` elementwise; the left factor is obtained
    through the reflection identity as ``Z M^-1 a``.
    """
    a, b = _seed(M, a), _seed(M, b)
    w, _ = solve_steady(M, b, **solver_kw)
    q, _ = solve_adjoint(M, a.reflect(), via_z=True, **solver_kw)
    return StateField(q.values * w.values, M.domain)


def trail_integral(tau, measure=1.0):
    return float(np.sum(tau.values) * measure)


def linear_reweighted(M, a, b, **solver_kw):
    """Length-weighted amplitude ``<Z a, M^-2 b>`` by two successive solves."""
    a, b = _seed(M, a), _seed(M, b)
    u, _ = solve_steady(M, b, **solver_kw)
    w, _ = solve_steady(M, u, **solver_kw)
    return float(a.reflect().values @ w.values)


def point_region(mask, voxel):
    region = np.zeros(mask.dims, dtype=bool)
    v = tuple(int(c) for c in voxel)
    if any(c < 0 or c >= n for c, n in zip(v, mask.dims)):
        raise ParameterError(f"seed voxel {v} lies outside the volume")
    region[v] = True
    return region


def spatial_amplitude_map(M, r0, **solver_kw):
    """Angularly integrated native-frame map of the solution seeded at voxel ``r0``.

    ``r0`` may also be a boolean region volume.
    """
    dom = M.domain
    r0 = np.asarray(r0)
    region = r0 if r0.shape == tuple(dom.mask.dims) else point_region(dom.mask, r0)
    p, report = solve_steady(M, dom.region_seed(region), **solver_kw)
    return dom.to_native(p.values)


@dataclass
class ConnectivityMatrix:
    labels: list
    c: np.ndarray
    cn: np.ndarray
    variant: str = "plain"

    def asymmetry(self):
        """Largest ``|c_ij - c_ji|`` relative to the largest ``|c|``."""
        scale = np.abs(self.c).max()
        return float(np.abs(self.c - self.c.T).max() / scale) if scale > 0 else 0.0

    def symmetrized(self):
        c = 0.5 * (self.c + self.c.T)
        d = np.sqrt(np.diag(c))
        return ConnectivityMatrix(list(self.labels), c, c / np.outer(d, d), self.variant)

    def to_csv(self, path, which="cn"):
        values = getattr(self, which)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([""] + list(self.labels))
            for lab, row in zip(self.labels, values):
                w.writerow([lab] + [repr(float(v)) for v in row])


def read_matrix_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    labels = rows[0][1:]
    return labels, np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def connectivity_matrix(M, seeds, labels=None, variant="plain", **solver_kw):
    """All pairwise amplitudes between seed regions with one solve per region.

    For the ``linear`` variant each region needs a second solve. The
    ``kappa`` variant expects ``M`` assembled with ``kappa > 0``.
    """
    if variant not in VARIANTS:
        raise ParameterError(f"unknown variant {variant!r}")
    seeds = [_seed(M, s) for s in seeds]
    labels = [str(i + 1) for i in range(len(seeds))] if labels is None else list(labels)
    if len(labels) != len(seeds):
        raise ParameterError("one label per seed region required")
    sols = []
    for s in seeds:
        p, _ = solve_steady(M, s, **solver_kw)
        if variant == "linear":
            p, _ = solve_steady(M, p, **solver_kw)
        sols.append(p.values)
    Z = np.array([s.reflect().values for s in seeds])
    c = Z @ np.array(sols).T
    d = np.diag(c)
    if np.any(d <= 0):
        bad = [labels[i] for i in np.flatnonzero(d <= 0)]
        raise DegenerateRegionError(f"non-positive self connectivity for regions {bad}")
    cn = c / np.sqrt(np.outer(d, d))
    return ConnectivityMatrix(labels, c, cn, variant)


def log_display(values, quantile=0.2, offdiagonal=True):
    """Display transform ``log(t + c)`` with ``t`` the 20% quantile of the values.

    For square matrices the quantile is taken over off-diagonal entries.
    """
    v = np.asarray(values, dtype=float)
    if offdiagonal and v.ndim == 2 and v.shape[0] == v.shape[1] and v.shape[0] > 1:
        pool = v[~np.eye(v.shape[0], dtype=bool)]
    else:
        pool = v.ravel()
    t = float(np.quantile(pool, quantile))
    if t <= 0:
        # Fall back to the quantile of the positive entries so the log stays finite.
        pos = pool[pool > 0]
        t = float(np.quantile(pos, quantile)) if len(pos) else 1.0
    return np.log(t + np.maximum(v, 0.0))
