"""Discretization diagnostics: profile widths and false-diffusion spread."""

import numpy as np
from scipy.ndimage import distance_transform_edt, map_coordinates

from .errors import ParameterError


def perpendicular_profile(volume, origin, direction, distance, half_width=8.0, step=0.05, voxel_size=1.0):
    """Sample ``volume`` across the in-plane normal of ``direction``.

    The line is centred at ``origin + distance * direction`` (mm) and runs
    along ``(-d_y, d_x, 0)``. Returns ``(offsets, values)``.
    """
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    perp = np.array([-d[1], d[0], 0.0])
    if np.linalg.norm(perp) == 0:
        raise ParameterError("direction must have an in-plane component")
    perp /= np.linalg.norm(perp)
    t = np.arange(-half_width, half_width + step / 2, step)
    pts = np.asarray(origin, dtype=float) + distance * d + t[:, None] * perp
    vals = map_coordinates(np.asarray(volume, dtype=float), (pts / voxel_size).T, order=1, mode="grid-constant")
    return t, vals


def fwhm(offsets, values):
    """Full width at half maximum of a single-peaked sampled profile.

    Half-maximum crossings are located by linear interpolation. Returns NaN
    when the profile does not fall below half maximum on both sides.
    """
    x = np.asarray(offsets, dtype=float)
    v = np.asarray(values, dtype=float)
    k = int(np.argmax(v))
    peak = v[k]
    if not peak > 0:
        return float("nan")
    half = peak / 2.0
    left = np.flatnonzero(v[:k] < half)
    right = np.flatnonzero(v[k:] < half)
    if not len(left) or not len(right):
        return float("nan")
    i = left[-1]
    xl = x[i] + (half - v[i]) * (x[i + 1] - x[i]) / (v[i + 1] - v[i])
    j = k + right[0]
    xr = x[j - 1] + (half - v[j - 1]) * (x[j] - x[j - 1]) / (v[j] - v[j - 1])
    return float(xr - xl)


def interior_unknowns(domain, margin=3.0):
    """Unknowns at least ``margin`` voxels away from the mask boundary."""
    depth = distance_transform_edt(np.pad(domain.mask.values, 1))[1:-1, 1:-1, 1:-1]
    d = map_coordinates(depth, (domain.unknown_positions / domain.mask.voxel_size).T, order=1)
    return np.flatnonzero(d >= margin)


def false_diffusion_spread(angular, sample=None, margin=3.0):
    """Per-axis spatial variance rate induced by the interpolated angular coupling.

    ``angular`` is the assembled (positive semidefinite) angular block. For
    the generator ``-L`` the rate of change of the per-axis positional
    variance of a point mass at unknown ``u`` is ``sum_v -L[v, u] |r_v - r_u|^2 / 3``.
    By default all unknowns ``margin`` voxels inside the mask are used.
    Returns the mean rate; its square root is the effective spatial
    diffusion ``sigma_r`` in the units of the positions.
    """
    L = angular.matrix.tocsc()
    pos = angular.domain.unknown_positions
    idx = interior_unknowns(angular.domain, margin) if sample is None else np.asarray(sample)
    if not len(idx):
        raise ParameterError("no interior unknowns to measure the spread on")
    rates = np.empty(len(idx))
    for k, u in enumerate(idx):
        lo, hi = L.indptr[u], L.indptr[u + 1]
        rows = L.indices[lo:hi]
        w = -L.data[lo:hi]
        dx = pos[rows] - pos[u]
        rates[k] = np.sum(w * np.einsum("ij,ij->i", dx, dx)) / 3.0
    return float(rates.mean())


def spread_per_pi(angular, sigma_n, sample=None, grid_unit=1.0, margin=3.0):
    """Spatial spread (grid units) per angular displacement of pi.

    With effective spatial diffusion ``sigma_act = sigma_n X / pi`` this
    returns ``X``.
    """
    if sigma_n <= 0:
        raise ParameterError("sigma_n must be positive")
    rate = false_diffusion_spread(angular, sample, margin)
    return float(np.pi * np.sqrt(rate) / grid_unit / sigma_n)
