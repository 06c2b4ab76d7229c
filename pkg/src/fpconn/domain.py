"""Steered lattices over the joint position x orientation domain.

For every direction ``n_i`` a voxel lattice is rotated so that its local
x-axis points along ``n_i``. Two antipodal directions share one lattice; the
second one walks it with reversed x- and y-indices. Sharing the sample
positions turns the point reflection into an exact permutation of unknowns.

Coordinates are in mm. Native voxel ``(i, j, k)`` sits at
``voxel_size * (i, j, k)``.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage
from scipy.ndimage import map_coordinates

from .errors import DomainError, ParameterError

FLIP = np.array([-1, -1, 1])
MASK_THRESHOLD = 0.5
_SNAP = 1e-10


def trilinear_sample(volume, positions, voxel_size):
    """Zero-padded trilinear interpolation of a native volume at mm positions."""
    coords = (np.asarray(positions, dtype=float) / voxel_size).T
    return map_coordinates(np.asarray(volume, dtype=float), coords, order=1, mode="grid-constant", cval=0.0)


@dataclass(frozen=True, eq=False)
class Mask:
    values: np.ndarray
    voxel_size: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values).astype(np.uint8)
        if v.ndim != 3:
            raise ParameterError("mask must be a 3D volume")
        if not v.any():
            raise DomainError("mask has no on-voxels")
        if self.voxel_size <= 0:
            raise ParameterError("voxel size must be positive")
        object.__setattr__(self, "values", v)

    @property
    def dims(self):
        return self.values.shape

    def components(self):
        """Number of 26-connected components of the on-voxels."""
        _, count = ndimage.label(self.values, structure=np.ones((3, 3, 3)))
        return count

    def interpolate(self, positions):
        return trilinear_sample(self.values, positions, self.voxel_size)

    def bounding_box(self):
        idx = np.argwhere(self.values)
        return idx.min(0), idx.max(0)


@dataclass(frozen=True, eq=False)
class PeakField:
    """Per-voxel fiber peak directions, zero-padded to ``K`` slots.

    ``vectors`` has shape (nx, ny, nz, K, 3). A slot with a zero vector is
    unused. Signs carry no meaning.
    """

    vectors: np.ndarray
    voxel_size: float = 1.0
    max_peaks: int = 4

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=float)
        if v.ndim == 4:
            v = v[..., None, :]
        if v.ndim != 5 or v.shape[-1] != 3:
            raise ParameterError("peak vectors must have shape (nx, ny, nz, K, 3)")
        if v.shape[3] > self.max_peaks:
            raise ParameterError(f"at most {self.max_peaks} peaks per voxel, got {v.shape[3]}")
        norms = np.linalg.norm(v, axis=-1)
        used = norms > 0
        if np.any(np.abs(norms[used] - 1.0) > 1e-9):
            raise ParameterError("peak directions must be unit vectors")
        object.__setattr__(self, "vectors", v)

    @property
    def dims(self):
        return self.vectors.shape[:3]

    def counts(self):
        return (np.linalg.norm(self.vectors, axis=-1) > 0).sum(-1)

    def speed_volume(self, n, exponent):
        """Native-frame speed ``sum_k (n . d_k)^(2 exponent)`` for direction ``n``."""
        dots = self.vectors @ np.asarray(n, dtype=float)
        return np.sum(dots ** (2 * exponent), axis=-1)


def rotation_to(n):
    """Minimal-angle rotation taking e_x onto the unit vector ``n``.

    For ``n = -e_x`` the fixed half turn about e_z is returned.
    """
    n = np.asarray(n, dtype=float)
    if n.shape != (3,) or abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise ParameterError(f"rotation target must be a unit 3-vector, got {n!r}")
    c = n[0]
    if np.linalg.norm(n + np.array([1.0, 0.0, 0.0])) < 1e-9:
        return np.diag([-1.0, -1.0, 1.0])
    k = np.array([0.0, -n[2], n[1]])  # e_x cross n
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + K + K @ K / (1.0 + c)


class Lattice:
    """Integer lattice ``center + spacing * R @ (x, y, z)`` shared by an antipodal pair."""

    def __init__(self, rotation, center, spacing, mask):
        self.rotation = rotation
        self.center = center
        self.spacing = spacing
        self.mask = mask

    def positions(self, coords):
        return self.center + self.spacing * (np.asarray(coords, dtype=float) @ self.rotation.T)

    def local(self, positions):
        return ((np.asarray(positions, dtype=float) - self.center) @ self.rotation) / self.spacing

    def mask_points(self):
        """All lattice coordinates whose interpolated mask value is >= 0.5 (lexicographic)."""
        lo, hi = self.mask.bounding_box()
        vs = self.mask.voxel_size
        corners = np.array([[a, b, c] for a in (lo[0] - 1, hi[0] + 1) for b in (lo[1] - 1, hi[1] + 1)
                            for c in (lo[2] - 1, hi[2] + 1)], dtype=float) * vs
        u = self.local(corners)
        umin = np.floor(u.min(0)).astype(int)
        umax = np.ceil(u.max(0)).astype(int)
        axes = [np.arange(a, b + 1) for a, b in zip(umin, umax)]
        out = []
        # Slab-wise to bound memory on large oversampled lattices.
        gy, gz = np.meshgrid(axes[1], axes[2], indexing="ij")
        yz = np.column_stack([gy.ravel(), gz.ravel()])
        for x in axes[0]:
            coords = np.column_stack([np.full(len(yz), x), yz])
            keep = self.mask.interpolate(self.positions(coords)) >= MASK_THRESHOLD
            if keep.any():
                out.append(coords[keep])
        if not out:
            return np.zeros((0, 3), dtype=np.int64)
        return np.vstack(out).astype(np.int64)

    def boundary_at(self, coords):
        """Boundary class of lattice points that are *not* in the valid set.

        +1 where the mask is on (the point was removed by speed thresholding),
        -1 where the mask itself ends.
        """
        m = self.mask.interpolate(self.positions(coords))
        return np.where(m >= MASK_THRESHOLD, 1, -1).astype(np.int8)


def _lex_order(coords):
    return np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))


class SteeredGrid:
    """Valid lattice points of one direction volume.

    ``coords`` are this grid's own lattice indices (lexicographically sorted),
    ``positions`` the corresponding mm positions. ``global_index`` maps the
    rows to unknown ids. Points outside the valid set are not stored; their
    boundary class is recovered on demand (:meth:`boundary_at`).
    """

    def __init__(self, index, direction, lattice, flipped, coords, positions, offset):
        self.index = index
        self.direction = direction
        self.lattice = lattice
        self.flipped = flipped
        self.coords = coords
        self.positions = positions
        self.offset = offset
        if len(coords):
            self._lo = coords.min(0)
            self._extent = coords.max(0) - self._lo + 1
            self._keys = self._encode(coords)
        else:
            self._lo = np.zeros(3, dtype=np.int64)
            self._extent = np.zeros(3, dtype=np.int64)
            self._keys = np.zeros(0, dtype=np.int64)

    def __len__(self):
        return len(self.coords)

    @property
    def rotation(self):
        R = self.lattice.rotation
        return R * FLIP if self.flipped else R

    @property
    def spacing(self):
        return self.lattice.spacing

    @property
    def origin(self):
        """Position of the lower lattice corner of the valid bounding box."""
        return self.lattice.positions(self._to_shared(self._lo[None]))[0]

    @property
    def dims(self):
        return tuple(int(e) for e in self._extent)

    @property
    def global_index(self):
        return self.offset + np.arange(len(self.coords))

    def _to_shared(self, coords):
        return coords * FLIP if self.flipped else coords

    def _encode(self, coords):
        c = coords - self._lo
        ex = self._extent
        return (c[..., 0] * ex[1] + c[..., 1]) * ex[2] + c[..., 2]

    def lookup(self, coords):
        """Row of each lattice coordinate in this grid, -1 where not valid."""
        coords = np.asarray(coords, dtype=np.int64)
        out = np.full(coords.shape[:-1], -1, dtype=np.int64)
        if not len(self.coords):
            return out
        inside = np.all((coords >= self._lo) & (coords < self._lo + self._extent), axis=-1)
        keys = self._encode(coords[inside])
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        hit = self._keys[pos] == keys
        rows = np.where(hit, pos, -1)
        out[inside] = rows
        return out

    def boundary_at(self, coords):
        """Boundary indicator b in {-1, 0, +1} at arbitrary lattice coordinates."""
        coords = np.asarray(coords, dtype=np.int64)
        rows = self.lookup(coords)
        b = np.zeros(coords.shape[:-1], dtype=np.int8)
        miss = rows < 0
        if miss.any():
            b[miss] = self.lattice.boundary_at(self._to_shared(coords[miss]))
        return b

    def local(self, positions):
        """Continuous lattice coordinates of mm positions in this grid's frame."""
        u = self.lattice.local(positions)
        return u * FLIP if self.flipped else u

    def stencil(self, positions):
        """Trilinear corners (global ids, -1 if not valid) and weights for positions.

        Returns arrays of shape (Q, 8). Weights sum to one per row; corners
        that are not valid keep their weight here so callers decide whether
        to drop or renormalize.
        """
        u = self.local(positions)
        r = np.round(u)
        u = np.where(np.abs(u - r) <= _SNAP * np.maximum(1.0, np.abs(u)), r, u)
        base = np.floor(u).astype(np.int64)
        t = u - base
        corners = np.empty((len(u), 8, 3), dtype=np.int64)
        weights = np.empty((len(u), 8))
        k = 0
        for dx in (0, 1):
            wx = t[:, 0] if dx else 1.0 - t[:, 0]
            for dy in (0, 1):
                wy = t[:, 1] if dy else 1.0 - t[:, 1]
                for dz in (0, 1):
                    wz = t[:, 2] if dz else 1.0 - t[:, 2]
                    corners[:, k] = base + (dx, dy, dz)
                    weights[:, k] = wx * wy * wz
                    k += 1
        rows = self.lookup(corners)
        ids = np.where(rows >= 0, rows + self.offset, -1)
        return ids, weights


def trilinear_weights(pos, grid):
    """The eight (global id, weight) pairs interpolating ``grid`` at ``pos``.

    Raises :class:`DomainError` when ``pos`` lies outside the bounding box of
    the grid's valid points. Missing corners are reported with id -1.
    """
    if not len(grid):
        raise DomainError("grid has no valid points")
    u = grid.local(np.asarray(pos, dtype=float)[None])[0]
    lo = grid._lo - _SNAP
    hi = grid._lo + grid._extent - 1 + _SNAP
    if np.any(u < lo) or np.any(u > hi):
        raise DomainError(f"position {pos!r} is outside the grid box")
    ids, w = grid.stencil(np.asarray(pos, dtype=float)[None])
    return list(zip(ids[0].tolist(), w[0].tolist()))


class GridFamily:
    """All direction volumes plus the global unknown numbering.

    Directly after :func:`build_steered_grids` every mask point is valid;
    :func:`speed_from_peaks` returns a thresholded family. Lattice points are
    enumerated lazily on first access.
    """

    def __init__(self, dirs, mask, h, oversample, lattices, points=None, speed=None):
        self.dirs = dirs
        self.mask = mask
        self.h = h
        self.oversample = oversample
        self.lattices = lattices
        self._points = {} if points is None else points
        self.speed = speed

    @property
    def spacing(self):
        return self.h / self.oversample

    @property
    def N(self):
        return self.dirs.N

    def shared_points(self, i):
        """Lattice coordinates (in the pair's shared frame) of direction ``i``."""
        p = min(i, int(self.dirs.antipode[i]))
        if p not in self._points:
            self._points[p] = self.lattices[p].mask_points()
        return self._points[p]

    @cached_property
    def grids(self):
        grids = []
        offset = 0
        for i in range(self.N):
            grids.append(self._make_grid(i, self.shared_points(i), offset))
            offset += len(grids[-1])
        return grids

    def _make_grid(self, i, shared, offset):
        p = min(i, int(self.dirs.antipode[i]))
        lat = self.lattices[p]
        flipped = i != p
        own = shared * FLIP if flipped else shared
        order = _lex_order(own) if flipped else np.arange(len(shared))
        positions = lat.positions(shared)[order]
        return SteeredGrid(i, self.dirs.n[i], lat, flipped, own[order], positions, offset)

    def grid(self, i):
        return self.grids[i]

    @property
    def U(self):
        return sum(len(g) for g in self.grids)

    @cached_property
    def offsets(self):
        return np.array([g.offset for g in self.grids] + [self.U])

    @cached_property
    def unknown_direction(self):
        return np.repeat(np.arange(self.N), [len(g) for g in self.grids])

    @cached_property
    def unknown_positions(self):
        if not self.U:
            return np.zeros((0, 3))
        return np.vstack([g.positions for g in self.grids])

    @cached_property
    def zperm(self):
        """Unknown permutation realizing the point reflection n -> -n."""
        perm = np.empty(self.U, dtype=np.int64)
        for i, g in enumerate(self.grids):
            if not len(g):
                continue
            a = self.grids[int(self.dirs.antipode[i])]
            rows = a.lookup(g.coords * FLIP)
            if np.any(rows < 0):
                raise DomainError("antipodal grids do not share their valid points")
            perm[g.global_index] = rows + a.offset
        return perm

    @property
    def cell_measure(self):
        return self.spacing ** 3 * 4.0 * np.pi / self.N

    def field(self, values=None):
        return StateField(np.zeros(self.U) if values is None else np.asarray(values, dtype=float), self)

    def region_seed(self, region):
        """Direction-uniform seed density from a native boolean region volume."""
        region = np.asarray(region, dtype=float)
        if region.shape != self.mask.dims:
            raise ParameterError("region volume must match the mask dimensions")
        values = trilinear_sample(region, self.unknown_positions, self.mask.voxel_size)
        if not np.any(values > 0):
            raise DomainError("seed region does not intersect the simulation domain")
        return StateField(values, self)

    def to_native(self, values):
        """Angularly integrated native map via reverse trilinear splatting.

        Each direction volume is splatted separately and normalized by its
        splat weight; the per-direction maps are summed.
        """
        values = np.asarray(values, dtype=float)
        dims = np.array(self.mask.dims)
        nvox = int(np.prod(dims))
        u = self.unknown_positions / self.mask.voxel_size
        base = np.floor(u).astype(np.int64)
        t = u - base
        num = np.zeros(self.N * nvox)
        den = np.zeros(self.N * nvox)
        dir_off = self.unknown_direction * nvox
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    c = base + (dx, dy, dz)
                    w = (np.where(dx, t[:, 0], 1 - t[:, 0]) * np.where(dy, t[:, 1], 1 - t[:, 1])
                         * np.where(dz, t[:, 2], 1 - t[:, 2]))
                    ok = np.all((c >= 0) & (c < dims), axis=1) & (w > 0)
                    key = dir_off[ok] + np.ravel_multi_index(c[ok].T, dims)
                    num += np.bincount(key, weights=w[ok] * values[ok], minlength=len(num))
                    den += np.bincount(key, weights=w[ok], minlength=len(den))
        out = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
        return out.reshape(self.N, *dims).sum(0)


@dataclass(eq=False)
class StateField:
    """Real values over all valid unknowns of a grid family."""

    values: np.ndarray
    domain: GridFamily

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.domain.U,):
            raise ParameterError(f"state field needs {self.domain.U} values, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ParameterError("state field values must be finite")

    def reflect(self):
        out = np.empty_like(self.values)
        out[self.domain.zperm] = self.values
        return StateField(out, self.domain)


@dataclass(eq=False)
class SpeedField:
    """Speed per valid unknown of the thresholded family ``grids``."""

    grids: GridFamily
    f: np.ndarray
    epsilon: float
    exponent: int


def build_steered_grids(mask, dirs, h=1.0, oversample=1):
    """One steered lattice per direction over the mask, spacing ``h / oversample``.

    Antipodal pairs share a lattice. Only points with interpolated mask
    value >= 0.5 are valid.
    """
    if h <= 0:
        raise ParameterError("grid spacing must be positive")
    if int(oversample) != oversample or oversample < 1:
        raise ParameterError("oversample must be an integer >= 1")
    if not isinstance(mask, Mask):
        mask = Mask(mask)
    lo, hi = mask.bounding_box()
    center = np.floor((lo + hi) / 2.0) * mask.voxel_size
    lattices = {}
    for i in dirs.primary:
        lattices[int(i)] = Lattice(rotation_to(dirs.n[i]), center, h / oversample, mask)
    return GridFamily(dirs, mask, float(h), int(oversample), lattices)


def speed_from_peaks(peaks, grids, exponent=25, epsilon=0.02):
    """Resample the speed function onto every steered lattice and threshold it.

    Returns a :class:`SpeedField` whose ``grids`` attribute is the new family
    containing only points with ``f > epsilon``.
    """
    if int(exponent) != exponent or exponent < 1:
        raise ParameterError("speed exponent must be an integer >= 1")
    if epsilon <= 0:
        raise ParameterError("speed threshold must be positive")
    if tuple(peaks.dims) != tuple(grids.mask.dims):
        raise ParameterError("peak field and mask dimensions differ")
    dirs = grids.dirs
    kept = {}
    fvals = {}
    for p in dirs.primary:
        p = int(p)
        fvol = peaks.speed_volume(dirs.n[p], int(exponent))
        if fvol.max() <= epsilon:
            kept[p] = np.zeros((0, 3), dtype=np.int64)
            fvals[p] = np.zeros(0)
            continue
        lat = grids.lattices[p]
        pts = grids._points[p] if p in grids._points else lat.mask_points()
        f = trilinear_sample(fvol, lat.positions(pts), grids.mask.voxel_size)
        ok = f > epsilon
        kept[p] = pts[ok]
        fvals[p] = f[ok]
    family = GridFamily(dirs, grids.mask, grids.h, grids.oversample, grids.lattices, points=kept)
    f_all = np.empty(family.U)
    for i, g in enumerate(family.grids):
        p = min(i, int(dirs.antipode[i]))
        if g.flipped:
            f_all[g.global_index] = fvals[p][_lex_order(kept[p] * FLIP)]
        else:
            f_all[g.global_index] = fvals[p]
    if family.U == 0:
        raise DomainError("speed thresholding leaves an empty simulation domain")
    family.speed = f_all
    return SpeedField(family, f_all, float(epsilon), int(exponent))


def speed_from_function(func, grids, epsilon=0.02):
    """Threshold an analytic speed ``func(positions, n) -> f`` on every steered lattice.

    Same contract as :func:`speed_from_peaks`, but ``f`` is evaluated exactly
    at the lattice positions instead of being interpolated from voxels.
    """
    if epsilon <= 0:
        raise ParameterError("speed threshold must be positive")
    dirs = grids.dirs
    kept = {}
    fvals = {}
    for p in dirs.primary:
        p = int(p)
        lat = grids.lattices[p]
        pts = grids._points[p] if p in grids._points else lat.mask_points()
        pos = lat.positions(pts)
        f_pos = np.asarray(func(pos, np.broadcast_to(dirs.n[p], pos.shape)), dtype=float)
        f_neg = np.asarray(func(pos, np.broadcast_to(dirs.n[dirs.antipode[p]], pos.shape)), dtype=float)
        if np.any(np.abs(f_pos - f_neg) > 1e-9 * np.maximum(1.0, np.abs(f_pos))):
            raise ParameterError("speed function must be even in the direction")
        ok = f_pos > epsilon
        kept[p] = pts[ok]
        fvals[p] = f_pos[ok]
    family = GridFamily(dirs, grids.mask, grids.h, grids.oversample, grids.lattices, points=kept)
    if family.U == 0:
        raise DomainError("speed thresholding leaves an empty simulation domain")
    f_all = np.empty(family.U)
    for i, g in enumerate(family.grids):
        p = min(i, int(dirs.antipode[i]))
        f_all[g.global_index] = fvals[p][_lex_order(kept[p] * FLIP)] if g.flipped else fvals[p]
    family.speed = f_all
    return SpeedField(family, f_all, float(epsilon), 0)
