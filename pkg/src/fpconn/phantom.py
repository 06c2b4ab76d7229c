"""Numerical phantom with a crossing of two straight bundles and a bending bundle.

Fiber directions are created continuously per voxel (no MR signal is
simulated). Six seed locations are paired (1-2), (3-4), (5-6) by the three
bundles.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .domain import Mask, PeakField
from .errors import ParameterError, SpecError

SPEC_VERSION = 1


@dataclass(frozen=True)
class StraightBundle:
    start: tuple
    end: tuple
    width: float = 3.0
    thickness: float = 3.0
    z: float = 3.0


@dataclass(frozen=True)
class ArcBundle:
    """Circular arc in the xy-plane from angle ``theta0`` to ``theta1`` (rad)."""

    center: tuple
    radius: float
    theta0: float
    theta1: float
    width: float = 3.0
    thickness: float = 3.0
    z: float = 3.0


def _default_seeds():
    return ((6, 10, 3), (14, 10, 3), (10, 6, 3), (10, 14, 3), (19, 25, 3), (25, 19, 3))


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry of the phantom; defaults give the 30x30x7 crossing/bending layout.

    The first straight bundle runs along x at y = ``cross_at[1]``; the second
    passes through ``cross_at`` at ``crossing_angle`` (degrees) to the first.
    The arc is a quarter circle around ``arc_center``.
    """

    dims: tuple = (30, 30, 7)
    voxel_size: float = 1.0
    width: float = 3.0
    thickness: float = 3.0
    z: float = 3.0
    cross_at: tuple = (10.0, 10.0)
    crossing_angle: float = 90.0
    straight_extent: tuple = (2.0, 27.0)
    arc_center: tuple = (26.0, 26.0)
    arc_radius: float = 7.0
    seeds: tuple = field(default_factory=_default_seeds)
    seed_radius: int = 1
    alpha: float = 20.0
    sigma_nz: float = 0.0
    noise_seed: int = 0
    version: int = SPEC_VERSION

    def bundles(self):
        lo, hi = self.straight_extent
        cx, cy = self.cross_at
        a = StraightBundle((lo, cy), (hi, cy), self.width, self.thickness, self.z)
        phi = np.deg2rad(self.crossing_angle)
        u = np.array([np.cos(phi), np.sin(phi)])
        # Second bundle: same length on either side of the crossing as the
        # orthogonal layout, measured along its own direction.
        t0, t1 = lo - cy, hi - cy
        b = StraightBundle(tuple(np.array([cx, cy]) + t0 * u), tuple(np.array([cx, cy]) + t1 * u),
                           self.width, self.thickness, self.z)
        c = ArcBundle(self.arc_center, self.arc_radius, np.pi, 1.5 * np.pi, self.width, self.thickness, self.z)
        return [a, b, c]

    def to_json(self):
        d = asdict(self)
        d["seeds"] = [list(s) for s in self.seeds]
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown phantom spec keys: {sorted(extra)}")
        d = dict(d)
        for key in ("dims", "cross_at", "straight_extent", "arc_center"):
            if key in d:
                d[key] = tuple(d[key])
        if "seeds" in d:
            d["seeds"] = tuple(tuple(int(v) for v in s) for s in d["seeds"])
        return cls(**d)


def _grid(dims):
    return np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in dims], indexing="ij"), axis=-1)


def _check_inside(points, dims, margin):
    points = np.asarray(points, dtype=float)
    hi = np.asarray(dims[:2], dtype=float) - 1.0
    if np.any(points - margin < -0.5) or np.any(points + margin > hi + 0.5):
        raise SpecError("bundle leaves the phantom volume")


def _straight(b, X, dims):
    s = np.asarray(b.start, dtype=float)
    e = np.asarray(b.end, dtype=float)
    L = np.linalg.norm(e - s)
    if L == 0:
        raise SpecError("straight bundle has zero length")
    _check_inside([s, e], dims, b.width / 2.0)
    u = (e - s) / L
    rel = X[..., :2] - s
    t = rel @ u
    perp = rel[..., 0] * u[1] - rel[..., 1] * u[0]
    inside = ((t >= 0) & (t <= L) & (np.abs(perp) <= b.width / 2.0 + 1e-9)
              & (np.abs(X[..., 2] - b.z) <= b.thickness / 2.0 + 1e-9))
    d = np.zeros(X.shape)
    d[..., 0], d[..., 1] = u[0], u[1]
    return inside, d


def _arc(b, X, dims):
    c = np.asarray(b.center, dtype=float)
    if b.radius <= b.width / 2.0:
        raise SpecError("arc radius must exceed half the bundle width")
    th = np.linspace(b.theta0, b.theta1, 64)
    _check_inside(c + b.radius * np.column_stack([np.cos(th), np.sin(th)]), dims, b.width / 2.0)
    rel = X[..., :2] - c
    rho = np.hypot(rel[..., 0], rel[..., 1])
    ang = np.mod(np.arctan2(rel[..., 1], rel[..., 0]) - b.theta0, 2 * np.pi)
    inside = ((np.abs(rho - b.radius) <= b.width / 2.0 + 1e-9) & (ang <= b.theta1 - b.theta0)
              & (np.abs(X[..., 2] - b.z) <= b.thickness / 2.0 + 1e-9))
    a = b.theta0 + ang
    d = np.zeros(X.shape)
    d[..., 0], d[..., 1] = -np.sin(a), np.cos(a)
    return inside, d


def build_phantom(spec=None):
    """Mask, peak field and the six seed region volumes of a phantom spec."""
    spec = PhantomSpec() if spec is None else spec
    dims = tuple(int(n) for n in spec.dims)
    if len(dims) != 3 or min(dims) < 1:
        raise SpecError("phantom dims must be three positive integers")
    if spec.width <= 0 or spec.thickness <= 0:
        raise SpecError("bundle width and thickness must be positive")
    if not 0 < spec.crossing_angle < 180:
        raise SpecError("crossing angle must lie in (0, 180) degrees")
    if spec.z - spec.thickness / 2.0 < -0.5 or spec.z + spec.thickness / 2.0 > dims[2] - 0.5:
        raise SpecError("bundle thickness leaves the phantom volume")
    X = _grid(dims)
    peaks = np.zeros(dims + (2, 3))
    count = np.zeros(dims, dtype=int)
    for b in spec.bundles():
        inside, d = (_arc if isinstance(b, ArcBundle) else _straight)(b, X, dims)
        for idx in np.argwhere(inside):
            i, j, k = idx
            dv = d[i, j, k]
            prev = peaks[i, j, k, :count[i, j, k]]
            if len(prev) and np.max(np.abs(prev @ dv)) > np.cos(np.deg2rad(1.0)):
                continue
            if count[i, j, k] == peaks.shape[3]:
                raise SpecError("more than two bundles overlap in a voxel")
            peaks[i, j, k, count[i, j, k]] = dv
            count[i, j, k] += 1
    mask = Mask(count > 0, spec.voxel_size)
    field_ = PeakField(peaks, spec.voxel_size)
    if spec.sigma_nz > 0:
        field_ = perturb_directions(field_, spec.sigma_nz, spec.noise_seed)
    regions = [seed_region(mask, s, spec.seed_radius) for s in spec.seeds]
    return mask, field_, regions


def seed_region(mask, center, radius=1):
    """Cube of side ``2 radius + 1`` around ``center`` intersected with the mask."""
    c = np.asarray(center, dtype=int)
    dims = np.asarray(mask.dims)
    if np.any(c < 0) or np.any(c >= dims):
        raise SpecError(f"seed {tuple(c)} lies outside the volume")
    if not mask.values[tuple(c)]:
        raise SpecError(f"seed {tuple(c)} does not lie on a bundle")
    region = np.zeros(mask.dims, dtype=bool)
    lo = np.maximum(c - radius, 0)
    hi = np.minimum(c + radius + 1, dims)
    region[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
    return region & mask.values.astype(bool)


def pseudo_fod(peaks, alpha, dirs):
    """Per-voxel spherical function ``sum_i exp(alpha ((d_i . n)^2 - 1))`` on ``dirs``.

    Returns shape (nx, ny, nz, N); voxels without peaks are zero.
    """
    if alpha <= 0:
        raise ParameterError("alpha must be positive")
    v = peaks.vectors
    used = np.linalg.norm(v, axis=-1) > 0
    dots = v @ np.asarray(dirs.n if hasattr(dirs, "n") else dirs, dtype=float).T
    vals = np.exp(alpha * (dots ** 2 - 1.0)) * used[..., None]
    return vals.sum(axis=3)


def perturb_directions(peaks, sigma_nz, seed=None):
    """Add i.i.d. Gaussian noise to each peak component, then renormalize."""
    if sigma_nz < 0:
        raise ParameterError("noise level must be non-negative")
    v = peaks.vectors
    if sigma_nz == 0:
        return PeakField(v.copy(), peaks.voxel_size, peaks.max_peaks)
    used = np.linalg.norm(v, axis=-1) > 0
    rng = np.random.default_rng(seed)
    noisy = v + sigma_nz * rng.standard_normal(v.shape)
    noisy /= np.linalg.norm(noisy, axis=-1, keepdims=True)
    noisy[~used] = 0.0
    return PeakField(noisy, peaks.voxel_size, peaks.max_peaks)


def expected_mean_deviation(sigma_nz):
    """Small-angle mean angular deviation of the component-noise model (Rayleigh mean)."""
    return sigma_nz * np.sqrt(np.pi / 2.0)


CONNECTED_PAIRS = ((0, 1), (2, 3), (4, 5))


def unconnected_pairs(n=6):
    conn = set(CONNECTED_PAIRS)
    return [(i, j) for i in range(n) for j in range(i + 1, n) if (i, j) not in conn]
