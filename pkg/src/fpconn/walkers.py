"""Monte-Carlo path engines.

* :func:`behrens_walk` - the classical probabilistic walker that follows the
  nearest fiber peak with Gaussian jitter and counts voxel visits.
* :func:`langevin_paths` - Euler-Maruyama simulation of the joint
  position/orientation Langevin process with optional Feynman-Kac weights
  ``exp(int (div v) / 2 dt)``. Its weighted occupation density is the steady
  state of the symmetrized equation the PDE solver discretizes.

Randomness: batch ``k`` draws from ``SeedSequence(seed, spawn_key=(k,))``,
so results do not depend on how batches are scheduled.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .domain import MASK_THRESHOLD, rotation_to, trilinear_sample
from .errors import InsufficientSamplesError, ParameterError

log = logging.getLogger(__name__)

STOP_ANGLE = "angle"
STOP_MASK = "mask"
STOP_REVISIT = "revisit"
STOP_LENGTH = "max_steps"
STOP_CODES = {STOP_ANGLE: 1, STOP_MASK: 2, STOP_REVISIT: 3, STOP_LENGTH: 4}


def batch_rng(seed, batch):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(batch,)))


def random_unit_vectors(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_cone(rng, n, axis, half_angle):
    """Uniform samples on the spherical cap of ``half_angle`` around ``axis``."""
    c = rng.uniform(np.cos(half_angle), 1.0, n)
    phi = rng.uniform(0.0, 2 * np.pi, n)
    s = np.sqrt(1.0 - c * c)
    local = np.column_stack([c, s * np.cos(phi), s * np.sin(phi)])
    return local @ rotation_to(np.asarray(axis, dtype=float) / np.linalg.norm(axis)).T


# --------------------------------------------------------------------------
# reference walker


@dataclass
class WalkerConfig:
    step: float = 1.0
    sigma: float = 0.2
    max_angle: float = 80.0
    allow_revisits: bool = True
    length_bias_correction: bool = True
    n_walkers: int = 5000
    seed: int = 0
    max_steps: int = 1000
    batch_size: int = 8192

    def __post_init__(self):
        if self.step <= 0:
            raise ParameterError("step width must be positive")
        if self.sigma < 0:
            raise ParameterError("sigma must be non-negative")
        if self.n_walkers < 1:
            raise ParameterError("at least one walker per voxel is required")
        if not 0 < self.max_angle <= 180:
            raise ParameterError("max angle must lie in (0, 180] degrees")


@dataclass
class PathEnsemble:
    """Visitation map ``pm`` plus per-walker lengths and stop reasons.

    ``counts[v]`` is the number of walkers that visited voxel ``v``;
    ``length_sum[v]`` the summed lengths of those walkers. ``pm`` is
    ``length_sum`` with length-bias correction and ``counts`` otherwise.
    ``paths`` holds position sequences when recording was requested.
    """

    counts: np.ndarray
    length_sum: np.ndarray
    lengths: np.ndarray
    reasons: np.ndarray
    length_bias_correction: bool = True
    paths: list = field(default_factory=list)

    @property
    def pm(self):
        return self.length_sum if self.length_bias_correction else self.counts.astype(float)

    @property
    def n_walkers(self):
        return len(self.lengths)


def _nearest_peak(peaks_here, n):
    # peaks_here: (W, K, 3) with zero rows for unused slots.
    dots = np.einsum("wkc,wc->wk", peaks_here, n)
    used = np.linalg.norm(peaks_here, axis=-1) > 0
    score = np.where(used, np.abs(dots), -1.0)
    k = np.argmax(score, axis=1)
    best = peaks_here[np.arange(len(n)), k]
    sign = np.sign(dots[np.arange(len(n)), k])
    sign[sign == 0] = 1.0
    return best * sign[:, None], np.where(used.any(axis=1), score[np.arange(len(n)), k], -1.0)


def behrens_walk(peaks, mask, cfg, seed_region, record_paths=0):
    """Run ``cfg.n_walkers`` walkers from the centre of every voxel of ``seed_region``.

    Each walker is counted at most once per voxel. Returns a
    :class:`PathEnsemble` on the native grid.
    """
    region = np.asarray(seed_region, dtype=bool)
    mvals = np.asarray(mask.values if hasattr(mask, "values") else mask, dtype=bool)
    vs = getattr(mask, "voxel_size", 1.0)
    if region.shape != mvals.shape:
        raise ParameterError("seed region must match the mask shape")
    starts = np.argwhere(region & mvals)
    if not len(starts):
        raise ParameterError("seed region is empty or outside the tracking mask")
    dims = np.array(mvals.shape)
    nvox = int(np.prod(dims))
    pvec = peaks.vectors
    cos_max = np.cos(np.deg2rad(cfg.max_angle))
    total = len(starts) * cfg.n_walkers
    counts = np.zeros(nvox, dtype=np.int64)
    length_sum = np.zeros(nvox)
    lengths = np.zeros(total)
    reasons = np.zeros(total, dtype=np.int8)
    recorded = []
    for b, lo in enumerate(range(0, total, cfg.batch_size)):
        hi = min(lo + cfg.batch_size, total)
        W = hi - lo
        rng = batch_rng(cfg.seed, b)
        ids = np.arange(lo, hi)
        r = starts[ids // cfg.n_walkers].astype(float) * vs
        n = random_unit_vectors(rng, W)
        alive = np.ones(W, dtype=bool)
        steps = np.zeros(W, dtype=np.int64)
        reason = np.zeros(W, dtype=np.int8)
        vox = np.round(r / vs).astype(np.int64)
        keys = [np.ravel_multi_index(vox.T, dims) + nvox * np.arange(W)]
        trace = [r[:record_paths].copy()] if record_paths and lo == 0 else None
        for _ in range(cfg.max_steps):
            idx = np.flatnonzero(alive)
            if not len(idx):
                break
            v = vox[idx]
            d, score = _nearest_peak(pvec[v[:, 0], v[:, 1], v[:, 2]], n[idx])
            stop = score < cos_max
            reason[idx[stop]] = STOP_CODES[STOP_ANGLE]
            alive[idx[stop]] = False
            idx, d = idx[~stop], d[~stop]
            dn = d + cfg.sigma * rng.standard_normal(d.shape)
            dn /= np.linalg.norm(dn, axis=1, keepdims=True)
            r[idx] += cfg.step * dn
            n[idx] = dn
            steps[idx] += 1
            newvox = np.round(r[idx] / vs).astype(np.int64)
            inside = np.all((newvox >= 0) & (newvox < dims), axis=1)
            inside[inside] = mvals[tuple(newvox[inside].T)]
            out = idx[~inside]
            reason[out] = STOP_CODES[STOP_MASK]
            alive[out] = False
            idx, newvox = idx[inside], newvox[inside]
            if not cfg.allow_revisits:
                moved = np.any(newvox != vox[idx], axis=1)
                k_new = np.ravel_multi_index(newvox.T, dims) + nvox * idx
                seen = np.isin(k_new, np.concatenate(keys)) & moved
                reason[idx[seen]] = STOP_CODES[STOP_REVISIT]
                alive[idx[seen]] = False
                idx, newvox = idx[~seen], newvox[~seen]
            vox[idx] = newvox
            keys.append(np.ravel_multi_index(newvox.T, dims) + nvox * idx)
            if trace is not None:
                trace.append(np.where(alive[:record_paths, None], r[:record_paths], np.nan))
        else:
            reason[alive] = STOP_CODES[STOP_LENGTH]
        L = steps * cfg.step
        uniq = np.unique(np.concatenate(keys))
        walker, voxel = np.divmod(uniq, nvox)
        counts += np.bincount(voxel, minlength=nvox)
        length_sum += np.bincount(voxel, weights=L[walker], minlength=nvox)
        lengths[lo:hi] = L
        reasons[lo:hi] = reason
        if trace is not None:
            recorded = [np.array([t[i] for t in trace if not np.isnan(t[i]).any()]) for i in range(min(record_paths, W))]
    return PathEnsemble(counts.reshape(dims), length_sum.reshape(dims), lengths, reasons,
                        cfg.length_bias_correction, recorded)


def walker_connectivity(pm_a, region_b, pm_b, region_a):
    """Average of the PM sums from A over B and from B over A."""
    ab = float(np.sum(np.asarray(pm_a)[np.asarray(region_b, dtype=bool)]))
    ba = float(np.sum(np.asarray(pm_b)[np.asarray(region_a, dtype=bool)]))
    return 0.5 * (ab + ba)


def walker_matrix(peaks, mask, cfg, regions):
    """Symmetrized walker connectivity between all regions plus the raw directed sums.

    Returns ``(c, directed)`` where ``directed[i, j]`` is the PM of walkers
    seeded in ``i`` summed over region ``j``.
    """
    pms = []
    for k, reg in enumerate(regions):
        sub = WalkerConfig(**{**cfg.__dict__, "seed": cfg.seed * 1000 + k})
        pms.append(behrens_walk(peaks, mask, sub, reg).pm)
    R = len(regions)
    directed = np.array([[np.sum(pms[i][np.asarray(regions[j], dtype=bool)]) for j in range(R)] for i in range(R)])
    return 0.5 * (directed + directed.T), directed


def normalize_matrix(c):
    d = np.sqrt(np.diag(c))
    return c / np.outer(d, d)


def choose_walker_count(measure, candidates, n_subjects, threshold=0.95, seed=0):
    """Smallest walker count whose median intra-run ICC reaches ``threshold``.

    ``measure(n_walkers, subject, run_seed)`` returns the vector of
    connectivity values (one per region pair) of one run. Each subject is run
    twice with different seeds; the ICC per pair is taken across subjects.
    Returns ``(n, median_icc_by_candidate)``; ``n`` is None if no candidate
    qualifies.
    """
    from .metrics import PairedMeasurements, icc

    medians = {}
    for n in candidates:
        runs = np.array([[measure(n, s, seed + 2 * s + k) for k in (0, 1)] for s in range(n_subjects)])
        per_pair = [icc(PairedMeasurements(runs[:, 0, p], runs[:, 1, p])) for p in range(runs.shape[2])]
        medians[n] = float(np.median(per_pair))
        if medians[n] >= threshold:
            return n, medians
    return None, medians


# --------------------------------------------------------------------------
# Langevin engine


class GridSpeed:
    """Speed ``f(r, n) = interp sum_k (n . d_k)^(2 m)`` from a native peak field.

    The field is interpolated trilinearly from the per-voxel values for the
    query direction; the joint domain is ``mask >= 0.5`` and ``f > epsilon``.
    The divergence ``n . grad_r f`` of the drift ``v = f n`` is taken by
    central differences of step ``delta`` along ``n``.
    """

    def __init__(self, peaks, mask, exponent=25, epsilon=0.02, delta=0.05):
        self.vectors = peaks.vectors
        self.mask = mask
        self.voxel_size = mask.voxel_size
        self.exponent = int(exponent)
        self.epsilon = float(epsilon)
        self.delta = delta
        self.dims = np.array(mask.dims)
        self._mask = mask.values.astype(float)

    def _corner_values(self, base, n):
        # f at the 8 voxel corners for each query: (Q, 8)
        out = np.zeros((len(n), 8))
        k = 0
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    c = base + (dx, dy, dz)
                    ok = np.all((c >= 0) & (c < self.dims), axis=1)
                    cc = np.where(ok[:, None], c, 0)
                    pk = self.vectors[cc[:, 0], cc[:, 1], cc[:, 2]]
                    dots = np.einsum("qkc,qc->qk", pk, n)
                    out[:, k] = np.where(ok, np.sum(dots ** (2 * self.exponent), axis=1), 0.0)
                    k += 1
        return out

    def value(self, r, n):
        u = np.asarray(r, dtype=float) / self.voxel_size
        base = np.floor(u).astype(np.int64)
        t = u - base
        vals = self._corner_values(base, n)
        w = np.empty_like(vals)
        k = 0
        for dx in (0, 1):
            wx = t[:, 0] if dx else 1 - t[:, 0]
            for dy in (0, 1):
                wy = t[:, 1] if dy else 1 - t[:, 1]
                for dz in (0, 1):
                    w[:, k] = wx * wy * (t[:, 2] if dz else 1 - t[:, 2])
                    k += 1
        return np.sum(w * vals, axis=1)

    def divergence(self, r, n):
        h = self.delta * self.voxel_size
        return (self.value(r + h * n, n) - self.value(r - h * n, n)) / (2 * h)

    def inside(self, r, n, f=None):
        f = self.value(r, n) if f is None else f
        m = trilinear_sample(self._mask, r, self.voxel_size)
        return (m >= MASK_THRESHOLD) & (f > self.epsilon)


class ConstantSpeed:
    """Uniform speed ``f0`` inside an axis-aligned box ``[lo, hi]`` (mm)."""

    def __init__(self, f0, lo, hi):
        self.f0 = float(f0)
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)

    def value(self, r, n):
        return np.full(len(r), self.f0)

    def divergence(self, r, n):
        return np.zeros(len(r))

    def inside(self, r, n, f=None):
        return np.all((r >= self.lo) & (r <= self.hi), axis=1)


class ConvergingFan(ConstantSpeed):
    """Speed ``f0 exp(-gamma (x - x0))`` in a box: the drift converges along +x.

    For paths moving along +x the divergence ``n . grad f = -gamma n_x f`` is
    negative, so particle density piles up and the unweighted walk is
    strongly irreversible.
    """

    def __init__(self, f0, gamma, lo, hi, x0=0.0):
        super().__init__(f0, lo, hi)
        self.gamma = float(gamma)
        self.x0 = float(x0)

    def value(self, r, n):
        return self.f0 * np.exp(-self.gamma * (np.asarray(r)[:, 0] - self.x0))

    def divergence(self, r, n):
        return -self.gamma * np.asarray(n)[:, 0] * self.value(r, n)


@dataclass
class LangevinResult:
    """Outcome of a Langevin run.

    ``occupation`` is the (weighted) time density splatted trilinearly onto
    the native voxel grid and divided by ``n_paths``. ``weights`` and
    ``log_weights`` are the final FK weights, ``alive`` marks paths that
    survived to ``t_max``, ``lifetimes`` the absorption times.
    """

    occupation: np.ndarray
    log_weights: np.ndarray
    lifetimes: np.ndarray
    alive: np.ndarray
    n_paths: int
    endpoints: np.ndarray = None

    @property
    def weights(self):
        return np.exp(self.log_weights)


def tangent_step(rng, n, scale):
    """Spherical Brownian increment: tangent Gaussian step then renormalize."""
    xi = scale * rng.standard_normal(n.shape)
    xi -= np.sum(xi * n, axis=1, keepdims=True) * n
    m = n + xi
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _splat(hist, r, w, voxel_size, dims):
    u = r / voxel_size
    base = np.floor(u).astype(np.int64)
    t = u - base
    for dx in (0, 1):
        wx = t[:, 0] if dx else 1 - t[:, 0]
        for dy in (0, 1):
            wy = t[:, 1] if dy else 1 - t[:, 1]
            for dz in (0, 1):
                wz = t[:, 2] if dz else 1 - t[:, 2]
                c = base + (dx, dy, dz)
                ok = np.all((c >= 0) & (c < dims), axis=1)
                key = np.ravel_multi_index(c[ok].T, dims)
                hist += np.bincount(key, weights=(w * wx * wy * wz)[ok], minlength=hist.size)


def sample_region(rng, region, n, voxel_size=1.0):
    """Positions distributed like the trilinear interpolant of a region indicator.

    A voxel is drawn uniformly, then offset by the sum of two uniform
    variates per axis (a tent kernel of half-width one voxel).
    """
    vox = np.argwhere(np.asarray(region, dtype=bool))
    if not len(vox):
        raise ParameterError("empty seed region")
    pick = vox[rng.integers(0, len(vox), n)].astype(float)
    off = rng.uniform(-0.5, 0.5, (n, 3)) + rng.uniform(-0.5, 0.5, (n, 3))
    return (pick + off) * voxel_size


class DirectionLattice:
    """Orientation restricted to a :class:`DirectionSet`, hopping to each neighbour at ``rate``.

    This is the orientation process generated by the discrete angular
    operator ``(sigma_n^2 / A) G`` (G the direction-graph Laplacian), so
    paths explore exactly the orientations the solver represents.
    """

    def __init__(self, dirs, rate):
        self.dirs = dirs
        self.rate = float(rate)
        self.degree = dirs.degree()
        width = self.degree.max()
        self.table = np.array([np.pad(nb, (0, width - len(nb)), constant_values=-1) for nb in dirs.neighbors])

    @classmethod
    def calibrated(cls, dirs, sigma_n, A):
        return cls(dirs, sigma_n ** 2 / A)

    def nearest(self, n):
        return np.argmax(np.asarray(n) @ self.dirs.n.T, axis=1)

    def step(self, rng, idx, dt):
        p = 1.0 - np.exp(-self.rate * self.degree[idx] * dt)
        jump = rng.uniform(size=len(idx)) < p
        pick = (rng.uniform(size=len(idx)) * self.degree[idx]).astype(np.int64)
        out = idx.copy()
        out[jump] = self.table[idx[jump], pick[jump]]
        return out


def langevin_paths(speed, sigma_n, dt, t_max, n_paths, seed=0, start=None, dims=None, voxel_size=1.0,
                   sigma_r=0.0, weighted=True, batch_size=100_000, target=None, lattice=None):
    """Simulate ``ds = f n dt`` with spherical Brownian motion of ``n``.

    ``start(rng, k)`` returns ``(positions, directions)`` for ``k`` paths.
    Paths are absorbed once they leave ``speed.inside``. With ``weighted``
    every path carries ``exp(int div(v) / 2 dt)``.

    With a :class:`DirectionLattice` the orientation instead jumps between
    the lattice directions (start directions are snapped to the nearest
    one) and ``sigma_n`` only enters through the lattice rate.

    ``dims`` enables the native occupation histogram. ``target(r, n)``, if
    given, is a boolean indicator whose weighted occupation time is returned
    per path in ``endpoints`` (used for propagator estimates).
    """
    if dt <= 0 or t_max <= 0:
        raise ParameterError("dt and t_max must be positive")
    if sigma_n ** 2 * dt > np.deg2rad(5.0) ** 2 * 1.0001:
        raise ParameterError("dt too large: sigma_n^2 dt must not exceed (5 deg)^2")
    if lattice is not None and lattice.rate * lattice.degree.max() * dt > 0.1:
        raise ParameterError("dt too large for the lattice hopping rate")
    if n_paths < 1:
        raise ParameterError("n_paths must be positive")
    if start is None:
        raise ParameterError("a start sampler is required")
    dims = None if dims is None else np.array(dims)
    hist = np.zeros(int(np.prod(dims))) if dims is not None else None
    steps = int(np.ceil(t_max / dt))
    logw_all = np.zeros(n_paths)
    life = np.full(n_paths, np.inf)
    alive_all = np.zeros(n_paths, dtype=bool)
    tgt = np.zeros(n_paths) if target is not None else None
    checked = False
    for b, lo in enumerate(range(0, n_paths, batch_size)):
        hi = min(lo + batch_size, n_paths)
        rng = batch_rng(seed, b)
        r, n = start(rng, hi - lo)
        r = np.array(r, dtype=float)
        n = np.array(n, dtype=float)
        if lattice is not None:
            k_dir = lattice.nearest(n)
            n = lattice.dirs.n[k_dir].copy()
        logw = np.zeros(hi - lo)
        f = speed.value(r, n)
        alive = speed.inside(r, n, f)
        lifetime = np.where(alive, np.inf, 0.0)
        occ = np.zeros(hi - lo) if target is not None else None
        for s in range(steps):
            idx = np.flatnonzero(alive)
            if not len(idx):
                break
            ri, ni, fi = r[idx], n[idx], f[idx]
            if not checked:
                if np.max(fi) * dt > 0.5 * voxel_size:
                    raise ParameterError("dt too large: f dt must stay below half a voxel")
                checked = True
            w = np.exp(logw[idx]) if weighted else np.ones(len(idx))
            if hist is not None:
                _splat(hist, ri, w * dt, voxel_size, dims)
            if occ is not None:
                occ[idx] += w * dt * target(ri, ni)
            if weighted:
                logw[idx] += 0.5 * speed.divergence(ri, ni) * dt
            ri = ri + (fi * dt)[:, None] * ni
            if sigma_r > 0:
                ri = ri + sigma_r * np.sqrt(dt) * rng.standard_normal(ri.shape)
            if lattice is not None:
                k_dir[idx] = lattice.step(rng, k_dir[idx], dt)
                ni = lattice.dirs.n[k_dir[idx]]
            elif sigma_n > 0:
                ni = tangent_step(rng, ni, sigma_n * np.sqrt(dt))
            fi = speed.value(ri, ni)
            ok = speed.inside(ri, ni, fi)
            r[idx], n[idx], f[idx] = ri, ni, fi
            dead = idx[~ok]
            alive[dead] = False
            lifetime[dead] = (s + 1) * dt
        logw_all[lo:hi] = logw
        life[lo:hi] = lifetime
        alive_all[lo:hi] = alive
        if tgt is not None:
            tgt[lo:hi] = occ
    occupation = None if hist is None else hist.reshape(tuple(dims)) / n_paths
    return LangevinResult(occupation, logw_all, life, alive_all, n_paths, tgt)


@dataclass
class PropagatorEstimate:
    forward: float
    forward_se: float
    backward: float
    backward_se: float

    @property
    def z(self):
        """Difference in units of the combined standard error."""
        se = np.hypot(self.forward_se, self.backward_se)
        return abs(self.forward - self.backward) / se if se > 0 else 0.0


def _ball_cone(center, axis, radius, half_angle):
    c = np.asarray(center, dtype=float)
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    cosmax = np.cos(half_angle)

    def indicator(r, n):
        return (np.sum((r - c) ** 2, axis=1) <= radius ** 2) & (n @ a >= cosmax)

    def sampler(rng, k):
        v = rng.standard_normal((k, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        rad = radius * rng.uniform(0, 1, k) ** (1.0 / 3.0)
        return c + v * rad[:, None], random_cone(rng, k, a, half_angle)

    return indicator, sampler


def empirical_propagator_symmetry(speed, sigma_n, x0, x1, n_paths=200_000, dt=0.02, t_max=40.0,
                                  radius=1.0, half_angle=np.deg2rad(25.0), seed=0, weighted=True):
    """Compare ``p(x1 | x0)`` with the reflected reverse ``p(Z x0 | Z x1)``.

    ``x0`` and ``x1`` are ``(position, direction)`` pairs. Both propagators
    are integrated over small position-balls times direction-cones of equal
    volume and over time (steady state). The forward run starts uniformly in
    the set around ``x0`` and records the occupation of the set around
    ``x1``; the reverse run starts around ``(r1, -n1)`` and records the set
    around ``(r0, -n0)``. Returns a :class:`PropagatorEstimate` with the
    per-path standard errors. Raises
    :class:`~fpconn.errors.InsufficientSamplesError` if a target was never hit.
    """
    (r0, n0), (r1, n1) = x0, x1
    n0 = np.asarray(n0, dtype=float)
    n1 = np.asarray(n1, dtype=float)
    tgt_f, _ = _ball_cone(r1, n1, radius, half_angle)
    _, start_f = _ball_cone(r0, n0, radius, half_angle)
    tgt_b, _ = _ball_cone(r0, -n0, radius, half_angle)
    _, start_b = _ball_cone(r1, -n1, radius, half_angle)
    out = []
    for k, (start, tgt) in enumerate(((start_f, tgt_f), (start_b, tgt_b))):
        res = langevin_paths(speed, sigma_n, dt, t_max, n_paths, seed=seed * 2 + k, start=start,
                             weighted=weighted, target=tgt)
        e = res.endpoints
        if not np.any(e > 0):
            raise InsufficientSamplesError("no path reached the target set")
        out += [float(e.mean()), float(e.std(ddof=1) / np.sqrt(len(e)))]
    return PropagatorEstimate(*out)
