import numpy as np
import pytest

from fpconn.domain import Mask, PeakField
from fpconn.errors import ParameterError
from fpconn.phantom import build_phantom
from fpconn.sphere import generate_directions
from fpconn.walkers import (STOP_CODES, ConstantSpeed, ConvergingFan, DirectionLattice, WalkerConfig, behrens_walk,
                            choose_walker_count, empirical_propagator_symmetry, langevin_paths, walker_connectivity,
                            walker_matrix)


def tube(length=20, axis=(1.0, 0, 0)):
    m = np.zeros((length, 5, 5), dtype=bool)
    m[:, 1:4, 1:4] = True
    v = np.zeros((length, 5, 5, 1, 3))
    v[m] = axis
    return Mask(m), PeakField(v)


def region_at(mask, *idx):
    r = np.zeros(mask.dims, dtype=bool)
    r[idx] = True
    return r


def test_straight_tube_without_jitter_gives_flat_pm():
    mask, peaks = tube()
    cfg = WalkerConfig(sigma=0.0, n_walkers=200, seed=1)
    ens = behrens_walk(peaks, mask, cfg, region_at(mask, 0, 2, 2))
    line = ens.pm[1:, 2, 2]
    assert line.min() > 0
    assert np.allclose(line, line[0])
    # off the centreline nothing is visited
    assert ens.pm[:, 1, 1].sum() == 0


def test_sharp_turn_stops_walkers():
    mask, peaks = tube()
    v = peaks.vectors.copy()
    v[10:, 1:4, 1:4, 0] = (0.0, 1.0, 0.0)
    cfg = WalkerConfig(sigma=0.0, n_walkers=100, seed=2)
    ens = behrens_walk(PeakField(v), mask, cfg, region_at(mask, 0, 2, 2))
    assert ens.pm[11:].sum() == 0
    fwd = ens.lengths > 1
    assert np.all(ens.reasons[fwd] == STOP_CODES["angle"])
    # within the threshold the walk continues
    v[10:, 1:4, 1:4, 0] = (np.cos(0.5), np.sin(0.5), 0.0)
    ens = behrens_walk(PeakField(v), mask, cfg, region_at(mask, 0, 2, 2))
    assert ens.pm[12:].sum() > 0


def test_revisit_rule():
    m = np.ones((6, 6, 6), dtype=bool)
    v = np.zeros((6, 6, 6, 1, 3))
    v[..., 0, 0] = 1.0
    mask, peaks = Mask(m), PeakField(v)
    seed = region_at(mask, 3, 3, 3)
    base = dict(sigma=1.5, max_angle=180.0, n_walkers=300, seed=3, step=0.7)
    free = behrens_walk(peaks, mask, WalkerConfig(**base), seed)
    strict = behrens_walk(peaks, mask, WalkerConfig(**base, allow_revisits=False), seed)
    assert not np.any(free.reasons == STOP_CODES["revisit"])
    assert np.any(strict.reasons == STOP_CODES["revisit"])
    assert strict.lengths.mean() < free.lengths.mean()


def test_walker_reproducibility():
    mask, peaks = tube()
    reg = region_at(mask, 0, 2, 2)
    a = behrens_walk(peaks, mask, WalkerConfig(n_walkers=300, seed=7, batch_size=100), reg)
    b = behrens_walk(peaks, mask, WalkerConfig(n_walkers=300, seed=7, batch_size=100), reg)
    c = behrens_walk(peaks, mask, WalkerConfig(n_walkers=300, seed=8, batch_size=100), reg)
    assert np.array_equal(a.pm, b.pm)
    assert not np.array_equal(a.pm, c.pm)


def test_counts_without_length_correction():
    mask, peaks = tube()
    cfg = WalkerConfig(sigma=0.0, n_walkers=50, length_bias_correction=False)
    ens = behrens_walk(peaks, mask, cfg, region_at(mask, 0, 2, 2))
    # each walker counted once per voxel; the +x walkers all reach the far end
    assert ens.pm[0, 2, 2] == 50
    assert ens.pm.max() == 50


def test_path_recording():
    mask, peaks = tube()
    cfg = WalkerConfig(sigma=0.1, n_walkers=20, seed=4)
    ens = behrens_walk(peaks, mask, cfg, region_at(mask, 0, 2, 2), record_paths=5)
    assert len(ens.paths) == 5
    for p in ens.paths:
        if len(p) > 1:
            assert np.allclose(np.linalg.norm(np.diff(p, axis=0), axis=1), cfg.step)


def test_walker_connectivity_cases():
    m = np.zeros((20, 11, 5), dtype=bool)
    m[:, 1:4, 1:4] = True
    m[:, 7:10, 1:4] = True
    v = np.zeros(m.shape + (1, 3))
    v[m] = (1.0, 0, 0)
    mask, peaks = Mask(m), PeakField(v)
    a = region_at(mask, slice(0, 2), slice(1, 4), slice(1, 4))
    b = region_at(mask, slice(18, 20), slice(1, 4), slice(1, 4))
    far = region_at(mask, slice(9, 11), slice(7, 10), slice(1, 4))
    cfg = WalkerConfig(n_walkers=50, seed=5)
    c, directed = walker_matrix(peaks, mask, cfg, [a, b, far])
    assert c[0, 0] > 0 and c[0, 1] > 0
    assert c[0, 2] == 0 and c[1, 2] == 0
    assert np.allclose(c, c.T)
    pa = behrens_walk(peaks, mask, cfg, a).pm
    pb = behrens_walk(peaks, mask, cfg, b).pm
    assert walker_connectivity(pa, b, pb, a) == pytest.approx(0.5 * (pa[b].sum() + pb[a].sum()))


def test_directed_walker_sums_asymmetric_on_bend():
    mask, peaks, regions = build_phantom()
    _, directed = walker_matrix(peaks, mask, WalkerConfig(n_walkers=100, seed=6), regions[4:])
    assert directed[0, 1] > 0 and directed[1, 0] > 0
    assert directed[0, 1] != directed[1, 0]


def test_walker_config_validation():
    for bad in (dict(step=0), dict(sigma=-1), dict(n_walkers=0), dict(max_angle=0)):
        with pytest.raises(ParameterError):
            WalkerConfig(**bad)
    mask, peaks = tube()
    with pytest.raises(ParameterError):
        behrens_walk(peaks, mask, WalkerConfig(), np.zeros(mask.dims, dtype=bool))


# ----------------------------------------------------------------- Langevin

BOX = ConstantSpeed(1.0, (0, 0, 0), (10, 10, 10))


def fixed_start(r, n):
    def start(rng, k):
        return np.tile(r, (k, 1)), np.tile(n, (k, 1))
    return start


def test_zero_speed_zero_noise_is_stationary():
    speed = ConstantSpeed(0.0, (0, 0, 0), (10, 10, 10))
    res = langevin_paths(speed, 0.0, 0.1, 5.0, 50, start=fixed_start((5.0, 5, 5), (1.0, 0, 0)), dims=(11, 11, 11))
    assert np.all(res.alive) and np.allclose(res.weights, 1.0)
    assert res.occupation[5, 5, 5] == pytest.approx(5.0)
    assert res.occupation.sum() == pytest.approx(5.0)


def test_constant_speed_has_unit_weights_and_exit_time():
    res = langevin_paths(BOX, 0.0, 0.05, 30.0, 20, start=fixed_start((2.0, 5, 5), (1.0, 0, 0)))
    assert np.allclose(res.weights, 1.0)
    assert not res.alive.any()
    assert np.allclose(res.lifetimes, 8.05, atol=0.051)


def test_fan_weights_follow_divergence():
    fan = ConvergingFan(1.0, 0.1, (0, -5, -5), (20, 5, 5))
    res = langevin_paths(fan, 0.0, 0.01, 3.0, 4, start=fixed_start((1.0, 0, 0), (1.0, 0, 0)))
    # along a straight +x ray: log w = int -gamma f / 2 dt = (x(t) - x(0)) * -gamma / 2
    x_end = 1.0 + np.log(1 + 0.1 * 3.0 * np.exp(-0.1)) / 0.1
    assert res.log_weights == pytest.approx(-0.05 * (x_end - 1.0), rel=1e-2)


def test_step_size_limits():
    start = fixed_start((5.0, 5, 5), (1.0, 0, 0))
    with pytest.raises(ParameterError):
        langevin_paths(BOX, 1.0, 0.1, 1.0, 10, start=start)
    with pytest.raises(ParameterError):
        langevin_paths(BOX, 0.0, 0.6, 1.0, 10, start=start)
    with pytest.raises(ParameterError):
        langevin_paths(BOX, 0.0, -1, 1.0, 10, start=start)
    with pytest.raises(ParameterError):
        langevin_paths(BOX, 0.0, 0.1, 1.0, 10)


def test_monte_carlo_error_scales_like_inverse_sqrt_n():
    def spread(n, reps=400):
        est = []
        for k in range(reps):
            def start(rng, m):
                v = rng.standard_normal((m, 3))
                return np.tile((5.0, 5, 5), (m, 1)), v / np.linalg.norm(v, axis=1, keepdims=True)
            res = langevin_paths(BOX, 0.25, 0.1, 20.0, n, seed=1000 * n + k, start=start)
            est.append(np.mean(res.lifetimes))
        return np.std(est, ddof=1)

    ratio = spread(64) / spread(32)
    assert 0.6 <= ratio <= 0.85


def test_langevin_reproducible():
    start = fixed_start((5.0, 5, 5), (1.0, 0, 0))
    a = langevin_paths(BOX, 0.2, 0.05, 10.0, 40, seed=3, start=start, batch_size=40)
    b = langevin_paths(BOX, 0.2, 0.05, 10.0, 40, seed=3, start=start, batch_size=40)
    assert np.array_equal(a.lifetimes, b.lifetimes)


def test_direction_lattice():
    dirs = generate_directions(16)
    lat = DirectionLattice.calibrated(dirs, 0.5, 2.0)
    assert lat.rate == pytest.approx(0.125)
    assert np.array_equal(lat.nearest(dirs.n), np.arange(16))
    rng = np.random.default_rng(0)
    idx = np.zeros(100_000, dtype=np.int64)
    out = lat.step(rng, idx, 0.2)
    moved = out != 0
    p = 1 - np.exp(-lat.rate * dirs.degree()[0] * 0.2)
    assert moved.mean() == pytest.approx(p, abs=0.005)
    assert set(out[moved]) == set(dirs.neighbors[0])


def test_lattice_rate_limit():
    dirs = generate_directions(16)
    lat = DirectionLattice(dirs, 10.0)
    with pytest.raises(ParameterError):
        langevin_paths(BOX, 0.0, 0.05, 1.0, 5, start=fixed_start((5.0, 5, 5), (1.0, 0, 0)), lattice=lat)


def test_zero_drift_gradient_propagator_is_symmetric():
    flat = ConvergingFan(1.0, 0.0, (0, -4, -4), (16, 4, 4))
    est = empirical_propagator_symmetry(flat, 0.3, ((3, 0, 0), (1, 0, 0)), ((9, 0, 0), (1, 0, 0)),
                                        n_paths=20_000, dt=0.05, t_max=30.0, seed=1, weighted=False)
    assert est.forward > 0 and est.backward > 0
    assert est.z < 3


def test_choose_walker_count():
    truth = np.linspace(1.0, 2.0, 12)

    def measure(n, subject, run_seed):
        rng = np.random.default_rng(run_seed)
        return truth[subject] + rng.standard_normal(3) / np.sqrt(n)

    n, medians = choose_walker_count(measure, [1, 10, 1000, 100_000], 12)
    assert n == 1000
    assert medians[1] < 0.95 <= medians[1000]
    assert 100_000 not in medians
    none, _ = choose_walker_count(measure, [1], 12)
    assert none is None
