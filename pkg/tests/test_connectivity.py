import numpy as np
import pytest
import scipy.sparse as sp

from fpconn.connectivity import (ConnectivityMatrix, amplitude, connectivity_matrix, linear_reweighted, log_display,
                                 normalized_amplitude, point_region, read_matrix_csv, spatial_amplitude_map,
                                 trail_image, trail_integral)
from fpconn.domain import Mask, PeakField, StateField, build_steered_grids, speed_from_peaks
from fpconn.errors import DegenerateRegionError, ParameterError
from fpconn.operator import SparseOperator, assemble_H, calibrate_A
from fpconn.phantom import CONNECTED_PAIRS, unconnected_pairs
from fpconn.sphere import generate_directions

# Frozen from the first run on the default phantom (N=128, default solver settings).
C12_PHANTOM = 0.10277672512201515


@pytest.fixture(scope="module")
def absorber():
    """Six unknowns at one voxel with pure absorption ``d``: M = d I."""
    fam = build_steered_grids(Mask(np.ones((1, 1, 1))), generate_directions(6))
    d = 4.0
    return SparseOperator(sp.identity(fam.U, format="csr") * d, fam), d


def test_absorber_amplitudes(absorber):
    M, d = absorber
    a = StateField(np.ones(M.U), M.domain)
    assert amplitude(M, a, a) == pytest.approx(M.U / d)
    assert linear_reweighted(M, a, a) == pytest.approx(M.U / d ** 2)
    tau = trail_image(M, a, a)
    assert np.allclose(tau.values, 1 / d ** 2)
    assert normalized_amplitude(M, a, a) == pytest.approx(1.0)


def test_degenerate_region(absorber):
    M, _ = absorber
    delta = np.zeros(M.U)
    delta[0] = 1.0
    with pytest.raises(DegenerateRegionError):
        normalized_amplitude(M, StateField(delta, M.domain), StateField(np.ones(M.U), M.domain))


@pytest.fixture(scope="module")
def phantom_cm(phantom, phantom_op):
    return connectivity_matrix(phantom_op, phantom[2])


def test_phantom_pairs(phantom_cm):
    c = phantom_cm.c
    assert c[0, 1] > 10 * c[0, 3]
    for i, j in CONNECTED_PAIRS:
        for k, l in unconnected_pairs():
            assert phantom_cm.cn[i, j] > phantom_cm.cn[k, l]
    if C12_PHANTOM is not None:
        assert c[0, 1] == pytest.approx(C12_PHANTOM, rel=1e-4)


def test_matrix_invariants(phantom_cm):
    assert np.allclose(np.diag(phantom_cm.cn), 1.0, atol=1e-9)
    assert phantom_cm.asymmetry() <= 10 * 1e-6
    sym = phantom_cm.symmetrized()
    assert np.array_equal(sym.c, sym.c.T)
    assert np.all(sym.cn >= -1e-6) and np.all(sym.cn <= 1 + 1e-6)


def test_pair_amplitude_symmetry(phantom, phantom_op):
    _, _, regions = phantom
    tol = 1e-6
    cab = amplitude(phantom_op, regions[0], regions[1], tol=tol)
    cba = amplitude(phantom_op, regions[1], regions[0], tol=tol)
    caa = amplitude(phantom_op, regions[0], regions[0], tol=tol)
    assert abs(cab - cba) <= 10 * tol * max(abs(cab), abs(cba), caa)


def test_normalized_self_and_disconnected(phantom, phantom_op):
    _, _, regions = phantom
    assert normalized_amplitude(phantom_op, regions[2], regions[2]) == pytest.approx(1.0, abs=1e-9)
    assert abs(normalized_amplitude(phantom_op, regions[0], regions[4])) <= 1e-9


def test_trail_reversal_and_integral(phantom, phantom_op):
    _, _, regions = phantom
    kw = dict(tol=1e-10, restart=60, maxiter=20)
    a, b = regions[4], regions[5]
    t_ab = trail_image(phantom_op, a, b, **kw)
    t_ba = trail_image(phantom_op, b, a, **kw)
    assert np.abs(t_ab.reflect().values - t_ba.values).max() <= 10 * 1e-10 * np.abs(t_ab.values).max()
    assert t_ab.values.min() >= -1e-8 * t_ab.values.max()
    clin = linear_reweighted(phantom_op, a, b, **kw)
    assert trail_integral(t_ab) == pytest.approx(clin, rel=1e-6)
    measure = phantom_op.domain.cell_measure
    assert trail_integral(t_ab, measure) == pytest.approx(clin * measure, rel=1e-6)


@pytest.fixture(scope="module")
def straight_tube():
    dims = (24, 7, 7)
    mask = Mask(np.ones(dims))
    peaks = PeakField(np.broadcast_to([1.0, 0, 0], dims + (1, 3)).copy())
    dirs = generate_directions(32)
    s = speed_from_peaks(peaks, build_steered_grids(mask, dirs))
    return mask, assemble_H(s, A=calibrate_A(dirs, np.pi / 12))


def test_linear_reweighting_grows_with_separation(straight_tube):
    mask, M = straight_tube
    from fpconn.phantom import seed_region

    kw = dict(tol=1e-10, restart=60, maxiter=20)
    src = seed_region(mask, (3, 3, 3), 1)
    ratios = []
    for x in (7, 10, 13):
        dst = seed_region(mask, (x, 3, 3), 1)
        ratios.append(linear_reweighted(M, src, dst, **kw) / amplitude(M, src, dst, **kw))
    assert ratios[0] < ratios[1] < ratios[2]


def test_spatial_map_peaks_at_seed(straight_tube):
    mask, M = straight_tube
    m = spatial_amplitude_map(M, (8, 3, 3))
    assert np.unravel_index(np.argmax(m), m.shape) == (8, 3, 3)
    with pytest.raises(ParameterError):
        spatial_amplitude_map(M, (30, 3, 3))


def test_kappa_map_dominates(phantom, phantom_speed, A128):
    _, _, regions = phantom
    kw = dict(tol=1e-10, restart=60, maxiter=20)
    m0 = spatial_amplitude_map(assemble_H(phantom_speed, A=A128), regions[0], **kw)
    mk = spatial_amplitude_map(assemble_H(phantom_speed, A=A128, kappa=0.01), regions[0], **kw)
    assert np.all(mk >= m0 - 1e-10)


def test_variants(phantom, phantom_op, phantom_speed, A128):
    _, _, regions = phantom
    lin = connectivity_matrix(phantom_op, regions[:2], variant="linear")
    kap = connectivity_matrix(assemble_H(phantom_speed, A=A128, kappa=0.01), regions[:2], variant="kappa")
    assert lin.variant == "linear" and kap.variant == "kappa"
    assert lin.c[0, 1] == pytest.approx(linear_reweighted(phantom_op, regions[0], regions[1]), rel=1e-4)
    with pytest.raises(ParameterError):
        connectivity_matrix(phantom_op, regions, variant="cubic")
    with pytest.raises(ParameterError):
        connectivity_matrix(phantom_op, regions, labels=["x"])


def test_csv_round_trip(phantom_cm, tmp_path):
    path = tmp_path / "cn.csv"
    phantom_cm.to_csv(path)
    labels, values = read_matrix_csv(path)
    assert labels == phantom_cm.labels
    assert np.array_equal(values, phantom_cm.cn)


def test_log_display():
    cn = np.array([[1.0, 0.2, 0.01], [0.2, 1.0, 0.05], [0.01, 0.05, 1.0]])
    t = np.quantile(cn[~np.eye(3, dtype=bool)], 0.2)
    assert np.allclose(log_display(cn), np.log(t + cn))
    # a zero quantile falls back to the positive entries so the transform stays finite
    cn[0, 2] = cn[2, 0] = 0.0
    out = log_display(cn)
    assert np.all(np.isfinite(out))
    assert out[0, 1] > out[1, 2] > out[0, 2]


def test_connectivity_matrix_dataclass():
    c = np.array([[2.0, 1.0], [1.2, 3.0]])
    cm = ConnectivityMatrix(["a", "b"], c, c / np.sqrt(np.outer([2, 3], [2, 3])))
    assert cm.asymmetry() == pytest.approx(0.2 / 3)
    assert cm.symmetrized().c[0, 1] == pytest.approx(1.1)
