import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpconn.errors import ParameterError, UndefinedMetricError
from fpconn.metrics import PairedMeasurements, agreement_curve, icc, pair_iccs, write_agreement_csv, write_icc_csv


def test_icc_identical_and_mirrored():
    c = np.array([0.1, 0.5, 0.9, 2.0])
    assert icc(PairedMeasurements(c, c)) == pytest.approx(1.0)
    m = c.mean()
    assert icc(PairedMeasurements(c, 2 * m - c)) == pytest.approx(-1.0)


def test_icc_hand_value():
    # cbar = 2.5, d1 = (-1.5, 0.5), d2 = (-0.5, 1.5): cov = 0.75, pooled var = 1.25
    assert icc(PairedMeasurements([1, 3], [2, 4])) == pytest.approx(0.6)
    # a constant offset between runs lowers the ICC but not a shared shift
    assert icc(PairedMeasurements([11, 13], [12, 14])) == pytest.approx(0.6)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 100), st.floats(-50, 50), st.integers(0, 10_000))
def test_icc_affine_invariance(a, b, seed):
    rng = np.random.default_rng(seed)
    c1 = rng.standard_normal(8)
    c2 = c1 + 0.5 * rng.standard_normal(8)
    base = icc(PairedMeasurements(c1, c2))
    assert abs(icc(PairedMeasurements(a * c1 + b, a * c2 + b)) - base) <= 1e-12
    assert -1 - 1e-12 <= base <= 1 + 1e-12


def test_icc_undefined():
    with pytest.raises(UndefinedMetricError):
        icc(PairedMeasurements([2.0, 2.0], [2.0, 2.0]))


def test_paired_validation():
    with pytest.raises(ParameterError):
        PairedMeasurements([1, 2], [1, 2, 3])
    with pytest.raises(ParameterError):
        PairedMeasurements([1], [1])
    with pytest.raises(ParameterError):
        PairedMeasurements([1, np.nan], [1, 2])


def test_agreement_for_independent_uniforms():
    rng = np.random.default_rng(11)
    m = PairedMeasurements(rng.uniform(size=10_000), rng.uniform(size=10_000))
    rows = agreement_curve(m)
    t = np.array([r[0] for r in rows])
    k = int(np.argmin(np.abs(t - np.median(np.concatenate([m.c1, m.c2])))))
    assert rows[k][3] == pytest.approx(0.25, abs=0.03)
    for _, s, a, r in rows:
        assert a <= s / 2 and 0 <= r <= 0.5


def test_agreement_hand_example():
    m = PairedMeasurements([1.0, 2.0, 3.0], [1.0, 3.0, 2.0])
    rows = agreement_curve(m)
    assert [r[0] for r in rows] == [1.5, 2.5]
    assert rows[0][1:] == (2, 1, 0.5)
    assert rows[1][1:] == (4, 1, 0.25)


def test_thresholds_below_minimum_are_skipped():
    rows = agreement_curve(PairedMeasurements([5.0, 6.0], [7.0, 8.0]))
    assert all(r[1] > 0 for r in rows)
    assert rows[0][0] == 5.5


def test_pair_iccs_and_csv(tmp_path):
    c1 = np.array([[1.0, 2.0], [2.0, 2.0], [3.0, 2.0]])
    out = pair_iccs(c1, c1)
    assert out[0] == pytest.approx(1.0) and np.isnan(out[1])
    with pytest.raises(ParameterError):
        pair_iccs(c1, c1[:, :1])
    write_icc_csv(tmp_path / "icc.csv", ["1-2", "3-4"], out)
    rows = list(csv.reader(open(tmp_path / "icc.csv")))
    assert rows[0] == ["pair", "icc"] and rows[1][0] == "1-2" and float(rows[1][1]) == pytest.approx(1.0)
    rows_a = agreement_curve(PairedMeasurements([1.0, 2.0, 3.0], [1.0, 3.0, 2.0]))
    write_agreement_csv(tmp_path / "agr.csv", rows_a)
    back = list(csv.reader(open(tmp_path / "agr.csv")))
    assert back[0] == ["t", "s", "a", "a_over_s"] and len(back) == 3
    assert float(back[2][3]) == 0.25
