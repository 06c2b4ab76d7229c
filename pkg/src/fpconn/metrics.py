"""Test-retest statistics: intraclass correlation and threshold agreement."""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, UndefinedMetricError


@dataclass(frozen=True)
class PairedMeasurements:
    """Two measurements ``c1``, ``c2`` per subject (or trial)."""

    c1: np.ndarray
    c2: np.ndarray

    def __post_init__(self):
        c1 = np.asarray(self.c1, dtype=float).ravel()
        c2 = np.asarray(self.c2, dtype=float).ravel()
        if c1.shape != c2.shape:
            raise ParameterError("c1 and c2 must have equal length")
        if len(c1) < 2:
            raise ParameterError("at least two paired measurements are required")
        if not (np.all(np.isfinite(c1)) and np.all(np.isfinite(c2))):
            raise ParameterError("measurements must be finite")
        object.__setattr__(self, "c1", c1)
        object.__setattr__(self, "c2", c2)

    def __len__(self):
        return len(self.c1)


def icc(m):
    """``<(c1 - cbar)(c2 - cbar)> / <(c - cbar)^2>``.

    ``cbar`` is the grand mean of both measurements and the denominator pools
    the squared deviations of ``c1`` and ``c2`` about it.
    """
    cbar = 0.5 * (m.c1.mean() + m.c2.mean())
    d1, d2 = m.c1 - cbar, m.c2 - cbar
    var = 0.5 * (np.mean(d1 * d1) + np.mean(d2 * d2))
    if not var > 0:
        raise UndefinedMetricError("ICC undefined for zero pooled variance")
    return float(np.mean(d1 * d2) / var)


def agreement_curve(m):
    """Threshold sweep of the agreement ``a / s``.

    For every midpoint ``t`` between consecutive sorted unique values,
    ``a = #(c1 < t and c2 < t)`` and ``s = #(c1 < t) + #(c2 < t)``. Rows are
    ``(t, s, a, a / s)``; thresholds with ``s = 0`` are skipped. Note that
    ``a / s <= 0.5`` by construction.
    """
    u = np.unique(np.concatenate([m.c1, m.c2]))
    rows = []
    for t in 0.5 * (u[1:] + u[:-1]):
        b1, b2 = m.c1 < t, m.c2 < t
        s = int(b1.sum() + b2.sum())
        if s == 0:
            continue
        a = int(np.sum(b1 & b2))
        rows.append((float(t), s, a, a / s))
    return rows


def pair_iccs(c1, c2):
    """ICC per column of two ``(subjects, pairs)`` arrays; NaN where undefined."""
    c1 = np.asarray(c1, dtype=float)
    c2 = np.asarray(c2, dtype=float)
    if c1.shape != c2.shape or c1.ndim != 2:
        raise ParameterError("expected two equally shaped (subjects, pairs) arrays")
    out = np.full(c1.shape[1], np.nan)
    for p in range(c1.shape[1]):
        try:
            out[p] = icc(PairedMeasurements(c1[:, p], c2[:, p]))
        except UndefinedMetricError:
            pass
    return out


def write_agreement_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "s", "a", "a_over_s"])
        for t, s, a, r in rows:
            w.writerow([repr(t), s, a, repr(r)])


def write_icc_csv(path, labels, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "icc"])
        for lab, v in zip(labels, values):
            w.writerow([lab, repr(float(v))])
