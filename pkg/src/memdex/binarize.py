"""Per-element binarization thresholds chosen by information gain.

Each element is split at the threshold maximizing H(b) - H(b | C), where b is
the indicator ``value > tau`` and C the class label. Candidates are midpoints
between consecutive distinct sorted training values. With one sample per
class the conditional entropy vanishes and the most balanced split wins.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from memdex.model import DeepVector, DimensionMismatchError

# gains closer than this are treated as tied; the smaller threshold wins
TIE_TOL = 1e-12

# bound on the (samples x elements x classes) cumulative-count block
_BLOCK_CELLS = 8_000_000


@dataclass(frozen=True, eq=False)
class ThresholdTable:
    taus: np.ndarray
    gains: np.ndarray
    degenerate_mask: np.ndarray

    def __post_init__(self):
        for name in ("taus", "gains", "degenerate_mask"):
            arr = np.array(getattr(self, name), dtype=bool if name == "degenerate_mask" else float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (self.taus.shape == self.gains.shape == self.degenerate_mask.shape):
            raise ValueError("threshold table columns differ in length")
        if not np.all(np.isfinite(self.taus)):
            raise ValueError("thresholds must be finite")
        if np.any(self.gains < 0) or np.any(self.gains > 1):
            raise ValueError("gains must lie in [0, 1] bits")

    def __len__(self) -> int:
        return self.taus.shape[0]


def entropy_bits(counts: Sequence[int]) -> float:
    """Shannon entropy (bits) of the empirical distribution given by ``counts``."""
    c = np.asarray(counts, dtype=np.float64)
    if c.ndim != 1 or np.any(c < 0):
        raise ValueError("counts must be a 1-d sequence of non-negative values")
    total = c.sum()
    if total <= 0:
        raise ValueError("entropy of an all-zero count vector is undefined")
    p = c[c > 0] / total
    return float(max(0.0, -(p * np.log2(p)).sum()))


def _xlog2x(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x, dtype=np.float64)
    pos = x > 0
    out[pos] = x[pos] * np.log2(x[pos])
    return out


def _as_matrix(training) -> np.ndarray:
    if isinstance(training, np.ndarray):
        return np.atleast_2d(np.asarray(training, dtype=np.float64))
    rows = list(training)
    if rows and isinstance(rows[0], DeepVector):
        if any(v.is_binary for v in rows):
            raise ValueError("thresholds are fit on real-valued vectors, got binary input")
        rows = [v.values for v in rows]
    return np.array(rows, dtype=np.float64)


def fit_thresholds(training, labels: Sequence) -> ThresholdTable:
    """Fit one information-gain threshold per element.

    ``training`` is a sequence of real :class:`DeepVector` or an (n, D) array.
    """
    X = _as_matrix(training)
    labels = list(labels)
    n, dim = X.shape
    if n < 2:
        raise ValueError("at least 2 training vectors are required")
    if n != len(labels):
        raise ValueError("one label per training vector is required")
    if not np.all(np.isfinite(X)):
        raise ValueError("training values must be finite")
    classes = {c: i for i, c in enumerate(dict.fromkeys(labels))}
    y = np.array([classes[c] for c in labels], dtype=np.int64)
    n_classes = len(classes)
    class_n = np.bincount(y, minlength=n_classes).astype(np.float64)

    # n * H(b | C) = sum_c [N_c log N_c - L_c log L_c - R_c log R_c]
    const_c = _xlog2x(class_n).sum()
    left_n = np.arange(1, n, dtype=np.float64)
    h_b = np.log2(n) - (_xlog2x(left_n) + _xlog2x(n - left_n)) / n

    taus = np.empty(dim)
    gains = np.zeros(dim)
    degenerate = np.zeros(dim, dtype=bool)
    block = max(1, _BLOCK_CELLS // max(1, n * n_classes))
    for lo in range(0, dim, block):
        hi = min(dim, lo + block)
        order = np.argsort(X[:, lo:hi], axis=0, kind="stable")
        xs = np.take_along_axis(X[:, lo:hi], order, axis=0)
        onehot = np.zeros((n, hi - lo, n_classes))
        np.put_along_axis(onehot, y[order][:, :, None], 1.0, axis=2)
        left = np.cumsum(onehot, axis=0)[:-1]
        right = class_n - left
        h_b_c = (const_c - _xlog2x(left).sum(axis=2) - _xlog2x(right).sum(axis=2)) / n
        mi = h_b[:, None] - h_b_c
        ok = xs[:-1] < xs[1:]
        mi = np.where(ok, mi, -np.inf)
        best = mi.max(axis=0)
        for j in range(hi - lo):
            col = lo + j
            if not np.isfinite(best[j]):
                taus[col] = xs[0, j]
                degenerate[col] = True
                continue
            t = int(np.flatnonzero(mi[:, j] >= best[j] - TIE_TOL)[0])
            taus[col] = midpoint(xs[t, j], xs[t + 1, j])
            gains[col] = min(1.0, max(0.0, mi[t, j]))
    return ThresholdTable(taus, gains, degenerate)


def midpoint(a: float, b: float) -> float:
    """Midpoint of a < b that still separates them under ``value > tau``."""
    mid = a + (b - a) / 2.0
    return float(a if mid >= b else mid)


def _check_real(v: DeepVector, table: ThresholdTable) -> None:
    if v.is_binary:
        raise ValueError("vector is already binary")
    if len(v) != len(table):
        raise DimensionMismatchError(
            f"vector dimension {len(v)} != threshold table dimension {len(table)}")


def apply_thresholds(v: DeepVector, table: ThresholdTable) -> DeepVector:
    _check_real(v, table)
    return DeepVector((v.values > table.taus).astype(np.float64), is_binary=True)


def binarize_vectors(vectors: dict[str, DeepVector], table: ThresholdTable
                     ) -> dict[str, DeepVector]:
    return {k: apply_thresholds(v, table) for k, v in vectors.items()}
