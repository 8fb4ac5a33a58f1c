"""Similarity and rank statistics between attribution vectors."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numba
import numpy as np

DEGENERATE_NORM = 1e-12


@dataclass
class MetricReport:
    tau: float
    cosine: float
    pearson: float          # NaN when undefined
    topk: float
    k: int
    absolute_mode: bool = True
    cosine_degenerate: bool = False

    @property
    def pearson_defined(self) -> bool:
        return not math.isnan(self.pearson)

    CSV_COLUMNS = ("tau", "cosine", "pearson", "topk")

    def csv_row(self) -> list[float]:
        return [self.tau, self.cosine, self.pearson, self.topk]

    def to_dict(self) -> dict:
        return asdict(self)


def _pair(a, b, min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < min_len:
        raise ValueError(f"need at least {min_len} entries, got {a.size}")
    return a, b


def kendall_numerator_naive(a: np.ndarray, b: np.ndarray) -> int:
    """sum_{i<j} sign(a_i - a_j) * sign(b_i - b_j) by direct enumeration."""
    total = 0
    for i in range(len(a) - 1):
        total += int(np.dot(np.sign(a[i] - a[i + 1:]), np.sign(b[i] - b[i + 1:])))
    return total


@numba.njit(cache=True)
def _merge_inversions(r: np.ndarray) -> int:
    n = r.size
    a = r.copy()
    buf = np.empty_like(a)
    total = 0
    width = 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                # strict: equal values are not inversions
                if a[j] < a[i]:
                    total += mid - i
                    buf[k] = a[j]
                    j += 1
                else:
                    buf[k] = a[i]
                    i += 1
                k += 1
            while i < mid:
                buf[k] = a[i]
                i += 1
                k += 1
            while j < hi:
                buf[k] = a[j]
                j += 1
                k += 1
        a, buf = buf, a
        width *= 2
    return total


def count_inversions(r) -> int:
    """Number of pairs i < j with r[i] > r[j], by bottom-up merge sort."""
    r = np.ascontiguousarray(r, dtype=np.int64)
    return int(_merge_inversions(r)) if r.size > 1 else 0


def _dense_ranks(v: np.ndarray) -> tuple[np.ndarray, int]:
    """Ranks 0..u-1 (equal values share a rank) and the tied-pair count."""
    order = np.argsort(v)
    sv = v[order]
    new = np.empty(v.size, dtype=bool)
    new[0] = True
    np.not_equal(sv[1:], sv[:-1], out=new[1:])
    dense = np.cumsum(new) - 1
    ranks = np.empty(v.size, dtype=np.int64)
    ranks[order] = dense
    runs = np.diff(np.flatnonzero(np.r_[new, True]))
    return ranks, int((runs * (runs - 1) // 2).sum())


def kendall_numerator_fast(a: np.ndarray, b: np.ndarray) -> int:
    """Same integer as the naive sum, in O(d log d) (Knight's method).

    Concordant minus discordant equals n0 - n1 - n2 + n3 - 2 * swaps, where
    n1, n2 count pairs tied in a, b, n3 pairs tied in both, and swaps are the
    inversions of b once the pairs are sorted by (a, b).
    """
    n = a.size
    ra, n1 = _dense_ranks(a)
    rb, n2 = _dense_ranks(b)
    joint = ra * (int(rb.max()) + 1) + rb
    order = np.argsort(joint)
    _, n3 = _dense_ranks(joint[order])
    swaps = count_inversions(rb[order])
    return n * (n - 1) // 2 - n1 - n2 + n3 - 2 * swaps


def kendall_tau(a, b, algorithm: str = "fast") -> float:
    """Kendall's tau with sign(0) = 0 and the plain 2 / (d(d-1)) normaliser."""
    a, b = _pair(a, b, min_len=2)
    d = a.size
    if algorithm == "naive":
        num = kendall_numerator_naive(a, b)
    elif algorithm == "fast":
        num = kendall_numerator_fast(a, b)
    else:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    return 2.0 * num / (d * (d - 1))


def cosine_similarity(a, b, return_flag: bool = False):
    a, b = _pair(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    degenerate = na < DEGENERATE_NORM or nb < DEGENERATE_NORM
    val = 0.0 if degenerate else float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    return (val, degenerate) if return_flag else val


def pearson_correlation(a, b) -> float:
    """Centered cosine; NaN flags an undefined value (a constant vector)."""
    a, b = _pair(a, b, min_len=2)
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        return math.nan
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def topk_indices(a, k: int, absolute_mode: bool = False) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).ravel()
    if not 1 <= k <= a.size:
        raise ValueError(f"k={k} outside [1, {a.size}]")
    key = np.abs(a) if absolute_mode else a
    return np.argsort(-key, kind="stable")[:k]


def topk_intersection(a, b, k: int, absolute_mode: bool = False) -> float:
    a, b = _pair(a, b)
    ia = topk_indices(a, k, absolute_mode)
    ib = topk_indices(b, k, absolute_mode)
    return len(np.intersect1d(ia, ib, assume_unique=True)) / k


def metric_report(natural, perturbed, k: int, absolute_mode: bool = True) -> MetricReport:
    """All four statistics between a natural and a perturbed attribution."""
    a, b = _pair(natural, perturbed, min_len=2)
    if absolute_mode:
        a, b = np.abs(a), np.abs(b)
    cos, flag = cosine_similarity(a, b, return_flag=True)
    return MetricReport(
        tau=kendall_tau(a, b),
        cosine=cos,
        pearson=pearson_correlation(a, b),
        topk=topk_intersection(a, b, k),
        k=k,
        absolute_mode=absolute_mode,
        cosine_degenerate=flag,
    )
