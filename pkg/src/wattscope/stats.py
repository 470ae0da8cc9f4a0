"""Correlation, two-sample KS and empirical-CDF helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from wattscope.errors import InsufficientDataError, UndefinedCorrelationError

KS_EXACT_MAX_N = 10
DEFAULT_ALPHA = 0.05
DEFAULT_GAP_W = 10.0


def _pair(xs: Sequence[float], ys: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"correlation needs two 1-d sequences of equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise InsufficientDataError(f"correlation needs at least 2 pairs, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("correlation inputs must be finite")
    return x, y


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x, y = _pair(xs, ys)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant input")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(v.size, dtype=float)
    sv = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    x, y = _pair(xs, ys)
    return pearson(average_ranks(x), average_ranks(y))


@dataclass(frozen=True)
class KsResult:
    statistic: float
    p_value: float
    reject: bool
    alpha: float
    exact: bool


def _ks_counts(x: np.ndarray, y: np.ndarray) -> int:
    """max |F_x - F_y| scaled by n*m, as an exact integer."""
    n, m = x.size, y.size
    xs, ys = np.sort(x), np.sort(y)
    pooled = np.concatenate([xs, ys])
    a = np.searchsorted(xs, pooled, side="right").astype(np.int64)
    b = np.searchsorted(ys, pooled, side="right").astype(np.int64)
    return int(np.max(np.abs(a * m - b * n)))


def ks_exact_sf(n: int, m: int, d_scaled: int) -> float:
    """P(D >= d) under the null for sample sizes n, m, without ties.

    ``d_scaled`` is the statistic multiplied by ``n*m``. Counts monotone
    lattice paths from (0, 0) to (n, m) whose every point keeps
    ``|i*m - j*n| < d_scaled``.
    """
    if d_scaled <= 0:
        return 1.0
    paths = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        for j in range(m + 1):
            if abs(i * m - j * n) >= d_scaled:
                continue
            if i == 0 and j == 0:
                paths[i][j] = 1
            else:
                paths[i][j] = (paths[i - 1][j] if i else 0) + (paths[i][j - 1] if j else 0)
    total = math.comb(n + m, n)
    return (total - paths[n][m]) / total


def kolmogorov_sf(lam: float) -> float:
    """Survival function of the limiting Kolmogorov distribution."""
    if lam <= 0:
        return 1.0
    if lam < 1.18:
        # Theta-function form converges quickly for small arguments.
        s = 0.0
        for k in range(1, 30):
            s += math.exp(-((2 * k - 1) ** 2) * math.pi ** 2 / (8.0 * lam * lam))
        cdf = math.sqrt(2.0 * math.pi) / lam * s
        return min(1.0, max(0.0, 1.0 - cdf))
    s = 0.0
    for k in range(1, 101):
        term = math.exp(-2.0 * k * k * lam * lam)
        s += term if k % 2 else -term
        if term < 1e-18:
            break
    return min(1.0, max(0.0, 2.0 * s))


def ks_two_sample(xs: Sequence[float], ys: Sequence[float], alpha: float = DEFAULT_ALPHA) -> KsResult:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.size == 0 or y.size == 0:
        raise InsufficientDataError("KS test needs two non-empty samples")
    n, m = x.size, y.size
    d_scaled = _ks_counts(x, y)
    stat = d_scaled / (n * m)
    exact = n <= KS_EXACT_MAX_N and m <= KS_EXACT_MAX_N
    if exact:
        p = ks_exact_sf(n, m, d_scaled)
    else:
        p = kolmogorov_sf(math.sqrt(n * m / (n + m)) * stat)
    p = min(1.0, max(0.0, p))
    return KsResult(stat, p, p < alpha, alpha, exact)


@dataclass(frozen=True)
class CorrelationReport:
    pearson: float
    spearman: float
    ks_statistic: float
    ks_p_value: float
    ks_reject_at_alpha: bool
    alpha: float
    n: int

    def as_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "ks_p_value": self.ks_p_value,
            "ks_reject_at_alpha": self.ks_reject_at_alpha,
            "ks_statistic": self.ks_statistic,
            "n": self.n,
            "pearson": self.pearson,
            "spearman": self.spearman,
        }


def correlation_report(estimate: Sequence[float], reference: Sequence[float],
                       alpha: float = DEFAULT_ALPHA) -> CorrelationReport:
    ks = ks_two_sample(estimate, reference, alpha)
    return CorrelationReport(pearson(estimate, reference), spearman(estimate, reference),
                             ks.statistic, ks.p_value, ks.reject, alpha, len(estimate))


def ecdf(samples: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Distinct sorted values and the fraction of samples at or below each."""
    s = np.sort(np.asarray(samples, dtype=float))
    if s.size == 0:
        return s, s.copy()
    values, counts = np.unique(s, return_counts=True)
    return values, np.cumsum(counts) / s.size


@dataclass(frozen=True)
class EcdfGap:
    low: float
    high: float

    @property
    def width(self) -> float:
        return self.high - self.low


def ecdf_gaps(samples: Sequence[float], min_width: float = DEFAULT_GAP_W) -> list[EcdfGap]:
    """Plateaus of the eCDF: ranges between neighbouring values with no mass."""
    values = np.unique(np.asarray(samples, dtype=float))
    if values.size < 2:
        return []
    widths = np.diff(values)
    idx = np.nonzero(widths >= min_width)[0]
    return [EcdfGap(float(values[i]), float(values[i + 1])) for i in idx]
