"""Two-sample statistics for the genuine/impostor separation study.

One tie convention throughout: average ranks (Spearman), midranks
(Anderson-Darling, Cramer-von Mises), half-counting (U, AUC, Cliff's delta).
p-values use asymptotic approximations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, kv

from .errors import ConstantInputError, UndefinedEffectError


@dataclass
class TwoSampleReport:
    ks: float
    ad: float
    mwu: float
    mwu_p: float
    cvm: float
    cvm_p: float
    cohens_d: float
    cliffs_delta: float
    bhattacharyya: float
    auc: float

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("KS", self.ks),
            ("AD", self.ad),
            ("MWU", self.mwu),
            ("MWU_p", self.mwu_p),
            ("CvM", self.cvm),
            ("CvM_p", self.cvm_p),
            ("Cohens_d", self.cohens_d),
            ("Cliffs_delta", self.cliffs_delta),
            ("Bhattacharyya", self.bhattacharyya),
            ("AUC", self.auc),
        ]


def _as_vec(x, min_len: int = 1) -> np.ndarray:
    v = np.asarray(x, dtype=float).ravel()
    if v.size < min_len:
        raise ValueError(f"need at least {min_len} values, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise ValueError("sample contains non-finite values")
    return v


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks, ties averaged."""
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(x.size, dtype=float)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def pearson(x, y) -> float:
    x, y = _as_vec(x, 2), _as_vec(y, 2)
    if x.size != y.size:
        raise ValueError("length mismatch")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.sum(xc * xc)), np.sqrt(np.sum(yc * yc))
    if sx == 0.0 or sy == 0.0:
        raise ConstantInputError("correlation undefined for a constant vector")
    return float(np.clip(np.sum(xc * yc) / (sx * sy), -1.0, 1.0))


def spearman(x, y) -> float:
    x, y = _as_vec(x, 2), _as_vec(y, 2)
    return pearson(average_ranks(x), average_ranks(y))


def ks_two_sample(a, b) -> float:
    """sup_t |ECDF_a(t) - ECDF_b(t)|."""
    a, b = np.sort(_as_vec(a)), np.sort(_as_vec(b))
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / a.size
    cdf_b = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def _u_statistic(a: np.ndarray, b: np.ndarray) -> float:
    """#{a_i > b_j} plus half the ties, via pooled midranks."""
    pooled = np.concatenate([a, b])
    ranks = average_ranks(pooled)
    ra = np.sum(ranks[: a.size])
    return float(ra - a.size * (a.size + 1) / 2.0)


def mann_whitney_u(a, b) -> tuple[float, float]:
    """U statistic plus two-sided p via the tie-corrected normal approximation."""
    a, b = _as_vec(a), _as_vec(b)
    m, n = a.size, b.size
    u = _u_statistic(a, b)
    pooled = np.concatenate([a, b])
    big_n = m + n
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = np.sum(counts.astype(float) ** 3 - counts)
    var = m * n / 12.0 * ((big_n + 1) - tie_term / (big_n * (big_n - 1))) if big_n > 1 else 0.0
    if var <= 0:
        return u, 1.0
    z = (u - m * n / 2.0) / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return u, p


def anderson_darling_2samp(a, b) -> float:
    """Two-sample Anderson-Darling rank statistic, midrank tie handling,
    standardized as in Scholz & Stephens."""
    a, b = _as_vec(a, 2), _as_vec(b, 2)
    samples = [a, b]
    big_n = a.size + b.size
    pooled = np.sort(np.concatenate(samples))
    values, lj = np.unique(pooled, return_counts=True)
    bj = np.cumsum(lj) - lj / 2.0
    a2akn = 0.0
    for s in samples:
        fij = np.array([np.sum(s == v) for v in values], dtype=float)
        mij = np.cumsum(fij) - fij / 2.0
        denom = bj * (big_n - bj) - big_n * lj / 4.0
        inner = lj / big_n * (big_n * mij - bj * s.size) ** 2 / denom
        a2akn += float(np.sum(inner)) / s.size
    a2akn *= (big_n - 1.0) / big_n

    # standardization (k = 2 samples)
    k = 2
    n_i = np.array([a.size, b.size], dtype=float)
    h_cap = np.sum(1.0 / n_i)
    h = np.sum(1.0 / np.arange(1, big_n))
    g = 0.0
    inv = 1.0 / np.arange(1, big_n)
    tail = np.cumsum(inv[::-1])[::-1]  # tail[i] = sum_{j>=i+1} 1/j
    for i in range(1, big_n - 1):
        g += (1.0 / (big_n - i)) * tail[i]
    aa = (4 * g - 6) * (k - 1) + (10 - 6 * g) * h_cap
    bb = (2 * g - 4) * k ** 2 + 8 * h * k + (2 * g - 14 * h - 4) * h_cap - 8 * h + 4 * g - 6
    cc = (6 * h + 2 * g - 2) * k ** 2 + (4 * h - 4 * g + 6) * k + (2 * h - 6) * h_cap + 4 * h
    dd = (2 * h + 6) * k ** 2 - 4 * h * k
    sigmasq = (aa * big_n ** 3 + bb * big_n ** 2 + cc * big_n + dd) / (
        (big_n - 1.0) * (big_n - 2.0) * (big_n - 3.0)
    )
    return float((a2akn - (k - 1)) / math.sqrt(sigmasq))


def _cdf_cvm_limit(x: float) -> float:
    """CDF of the limiting Cramer-von Mises distribution."""
    if x <= 0:
        return 0.0
    total, k = 0.0, 0
    while k < 200:
        u = math.exp(gammaln(k + 0.5) - gammaln(k + 1)) / (math.pi ** 1.5 * math.sqrt(x))
        y = 4 * k + 1
        q = y * y / (16.0 * x)
        term = u * math.sqrt(y) * math.exp(-q) * float(kv(0.25, q))
        total += term
        if abs(term) < 1e-14:
            break
        k += 1
    return min(max(total, 0.0), 1.0)


def cramer_von_mises_2samp(a, b) -> tuple[float, float]:
    """Two-sample Cramer-von Mises T statistic (midranks) and asymptotic p."""
    a, b = _as_vec(a, 2), _as_vec(b, 2)
    m, n = a.size, b.size
    big_n = m + n
    ranks = average_ranks(np.concatenate([a, b]))
    r = np.sort(ranks[:m])
    s = np.sort(ranks[m:])
    u = m * np.sum((r - np.arange(1, m + 1)) ** 2) + n * np.sum((s - np.arange(1, n + 1)) ** 2)
    t = u / (m * n * big_n) - (4.0 * m * n - 1.0) / (6.0 * big_n)
    et = (1.0 + 1.0 / big_n) / 6.0
    vt = (big_n + 1.0) * (4.0 * m * n * big_n - 3.0 * (m * m + n * n) - 2.0 * m * n) / (
        45.0 * big_n ** 2 * 4.0 * m * n
    )
    tn = 1.0 / 6.0 + (t - et) / math.sqrt(45.0 * vt)
    p = 1.0 if tn < 0.003 else max(0.0, 1.0 - _cdf_cvm_limit(tn))
    return float(t), float(p)


def cohens_d(a, b) -> float:
    a, b = _as_vec(a, 2), _as_vec(b, 2)
    va, vb = np.var(a, ddof=1), np.var(b, ddof=1)
    pooled = ((a.size - 1) * va + (b.size - 1) * vb) / (a.size + b.size - 2)
    if pooled <= 0:
        raise UndefinedEffectError("zero pooled variance")
    return float((a.mean() - b.mean()) / math.sqrt(pooled))


def cliffs_delta(a, b) -> float:
    a, b = _as_vec(a), _as_vec(b)
    return float(2.0 * _u_statistic(a, b) / (a.size * b.size) - 1.0)


def bhattacharyya_coefficient(a, b, n_bins: int = 64) -> float:
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    a, b = _as_vec(a), _as_vec(b)
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if lo == hi:
        return 1.0
    edges = np.linspace(lo, hi, n_bins + 1)
    pa, _ = np.histogram(a, bins=edges)
    pb, _ = np.histogram(b, bins=edges)
    return float(np.sum(np.sqrt((pa / a.size) * (pb / b.size))))


def auc_from_scores(pos, neg) -> float:
    """P(random pos score > random neg score), ties counted half."""
    pos, neg = _as_vec(pos), _as_vec(neg)
    return float(_u_statistic(pos, neg) / (pos.size * neg.size))


def two_sample_report(a, b, n_bins: int = 64) -> TwoSampleReport:
    """All separation statistics of sample a vs sample b."""
    u, up = mann_whitney_u(a, b)
    t, tp = cramer_von_mises_2samp(a, b)
    return TwoSampleReport(
        ks=ks_two_sample(a, b),
        ad=anderson_darling_2samp(a, b),
        mwu=u,
        mwu_p=up,
        cvm=t,
        cvm_p=tp,
        cohens_d=cohens_d(a, b),
        cliffs_delta=cliffs_delta(a, b),
        bhattacharyya=bhattacharyya_coefficient(a, b, n_bins),
        auc=auc_from_scores(a, b),
    )
