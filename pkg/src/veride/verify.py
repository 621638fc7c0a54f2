"""Verification metrics from streaming score histograms.

All-vs-all cosine scores over the upper triangle are binned into fixed
[-1, 1] genuine/impostor histograms; partial histograms from rectangular
blocks merge by addition, so the result is independent of block size and
accumulation order. Thresholds are bin edges; resolution is 2/B.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embeddings import EmbeddingSet
from .errors import ConfigError, MetricUndefinedError

DEFAULT_BINS = 1 << 20


@dataclass
class ScoreHistogramPair:
    """Fixed-bin genuine/impostor counts over cosine range [-1, 1].

    Bin k covers (edge_k, edge_{k+1}] with edge_k = -1 + 2k/B: a score
    exactly on an edge falls in the lower bin.
    """

    bins: int
    genuine: np.ndarray = field(default=None)
    impostor: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.bins < 2:
            raise ConfigError("histogram needs at least 2 bins")
        if self.genuine is None:
            self.genuine = np.zeros(self.bins, dtype=np.int64)
        if self.impostor is None:
            self.impostor = np.zeros(self.bins, dtype=np.int64)

    @property
    def genuine_total(self) -> int:
        return int(self.genuine.sum())

    @property
    def impostor_total(self) -> int:
        return int(self.impostor.sum())

    def edges(self) -> np.ndarray:
        return -1.0 + 2.0 * np.arange(self.bins + 1) / self.bins

    def merge(self, other: "ScoreHistogramPair") -> "ScoreHistogramPair":
        if other.bins != self.bins:
            raise ConfigError("cannot merge histograms with different bin counts")
        return ScoreHistogramPair(
            self.bins, self.genuine + other.genuine, self.impostor + other.impostor
        )

    def add_scores(self, scores: np.ndarray, genuine_mask: np.ndarray) -> None:
        s = np.clip(np.asarray(scores, dtype=float).ravel(), -1.0, 1.0)
        idx = np.ceil((s + 1.0) * (self.bins / 2.0)).astype(np.int64) - 1
        np.clip(idx, 0, self.bins - 1, out=idx)
        gm = np.asarray(genuine_mask, dtype=bool).ravel()
        self.genuine += np.bincount(idx[gm], minlength=self.bins)
        self.impostor += np.bincount(idx[~gm], minlength=self.bins)


def accumulate_all_pairs(
    es: EmbeddingSet, bins: int = DEFAULT_BINS, block: int = 2048
) -> ScoreHistogramPair:
    """Bin every unordered pair (i < j) as genuine (same patient) or impostor."""
    if len(es) < 2:
        raise MetricUndefinedError("need at least 2 embeddings")
    hist = ScoreHistogramPair(bins)
    z = es.vectors
    codes = es.patient_codes()
    n = len(es)
    for i0 in range(0, n, block):
        i1 = min(i0 + block, n)
        for j0 in range(i0, n, block):
            j1 = min(j0 + block, n)
            scores = z[i0:i1] @ z[j0:j1].T
            same = codes[i0:i1, None] == codes[None, j0:j1]
            ii = np.arange(i0, i1)[:, None]
            jj = np.arange(j0, j1)[None, :]
            upper = ii < jj
            hist.add_scores(scores[upper], same[upper])
    return hist


def _ge_counts(counts: np.ndarray) -> np.ndarray:
    """mass strictly above edge_k, for k = 0..B (bins k.. hold scores > edge_k)."""
    rev = np.concatenate([np.cumsum(counts[::-1])[::-1], [0]])
    return rev


def eer(hist: ScoreHistogramPair) -> tuple[float, float]:
    """(eer, threshold) at the bin edge minimizing |FAR - FRR|."""
    if hist.genuine_total == 0 or hist.impostor_total == 0:
        raise MetricUndefinedError("EER needs both genuine and impostor scores")
    gen_ge = _ge_counts(hist.genuine) / hist.genuine_total
    imp_ge = _ge_counts(hist.impostor) / hist.impostor_total
    far = imp_ge
    frr = 1.0 - gen_ge
    k = int(np.argmin(np.abs(far - frr)))
    return float((far[k] + frr[k]) / 2.0), float(hist.edges()[k])


@dataclass
class TarFarResult:
    far_target: float
    tar: float
    threshold: float
    far_achieved: float
    unreliable: bool = False  # impostor count below 1/far_target


def tar_at_far(hist: ScoreHistogramPair, far_target: float) -> TarFarResult:
    """Conservative operating point: smallest bin-edge threshold whose
    empirical FAR does not exceed the target (no interpolation)."""
    if not 0.0 < far_target <= 1.0:
        raise ConfigError("far_target must be in (0, 1]")
    if hist.genuine_total == 0 or hist.impostor_total == 0:
        raise MetricUndefinedError("TAR@FAR needs both score classes")
    gen_ge = _ge_counts(hist.genuine) / hist.genuine_total
    imp_ge = _ge_counts(hist.impostor) / hist.impostor_total
    ok = np.flatnonzero(imp_ge <= far_target)
    k = int(ok[0])
    return TarFarResult(
        far_target=far_target,
        tar=float(gen_ge[k]),
        threshold=float(hist.edges()[k]),
        far_achieved=float(imp_ge[k]),
        unreliable=hist.impostor_total < 1.0 / far_target,
    )


@dataclass
class CurvePoint:
    threshold: float
    far: float
    tar: float
    frr: float


def export_curves(hist: ScoreHistogramPair, n_points: int = 512) -> list[CurvePoint]:
    """Monotone ROC/DET samples at evenly spaced thresholds, endpoints included."""
    if hist.genuine_total == 0 or hist.impostor_total == 0:
        raise MetricUndefinedError("curves need both score classes")
    gen_ge = _ge_counts(hist.genuine) / hist.genuine_total
    imp_ge = _ge_counts(hist.impostor) / hist.impostor_total
    ks = np.unique(np.linspace(0, hist.bins, n_points).round().astype(int))
    edges = hist.edges()
    return [
        CurvePoint(float(edges[k]), float(imp_ge[k]), float(gen_ge[k]), float(1 - gen_ge[k]))
        for k in ks
    ]


@dataclass
class VerificationReport:
    eer: float
    eer_threshold: float
    tar_at_far: list[TarFarResult]
    curve: list[CurvePoint]
    n_genuine: int
    n_impostor: int
    bins: int


def verification_report(
    hist: ScoreHistogramPair,
    far_targets: tuple[float, ...] = (1e-3, 1e-4),
    n_curve_points: int = 512,
) -> VerificationReport:
    e, thr = eer(hist)
    return VerificationReport(
        eer=e,
        eer_threshold=thr,
        tar_at_far=[tar_at_far(hist, t) for t in far_targets],
        curve=export_curves(hist, n_curve_points),
        n_genuine=hist.genuine_total,
        n_impostor=hist.impostor_total,
        bins=hist.bins,
    )
