"""Closed-set identification: gallery construction, CMC, Rank@K, rank_k_95."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embeddings import EmbeddingSet
from .errors import ClosedSetViolation, ConfigError, MetricUndefinedError


@dataclass
class GallerySpec:
    strategy: str = "random_single"  # or "earliest_single"
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("random_single", "earliest_single"):
            raise ConfigError(f"unknown gallery strategy {self.strategy!r}")


@dataclass
class GallerySplit:
    gallery: EmbeddingSet     # one template per identity
    probes: EmbeddingSet      # remaining exams of gallery identities
    excluded: list[str]       # single-exam identities, unusable closed-set


def build_gallery(es: EmbeddingSet, spec: GallerySpec) -> GallerySplit:
    """One template per identity (seeded random or chronologically earliest);
    all remaining exams become probes. Identities with a single exam are
    excluded with a warning entry rather than failing the run."""
    rng = np.random.default_rng(spec.seed)
    groups: dict[str, list[int]] = {}
    for i, pid in enumerate(es.patient_ids):
        groups.setdefault(pid, []).append(i)
    gallery_idx, probe_idx, excluded = [], [], []
    for pid in sorted(groups):
        idx = groups[pid]
        if len(idx) < 2:
            excluded.append(pid)
            continue
        if spec.strategy == "earliest_single":
            order = sorted(
                idx,
                key=lambda i: (
                    es.dates[i].isoformat() if es.dates[i] else "",
                    es.exam_ids[i],
                ),
            )
            template = order[0]
        else:
            template = idx[int(rng.integers(0, len(idx)))]
        gallery_idx.append(template)
        probe_idx.extend(i for i in idx if i != template)
    if not gallery_idx:
        raise MetricUndefinedError("no identity has >= 2 exams; gallery empty")
    return GallerySplit(es.subset(gallery_idx), es.subset(probe_idx), excluded)


def rank_of_genuine(probe_vec: np.ndarray, probe_pid: str, gallery: EmbeddingSet) -> int:
    """Pessimistic rank: 1 + impostor templates scoring strictly higher
    + impostor templates tied with the genuine score."""
    if probe_pid not in gallery.patient_ids:
        raise ClosedSetViolation(f"probe identity {probe_pid!r} not in gallery")
    scores = gallery.vectors @ np.asarray(probe_vec, dtype=float)
    g = gallery.patient_ids.index(probe_pid)
    genuine_score = scores[g]
    others = np.delete(scores, g)
    return int(1 + np.sum(others > genuine_score) + np.sum(others == genuine_score))


@dataclass
class CmcCurve:
    values: np.ndarray  # values[k-1] = CMC[k], k = 1..G
    n_probes: int

    def __getitem__(self, k: int) -> float:
        return float(self.values[k - 1])

    @property
    def gallery_size(self) -> int:
        return self.values.size

    def rank_at(self, k: int) -> float:
        return float(self.values[min(k, self.values.size) - 1])


def cmc(probes: EmbeddingSet, gallery: EmbeddingSet) -> CmcCurve:
    """CMC[K] = fraction of probes whose genuine template ranks <= K."""
    if len(probes) == 0:
        raise MetricUndefinedError("no probes")
    g = gallery.vectors.shape[0]
    ranks = np.array(
        [
            rank_of_genuine(probes.vectors[i], probes.patient_ids[i], gallery)
            for i in range(len(probes))
        ]
    )
    values = np.array([np.mean(ranks <= k) for k in range(1, g + 1)])
    return CmcCurve(values, len(probes))


def rank_k_95(curve: CmcCurve) -> int:
    """Smallest K with CMC[K] >= 0.95."""
    hit = np.flatnonzero(curve.values >= 0.95)
    if hit.size == 0:
        raise MetricUndefinedError("CMC never reaches 0.95")
    return int(hit[0] + 1)


@dataclass
class IdentificationReport:
    rank1: float
    rank5: float
    rank10: float
    rank_k_95: int
    gallery_size: int
    n_probes: int
    excluded_identities: list[str] = field(default_factory=list)
    curve: CmcCurve | None = None


def identification_report(es: EmbeddingSet, spec: GallerySpec) -> IdentificationReport:
    split = build_gallery(es, spec)
    curve = cmc(split.probes, split.gallery)
    return IdentificationReport(
        rank1=curve.rank_at(1),
        rank5=curve.rank_at(5),
        rank10=curve.rank_at(10),
        rank_k_95=rank_k_95(curve),
        gallery_size=curve.gallery_size,
        n_probes=curve.n_probes,
        excluded_identities=split.excluded,
        curve=curve,
    )
