"""Open-set identification: top-K shortlist, stage-2 score fusion
(best-of-K, top-K mean, s-norm), impostor-calibrated thresholds, DIR@FAR."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embeddings import EmbeddingSet
from .errors import CalibrationError, ConfigError, VerideError


@dataclass
class Candidate:
    identity: str
    score: float       # stage-1 cosine
    gallery_index: int


@dataclass
class SnormCalibration:
    """Cohort-based symmetric normalization statistics.

    Template-side (mu, sigma) are precomputed per gallery identity; the
    probe side is computed per probe against the same cohort.
    """

    cohort: np.ndarray                      # (M, d)
    template_mean: dict[str, float]
    template_std: dict[str, float]

    @classmethod
    def fit(cls, gallery: EmbeddingSet, cohort: EmbeddingSet) -> "SnormCalibration":
        if len(cohort) < 2:
            raise CalibrationError("s-norm cohort needs at least 2 embeddings")
        scores = gallery.vectors @ cohort.vectors.T  # (G, M)
        mu = scores.mean(axis=1)
        sd = scores.std(axis=1, ddof=1)
        if np.any(sd <= 0):
            raise CalibrationError("degenerate s-norm cohort (zero score spread)")
        return cls(
            cohort=cohort.vectors,
            template_mean={p: float(m) for p, m in zip(gallery.patient_ids, mu)},
            template_std={p: float(s) for p, s in zip(gallery.patient_ids, sd)},
        )

    def probe_stats(self, probe_vec: np.ndarray) -> tuple[float, float]:
        scores = self.cohort @ np.asarray(probe_vec, dtype=float)
        sd = float(scores.std(ddof=1))
        if sd <= 0:
            raise CalibrationError("degenerate probe-cohort score spread")
        return float(scores.mean()), sd


@dataclass
class FusionStrategy:
    kind: str  # "bestofk" | "topkmean" | "snorm"
    snorm: SnormCalibration | None = None

    def __post_init__(self):
        if self.kind not in ("bestofk", "topkmean", "snorm"):
            raise ConfigError(f"unknown fusion strategy {self.kind!r}")
        if self.kind == "snorm" and self.snorm is None:
            raise ConfigError("snorm strategy needs calibration statistics")


@dataclass
class OpenSetProtocol:
    gallery: EmbeddingSet          # one template per identity
    known_probes: EmbeddingSet     # identities present in the gallery
    impostor_probes: EmbeddingSet  # identities absent from the gallery
    shortlist_k: int
    cohort: EmbeddingSet | None = None
    seed: int = 0

    def __post_init__(self):
        gal = set(self.gallery.patient_ids)
        if len(gal) != len(self.gallery.patient_ids):
            raise VerideError("gallery must hold one template per identity")
        if not set(self.known_probes.patient_ids) <= gal:
            raise VerideError("known-probe identities must be enrolled")
        if set(self.impostor_probes.patient_ids) & gal:
            raise VerideError("impostor-probe identities overlap the gallery")
        if self.cohort is not None:
            overlap = set(self.cohort.patient_ids) & (
                gal | set(self.impostor_probes.patient_ids)
            )
            if overlap:
                raise VerideError(f"cohort identities overlap protocol: {sorted(overlap)[:3]}")
        if not 1 <= self.shortlist_k <= len(self.gallery):
            raise ConfigError("shortlist size K out of range")


def shortlist_topk(probe_vec: np.ndarray, gallery: EmbeddingSet, k: int) -> list[Candidate]:
    """K highest-cosine gallery identities, descending; ties broken by id."""
    if not 1 <= k <= len(gallery):
        raise ConfigError("K out of range")
    scores = gallery.vectors @ np.asarray(probe_vec, dtype=float)
    order = sorted(range(len(gallery)), key=lambda i: (-scores[i], gallery.patient_ids[i]))
    return [Candidate(gallery.patient_ids[i], float(scores[i]), i) for i in order[:k]]


def fuse(
    candidates: list[Candidate],
    strategy: FusionStrategy,
    probe_vec: np.ndarray | None = None,
    probe_stats: tuple[float, float] | None = None,
) -> tuple[str, float]:
    """Collapse a shortlist into (top identity, decision score).

    `probe_stats` optionally supplies precomputed probe-vs-cohort (mu, sigma)
    for the s-norm path, bypassing the cohort matrix."""
    if not candidates:
        raise ConfigError("empty candidate list")
    if strategy.kind == "bestofk":
        return candidates[0].identity, candidates[0].score
    if strategy.kind == "topkmean":
        mean = float(np.mean([c.score for c in candidates]))
        return candidates[0].identity, mean
    # s-norm
    cal = strategy.snorm
    if probe_stats is not None:
        mu_p, sd_p = probe_stats
    else:
        if probe_vec is None:
            raise ConfigError("s-norm fusion needs the probe embedding")
        mu_p, sd_p = cal.probe_stats(probe_vec)
    best_id, best_score = None, -np.inf
    for c in sorted(candidates, key=lambda c: c.identity):
        mu_g = cal.template_mean[c.identity]
        sd_g = cal.template_std[c.identity]
        s = 0.5 * ((c.score - mu_p) / sd_p + (c.score - mu_g) / sd_g)
        if s > best_score:
            best_id, best_score = c.identity, s
    return best_id, float(best_score)


@dataclass
class CalibrationResult:
    threshold: float
    far_target: float
    unreliable: bool  # fewer than 1/far_target impostor scores


def calibrate_threshold(impostor_scores, far_target: float) -> CalibrationResult:
    """Smallest threshold whose impostor accept fraction is <= far_target."""
    scores = np.sort(np.asarray(impostor_scores, dtype=float))[::-1]
    if scores.size == 0:
        raise CalibrationError("no impostor scores")
    if not 0.0 < far_target <= 1.0:
        raise ConfigError("far_target must be in (0, 1]")
    allowed = int(np.floor(far_target * scores.size))
    if allowed >= scores.size:
        thr = float(scores[-1])
    else:
        thr = float(np.nextafter(scores[allowed], np.inf))
    return CalibrationResult(thr, far_target, scores.size < 1.0 / far_target)


@dataclass
class DirResult:
    strategy: str
    far_target: float
    dir: float
    threshold: float
    unreliable: bool
    n_known: int
    n_impostor: int


def _decision(protocol: OpenSetProtocol, strategy: FusionStrategy, es: EmbeddingSet):
    identities, scores = [], []
    for i in range(len(es)):
        cands = shortlist_topk(es.vectors[i], protocol.gallery, protocol.shortlist_k)
        ident, score = fuse(cands, strategy, probe_vec=es.vectors[i])
        identities.append(ident)
        scores.append(score)
    return identities, np.array(scores)


def dir_at_far(
    protocol: OpenSetProtocol, strategy: FusionStrategy, far_target: float
) -> DirResult:
    """Fraction of known probes whose fused top identity is correct AND whose
    decision score clears the impostor-calibrated threshold."""
    known_ids, known_scores = _decision(protocol, strategy, protocol.known_probes)
    _, imp_scores = _decision(protocol, strategy, protocol.impostor_probes)
    cal = calibrate_threshold(imp_scores, far_target)
    correct = np.array(
        [ident == true for ident, true in zip(known_ids, protocol.known_probes.patient_ids)]
    )
    accepted = known_scores >= cal.threshold
    return DirResult(
        strategy=strategy.kind,
        far_target=far_target,
        dir=float(np.mean(correct & accepted)),
        threshold=cal.threshold,
        unreliable=cal.unreliable,
        n_known=len(protocol.known_probes),
        n_impostor=len(protocol.impostor_probes),
    )


@dataclass
class ProtocolSizes:
    n_gallery: int = 200
    n_known_probes: int = 100
    n_impostor_probes: int = 300


def build_protocol(
    es: EmbeddingSet,
    shortlist_k: int,
    seed: int,
    sizes: ProtocolSizes = ProtocolSizes(),
    cohort_source: EmbeddingSet | None = None,
    cohort_size: int = 300,
) -> OpenSetProtocol:
    """Carve a gallery / known-probe / impostor-probe protocol out of an
    embedding set; the s-norm cohort is a seeded sample from a disjoint
    source set (typically train-split embeddings)."""
    rng = np.random.default_rng(seed)
    groups: dict[str, list[int]] = {}
    for i, pid in enumerate(es.patient_ids):
        groups.setdefault(pid, []).append(i)
    multi = sorted(p for p, idx in groups.items() if len(idx) >= 2)
    single_or_rest = sorted(groups)
    if len(multi) < sizes.n_gallery:
        raise ConfigError(
            f"need {sizes.n_gallery} identities with >= 2 exams, have {len(multi)}"
        )
    order = list(np.array(multi)[rng.permutation(len(multi))])
    gallery_ids = set(order[: sizes.n_gallery])

    gallery_idx, known_idx = [], []
    for pid in sorted(gallery_ids):
        idx = groups[pid]
        t = idx[int(rng.integers(0, len(idx)))]
        gallery_idx.append(t)
        known_idx.extend(i for i in idx if i != t)
    known_idx = known_idx[: sizes.n_known_probes]
    if len(known_idx) < sizes.n_known_probes:
        raise ConfigError("not enough known probes available")

    impostor_idx = [
        i for pid in single_or_rest if pid not in gallery_ids for i in groups[pid]
    ][: sizes.n_impostor_probes]
    if len(impostor_idx) < sizes.n_impostor_probes:
        raise ConfigError("not enough impostor probes available")

    cohort = None
    if cohort_source is not None:
        forbidden = gallery_ids | {es.patient_ids[i] for i in impostor_idx}
        pool = [
            i
            for i, pid in enumerate(cohort_source.patient_ids)
            if pid not in forbidden
        ]
        if len(pool) < 2:
            raise CalibrationError("cohort source too small after exclusions")
        take = min(cohort_size, len(pool))
        picked = rng.choice(len(pool), size=take, replace=False)
        cohort = cohort_source.subset([pool[int(i)] for i in sorted(picked)])

    return OpenSetProtocol(
        gallery=es.subset(gallery_idx),
        known_probes=es.subset(known_idx),
        impostor_probes=es.subset(impostor_idx),
        shortlist_k=shortlist_k,
        cohort=cohort,
        seed=seed,
    )


def make_strategy(kind: str, protocol: OpenSetProtocol) -> FusionStrategy:
    if kind == "snorm":
        if protocol.cohort is None:
            raise CalibrationError("protocol has no s-norm cohort")
        return FusionStrategy("snorm", SnormCalibration.fit(protocol.gallery, protocol.cohort))
    return FusionStrategy(kind)
