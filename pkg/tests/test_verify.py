import numpy as np
import pytest

from conftest import clustered_embeddings, random_unit_embeddings
from veride.embeddings import EmbeddingSet
from veride.errors import ConfigError, MetricUndefinedError
from veride.verify import (
    ScoreHistogramPair,
    accumulate_all_pairs,
    eer,
    export_curves,
    tar_at_far,
    verification_report,
)


def brute_force_scores(es):
    """All unordered pair cosines with genuine flags, via a double loop."""
    n = len(es)
    scores, genuine = [], []
    for i in range(n):
        for j in range(i + 1, n):
            scores.append(float(es.vectors[i] @ es.vectors[j]))
            genuine.append(es.patient_ids[i] == es.patient_ids[j])
    return np.array(scores), np.array(genuine)


class TestHistogram:
    def test_edge_score_goes_to_lower_bin(self):
        h = ScoreHistogramPair(bins=4)  # edges -1, -.5, 0, .5, 1
        h.add_scores(np.array([0.0]), np.array([True]))
        assert h.genuine[1] == 1  # (-0.5, 0] is bin 1

    def test_counts_three_embeddings(self):
        es = EmbeddingSet(
            np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
            ["A", "A", "B"], ["E1", "E2", "E3"],
        )
        h = accumulate_all_pairs(es, bins=8)
        assert h.genuine_total == 1 and h.impostor_total == 2

    def test_merge_additivity(self):
        rng = np.random.default_rng(0)
        a, b = ScoreHistogramPair(16), ScoreHistogramPair(16)
        s1, s2 = rng.uniform(-1, 1, 50), rng.uniform(-1, 1, 30)
        m1, m2 = rng.random(50) < 0.5, rng.random(30) < 0.5
        a.add_scores(s1, m1)
        b.add_scores(s2, m2)
        both = ScoreHistogramPair(16)
        both.add_scores(np.concatenate([s1, s2]), np.concatenate([m1, m2]))
        merged = a.merge(b)
        np.testing.assert_array_equal(merged.genuine, both.genuine)
        np.testing.assert_array_equal(merged.impostor, both.impostor)

    def test_merge_bin_mismatch(self):
        with pytest.raises(ConfigError):
            ScoreHistogramPair(8).merge(ScoreHistogramPair(16))

    def test_block_size_invariance(self):
        es = random_unit_embeddings(57, 8, 10, seed=1)
        ref = accumulate_all_pairs(es, bins=1024, block=len(es))
        for block in (1, 7, 64):
            h = accumulate_all_pairs(es, bins=1024, block=block)
            np.testing.assert_array_equal(h.genuine, ref.genuine)
            np.testing.assert_array_equal(h.impostor, ref.impostor)

    def test_matches_double_loop_oracle(self):
        es = random_unit_embeddings(200, 16, 40, seed=2)
        h = accumulate_all_pairs(es, bins=512)
        scores, genuine = brute_force_scores(es)
        assert h.genuine_total == int(genuine.sum())
        assert h.impostor_total == int((~genuine).sum())
        assert h.genuine_total + h.impostor_total == 200 * 199 // 2
        # same histogram when binned by the oracle rule
        idx = np.clip(np.ceil((scores + 1) * 256).astype(int) - 1, 0, 511)
        gen = np.bincount(idx[genuine], minlength=512)
        imp = np.bincount(idx[~genuine], minlength=512)
        np.testing.assert_array_equal(h.genuine, gen)
        np.testing.assert_array_equal(h.impostor, imp)

    def test_too_few_embeddings(self):
        es = random_unit_embeddings(1, 4, 1)
        with pytest.raises(MetricUndefinedError):
            accumulate_all_pairs(es)


class TestEer:
    def test_separable_is_zero(self):
        es = clustered_embeddings(10, 4, 16, spread=1.0, noise=0.01, seed=3)
        h = accumulate_all_pairs(es, bins=1 << 14)
        e, thr = eer(h)
        assert e == pytest.approx(0.0, abs=1e-6)
        assert -1.0 <= thr <= 1.0

    def test_indistinguishable_is_half(self):
        es = random_unit_embeddings(120, 16, 12, seed=4)
        h = accumulate_all_pairs(es, bins=1 << 14)
        e, _ = eer(h)
        assert e == pytest.approx(0.5, abs=0.05)

    def test_needs_both_classes(self):
        h = ScoreHistogramPair(8)
        h.add_scores(np.array([0.1, 0.2]), np.array([True, True]))
        with pytest.raises(MetricUndefinedError):
            eer(h)

    def test_matches_sort_based_oracle(self):
        es = clustered_embeddings(20, 4, 8, spread=1.0, noise=0.4, seed=5)
        h = accumulate_all_pairs(es, bins=1 << 20)
        e, _ = eer(h)
        scores, genuine = brute_force_scores(es)
        gs, imps = scores[genuine], scores[~genuine]
        # exact sweep over all candidate thresholds
        cands = np.unique(scores)
        best = min(
            (abs(np.mean(imps > t) - np.mean(gs <= t)),
             (np.mean(imps > t) + np.mean(gs <= t)) / 2)
            for t in np.concatenate([[-1.0], cands])
        )[1]
        assert e == pytest.approx(best, abs=2e-3)


class TestTarFar:
    def test_far_one_accepts_everything(self):
        es = random_unit_embeddings(30, 8, 6, seed=6)
        h = accumulate_all_pairs(es, bins=256)
        r = tar_at_far(h, 1.0)
        assert r.tar == 1.0 and r.threshold == -1.0

    def test_conservative_no_overshoot(self):
        es = clustered_embeddings(15, 4, 8, spread=1.0, noise=0.3, seed=7)
        h = accumulate_all_pairs(es, bins=1 << 16)
        for far in (0.1, 0.01):
            r = tar_at_far(h, far)
            assert r.far_achieved <= far

    def test_unreliable_flag(self):
        es = random_unit_embeddings(10, 8, 5, seed=8)
        h = accumulate_all_pairs(es, bins=256)
        assert tar_at_far(h, 1e-4).unreliable
        assert not tar_at_far(h, 0.5).unreliable

    def test_invalid_target(self):
        es = random_unit_embeddings(10, 8, 5, seed=9)
        h = accumulate_all_pairs(es, bins=256)
        with pytest.raises(ConfigError):
            tar_at_far(h, 0.0)

    def test_matches_sort_based_oracle(self):
        es = clustered_embeddings(20, 4, 8, spread=1.0, noise=0.4, seed=10)
        bins = 1 << 20
        h = accumulate_all_pairs(es, bins=bins)
        scores, genuine = brute_force_scores(es)
        gs, imps = scores[genuine], scores[~genuine]
        for far in (0.05, 0.01):
            r = tar_at_far(h, far)
            oracle_tar = np.mean(gs > r.threshold)
            assert r.tar == pytest.approx(oracle_tar, abs=1e-12)
            assert np.mean(imps > r.threshold) <= far


class TestCurves:
    def test_endpoints_and_monotonicity(self):
        es = clustered_embeddings(12, 4, 8, spread=1.0, noise=0.3, seed=11)
        h = accumulate_all_pairs(es, bins=4096)
        pts = export_curves(h, n_points=128)
        assert pts[0].threshold == -1.0 and pts[-1].threshold == 1.0
        assert pts[0].far == 1.0 and pts[0].tar == 1.0
        assert pts[-1].far == 0.0 and pts[-1].tar == 0.0
        fars = [p.far for p in pts]
        tars = [p.tar for p in pts]
        assert all(a >= b for a, b in zip(fars, fars[1:]))
        assert all(a >= b for a, b in zip(tars, tars[1:]))
        for p in pts:
            assert p.frr == pytest.approx(1.0 - p.tar)


def test_report_fields():
    es = clustered_embeddings(12, 4, 8, spread=1.0, noise=0.3, seed=12)
    h = accumulate_all_pairs(es, bins=4096)
    rep = verification_report(h, far_targets=(1e-2, 1e-3))
    assert rep.n_genuine + rep.n_impostor == len(es) * (len(es) - 1) // 2
    assert rep.bins == 4096
    assert [t.far_target for t in rep.tar_at_far] == [1e-2, 1e-3]
    assert 0.0 <= rep.eer <= 1.0
