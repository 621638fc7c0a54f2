import numpy as np
import pytest

from conftest import clustered_embeddings, random_unit_embeddings
from veride.embeddings import EmbeddingSet
from veride.errors import CalibrationError, ConfigError, VerideError
from veride.openset import (
    Candidate,
    FusionStrategy,
    OpenSetProtocol,
    ProtocolSizes,
    SnormCalibration,
    build_protocol,
    calibrate_threshold,
    dir_at_far,
    fuse,
    make_strategy,
    shortlist_topk,
)


def small_gallery():
    return EmbeddingSet(np.eye(4), ["A", "B", "C", "D"], ["G1", "G2", "G3", "G4"])


class TestShortlist:
    def test_sorting_oracle(self):
        g = small_gallery()
        probe = np.array([0.1, 0.9, 0.5, 0.3])
        cands = shortlist_topk(probe, g, 3)
        assert [c.identity for c in cands] == ["B", "C", "D"]
        assert [c.score for c in cands] == pytest.approx([0.9, 0.5, 0.3])

    def test_tie_broken_by_identity(self):
        g = small_gallery()
        probe = np.array([0.5, 0.5, 0.0, 0.0])
        cands = shortlist_topk(probe, g, 2)
        assert [c.identity for c in cands] == ["A", "B"]

    def test_k_equals_gallery(self):
        g = small_gallery()
        cands = shortlist_topk(np.ones(4), g, 4)
        assert len(cands) == 4

    def test_k_out_of_range(self):
        g = small_gallery()
        with pytest.raises(ConfigError):
            shortlist_topk(np.ones(4), g, 5)
        with pytest.raises(ConfigError):
            shortlist_topk(np.ones(4), g, 0)


class TestFuse:
    def cands(self):
        return [
            Candidate("A", 0.9, 0),
            Candidate("B", 0.5, 1),
            Candidate("C", 0.1, 2),
        ]

    def test_bestofk(self):
        ident, score = fuse(self.cands(), FusionStrategy("bestofk"))
        assert (ident, score) == ("A", 0.9)

    def test_topkmean(self):
        ident, score = fuse(self.cands(), FusionStrategy("topkmean"))
        assert ident == "A"
        assert score == pytest.approx(0.5)

    def test_snorm_closed_form(self):
        cal = SnormCalibration(
            cohort=np.zeros((2, 2)),
            template_mean={"A": 0.1, "B": 0.3, "C": 0.0},
            template_std={"A": 0.2, "B": 0.1, "C": 0.5},
        )
        strat = FusionStrategy("snorm", cal)
        mu_p, sd_p = 0.2, 0.4
        ident, score = fuse(self.cands(), strat, probe_stats=(mu_p, sd_p))
        expected = {
            c.identity: 0.5 * ((c.score - mu_p) / sd_p
                               + (c.score - cal.template_mean[c.identity])
                               / cal.template_std[c.identity])
            for c in self.cands()
        }
        best = max(expected, key=expected.get)
        assert ident == best
        assert score == pytest.approx(expected[best])

    def test_snorm_affine_invariance(self):
        """The s-norm decision is unchanged when every raw score (candidate
        and cohort alike) is mapped through s -> a*s + b with a > 0."""
        rng = np.random.default_rng(0)
        gallery = clustered_embeddings(6, 1, 8, spread=1.0, noise=0.05, seed=1)
        cohort = random_unit_embeddings(40, 8, 40, seed=2)
        cal = SnormCalibration.fit(gallery, cohort)
        probe = rng.normal(size=8)
        probe /= np.linalg.norm(probe)
        cands = shortlist_topk(probe, gallery, 3)
        mu_p, sd_p = cal.probe_stats(probe)

        a, b = 3.7, -0.25
        cal2 = SnormCalibration(
            cohort=cal.cohort,
            template_mean={k: a * v + b for k, v in cal.template_mean.items()},
            template_std={k: a * v for k, v in cal.template_std.items()},
        )
        cands2 = [Candidate(c.identity, a * c.score + b, c.gallery_index)
                  for c in cands]
        id1, s1 = fuse(cands, FusionStrategy("snorm", cal),
                       probe_stats=(mu_p, sd_p))
        id2, s2 = fuse(cands2, FusionStrategy("snorm", cal2),
                       probe_stats=(a * mu_p + b, a * sd_p))
        assert id1 == id2
        assert s1 == pytest.approx(s2, abs=1e-12)

    def test_empty_candidates(self):
        with pytest.raises(ConfigError):
            fuse([], FusionStrategy("bestofk"))

    def test_snorm_needs_calibration(self):
        with pytest.raises(ConfigError):
            FusionStrategy("snorm")

    def test_unknown_strategy(self):
        with pytest.raises(ConfigError):
            FusionStrategy("meanofk")


class TestCalibrate:
    def test_fixture_6000_scores(self):
        rng = np.random.default_rng(3)
        scores = rng.normal(size=6000)
        cal = calibrate_threshold(scores, 1e-3)
        # floor(6000 * 1e-3) = 6 accepted scores allowed
        assert np.sum(scores >= cal.threshold) == 6
        top = np.sort(scores)[::-1]
        assert top[6] < cal.threshold <= np.nextafter(top[6], np.inf) or (
            top[5] >= cal.threshold > top[6]
        )
        assert not cal.unreliable

    def test_unreliable_small_sample(self):
        cal = calibrate_threshold(np.arange(10.0), 1e-3)
        assert cal.unreliable
        assert np.sum(np.arange(10.0) >= cal.threshold) == 0

    def test_far_one_accepts_all(self):
        scores = np.array([0.1, 0.5, 0.9])
        cal = calibrate_threshold(scores, 1.0)
        assert np.sum(scores >= cal.threshold) == 3

    def test_empty_errors(self):
        with pytest.raises(CalibrationError):
            calibrate_threshold([], 0.1)

    def test_invalid_target(self):
        with pytest.raises(ConfigError):
            calibrate_threshold([1.0], 0.0)

    def test_achieved_far_never_exceeds_target(self):
        rng = np.random.default_rng(4)
        scores = rng.normal(size=997)
        for far in (0.5, 0.1, 0.01, 0.003):
            cal = calibrate_threshold(scores, far)
            assert np.mean(scores >= cal.threshold) <= far


@pytest.fixture(scope="module")
def protocol():
    es = clustered_embeddings(40, 3, 16, spread=1.0, noise=0.3, seed=5)
    cohort_source = clustered_embeddings(30, 2, 16, spread=1.0, noise=0.3, seed=99)
    cohort_source = EmbeddingSet(
        cohort_source.vectors,
        [f"X{p}" for p in cohort_source.patient_ids],
        cohort_source.exam_ids,
    )
    sizes = ProtocolSizes(n_gallery=25, n_known_probes=20, n_impostor_probes=30)
    return build_protocol(es, shortlist_k=5, seed=7, sizes=sizes,
                          cohort_source=cohort_source, cohort_size=40)


class TestProtocol:
    def test_disjointness(self, protocol):
        gal = set(protocol.gallery.patient_ids)
        assert set(protocol.known_probes.patient_ids) <= gal
        assert not set(protocol.impostor_probes.patient_ids) & gal
        assert not set(protocol.cohort.patient_ids) & (
            gal | set(protocol.impostor_probes.patient_ids)
        )

    def test_sizes(self, protocol):
        assert len(protocol.gallery) == 25
        assert len(protocol.known_probes) == 20
        assert len(protocol.impostor_probes) == 30

    def test_invariant_violations_rejected(self):
        g = small_gallery()
        with pytest.raises(VerideError):
            OpenSetProtocol(g, g, g, 1)  # impostors overlap gallery

    def test_too_few_identities(self):
        es = clustered_embeddings(5, 3, 8, spread=1.0, noise=0.1, seed=6)
        with pytest.raises(ConfigError):
            build_protocol(es, 1, 0, ProtocolSizes(n_gallery=100))


class TestDir:
    def test_brute_force_oracle(self, protocol):
        strat = FusionStrategy("bestofk")
        far = 0.1
        res = dir_at_far(protocol, strat, far)
        # oracle: recompute decisions with plain numpy
        g = protocol.gallery
        imp_scores = np.max(protocol.impostor_probes.vectors @ g.vectors.T, axis=1)
        srt = np.sort(imp_scores)[::-1]
        allowed = int(np.floor(far * len(srt)))
        thr = np.nextafter(srt[allowed], np.inf) if allowed < len(srt) else srt[-1]
        known = protocol.known_probes
        scores = known.vectors @ g.vectors.T
        best = np.argmax(scores, axis=1)
        correct = [
            g.patient_ids[b] == known.patient_ids[i] for i, b in enumerate(best)
        ]
        accepted = scores[np.arange(len(known)), best] >= thr
        assert res.dir == pytest.approx(np.mean(np.array(correct) & accepted))
        assert res.threshold == pytest.approx(thr)

    def test_monotone_in_far(self, protocol):
        strat = FusionStrategy("topkmean")
        dirs = [dir_at_far(protocol, strat, f).dir for f in (0.01, 0.1, 0.5)]
        assert dirs[0] <= dirs[1] <= dirs[2]

    def test_strategies_agree_at_k1(self, protocol):
        p1 = OpenSetProtocol(
            protocol.gallery, protocol.known_probes, protocol.impostor_probes,
            shortlist_k=1, cohort=protocol.cohort, seed=0,
        )
        r_best = dir_at_far(p1, FusionStrategy("bestofk"), 0.1)
        r_mean = dir_at_far(p1, FusionStrategy("topkmean"), 0.1)
        assert r_best.dir == r_mean.dir

    def test_snorm_strategy_runs(self, protocol):
        strat = make_strategy("snorm", protocol)
        res = dir_at_far(protocol, strat, 0.1)
        assert 0.0 <= res.dir <= 1.0
        assert res.strategy == "snorm"

    def test_deterministic(self, protocol):
        strat = FusionStrategy("bestofk")
        a = dir_at_far(protocol, strat, 0.05)
        b = dir_at_far(protocol, strat, 0.05)
        assert a == b
