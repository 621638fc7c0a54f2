import numpy as np
import pytest

from veride.cohort import split_by_patient
from veride.embeddings import EmbeddingSet
from veride.identify import GallerySpec, identification_report
from veride.mlp import fit_norm_stats
from veride.synthgen import SynthParams, generate_cohort
from veride.training import TrainConfig, embed_table, train


def random_unit_embeddings(n, dim, n_identities, seed=0, dates=False):
    """Random unit vectors with identities assigned round-robin."""
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    pids = [f"I{i % n_identities:04d}" for i in range(n)]
    eids = [f"E{i:05d}" for i in range(n)]
    return EmbeddingSet(z, pids, eids)


def clustered_embeddings(n_identities, per_identity, dim, spread, noise, seed=0):
    """Identity centroids plus noise, renormalized; separability = spread/noise."""
    rng = np.random.default_rng(seed)
    vecs, pids, eids = [], [], []
    for i in range(n_identities):
        center = rng.normal(size=dim) * spread
        for j in range(per_identity):
            v = center + rng.normal(size=dim) * noise
            vecs.append(v / np.linalg.norm(v))
            pids.append(f"I{i:04d}")
            eids.append(f"I{i:04d}E{j}")
    return EmbeddingSet(np.array(vecs), pids, eids)


@pytest.fixture(scope="session")
def a3_cohort():
    """1,000 identities, 4 exams each, identity/noise scale ratio 10."""
    params = SynthParams(
        n_patients=1000,
        exams_per_patient=(4, 4),
        within_noise=0.1,
        between_spread=1.0,
        drift_per_month=0.002,
        seed=11,
    )
    table = generate_cohort(params).table
    manifest = split_by_patient(table, (0.5, 0.25, 0.25), 1, 3)
    tr = manifest.select(table, "train")
    va = manifest.select(table, "val")
    te = manifest.select(table, "test")
    norm = fit_norm_stats(tr.feature_matrix(), "train_global")
    return {"table": table, "train": tr, "val": va, "test": te, "norm": norm}


@pytest.fixture(scope="session")
def a3_arcface(a3_cohort):
    cfg = TrainConfig(loss="arcface", epochs=30, learning_rate=0.05,
                      batch_size=128, seed=5)
    result = train(cfg, a3_cohort["train"], a3_cohort["val"], a3_cohort["norm"])
    es = embed_table(result.params, a3_cohort["test"], a3_cohort["norm"])
    report = identification_report(es, GallerySpec("random_single", 0))
    return {"result": result, "test_embeddings": es, "ident": report}


@pytest.fixture(scope="session")
def a3_contrastive(a3_cohort):
    cfg = TrainConfig(loss="contrastive", epochs=30, learning_rate=0.05,
                      batch_size=128, margin=1.0, seed=5)
    result = train(cfg, a3_cohort["train"], a3_cohort["val"], a3_cohort["norm"])
    es = embed_table(result.params, a3_cohort["test"], a3_cohort["norm"])
    report = identification_report(es, GallerySpec("random_single", 0))
    return {"result": result, "test_embeddings": es, "ident": report}
