import os
import tempfile

import numpy as np
import pytest

from veride.cohort import write_exams
from veride.errors import ConfigError
from veride.features import DEFAULT_RANGES
from veride.synthgen import SynthParams, generate_cohort


def table_bytes(table):
    fd, path = tempfile.mkstemp(suffix=".csv")
    os.close(fd)
    write_exams(table, path)
    with open(path, "rb") as fh:
        data = fh.read()
    os.unlink(path)
    return data


def test_zero_noise_identical_exams():
    params = SynthParams(n_patients=5, exams_per_patient=(3, 3),
                         within_noise=0.0, drift_per_month=0.0, seed=1)
    table = generate_cohort(params).table
    for pid, exams in table.by_patient().items():
        base = exams[0].features
        for r in exams[1:]:
            np.testing.assert_array_equal(r.features, base)


def test_separability_intra_below_inter():
    params = SynthParams(n_patients=100, exams_per_patient=(4, 4),
                         within_noise=0.1, between_spread=1.0, seed=2)
    table = generate_cohort(params).table
    x = table.feature_matrix()
    pids = np.array(table.patient_ids())
    n = len(table)
    rng = np.random.default_rng(0)
    intra, inter = [], []
    for i in range(n):
        for j in range(i + 1, n):
            d = np.linalg.norm(x[i] - x[j])
            (intra if pids[i] == pids[j] else inter).append(d)
    intra, inter = np.array(intra), np.array(inter)
    assert np.mean(intra < np.median(inter)) > 0.99


def test_determinism_byte_identical():
    params = SynthParams(n_patients=20, exams_per_patient=(2, 5), seed=77)
    a = table_bytes(generate_cohort(params).table)
    b = table_bytes(generate_cohort(SynthParams(n_patients=20, exams_per_patient=(2, 5), seed=77)).table)
    assert a == b


def test_features_within_ranges():
    params = SynthParams(n_patients=50, exams_per_patient=(2, 4),
                         within_noise=0.5, between_spread=2.0, seed=5)
    res = generate_cohort(params)
    x = res.table.feature_matrix()
    assert np.all(x >= DEFAULT_RANGES.lows())
    assert np.all(x <= DEFAULT_RANGES.highs())
    assert res.clip_events >= 0


def test_dates_spaced_over_31_days():
    params = SynthParams(n_patients=10, exams_per_patient=(4, 4), seed=3)
    table = generate_cohort(params).table
    for exams in table.by_patient().values():
        for a, b in zip(exams, exams[1:]):
            assert (b.acquired_at - a.acquired_at).days >= 31


def test_noise_monotonicity():
    """More within-patient noise -> mean intra distance does not decrease."""
    def mean_intra(noise):
        params = SynthParams(n_patients=300, exams_per_patient=(4, 4),
                             within_noise=noise, seed=9)
        table = generate_cohort(params).table
        ds = []
        for exams in table.by_patient().values():
            for i in range(len(exams)):
                for j in range(i + 1, len(exams)):
                    ds.append(np.linalg.norm(exams[i].features - exams[j].features))
        assert len(ds) >= 1000
        return np.mean(ds)

    assert mean_intra(0.3) >= mean_intra(0.1)


def test_invalid_params():
    with pytest.raises(ConfigError):
        SynthParams(n_patients=0)
    with pytest.raises(ConfigError):
        SynthParams(n_patients=1, between_spread=0.0)
    with pytest.raises(ConfigError):
        SynthParams(n_patients=1, within_noise=-0.1)
