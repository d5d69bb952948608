"""Synthetic generators, certainty partitioning, and dataset persistence."""

import numpy as np
import pytest

from cluekit import data, models


def test_blobs_ranges_and_split():
    ds = data.gen_blobs(c=4, d=10, n=300, spread=0.2, seed=1)
    assert ds.inputs.shape == (300, 10)
    assert ds.inputs.min() >= 0.0 and ds.inputs.max() <= 1.0
    assert set(np.unique(ds.labels)) == {0, 1, 2, 3}
    assert set(np.unique(ds.train_labels())) == {0, 1, 2, 3}
    n_test = np.sum(ds.split == "test")
    assert abs(n_test / 300 - 0.2) < 0.05


def test_minidigits_ranges_and_balance():
    ds = data.gen_minidigits(n=500, seed=2)
    assert ds.inputs.shape == (500, 64)
    assert ds.inputs.min() >= 0.0 and ds.inputs.max() <= 1.0
    counts = np.bincount(ds.labels, minlength=10)
    assert counts.min() >= 45  # near-balanced classes


def test_regeneration_is_bitwise(tmp_path):
    for ds in (data.gen_blobs(c=3, d=6, n=100, spread=0.15, seed=9),
               data.gen_minidigits(n=120, seed=9)):
        again = data.regenerate(ds.generator)
        assert np.array_equal(ds.inputs, again.inputs)
        assert np.array_equal(ds.labels, again.labels)
        assert np.array_equal(ds.split, again.split)


def test_generation_seed_sensitivity():
    a = data.gen_blobs(c=3, d=6, n=100, spread=0.15, seed=0)
    b = data.gen_blobs(c=3, d=6, n=100, spread=0.15, seed=1)
    assert not np.array_equal(a.inputs, b.inputs)


def test_dataset_persistence_roundtrip(tmp_path):
    ds = data.gen_blobs(c=3, d=6, n=80, spread=0.15, seed=4)
    where = tmp_path / "ds"
    data.save_dataset(ds, str(where))
    loaded = data.load_dataset(str(where))
    assert np.array_equal(ds.inputs, loaded.inputs)
    assert np.array_equal(ds.labels, loaded.labels)
    assert np.array_equal(ds.split, loaded.split)
    assert ds.generator == loaded.generator


def test_export_csv(tmp_path):
    ds = data.gen_blobs(c=3, d=6, n=50, spread=0.15, seed=5)
    path = tmp_path / "ds.csv"
    data.export_csv(ds, str(path))
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 51  # header + one row per point


def test_partition_matches_brute_force_recount(blobs, blobs_bundle):
    lo, hi = data.default_taus(blobs_bundle)
    part = data.partition_by_certainty(blobs, blobs_bundle, lo, hi)
    ents = np.array([models.predict_entropy(blobs_bundle, x)
                     for x in blobs.train_inputs()])
    assert np.array_equal(part.entropies, ents)
    assert np.sum(part.flags == "certain") == np.sum(ents <= lo)
    assert np.sum(part.flags == "uncertain") == np.sum(ents > hi)
    for c in range(4):
        mask = (ents <= lo) & (blobs.train_labels() == c)
        assert len(part.certain_of_class(c)) == np.sum(mask)


def test_partition_every_point_gets_one_flag(blobs, blobs_bundle):
    lo, hi = data.default_taus(blobs_bundle)
    part = data.partition_by_certainty(blobs, blobs_bundle, lo, hi)
    assert set(np.unique(part.flags)) <= {"certain", "uncertain", "mid"}
    assert len(part.flags) == len(blobs.train_labels())


def test_partition_tau_extremes(blobs, blobs_bundle):
    part = data.partition_by_certainty(blobs, blobs_bundle, np.inf, np.inf)
    assert np.all(part.flags == "certain")
    with pytest.warns(UserWarning, match="no certain points"):
        part = data.partition_by_certainty(blobs, blobs_bundle, -1.0, np.inf)
    assert np.sum(part.flags == "uncertain") == 0
    assert np.sum(part.flags == "certain") == 0


def test_partition_is_deterministic(blobs, blobs_bundle):
    lo, hi = data.default_taus(blobs_bundle)
    a = data.partition_by_certainty(blobs, blobs_bundle, lo, hi)
    b = data.partition_by_certainty(blobs, blobs_bundle, lo, hi)
    assert np.array_equal(a.flags, b.flags)
    assert np.array_equal(a.entropies, b.entropies)


def test_default_taus_are_training_percentiles(blobs_bundle):
    lo, hi = data.default_taus(blobs_bundle)
    assert 0.0 <= lo <= hi
    pct = blobs_bundle.ensemble_report.entropy_percentiles
    assert lo == pct["20"] and hi == pct["80"]
