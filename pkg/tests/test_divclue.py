"""Diversity-regularized variants: collapse identities, repulsion behavior,
pre-search, and the uncertainty cost of diversity."""

import numpy as np
import pytest

from cluekit import clue, divclue, diversity as div, models


def _config(**kw):
    base = dict(delta=1.2, k=3, r=1.2, scheme="s1", lambda_x=0.05,
                lr=0.3, iters=15, seed=4)
    base.update(kw)
    return clue.ExperimentConfig(**base)


SPEC = div.DiversitySpec(metric="dpp", space="latent")


def _assert_cesets_bitwise_equal(a, b):
    assert len(a.candidates) == len(b.candidates)
    for ca, cb in zip(a.candidates, b.candidates):
        assert np.array_equal(ca.z, cb.z)
        assert np.array_equal(ca.x, cb.x)
        assert ca.cost == cb.cost
        assert ca.entropy == cb.entropy


def test_simultaneous_lambda0_is_bitwise_delta_clue(tiny_bundle):
    ds, bundle = tiny_bundle
    x0 = ds.train_inputs()[0]
    config = _config(lambda_d=0.0)
    record = divclue.nabla_clue_simultaneous(x0, bundle, config, SPEC)
    plain = clue.delta_clue(x0, bundle, config)
    _assert_cesets_bitwise_equal(record.ceset, plain)


def test_sequential_lambda0_is_bitwise_delta_clue(tiny_bundle):
    ds, bundle = tiny_bundle
    x0 = ds.train_inputs()[1]
    config = _config(lambda_d=0.0)
    record = divclue.nabla_clue_sequential(x0, bundle, config, SPEC)
    plain = clue.delta_clue(x0, bundle, config)
    _assert_cesets_bitwise_equal(record.ceset, plain)


def test_penalty_lambda0_is_bitwise_delta_clue(tiny_bundle):
    ds, bundle = tiny_bundle
    x0 = ds.train_inputs()[2]
    config = _config(lambda_d=0.0)
    record = divclue.nabla_clue_penalty(x0, bundle, config)
    plain = clue.delta_clue(x0, bundle, config)
    _assert_cesets_bitwise_equal(record.ceset, plain)


def test_constraints_hold_for_all_variants(tiny_bundle):
    ds, bundle = tiny_bundle
    x0 = ds.train_inputs()[3]
    config = _config(lambda_d=0.5)
    for run in (
        divclue.nabla_clue_simultaneous(x0, bundle, config, SPEC, trace=True),
        divclue.nabla_clue_sequential(x0, bundle, config, SPEC),
        divclue.nabla_clue_penalty(x0, bundle, config),
    ):
        for c in run.ceset.candidates:
            assert c.rho <= config.delta + 1e-6
        for traj in run.trajectories:
            for point in traj:
                assert np.linalg.norm(point - run.ceset.z0) <= config.delta + 1e-6


def test_joint_loss_length_and_metrics_table(tiny_bundle):
    ds, bundle = tiny_bundle
    x0 = ds.train_inputs()[4]
    config = _config(lambda_d=0.3)
    record = divclue.nabla_clue_simultaneous(x0, bundle, config, SPEC)
    assert len(record.joint_loss) == config.iters
    metrics = {(m, s) for m, s, _k, _v in record.metrics_rows}
    for m in div.ALL_METRICS:
        assert any(key[0] == m for key in metrics)


def test_diversity_weight_increases_spread(blobs, blobs_bundle):
    x0 = blobs.test_inputs()[2]
    config0 = _config(delta=2.0, r=2.0, k=4, lambda_d=0.0, iters=50, seed=5)
    config2 = _config(delta=2.0, r=2.0, k=4, lambda_d=2.0, iters=50, seed=5)
    r0 = divclue.nabla_clue_simultaneous(x0, blobs_bundle, config0, SPEC)
    r2 = divclue.nabla_clue_simultaneous(x0, blobs_bundle, config2, SPEC)
    dpp0 = dict(((m, s), v) for m, s, _k, v in r0.metrics_rows)[("dpp", "latent")]
    dpp2 = dict(((m, s), v) for m, s, _k, v in r2.metrics_rows)[("dpp", "latent")]
    assert dpp2 > dpp0


def test_diversity_costs_some_certainty(blobs, blobs_bundle):
    """Mean terminal entropy at lambda_d=2 exceeds the lambda_d=0 value."""
    x0 = blobs.test_inputs()[2]
    means = []
    for lam in (0.0, 2.0):
        config = _config(delta=2.0, r=2.0, k=4, lambda_d=lam, iters=50, seed=5)
        record = divclue.nabla_clue_simultaneous(x0, blobs_bundle, config, SPEC)
        means.append(np.mean([c.entropy for c in record.ceset.candidates]))
    assert means[1] > means[0]


def test_penalty_clamp_value():
    z = np.zeros(3)
    found = [np.zeros(3)]
    val = divclue.penalty_value(z, found, lambda_d=2.0)
    assert val == 2.0 / divclue.PENALTY_EPS
    assert np.isfinite(val)


def test_penalty_diversity_saturates_in_lambda(tiny_bundle):
    """The inverse-distance repulsion stops buying diversity almost
    immediately: raising the weight 4x past a small value adds nearly
    nothing, unlike optimizing a diversity metric directly."""
    ds, bundle = tiny_bundle
    x0 = ds.train_inputs()[5]
    values = {}
    for lam in (0.0, 0.5, 2.0):
        config = _config(delta=1.5, r=1.5, k=4, lambda_d=lam, iters=30, seed=3)
        record = divclue.nabla_clue_penalty(x0, bundle, config)
        table = dict(((m, s), v) for m, s, _k, v in record.metrics_rows)
        values[lam] = table[("dpp", "latent")]
    first_gain = values[0.5] - values[0.0]
    later_gain = values[2.0] - values[0.5]
    assert later_gain < 0.05
    assert later_gain < first_gain


def test_presearch_identity_at_zero_steps(tiny_bundle):
    _, bundle = tiny_bundle
    rng = np.random.default_rng(0)
    z0 = np.zeros(bundle.m_latent)
    starts = [z0 + 0.3 * rng.standard_normal(bundle.m_latent) for _ in range(3)]
    out = divclue.diversity_presearch(starts, SPEC, 0, 1.0, z0, bundle=bundle)
    for a, b in zip(starts, out):
        assert np.array_equal(a, b)


def test_presearch_increases_diversity(tiny_bundle):
    _, bundle = tiny_bundle
    rng = np.random.default_rng(1)
    z0 = np.zeros(bundle.m_latent)
    starts = [z0 + 0.1 * rng.standard_normal(bundle.m_latent) for _ in range(3)]
    before = div.dpp(np.stack(starts))
    for n_i in (1, 5, 10):
        out = divclue.diversity_presearch(starts, SPEC, n_i, 1.0, z0, bundle=bundle)
        after = div.dpp(np.stack(out))
        assert after >= before - 1e-12
        for z in out:
            assert np.linalg.norm(z - z0) <= 1.0 + 1e-9


def test_presearch_pushes_two_points_apart(tiny_bundle):
    """k=2 with many ascent steps approaches antipodal positions on the sphere."""
    _, bundle = tiny_bundle
    z0 = np.zeros(bundle.m_latent)
    rng = np.random.default_rng(2)
    starts = [z0 + 0.05 * rng.standard_normal(bundle.m_latent) for _ in range(2)]
    dists = []
    for n_i in (0, 2, 5, 10, 30, 60):
        out = divclue.diversity_presearch(starts, SPEC, n_i, 1.0, z0, bundle=bundle)
        dists.append(np.linalg.norm(out[0] - out[1]))
    assert all(b >= a - 1e-12 for a, b in zip(dists, dists[1:]))
    assert dists[-1] > 1.9  # close to the antipodal distance 2r


def test_presearch_rejects_label_metrics(tiny_bundle):
    _, bundle = tiny_bundle
    spec = div.DiversitySpec(metric="distinct_labels")
    with pytest.raises(ValueError, match="differentiable"):
        divclue.diversity_presearch([np.zeros(3)], spec, 5, 1.0, np.zeros(3),
                                    bundle=bundle)


def test_sequential_spreads_candidates(tiny_bundle):
    ds, bundle = tiny_bundle
    x0 = ds.train_inputs()[6]
    apds = []
    for lam in (0.0, 2.0):
        config = _config(delta=1.5, r=1.5, k=4, lambda_d=lam, iters=30, seed=2)
        record = divclue.nabla_clue_sequential(x0, bundle, config, SPEC)
        table = dict(((m, s), v) for m, s, _k, v in record.metrics_rows)
        apds.append(table[("apd", "latent")])
    assert apds[1] > apds[0]


def test_record_json_export(tiny_bundle):
    ds, bundle = tiny_bundle
    x0 = ds.train_inputs()[7]
    config = _config(lambda_d=0.2)
    record = divclue.nabla_clue_simultaneous(x0, bundle, config, SPEC)
    payload = divclue.record_to_json(record)
    assert len(payload["joint_loss"]) == config.iters
    assert len(payload["ceset"]["candidates"]) == config.k
    assert {row["metric"] for row in payload["metrics"]} == set(div.ALL_METRICS)
