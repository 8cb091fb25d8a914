"""Contrastive loss tests against literal scalar oracles."""

import numpy as np
import pytest

from oracles import ntxent_loss_scalar, two_positive_loss_scalar, unit_rows
from sampleid.loss import (
    loss,
    loss_from_embeddings,
    loss_gradient_check,
    positive_columns,
    similarity_matrix,
)


def random_embeddings(n, m, seed):
    rng = np.random.default_rng(seed)
    return unit_rows(rng.standard_normal((n, m))), unit_rows(
        rng.standard_normal((n, m))
    )


def test_matches_scalar_oracle():
    for seed, (n, m, tau) in enumerate(
        [(2, 4, 0.1), (3, 8, 0.05), (4, 16, 0.3), (8, 4, 1.0)]
    ):
        z_refs, z_arts = random_embeddings(n, m, seed)
        got = loss_from_embeddings(z_refs, z_arts, np.log(tau)).total
        want = two_positive_loss_scalar(z_refs, z_arts, tau)
        assert abs(got - want) < 1e-10


def test_ntxent_matches_scalar_oracle():
    for seed, (n, m, tau) in enumerate([(2, 4, 0.2), (5, 8, 0.07)]):
        z_refs, z_arts = random_embeddings(n, m, seed + 50)
        got = loss_from_embeddings(z_refs, z_arts, np.log(tau), "ntxent").total
        want = ntxent_loss_scalar(z_refs, z_arts, tau)
        assert abs(got - want) < 1e-10


def test_single_pair_loss_is_zero():
    z_refs, z_arts = random_embeddings(1, 8, 3)
    val = loss_from_embeddings(z_refs, z_arts, np.log(0.1))
    assert val.total == pytest.approx(0.0, abs=1e-14)


def test_identical_embeddings_closed_form():
    # all 2N embeddings equal: every similarity is 1/tau, so each index
    # contributes 2*log(2N-1) and the total is log(2N-1), independent of tau
    for n in (2, 5):
        e = unit_rows(np.random.default_rng(4).standard_normal((1, 6)))
        z = np.repeat(e, n, axis=0)
        for tau in (0.01, 0.5):
            val = loss_from_embeddings(z, z.copy(), np.log(tau))
            assert val.total == pytest.approx(np.log(2 * n - 1), abs=1e-12)
            assert val.grad_log_tau == pytest.approx(0.0, abs=1e-9)


def test_rotation_invariance():
    z_refs, z_arts = random_embeddings(6, 16, 5)
    q, _ = np.linalg.qr(np.random.default_rng(6).standard_normal((16, 16)))
    base = loss_from_embeddings(z_refs, z_arts, np.log(0.05)).total
    rot = loss_from_embeddings(z_refs @ q, z_arts @ q, np.log(0.05)).total
    assert abs(base - rot) < 1e-9


def test_positive_columns_wrap():
    pos = positive_columns(3)
    # rows 0..2 are refs, 3..5 arts; art block wraps modulo N
    np.testing.assert_array_equal(pos[:3], [[3, 4], [4, 5], [5, 3]])
    np.testing.assert_array_equal(pos[3:], [[0, 2], [1, 0], [2, 1]])
    nt = positive_columns(3, "ntxent")
    np.testing.assert_array_equal(nt[:, 0], nt[:, 1])
    with pytest.raises(ValueError):
        positive_columns(3, "triplet")


def test_gradients_match_finite_differences():
    for variant in ("two_positive", "ntxent"):
        report = loss_gradient_check(n=4, m=8, variant=variant, seed=1)
        assert report["max_rel_err"] < 1e-6


def test_pulling_a_positive_closer_reduces_loss():
    z_refs, z_arts = random_embeddings(4, 8, 7)
    base = loss_from_embeddings(z_refs, z_arts, np.log(0.1))
    step = 1e-3
    moved = unit_rows(z_arts.copy())
    moved[0] = unit_rows(z_arts[0] + step * (z_refs[0] - z_arts[0]))
    after = loss_from_embeddings(z_refs, moved, np.log(0.1)).total
    assert after < base.total


def test_loss_from_similarity_matrix():
    z_refs, z_arts = random_embeddings(3, 8, 8)
    sim = similarity_matrix(z_refs, z_arts, 0.2)
    assert sim.n == 3
    via_sim = loss(sim)
    via_emb = loss_from_embeddings(z_refs, z_arts, np.log(0.2))
    assert via_sim.total == pytest.approx(via_emb.total, abs=1e-12)
    assert via_sim.grad_log_tau == pytest.approx(via_emb.grad_log_tau, abs=1e-12)
    np.testing.assert_allclose(via_sim.per_index, via_emb.per_index, atol=1e-12)


def test_small_temperature_is_stable():
    z_refs, z_arts = random_embeddings(8, 16, 9)
    val = loss_from_embeddings(z_refs, z_arts, np.log(1e-3))
    assert np.isfinite(val.total)
    assert np.all(np.isfinite(val.grad_embeddings))
    assert np.isfinite(val.grad_log_tau)


def test_similarity_matrix_validation():
    z_refs, z_arts = random_embeddings(2, 4, 10)
    with pytest.raises(ValueError):
        similarity_matrix(z_refs, z_arts, 0.0)
    with pytest.raises(ValueError):
        similarity_matrix(2.0 * z_refs, z_arts, 0.1)
    with pytest.raises(ValueError):
        similarity_matrix(z_refs, z_arts[:1], 0.1)
