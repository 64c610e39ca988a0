import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_concepts.deconfound import (
    DeconfoundResult,
    build_counterfactual_bank,
    counterfactual_latents,
    deconfound,
    fit_reconstructor,
    latent_linearity_gap,
    nullspace_projector,
    project_vocabulary,
    reconstruction_residual,
)
from causal_concepts.synthdata import split

from conftest import small_model


def _static_unit_model(data):
    """No routing, sigmoid(40) == 1.0 exactly: every concept has total weight 1."""
    model = small_model(data, dynamic_routing=False)
    model.params["static_logit"][:] = 40.0
    return model


# -- counterfactual bank ------------------------------------------------------------


def test_masking_the_only_contributing_concept_gives_zero(small_data):
    model = _static_unit_model(small_data)
    emb = np.zeros_like(small_data.vocabulary.embeddings)
    emb[0] = small_data.vocabulary.embeddings[0]
    vocab = small_data.vocabulary.with_embeddings(emb)
    L_cf, _ = build_counterfactual_bank(model, vocab, small_data.samples[:5])
    assert np.array_equal(L_cf[:, 0], np.zeros(L_cf.shape[0]))


def test_orthonormal_unit_weight_bank_columns(small_data):
    model = _static_unit_model(small_data)
    C = small_data.vocabulary.embeddings
    L_cf, target = build_counterfactual_bank(model, small_data.vocabulary, small_data.samples[:5])
    assert np.array_equal(target, C.T)
    for i in range(C.shape[0]):
        np.testing.assert_allclose(L_cf[:, i], C.sum(axis=0) - C[i], atol=1e-14)


def test_bank_is_deterministic(small_data, small_trained):
    a = counterfactual_latents(small_trained, small_data.vocabulary, small_data.samples[:10])
    b = counterfactual_latents(small_trained, small_data.vocabulary, small_data.samples[:10], batch_size=3)
    assert np.array_equal(a, b)


def test_bank_rows_match_masked_forward(small_data, small_trained):
    lat = counterfactual_latents(small_trained, small_data.vocabulary, small_data.samples[:2])
    for i in range(6):
        mask = np.ones(6)
        mask[i] = 0
        trace = small_trained.run(small_data.samples[:2], small_data.vocabulary, mask)
        np.testing.assert_allclose(lat[:, i], trace.latent.data[:, 0], atol=1e-15)


def test_empty_slice_is_an_error(small_data, small_trained):
    with pytest.raises(ValueError):
        build_counterfactual_bank(small_trained, small_data.vocabulary, [])


# -- reconstructor ------------------------------------------------------------------


def test_identity_task_reconstructs_on_the_span():
    rng = np.random.default_rng(0)
    L = rng.normal(size=(8, 5))
    rec = fit_reconstructor(L, L)
    np.testing.assert_allclose(rec.weight @ L, L, atol=1e-6)
    assert rec.final_loss < 1e-12
    assert not rec.degenerate


def test_zero_bank_is_flagged_degenerate(caplog):
    C = np.random.default_rng(1).normal(size=(4, 3))
    with caplog.at_level(logging.WARNING):
        rec = fit_reconstructor(np.zeros((4, 3)), C)
    assert rec.degenerate
    assert rec.final_loss == pytest.approx(float((C * C).sum()))
    assert "zeros" in caplog.text


@pytest.mark.parametrize("seed", range(5))
def test_random_full_rank_bank_matches_pseudo_inverse(seed):
    rng = np.random.default_rng(seed)
    d, n = 12, 6
    L = rng.normal(size=(d, n))
    C = rng.normal(size=(d, n))
    rec = fit_reconstructor(L, C)
    assert rec.final_loss < 1e-6
    # gradient descent from zero heads for the minimum-norm solution; the stopping
    # rule leaves a loss around 1e-10, hence the loose weight tolerance
    np.testing.assert_allclose(rec.weight, C @ np.linalg.pinv(L), atol=1e-4)


def test_loss_history_is_non_increasing():
    rng = np.random.default_rng(2)
    rec = fit_reconstructor(rng.normal(size=(6, 4)), rng.normal(size=(6, 4)))
    assert np.all(np.diff(rec.loss_history) <= 1e-12)
    assert rec.steps == len(rec.loss_history) - 1


def test_column_mismatch_is_rejected():
    with pytest.raises(ValueError):
        fit_reconstructor(np.ones((3, 2)), np.ones((3, 4)))


# -- nullspace projector ------------------------------------------------------------


def test_zero_weight_gives_identity():
    proj = nullspace_projector(np.zeros((4, 4)))
    assert proj.rank == 0
    assert np.array_equal(proj.matrix, np.eye(4))


def test_rank_one_weight():
    e1 = np.zeros((4, 1))
    e1[0] = 1.0
    W = e1 @ e1.T
    proj = nullspace_projector(W)
    assert proj.rank == 1
    np.testing.assert_allclose(proj.matrix, np.eye(4) - W, atol=1e-15)
    assert np.array_equal(W @ proj.matrix, np.zeros((4, 4)))


@pytest.mark.parametrize("rank", [1, 3, 5])
def test_random_low_rank_weight_kills_every_projected_vector(rank):
    rng = np.random.default_rng(rank)
    W = rng.normal(size=(8, rank)) @ rng.normal(size=(rank, 8))
    proj = nullspace_projector(W)
    assert proj.rank == rank
    X = rng.normal(size=(8, 1000))
    ratio = np.linalg.norm(W @ proj.matrix @ X, axis=0) / np.linalg.norm(X, axis=0)
    assert ratio.max() < 1e-8
    assert np.linalg.norm(W @ proj.matrix) / np.linalg.norm(W) < 1e-8


def test_full_rank_weight_annihilates_with_warning(caplog):
    W = np.random.default_rng(0).normal(size=(5, 5))
    with caplog.at_level(logging.WARNING):
        proj = nullspace_projector(W)
    assert proj.rank == 5
    assert np.abs(proj.matrix).max() < 1e-12
    assert "full rank" in caplog.text


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 6))
def test_projector_is_idempotent_and_symmetric(seed, rank):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(6, rank)) @ rng.normal(size=(rank, 6)) if rank else np.zeros((6, 6))
    P = nullspace_projector(W).matrix
    assert np.linalg.norm(P @ P - P) < 1e-8
    assert np.linalg.norm(P - P.T) < 1e-8


def test_checksum_tracks_the_matrix():
    a = nullspace_projector(np.diag([1.0, 0.0, 0.0]))
    b = nullspace_projector(np.diag([1.0, 0.0, 0.0]))
    c = nullspace_projector(np.diag([0.0, 1.0, 0.0]))
    assert a.checksum() == b.checksum() != c.checksum()


# -- applying the projection --------------------------------------------------------


def test_identity_projector_leaves_vocabulary_unchanged(small_data):
    assert project_vocabulary(small_data.vocabulary, np.eye(16)) == small_data.vocabulary


def test_zero_projector_zeroes_concepts_and_latents(small_data, small_trained):
    vocab = project_vocabulary(small_data.vocabulary, np.zeros((16, 16)))
    assert np.array_equal(vocab.embeddings, np.zeros((6, 16)))
    trace = small_trained.run(small_data.samples[:3], vocab)
    assert np.array_equal(trace.latent.data, np.zeros((3, 1, 16)))


def test_projection_acts_on_concept_columns(small_data):
    rng = np.random.default_rng(0)
    P = rng.normal(size=(16, 16))
    out = project_vocabulary(small_data.vocabulary, P).embeddings
    np.testing.assert_allclose(out.T, P @ small_data.vocabulary.embeddings.T, atol=1e-13)


# -- the theorem on a trained model ---------------------------------------------------


@pytest.fixture(scope="module")
def deconfounded(small_data, small_trained):
    tr, te = split(small_data.samples)
    return deconfound(small_trained, small_data.vocabulary, tr), tr, te


def test_one_round_residual_is_below_tolerance(deconfounded):
    result, _, _ = deconfounded
    assert isinstance(result, DeconfoundResult)
    assert result.residuals[0] < 1e-5


def test_old_reconstructor_vanishes_on_rebuilt_test_bank(deconfounded, small_trained):
    result, _, te = deconfounded
    W = result.reconstructors[0].weight
    assert reconstruction_residual(W, small_trained, result.vocabulary, te) < 1e-5
    assert reconstruction_residual(W, small_trained, result.vocabulary, te, per_sample=True) < 1e-5


def test_report_fields(deconfounded):
    report = deconfounded[0].report()
    assert report["iterations"] == 1
    (round_,) = report["rounds"]
    assert set(round_) == {
        "rank", "reconstructor_loss", "reconstructor_steps", "degenerate_bank", "residual",
        "projector_sha256",
    }
    assert 0 <= round_["rank"] <= 16


def test_iterated_rounds_emit_one_residual_each(small_data, small_trained):
    tr, _ = split(small_data.samples)
    result = deconfound(small_trained, small_data.vocabulary, tr[:30], iterations=3)
    assert len(result.residuals) == len(result.projectors) == 3
    assert [p.iteration for p in result.projectors] == [1, 2, 3]
    P = result.projector
    np.testing.assert_allclose(
        result.vocabulary.embeddings, small_data.vocabulary.embeddings @ P.T, atol=1e-12
    )


def test_iterations_must_be_positive(small_data, small_trained):
    with pytest.raises(ValueError):
        deconfound(small_trained, small_data.vocabulary, small_data.samples, iterations=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_projection_commutes_with_weighted_sums(seed):
    rng = np.random.default_rng(seed)
    P = nullspace_projector(rng.normal(size=(8, 3)) @ rng.normal(size=(3, 8))).matrix
    concepts = rng.normal(size=(5, 8))
    weights = rng.random(size=5)
    assert latent_linearity_gap(P, concepts, weights) < 1e-13
