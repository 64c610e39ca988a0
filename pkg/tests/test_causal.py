import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_concepts.autodiff import Tensor
from causal_concepts.causal import (
    RankedConceptSet,
    causal_ranking,
    causal_rankings,
    intervention_masks,
    mean_rite_profile,
    read_rankings,
    rite,
    rite_matrix,
    write_rankings,
)
from causal_concepts.model import ConceptModel, ModelConfig
from causal_concepts.synthdata import MemeSample
from causal_concepts.vocabulary import ConceptVocabulary


class LatentOnlyModel(ConceptModel):
    """Logits depend on the latent alone: ``[0, L . u]``."""

    def __init__(self, u, **kw):
        super().__init__(ModelConfig(vocab_size=4, n_concepts=2, dim=2, heads=1, mlp_hidden=4, dynamic_routing=False, **kw))
        self.u = np.asarray(u, dtype=np.float64)

    def classify(self, P, text, image, latent):
        z = latent.reshape(latent.shape[0], 2) @ Tensor(np.stack([np.zeros(2), self.u], axis=1))
        return latent, z


def _toy_sample(sid=0):
    return MemeSample(sid, [1, 2], np.zeros((1, 2)), 1)


def _toy_vocab(emb=np.eye(2)):
    return ConceptVocabulary(("a", "b"), emb)


def test_hand_built_linear_toy_gives_half():
    # weights 0.5 each (sigmoid(0)); p1 = 0.9 with both concepts and 0.4 without concept 0
    u1 = 2 * math.log(0.4 / 0.6)
    u0 = 2 * math.log(9.0) - u1
    model = LatentOnlyModel([u0, u1])
    score = rite(_toy_sample(), model, _toy_vocab(), 0)
    assert score.target == 1
    assert score.rite == pytest.approx(0.5, abs=1e-12)


def test_concept_contributing_nothing_has_zero_effect(small_data, small_trained):
    emb = small_data.vocabulary.embeddings.copy()
    emb[3] = 0.0
    vocab = small_data.vocabulary.with_embeddings(emb)
    scores, _ = rite_matrix(small_trained, vocab, small_data.samples[:10])
    assert np.all(scores[:, 3] == 0.0)


def test_latent_free_model_has_zero_effects(small_data, small_trained):
    vocab = small_data.vocabulary.with_embeddings(np.zeros((6, 16)))
    scores, _ = rite_matrix(small_trained, vocab, small_data.samples[:10])
    assert np.array_equal(scores, np.zeros((10, 6)))
    ranked = causal_ranking(small_data.samples[0], small_trained, vocab)
    assert ranked.order == tuple(range(6))


def test_rite_is_bit_identical_on_recompute(small_data, small_trained):
    a = rite(small_data.samples[0], small_trained, small_data.vocabulary, 2)
    b = rite(small_data.samples[0], small_trained, small_data.vocabulary, 2)
    assert a == b


def test_rite_matches_direct_masked_forward(small_data, small_trained):
    samples = small_data.samples[:5]
    scores, targets = rite_matrix(small_trained, small_data.vocabulary, samples, batch_size=2)
    base = small_trained.predict_proba(samples, small_data.vocabulary)
    np.testing.assert_array_equal(targets, base.argmax(axis=1))
    for i in range(6):
        mask = np.ones(6)
        mask[i] = 0
        cut = small_trained.predict_proba(samples, small_data.vocabulary, mask)
        rows = np.arange(5)
        np.testing.assert_allclose(scores[:, i], np.abs(cut[rows, targets] - base[rows, targets]), atol=1e-15)


def test_scores_are_probability_changes(small_data, small_trained):
    scores, _ = rite_matrix(small_trained, small_data.vocabulary, small_data.samples)
    assert np.all((scores >= 0) & (scores <= 1))


def test_signed_scores(small_data, small_trained):
    samples = small_data.samples[:6]
    signed, _ = rite_matrix(small_trained, small_data.vocabulary, samples, signed=True)
    plain, _ = rite_matrix(small_trained, small_data.vocabulary, samples)
    assert np.array_equal(np.abs(signed), plain)


def test_unused_parameter_does_not_change_rite(small_data, small_trained):
    model = small_trained.copy()
    model.params["adv_latent_w"] = model.params["adv_latent_w"] + 5.0
    a, _ = rite_matrix(small_trained, small_data.vocabulary, small_data.samples[:5])
    b, _ = rite_matrix(model, small_data.vocabulary, small_data.samples[:5])
    assert np.array_equal(a, b)


def test_rite_concept_out_of_range(small_data, small_trained):
    with pytest.raises(IndexError):
        rite(small_data.samples[0], small_trained, small_data.vocabulary, 6)


def test_intervention_masks():
    m = intervention_masks(3)
    assert m.shape == (4, 3)
    assert np.array_equal(m[0], np.ones(3))
    assert np.array_equal(m[1:], 1 - np.eye(3))


# -- rankings -----------------------------------------------------------------------


def test_sorting_example():
    ranked = RankedConceptSet.from_scores([0.3, 0.1, 0.5], "causal")
    assert ranked.order == (2, 0, 1)
    assert ranked.scores == (0.5, 0.3, 0.1)
    assert ranked.top(2) == (2, 0)
    assert ranked.rank_of(1) == 2


def test_ties_go_to_smaller_id():
    assert RankedConceptSet.from_scores([0.2, 0.5, 0.2, 0.5], "ig").order == (1, 3, 0, 2)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5, 1.0]), min_size=1, max_size=12))
def test_ranking_is_a_total_order(scores):
    ranked = RankedConceptSet.from_scores(scores, "causal")
    assert sorted(ranked.order) == list(range(len(scores)))
    assert all(a >= b for a, b in zip(ranked.scores, ranked.scores[1:]))
    for a, b in zip(ranked.order, ranked.order[1:]):
        if scores[a] == scores[b]:
            assert a < b
    assert RankedConceptSet.from_scores(scores, "causal") == ranked


def test_planted_concepts_rank_better_than_the_median(small_data, small_trained):
    rankings = causal_rankings(small_data.samples, small_trained, small_data.vocabulary)
    ranks = [r.rank_of(c) for r, s in zip(rankings, small_data.samples) for c in s.gold_concepts]
    assert np.mean(ranks) < (small_data.vocabulary.size - 1) / 2


@pytest.mark.parametrize(
    "kw",
    [
        dict(order=(0, 1), scores=(1.0, 0.0), source="lime"),
        dict(order=(0, 0), scores=(1.0, 0.0), source="causal"),
        dict(order=(0, 1), scores=(1.0,), source="causal"),
    ],
)
def test_ranked_set_invariants(kw):
    with pytest.raises(ValueError):
        RankedConceptSet(**kw)


def test_non_finite_scores_are_rejected():
    with pytest.raises(ValueError):
        RankedConceptSet.from_scores([0.0, float("nan")], "causal")


def test_rankings_file_round_trip(tmp_path, small_data, small_trained):
    rankings = causal_rankings(small_data.samples[:4], small_trained, small_data.vocabulary)
    p = tmp_path / "r.jsonl"
    write_rankings(p, rankings)
    assert read_rankings(p) == rankings
    assert [r.sample_id for r in rankings] == [s.id for s in small_data.samples[:4]]


def test_rankings_file_error_names_the_line(tmp_path):
    p = tmp_path / "r.jsonl"
    p.write_text('{"sample_id": 0, "source": "causal", "order": [0, 1], "scores": [1.0, 0.0]}\n{"bad"\n')
    with pytest.raises(ValueError, match="line 2"):
        read_rankings(p)


# -- mean profile -------------------------------------------------------------------


def test_profile_of_one_sample(small_data, small_trained):
    s = small_data.samples[0]
    profile = mean_rite_profile([s], small_trained, small_data.vocabulary)
    scores, _ = rite_matrix(small_trained, small_data.vocabulary, [s])
    assert np.array_equal(profile.mean, scores[0])
    assert np.array_equal(profile.std, np.zeros(6))


def test_profile_of_duplicated_sample(small_data, small_trained):
    s = small_data.samples[1]
    one = mean_rite_profile([s], small_trained, small_data.vocabulary)
    ten = mean_rite_profile([s] * 10, small_trained, small_data.vocabulary)
    np.testing.assert_allclose(ten.mean, one.mean, rtol=1e-14)
    assert np.all(ten.std < 1e-15)


def test_profile_dispersion(small_data, small_trained):
    profile = mean_rite_profile(small_data.samples[:20], small_trained, small_data.vocabulary)
    assert profile.dispersion == pytest.approx(float(np.std(profile.mean)))


def test_profile_needs_samples(small_data, small_trained):
    with pytest.raises(ValueError):
        mean_rite_profile([], small_trained, small_data.vocabulary)
