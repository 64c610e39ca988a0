import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_concepts import autodiff as ad
from causal_concepts.autodiff import Tensor
from causal_concepts.model import (
    ConceptModel,
    ModelConfig,
    TrainConfig,
    TrainingDiverged,
    cross_entropy,
    squash,
    squash_length,
    train,
    training_loss,
)
from causal_concepts.synthdata import generate, stack

from conftest import randomize_heads, small_generator, small_model


def _inputs(model, samples, vocab):
    P = model.tensors()
    tokens, image = stack(samples)
    return P, model.embed_text(P, tokens), Tensor(image), Tensor(vocab.embeddings)


# -- squash ---------------------------------------------------------------------------


def test_squash_of_zero_is_zero():
    assert np.array_equal(squash(np.zeros(4)), np.zeros(4))
    assert squash_length(Tensor(np.zeros((1, 4)))).item() == 0.0


def test_squash_of_unit_vector_has_length_half():
    s = np.array([0.6, 0.8])
    assert np.linalg.norm(squash(s)) == pytest.approx(0.5, abs=1e-15)
    assert squash_length(Tensor(s[None])).item() == 0.5


def test_squash_of_length_ten():
    s = np.array([6.0, 8.0])
    assert np.linalg.norm(squash(s)) == pytest.approx(100 / 101, rel=1e-14)


def test_squash_bounds_and_monotonicity_on_random_vectors():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(10_000, 8)) * rng.lognormal(sigma=2.0, size=(10_000, 1))
    lengths = np.linalg.norm(squash(s, axis=1), axis=1)
    assert np.all((lengths >= 0) & (lengths < 1))
    order = np.argsort(np.linalg.norm(s, axis=1))
    assert np.all(np.diff(lengths[order]) >= 0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 1e3), st.floats(0.0, 1e3))
def test_squash_length_strictly_increases(a, b):
    if a == b:
        return
    # axis-aligned, so the length is the one nonzero entry (norm() would underflow)
    la = np.abs(squash(np.array([a, 0.0]))).sum()
    lb = np.abs(squash(np.array([0.0, b]))).sum()
    # strict in exact arithmetic; floats tie once |s|^2 underflows or the length saturates
    assert (la < lb) == (a < b) or (la == lb and (a * a == b * b or la > 1 - 1e-5))


def test_squash_preserves_direction():
    s = np.array([3.0, -4.0])
    v = squash(s)
    assert np.allclose(v / np.linalg.norm(v), s / 5.0)


# -- routing ---------------------------------------------------------------------------


def _route_oracle(route_w, ctx, C):
    """Loop-based numpy routing for one sample."""
    n, M = C.shape[0], ctx.shape[0]
    t = np.stack([[route_w[i] @ ctx[j] for j in range(M)] for i in range(n)])  # n, M, d
    p = np.array([[t[i, j] @ C[i] for j in range(M)] for i in range(n)])
    b = np.exp(p - p.max(axis=0))
    b = b / b.sum(axis=0)
    assert np.allclose(b.sum(axis=0), 1.0)
    s = np.array([(b[i, :, None] * t[i]).mean(axis=0) for i in range(n)])
    return np.linalg.norm(squash(s, axis=1), axis=1)


def test_routing_matches_loop_oracle(small_data, small_untrained):
    model = small_untrained
    samples = small_data.samples[:3]
    P, text, image, C = _inputs(model, samples, small_data.vocabulary)
    _, ctx = model.content(P, text, image)
    w = model.route(P, ctx, C).data
    for r in range(len(samples)):
        oracle = _route_oracle(model.params["route_w"], ctx.data[r], small_data.vocabulary.embeddings)
        np.testing.assert_allclose(w[r], oracle, rtol=1e-12)


def test_dynamic_weights_lie_in_unit_interval(small_data, small_trained):
    trace = small_trained.run(small_data.samples[:20], small_data.vocabulary)
    w = trace.w_dynamic.data
    assert np.all((w >= 0) & (w < 1))


def test_routing_needs_a_token(small_untrained):
    P = small_untrained.tensors()
    with pytest.raises(ValueError):
        small_untrained.embed_text(P, np.zeros((1, 0), dtype=np.int64))


# -- latent ---------------------------------------------------------------------------


def _latent_model(n=2, d=3):
    return ConceptModel(ModelConfig(vocab_size=4, n_concepts=n, dim=d, heads=1, mlp_hidden=4))


def test_latent_all_masked_is_zero():
    model = _latent_model()
    P = model.tensors()
    L, _ = model.latent(P, Tensor(np.full((1, 2), 0.3)), Tensor(np.eye(2, 3)), np.zeros(2))
    assert np.array_equal(L.data, np.zeros((1, 1, 3)))


def test_latent_single_unit_weight_is_the_concept():
    model = _latent_model()
    P = model.tensors()
    # static weight sigmoid(0) = 0.5, dynamic 0.5
    c = np.array([[0.3, -1.2, 2.0], [5.0, 5.0, 5.0]])
    L, _ = model.latent(P, Tensor(np.full((1, 2), 0.5)), Tensor(c), np.array([1.0, 0.0]))
    assert np.array_equal(L.data[0, 0], c[0])


def test_latent_two_orthogonal_half_weights():
    model = _latent_model()
    P = model.tensors()
    # zero dynamic weights leave the static sigmoid(0) = 0.5
    L, _ = model.latent(P, Tensor(np.zeros((1, 2))), Tensor(np.eye(2, 3)))
    assert np.linalg.norm(L.data) == pytest.approx(0.5 * np.sqrt(2), rel=1e-15)


def test_intervention_changes_only_the_masked_term(small_data, small_untrained):
    model = small_untrained
    samples = small_data.samples[:4]
    C = small_data.vocabulary.embeddings
    n = C.shape[0]
    full = model.run(samples, small_data.vocabulary)
    for i in range(n):
        mask = np.ones(n)
        mask[i] = 0.0
        cut = model.run(samples, small_data.vocabulary, mask)
        assert np.array_equal(cut.m.data, full.m.data)
        assert np.array_equal(cut.w_dynamic.data, full.w_dynamic.data)
        w_i = full.w_dynamic.data[:, i] + full.w_static.data[i]
        np.testing.assert_allclose(
            cut.latent.data[:, 0] - full.latent.data[:, 0], -w_i[:, None] * C[i], atol=1e-14
        )


def test_intervention_leaves_parameters_untouched(small_data, small_untrained):
    before = {k: v.copy() for k, v in small_untrained.params.items()}
    small_untrained.run(small_data.samples[:2], small_data.vocabulary, np.zeros(6))
    assert all(np.array_equal(before[k], v) for k, v in small_untrained.params.items())


def test_masked_trace_reproduced_from_hand_built_latent(small_data, small_untrained):
    model = small_untrained
    samples = small_data.samples[:3]
    P, text, image, C = _inputs(model, samples, small_data.vocabulary)
    mask = np.array([1.0, 0.0, 1.0, 1.0, 0.0, 1.0])
    trace = model.forward(P, text, image, C, mask)
    w = (trace.w_dynamic.data + trace.w_static.data) * mask
    L = (w @ small_data.vocabulary.embeddings)[:, None, :]
    _, logits = model.classify(P, text, image, Tensor(L))
    np.testing.assert_allclose(ad.softmax(logits).data, trace.probs.data, rtol=1e-13)


# -- forward --------------------------------------------------------------------------


def test_untrained_model_is_undecided(small_data):
    probs = small_model(small_data).predict_proba(small_data.samples[:5], small_data.vocabulary)
    assert np.array_equal(probs, np.full((5, 2), 0.5))


def test_forward_is_deterministic(small_data, small_untrained):
    a = small_untrained.run(small_data.samples[:3], small_data.vocabulary)
    b = small_untrained.run(small_data.samples[:3], small_data.vocabulary)
    for name in ("m", "m_hat", "latent", "w_dynamic", "probs"):
        assert np.array_equal(getattr(a, name).data, getattr(b, name).data)


def test_probabilities_sum_to_one(small_data, small_trained):
    probs = small_trained.predict_proba(small_data.samples, small_data.vocabulary)
    assert np.all(np.abs(probs.sum(axis=1) - 1.0) < 1e-9)


def test_token_out_of_range(small_untrained):
    P = small_untrained.tensors()
    with pytest.raises(IndexError):
        small_untrained.embed_text(P, np.array([[small_untrained.config.vocab_size]]))


def test_no_dynamic_routing_zeroes_dynamic_weights(small_data):
    model = small_model(small_data, dynamic_routing=False)
    trace = model.run(small_data.samples[:3], small_data.vocabulary)
    assert np.array_equal(trace.w_dynamic.data, np.zeros((3, 6)))


def test_dim_must_divide_heads():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=3, n_concepts=2, dim=10, heads=4)


# -- adversarial heads ----------------------------------------------------------------


@pytest.mark.parametrize("lam", [1.0, 0.5, 3.0])
def test_adversarial_gradient_is_reversed_and_scaled(small_data, lam):
    model = randomize_heads(small_model(small_data, grl_lambda=lam), seed=3)
    samples = small_data.samples[:4]
    labels = np.array([s.label for s in samples])
    encoder = ["route_w", "tok_emb", "blk0.wq", "static_logit"]

    def grads(use_grl):
        P = model.tensors(encoder)
        tokens, image = stack(samples)
        trace = model.forward(
            P, model.embed_text(P, tokens), Tensor(image), Tensor(small_data.vocabulary.embeddings),
            adversarial=True,
        )
        if use_grl:
            logits_l, logits_m = trace.adv_latent_logits, trace.adv_content_logits
        else:
            flat = trace.latent.reshape(len(samples), model.config.dim)
            logits_l = flat @ P["adv_latent_w"] + P["adv_latent_b"]
            logits_m = trace.m @ P["adv_content_w"] + P["adv_content_b"]
        loss = cross_entropy(logits_l, labels) + cross_entropy(logits_m, labels)
        return ad.grad(loss, [P[k] for k in encoder])

    for g_rev, g_plain in zip(grads(True), grads(False)):
        # the two heads' contributions are summed in a different order, so allow round-off
        np.testing.assert_allclose(g_rev, -lam * g_plain, rtol=1e-12, atol=1e-15)


def test_training_loss_adds_weighted_heads(small_data):
    model = randomize_heads(small_model(small_data), seed=1)
    samples = small_data.samples[:4]
    tokens, image = stack(samples)
    labels = np.array([s.label for s in samples])
    vocab = small_data.vocabulary
    main, _ = training_loss(model, model.tensors(), tokens, image, labels, vocab, 0.0, 0.0)
    full, trace = training_loss(model, model.tensors(), tokens, image, labels, vocab, 2.0, 0.5)
    adv = 2.0 * cross_entropy(trace.adv_latent_logits, labels).item() + 0.5 * cross_entropy(
        trace.adv_content_logits, labels
    ).item()
    assert full.item() == pytest.approx(main.item() + adv, rel=1e-13)


# -- training -------------------------------------------------------------------------


def test_separable_batch_trains_to_high_accuracy():
    data = generate(small_generator(samples=32))
    model = small_model(data)
    result = train(data.samples, model, data.vocabulary, TrainConfig(epochs=200, batch_size=32, lr=1e-3))
    assert result.accuracy_curve[-1] >= 0.95
    assert np.mean(model.predict(data.samples, data.vocabulary) == [s.label for s in data.samples]) >= 0.95


def test_plain_classification_loss_decreases_monotonically_on_one_sample():
    data = generate(small_generator(samples=1))
    model = small_model(data)
    cfg = TrainConfig(epochs=30, batch_size=1, lr=1e-3, alpha=0.0, beta=0.0)
    curve = train(data.samples, model, data.vocabulary, cfg).loss_curve
    assert np.all(np.diff(curve) < 0)


def test_training_is_deterministic():
    data = generate(small_generator(samples=40))
    cfg = TrainConfig(epochs=3, batch_size=8, lr=1e-3)
    a, b = small_model(data), small_model(data)
    train(data.samples, a, data.vocabulary, cfg)
    train(data.samples, b, data.vocabulary, cfg)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_frozen_parameters_stay_put():
    data = generate(small_generator(samples=20))
    model = small_model(data, dynamic_routing=False)
    before = {k: v.copy() for k, v in model.params.items()}
    train(data.samples, model, data.vocabulary, TrainConfig(epochs=2, batch_size=10, lr=1e-3, alpha=0, beta=0))
    assert np.array_equal(model.params["route_w"], before["route_w"])
    assert np.array_equal(model.params["adv_latent_w"], before["adv_latent_w"])
    assert not np.array_equal(model.params["cls_w"], before["cls_w"])


def test_training_on_head_only():
    data = generate(small_generator(samples=20))
    model = small_model(data)
    before = {k: v.copy() for k, v in model.params.items()}
    train(data.samples, model, data.vocabulary, TrainConfig(epochs=1, batch_size=10, trainable=("cls_w", "cls_b")))
    changed = {k for k in model.params if not np.array_equal(model.params[k], before[k])}
    assert changed == {"cls_w", "cls_b"}


def test_divergence_is_reported():
    data = generate(small_generator(samples=16))
    model = small_model(data)
    with pytest.raises(TrainingDiverged, match="epoch"):
        train(data.samples, model, data.vocabulary, TrainConfig(epochs=50, batch_size=16, lr=1e8))


def test_empty_dataset_is_rejected(small_data):
    with pytest.raises(ValueError):
        train([], small_model(small_data), small_data.vocabulary, TrainConfig())


# -- checkpoint -----------------------------------------------------------------------


def test_checkpoint_round_trips_bit_exactly(tmp_path, small_trained):
    p = tmp_path / "model.json"
    small_trained.save(p)
    back = ConceptModel.load(p)
    assert back.config == small_trained.config
    assert set(back.params) == set(small_trained.params)
    assert all(np.array_equal(back.params[k], v) for k, v in small_trained.params.items())
    back.save(tmp_path / "again.json")
    assert p.read_bytes() == (tmp_path / "again.json").read_bytes()


def test_checkpoint_header_is_checked(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"format": "something else"}')
    with pytest.raises(ValueError, match="checkpoint"):
        ConceptModel.load(p)
