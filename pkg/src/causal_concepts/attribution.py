"""Gradient-based attribution baselines over the concept, text and image matrices.

The core methods work on any batched function ``fn(inputs) -> Tensor[K]``
where ``inputs`` is a list of tensors with a leading batch axis ``K``.  The
model adapter :func:`sample_function` turns a sample into such a function of
``[C, T, V]`` (concept matrix, token embeddings, image regions) whose output is
the predicted-class probability.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .causal import RankedConceptSet
from .model import ConceptModel
from .serialization import dumps
from .synthdata import MemeSample
from .vocabulary import ConceptVocabulary

METHODS = ("saliency", "inputxgrad", "ig", "gradshap", "deeplift", "deepliftshap")
BATCH = 128

BatchedFn = Callable[[list[Tensor]], Tensor]


@dataclass(frozen=True)
class AttributionConfig:
    method: str = "ig"
    baseline: str = "zero"  # zero | gaussian
    baseline_std: float = 0.1
    baseline_count: int = 1
    steps: int = 128
    samples: int = 16
    rule: str = "gauss-legendre"  # or midpoint
    absolute: bool = False
    seed: int = 42

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attribution method {self.method!r}")
        if self.baseline not in ("zero", "gaussian"):
            raise ValueError(f"unknown baseline policy {self.baseline!r}")
        if self.steps < 8:
            raise ValueError("steps must be >= 8")
        if self.samples < 2:
            raise ValueError("samples must be >= 2")
        if self.baseline_count < 1:
            raise ValueError("baseline_count must be >= 1")
        if self.rule not in ("gauss-legendre", "midpoint"):
            raise ValueError(f"unknown quadrature rule {self.rule!r}")

    @classmethod
    def for_method(cls, method: str, **overrides) -> AttributionConfig:
        """Per-method defaults: SHAP variants sample Gaussian baselines."""
        base = {"method": method}
        if method in ("gradshap", "deepliftshap"):
            base["baseline"] = "gaussian"
        base.update(overrides)
        return cls(**base)


@dataclass
class Attribution:
    """Per-row scores for one sample plus the quantities needed for completeness."""

    method: str
    sample_id: int
    target: int
    concept: np.ndarray
    text: np.ndarray
    image: np.ndarray
    output: float = 0.0
    baseline_output: float = 0.0
    raw: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def total(self) -> float:
        return float(sum(r.sum() for r in self.raw))

    def completeness_gap(self) -> float:
        return abs(self.total - (self.output - self.baseline_output))

    def ranking(self) -> RankedConceptSet:
        return attribution_ranking(self.concept, self.method, self.sample_id)

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "method": self.method,
            "target": self.target,
            "concept": self.concept,
            "text": self.text,
            "image": self.image,
        }


# -- generic machinery ----------------------------------------------------------


def _evaluate(fn: BatchedFn, points: Sequence[np.ndarray], need_grad: bool = True):
    """Values ``(K,)`` and input gradients for a stack of points, chunked."""
    K = points[0].shape[0]
    values, grads = [], [[] for _ in points]
    for start in range(0, K, BATCH):
        xs = [Tensor(p[start : start + BATCH], requires_grad=need_grad) for p in points]
        out = fn(xs)
        values.append(out.data)
        if need_grad:
            for acc, g in zip(grads, ad.grad(ad.sum(out), xs)):
                acc.append(g)
    values = np.concatenate(values)
    if not need_grad:
        return values, None
    return values, [np.concatenate(g) for g in grads]


def _stack(x: Sequence[np.ndarray], k: int) -> list[np.ndarray]:
    return [np.broadcast_to(a, (k, *a.shape)).copy() for a in x]


def quadrature(steps: int, rule: str = "gauss-legendre") -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on [0, 1]."""
    if steps < 1:
        raise ValueError("need at least one quadrature node")
    if rule == "gauss-legendre":
        t, w = np.polynomial.legendre.leggauss(steps)
        return (t + 1.0) / 2.0, w / 2.0
    if rule == "midpoint":
        return (np.arange(steps) + 0.5) / steps, np.full(steps, 1.0 / steps)
    raise ValueError(f"unknown quadrature rule {rule!r}")


def gradient(fn: BatchedFn, x: Sequence[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    values, grads = _evaluate(fn, _stack(x, 1))
    return float(values[0]), [g[0] for g in grads]


def saliency(fn: BatchedFn, x: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Absolute input gradient."""
    _, g = gradient(fn, x)
    return [np.abs(a) for a in g]


def input_x_gradient(fn: BatchedFn, x: Sequence[np.ndarray]) -> list[np.ndarray]:
    _, g = gradient(fn, x)
    return [a * b for a, b in zip(x, g)]


def integrated_gradients(
    fn: BatchedFn,
    x: Sequence[np.ndarray],
    baseline: Sequence[np.ndarray],
    steps: int = 128,
    rule: str = "gauss-legendre",
) -> tuple[list[np.ndarray], float, float]:
    """Straight-line path integral from ``baseline`` to ``x``.

    Returns ``(attributions, F(x), F(baseline))``.
    """
    for a, b in zip(x, baseline):
        if a.shape != b.shape:
            raise ValueError(f"baseline shape {b.shape} does not match input {a.shape}")
    alphas, weights = quadrature(steps, rule)
    deltas = [a - b for a, b in zip(x, baseline)]
    path = [
        b[None] + alphas.reshape(-1, *([1] * a.ndim)) * d[None]
        for a, b, d in zip(x, baseline, deltas)
    ]
    # the two endpoints ride along in the same batch for the completeness check
    path = [np.concatenate([p, a[None], b[None]]) for p, a, b in zip(path, x, baseline)]
    values, grads = _evaluate(fn, path)
    attrs = [
        d * np.tensordot(weights, g[:steps], axes=1) for d, g in zip(deltas, grads)
    ]
    return attrs, float(values[steps]), float(values[steps + 1])


def gradient_shap(
    fn: BatchedFn,
    x: Sequence[np.ndarray],
    baselines: Sequence[np.ndarray],
    alphas: np.ndarray,
) -> list[np.ndarray]:
    """Mean of ``(x - b_j) * grad F(b_j + a_j (x - b_j))`` over sampled pairs.

    ``baselines`` holds one stacked array ``(K, ...)`` per input.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    deltas = [a[None] - b for a, b in zip(x, baselines)]
    points = [
        b + alphas.reshape(-1, *([1] * a.ndim)) * d for a, b, d in zip(x, baselines, deltas)
    ]
    _, grads = _evaluate(fn, points)
    return [(d * g).mean(axis=0) for d, g in zip(deltas, grads)]


def deeplift(
    fn: BatchedFn, x: Sequence[np.ndarray], references: Sequence[np.ndarray]
) -> tuple[list[np.ndarray], float, float]:
    """Rescale-rule DeepLIFT averaged over stacked references ``(K, ...)``.

    Returns ``(attributions, F(x), mean F(reference))``.
    """
    K = references[0].shape[0]
    acc = [np.zeros_like(a) for a in x]
    out_total, ref_total = 0.0, 0.0
    for start in range(0, K, BATCH):
        refs = [r[start : start + BATCH] for r in references]
        k = refs[0].shape[0]
        xs = [Tensor(a, requires_grad=True) for a in _stack(x, k)]
        rs = [Tensor(r, requires_grad=True) for r in refs]
        out, out_ref = ad.sum(fn(xs)), ad.sum(fn(rs))
        mults = ad.deeplift_multipliers(out, out_ref, xs, rs)
        for a_acc, m, t, r in zip(acc, mults, xs, rs):
            a_acc += (m * (t.data - r.data)).sum(axis=0)
        out_total += out.item()
        ref_total += out_ref.item()
    return [a / K for a in acc], out_total / K, ref_total / K


# -- model adapter ----------------------------------------------------------------


def sample_inputs(model: ConceptModel, vocabulary: ConceptVocabulary, sample: MemeSample) -> list[np.ndarray]:
    """``[C, T, V]``: concept matrix, token embeddings and image regions."""
    text = model.params["tok_emb"][sample.text_tokens]
    return [vocabulary.embeddings.copy(), text.copy(), sample.image_feats.copy()]


def predicted_class(model: ConceptModel, vocabulary: ConceptVocabulary, sample: MemeSample) -> int:
    return int(model.predict_proba([sample], vocabulary)[0].argmax())


def sample_function(model: ConceptModel, target: int) -> BatchedFn:
    """Batched ``F(C, T, V) = p_target`` with constant model parameters."""
    P = model.tensors()

    def fn(xs: list[Tensor]) -> Tensor:
        C, T, V = xs
        return model.forward(P, T, V, C).probs[:, target]

    return fn


def _baselines(x, config: AttributionConfig, rng: np.random.Generator, count: int) -> list[np.ndarray]:
    if config.baseline == "zero":
        return [np.zeros((count, *a.shape)) for a in x]
    return [config.baseline_std * rng.standard_normal((count, *a.shape)) for a in x]


def attribute(
    model: ConceptModel,
    vocabulary: ConceptVocabulary,
    sample: MemeSample,
    config: AttributionConfig,
    target: int | None = None,
) -> Attribution:
    """Run one method on one sample; rows are summed over the embedding axis."""
    if target is None:
        target = predicted_class(model, vocabulary, sample)
    fn = sample_function(model, target)
    x = sample_inputs(model, vocabulary, sample)
    rng = np.random.default_rng([config.seed, sample.id])
    out = ref = 0.0
    method = config.method
    if method == "saliency":
        raw = saliency(fn, x)
    elif method == "inputxgrad":
        raw = input_x_gradient(fn, x)
    elif method == "ig":
        raw = [np.zeros_like(a) for a in x]
        outs = []
        bases = _baselines(x, config, rng, config.baseline_count)
        for j in range(config.baseline_count):
            attrs, out, r = integrated_gradients(fn, x, [b[j] for b in bases], config.steps, config.rule)
            raw = [acc + a for acc, a in zip(raw, attrs)]
            outs.append(r)
        raw = [a / config.baseline_count for a in raw]
        ref = float(np.mean(outs))
    elif method == "gradshap":
        bases = _baselines(x, config, rng, config.samples)
        alphas = rng.random(config.samples)
        raw = gradient_shap(fn, x, bases, alphas)
    elif method == "deeplift":
        raw, out, ref = deeplift(fn, x, _baselines(x, config, rng, 1))
    else:
        raw, out, ref = deeplift(fn, x, _baselines(x, config, rng, config.samples))
    agg = np.abs if (config.absolute or method == "saliency") else (lambda a: a)
    rows = [agg(a).sum(axis=-1) for a in raw]
    if method in ("saliency", "inputxgrad", "gradshap"):
        out, _ = gradient(fn, x)
    return Attribution(method, sample.id, target, rows[0], rows[1], rows[2], out, ref, raw)


def attribution_ranking(scores: Sequence[float], source: str, sample_id: int = -1) -> RankedConceptSet:
    return RankedConceptSet.from_scores(scores, source, sample_id)


# -- per-concept separate path (causal-equivalence setup) ---------------------------


def concept_integrated_gradients(
    model: ConceptModel,
    vocabulary: ConceptVocabulary,
    sample: MemeSample,
    steps: int = 128,
    rule: str = "gauss-legendre",
    target: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """IG for each concept row separately, zero baseline, everything else fixed.

    Routing agreement reads the fixed vocabulary so that zeroing ``c_i`` on the
    path only removes its term from the latent, the same change a mask makes.
    Returns ``(attr[n], delta[n])`` with ``delta_i = F(x) - F(c_i = 0)``.
    """
    n, d = vocabulary.size, vocabulary.dim
    P = model.tensors()
    C0 = vocabulary.embeddings
    tokens = sample.text_tokens[None]
    text = model.embed_text(P, tokens)
    image = Tensor(sample.image_feats[None])
    trace = model.forward(P, text, image, Tensor(C0))
    if target is None:
        target = int(trace.probs.data[0].argmax())
    w = (trace.w_dynamic.data + trace.w_static.data)[0]

    alphas, weights = quadrature(steps, rule)
    # rows (i, node) followed by rows (i, alpha=0) that give F at the baseline
    concept_ids = np.repeat(np.arange(n), steps + 1)
    scale = np.tile(np.concatenate([alphas, [0.0]]), n)
    K = concept_ids.size
    values = np.empty(K)
    grads = np.empty((K, d))
    for start in range(0, K, BATCH):
        ids = concept_ids[start : start + BATCH]
        a = scale[start : start + BATCH]
        k = ids.size
        ci = Tensor(a[:, None] * C0[ids], requires_grad=True)
        # latent with row i replaced by ci: L = sum_j w_j c_j + w_i (ci - c_i)
        base = np.tile(w @ C0, (k, 1)) - w[ids, None] * C0[ids]
        L = Tensor(base) + ci * Tensor(w[ids, None])
        L = L.reshape(k, 1, d)
        T = ad.broadcast_to(text, (k, *text.shape[1:]))
        V = ad.broadcast_to(image, (k, *image.shape[1:]))
        _, logits = model.classify(P, T, V, L)
        p = ad.softmax(logits, axis=-1)[:, target]
        values[start : start + k] = p.data
        grads[start : start + k] = ad.grad(ad.sum(p), [ci])[0]
    values = values.reshape(n, steps + 1)
    grads = grads.reshape(n, steps + 1, d)
    attr = np.einsum("s,isd,id->i", weights, grads[:, :steps], C0)
    delta = float(trace.probs.data[0, target]) - values[:, steps]
    return attr, delta


def write_attributions(path, attributions: Sequence[Attribution]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a in attributions:
            fh.write(dumps(a.to_record()))
            fh.write("\n")


def read_attributions(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
