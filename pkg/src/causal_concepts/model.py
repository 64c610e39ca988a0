"""Toy multimodal classifier that routes its prediction through a concept latent.

The forward pass follows the structural causal model: the meme content
``(t, v)`` is encoded once without the latent to give the pooled vector ``m``
and contextual text features; dynamic routing turns those text features into
per-concept weights; the latent ``L = sum_i mask_i (w_d^i + w_s^i) c_i`` is
appended to the content sequence and encoded again to give ``m_hat``, which
the classifier head reads.  Masking concept ``i`` is the intervention.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .serialization import read_json, write_json
from .synthdata import MemeSample, stack
from .vocabulary import ConceptVocabulary

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "causal-concepts-checkpoint"
CHECKPOINT_VERSION = 1

HEAD_PARAMS = ("cls_w", "cls_b")


class TrainingDiverged(RuntimeError):
    pass


def squash(s: np.ndarray, axis: int = -1) -> np.ndarray:
    """Capsule squash: keeps the direction of ``s``, maps its length into [0, 1)."""
    s = np.asarray(s, dtype=np.float64)
    sq = (s * s).sum(axis=axis, keepdims=True)
    norm = np.sqrt(sq)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(norm > 0, s / np.where(norm > 0, norm, 1.0), 0.0)
    return sq / (1.0 + sq) * unit


def squash_length(s: Tensor) -> Tensor:
    """``||squash(s)||`` along the last axis, i.e. ``|s|^2 / (1 + |s|^2)``.

    Written without the norm itself so it stays differentiable at ``s = 0``.
    """
    sq = ad.sum(s * s, axis=-1)
    return sq * ad.reciprocal(sq + 1.0)


@dataclass
class ModelConfig:
    vocab_size: int
    n_concepts: int
    dim: int = 64
    heads: int = 4
    layers: int = 2
    mlp_hidden: int = 128
    dynamic_routing: bool = True
    grl_lambda: float = 1.0
    seed: int = 42

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")


@dataclass
class ForwardTrace:
    """Graph outputs of one forward pass (batched along axis 0)."""

    m: Tensor
    m_hat: Tensor
    latent: Tensor
    w_dynamic: Tensor
    w_static: Tensor
    logits: Tensor
    probs: Tensor
    adv_latent_logits: Tensor | None = None
    adv_content_logits: Tensor | None = None


class ConceptModel:
    """Parameters plus the forward pass.

    Every forward call takes a mapping of parameter tensors (see
    :meth:`tensors`) so that each graph owns its leaves; the numpy arrays in
    :attr:`params` are never touched by a forward or backward pass.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = params if params is not None else self._init_params()

    # -- parameters -----------------------------------------------------------

    def _init_params(self) -> dict[str, np.ndarray]:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        d, h, n = cfg.dim, cfg.mlp_hidden, cfg.n_concepts
        branch = 1.0 / math.sqrt(2 * cfg.layers)

        def dense(fan_in, fan_out, gain=1.0):
            return rng.normal(scale=gain / math.sqrt(fan_in), size=(fan_in, fan_out))

        p = {
            "tok_emb": rng.normal(scale=1.0 / math.sqrt(d), size=(cfg.vocab_size, d)),
            "seg_emb": rng.normal(scale=1.0 / math.sqrt(d), size=(3, d)),
            "pool": rng.normal(scale=1.0 / math.sqrt(d), size=(1, d)),
            "img_w": dense(d, d),
            "img_b": np.zeros(d),
        }
        for layer in range(cfg.layers):
            pre = f"blk{layer}."
            p[pre + "wq"] = dense(d, d)
            p[pre + "wk"] = dense(d, d)
            p[pre + "wv"] = dense(d, d)
            p[pre + "wo"] = dense(d, d, branch)
            p[pre + "w1"] = dense(d, h)
            p[pre + "b1"] = np.zeros(h)
            p[pre + "w2"] = dense(h, d, branch)
            p[pre + "b2"] = np.zeros(d)
        p["route_w"] = rng.normal(scale=1.0 / math.sqrt(d), size=(n, d, d))
        p["static_logit"] = np.zeros(n)
        # zero heads: an untrained model is exactly undecided
        for name in ("cls", "adv_latent", "adv_content"):
            p[name + "_w"] = np.zeros((d, 2))
            p[name + "_b"] = np.zeros(2)
        return p

    def tensors(self, trainable: Iterable[str] | None = ()) -> dict[str, Tensor]:
        """Fresh leaf tensors; names in ``trainable`` (``None`` = all) require grad."""
        names = set(self.params) if trainable is None else set(trainable)
        return {k: Tensor(v, requires_grad=k in names) for k, v in self.params.items()}

    def copy(self) -> ConceptModel:
        return ConceptModel(
            ModelConfig(**asdict(self.config)), {k: v.copy() for k, v in self.params.items()}
        )

    # -- forward pieces ---------------------------------------------------------

    def embed_text(self, P: dict[str, Tensor], tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] < 1:
            raise ValueError("tokens must be a (batch, M >= 1) array")
        return ad.take_rows(P["tok_emb"], tokens)

    def _encode(self, P: dict[str, Tensor], x: Tensor) -> Tensor:
        cfg = self.config
        B, T, d = x.shape
        H, dh = cfg.heads, cfg.dim // cfg.heads
        inv = 1.0 / math.sqrt(dh)
        for layer in range(cfg.layers):
            pre = f"blk{layer}."
            q = (x @ P[pre + "wq"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            k = (x @ P[pre + "wk"]).reshape(B, T, H, dh).transpose(0, 2, 3, 1)
            v = (x @ P[pre + "wv"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            att = ad.softmax(ad.scale(q @ k, inv), axis=-1)
            o = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
            x = x + o @ P[pre + "wo"]
            hidden = ad.relu(x @ P[pre + "w1"] + P[pre + "b1"])
            x = x + hidden @ P[pre + "w2"] + P[pre + "b2"]
        return x

    def _content_tokens(self, P, text: Tensor, image: Tensor) -> list[Tensor]:
        B = text.shape[0]
        pool = ad.broadcast_to(P["pool"], (B, 1, self.config.dim))
        t = text + P["seg_emb"][0]
        v = image @ P["img_w"] + P["img_b"] + P["seg_emb"][1]
        return [pool, t, v]

    def content(self, P, text: Tensor, image: Tensor) -> tuple[Tensor, Tensor]:
        """Encode ``(t, v)`` alone: pooled ``m`` and contextual text features."""
        M = text.shape[1]
        h = self._encode(P, ad.concat(self._content_tokens(P, text, image), axis=1))
        return h[:, 0, :], h[:, 1 : 1 + M, :]

    def route(self, P, text_ctx: Tensor, concepts: Tensor) -> Tensor:
        """Dynamic routing weights ``w_d`` of shape ``(B, n)``.

        ``concepts`` is ``(n, d)`` or per-row ``(B, n, d)``.
        """
        B, M, d = text_ctx.shape
        n = self.config.n_concepts
        if M < 1:
            raise ValueError("routing needs at least one text token")
        # t_ij = W_i t_j for every concept i and token j: (B, n, M, d)
        tt = text_ctx.reshape(B, 1, M, d) @ P["route_w"].transpose(0, 2, 1)
        c_col = concepts.reshape(*concepts.shape[:-1], d, 1)
        agreement = (tt @ c_col).reshape(B, n, M)
        # normalise across concepts for each token
        b = ad.softmax(agreement, axis=1)
        s = ad.scale((b.reshape(B, n, 1, M) @ tt).reshape(B, n, d), 1.0 / M)
        return squash_length(s)

    def static_weights(self, P) -> Tensor:
        return ad.sigmoid(P["static_logit"])

    def latent(
        self, P, w_dynamic: Tensor, concepts: Tensor, mask: np.ndarray | None = None
    ) -> tuple[Tensor, Tensor]:
        """``L = sum_i mask_i (w_d^i + w_s^i) c_i`` as a ``(B, 1, d)`` token."""
        B, n = w_dynamic.shape
        w_s = self.static_weights(P)
        w = w_dynamic + w_s
        if mask is not None:
            w = w * Tensor(np.asarray(mask, dtype=np.float64))
        return w.reshape(B, 1, n) @ concepts, w_s

    def classify(self, P, text: Tensor, image: Tensor, latent: Tensor) -> tuple[Tensor, Tensor]:
        tokens = self._content_tokens(P, text, image)
        tokens.append(latent + P["seg_emb"][2])
        h = self._encode(P, ad.concat(tokens, axis=1))
        m_hat = h[:, 0, :]
        return m_hat, m_hat @ P["cls_w"] + P["cls_b"]

    def forward(
        self,
        P: dict[str, Tensor],
        text: Tensor,
        image: Tensor,
        concepts: Tensor,
        mask: np.ndarray | None = None,
        *,
        route_concepts: Tensor | None = None,
        adversarial: bool = False,
    ) -> ForwardTrace:
        """Full pass from embedded inputs.

        Args:
            text: token embeddings ``(B, M, d)``.
            image: image region features ``(B, N, d)``.
            concepts: concept matrix used to build the latent, ``(n, d)`` or
                ``(B, n, d)``.
            mask: per-concept keep mask, ``(n,)`` or ``(B, n)``; ``None`` keeps all.
            route_concepts: concept matrix for the routing agreement; defaults
                to ``concepts``.
            adversarial: also evaluate the two gradient-reversed heads.
        """
        B = text.shape[0]
        m, ctx = self.content(P, text, image)
        if self.config.dynamic_routing:
            rc = concepts if route_concepts is None else route_concepts
            w_d = self.route(P, ctx, rc)
        else:
            w_d = Tensor(np.zeros((B, self.config.n_concepts)))
        L, w_s = self.latent(P, w_d, concepts, mask)
        m_hat, logits = self.classify(P, text, image, L)
        trace = ForwardTrace(m, m_hat, L, w_d, w_s, logits, ad.softmax(logits, axis=-1))
        if adversarial:
            lam = self.config.grl_lambda
            flat = L.reshape(B, self.config.dim)
            trace.adv_latent_logits = (
                ad.gradient_reversal(flat, lam) @ P["adv_latent_w"] + P["adv_latent_b"]
            )
            trace.adv_content_logits = (
                ad.gradient_reversal(m, lam) @ P["adv_content_w"] + P["adv_content_b"]
            )
        return trace

    def run(
        self,
        samples: Sequence[MemeSample],
        vocabulary: ConceptVocabulary,
        mask: np.ndarray | None = None,
        P: dict[str, Tensor] | None = None,
    ) -> ForwardTrace:
        """Forward a batch of samples with constant parameters."""
        P = self.tensors() if P is None else P
        tokens, image = stack(samples)
        return self.forward(P, self.embed_text(P, tokens), Tensor(image), Tensor(vocabulary.embeddings), mask)

    def predict_proba(
        self,
        samples: Sequence[MemeSample],
        vocabulary: ConceptVocabulary,
        mask: np.ndarray | None = None,
        batch_size: int = 256,
    ) -> np.ndarray:
        out = [
            self.run(samples[i : i + batch_size], vocabulary, mask).probs.data
            for i in range(0, len(samples), batch_size)
        ]
        return np.concatenate(out, axis=0)

    def predict(self, samples, vocabulary, mask=None) -> np.ndarray:
        return self.predict_proba(samples, vocabulary, mask).argmax(axis=1)

    # -- checkpoint -------------------------------------------------------------

    def save(self, path: str | Path) -> None:
        write_json(
            path,
            {
                "format": CHECKPOINT_FORMAT,
                "version": CHECKPOINT_VERSION,
                "config": asdict(self.config),
                "params": {
                    k: {"shape": list(v.shape), "data": v.reshape(-1)}
                    for k, v in sorted(self.params.items())
                },
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> ConceptModel:
        obj = read_json(path)
        if obj.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a model checkpoint")
        if obj.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {obj.get('version')}")
        params = {
            k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
            for k, v in obj["params"].items()
        }
        return cls(ModelConfig(**obj["config"]), params)


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 5e-5
    alpha: float = 1.0  # weight of the adversarial latent head
    beta: float = 1.0  # weight of the adversarial content head
    seed: int = 42
    trainable: tuple[str, ...] | None = None  # None trains everything

    @property
    def adversarial(self) -> bool:
        return self.alpha > 0 or self.beta > 0


@dataclass
class TrainResult:
    model: ConceptModel
    loss_curve: list[float] = field(default_factory=list)
    accuracy_curve: list[float] = field(default_factory=list)


class Adam:
    """Plain Adam over a dict of numpy arrays (updated in place)."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            self.params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.eye(logits.shape[-1])[np.asarray(labels, dtype=np.int64)]
    return ad.scale(ad.sum(ad.log_softmax(logits, axis=-1) * Tensor(onehot)), -1.0 / len(labels))


def training_loss(
    model: ConceptModel,
    P: dict[str, Tensor],
    tokens: np.ndarray,
    image: np.ndarray,
    labels: np.ndarray,
    vocabulary: ConceptVocabulary,
    alpha: float = 1.0,
    beta: float = 1.0,
) -> tuple[Tensor, ForwardTrace]:
    adversarial = alpha > 0 or beta > 0
    trace = model.forward(
        P,
        model.embed_text(P, tokens),
        Tensor(image),
        Tensor(vocabulary.embeddings),
        adversarial=adversarial,
    )
    loss = cross_entropy(trace.logits, labels)
    if alpha > 0:
        loss = loss + ad.scale(cross_entropy(trace.adv_latent_logits, labels), alpha)
    if beta > 0:
        loss = loss + ad.scale(cross_entropy(trace.adv_content_logits, labels), beta)
    return loss, trace


def train(
    samples: Sequence[MemeSample],
    model: ConceptModel,
    vocabulary: ConceptVocabulary,
    config: TrainConfig,
) -> TrainResult:
    """Train ``model`` in place with Adam on main + adversarial cross-entropy.

    Raises:
        TrainingDiverged: the loss or an intermediate became non-finite.
    """
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    tokens, image = stack(samples)
    labels = np.array([s.label for s in samples])
    names = sorted(model.params) if config.trainable is None else sorted(config.trainable)
    if not config.adversarial:
        names = [k for k in names if not k.startswith("adv_")]
    if not model.config.dynamic_routing:
        names = [k for k in names if k != "route_w"]
    opt = Adam({k: model.params[k] for k in names}, config.lr)
    rng = np.random.default_rng(config.seed)
    result = TrainResult(model)

    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        total, correct = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            try:
                P = model.tensors(names)
                loss, trace = training_loss(
                    model, P, tokens[idx], image[idx], labels[idx], vocabulary,
                    config.alpha, config.beta,
                )
                with np.errstate(over="ignore", invalid="ignore"):
                    grads = ad.grad(loss, [P[k] for k in names])
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch at {start}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"epoch {epoch}, batch at {start}: loss {value}")
            bad = [k for k, g in zip(names, grads) if not np.isfinite(g).all()]
            if bad:
                raise TrainingDiverged(
                    f"epoch {epoch}, batch at {start}: non-finite gradient for {bad[0]}"
                )
            opt.step(dict(zip(names, grads)))
            total += value * len(idx)
            correct += int((trace.probs.data.argmax(axis=1) == labels[idx]).sum())
        result.loss_curve.append(total / len(samples))
        result.accuracy_curve.append(correct / len(samples))
        log.info(
            "epoch %d loss %.5f acc %.4f", epoch, result.loss_curve[-1], result.accuracy_curve[-1]
        )
    return result
