"""Synthetic multimodal samples with planted concepts, plus the JSONL format.

Each sample plants one to three concepts.  Text tokens are drawn from
concept-specific token pools (mixed with filler tokens), image regions are the
mean of the planted concepts' prototypes plus Gaussian noise, and the label is
1 exactly when an offensive concept is planted.  The planted set is recorded
as the sample's gold concepts.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .serialization import dumps
from .vocabulary import ConceptVocabulary, default_names

# funny, politics, international-relation, immigration
DEFAULT_NON_OFFENSIVE = (3, 7, 9, 13)

# Concept pairs mixed together in correlated mode (holocaust/nazism, ...).
DEFAULT_CORRELATED_PAIRS = ((0, 1), (2, 6), (5, 14), (8, 16), (10, 17), (4, 12))


class DatasetFormatError(ValueError):
    """A dataset file is malformed or inconsistent with its vocabulary."""


@dataclass(eq=False)
class MemeSample:
    id: int
    text_tokens: np.ndarray
    image_feats: np.ndarray
    label: int
    gold_concepts: tuple[int, ...] = ()

    def __post_init__(self):
        self.text_tokens = np.asarray(self.text_tokens, dtype=np.int64)
        self.image_feats = np.asarray(self.image_feats, dtype=np.float64)
        self.gold_concepts = tuple(int(c) for c in self.gold_concepts)
        self.label = int(self.label)
        if self.text_tokens.ndim != 1 or self.text_tokens.size < 1:
            raise DatasetFormatError(f"sample {self.id}: need at least one text token")
        if self.image_feats.ndim != 2 or self.image_feats.shape[0] < 1:
            raise DatasetFormatError(f"sample {self.id}: image_feats must be N x d with N >= 1")
        if self.label not in (0, 1):
            raise DatasetFormatError(f"sample {self.id}: label must be 0 or 1")

    def __eq__(self, other):
        return (
            isinstance(other, MemeSample)
            and self.id == other.id
            and self.label == other.label
            and self.gold_concepts == other.gold_concepts
            and np.array_equal(self.text_tokens, other.text_tokens)
            and np.array_equal(self.image_feats, other.image_feats)
        )

    def to_json_line(self) -> str:
        return dumps(
            {
                "id": self.id,
                "text_tokens": self.text_tokens,
                "image_feats": self.image_feats,
                "label": self.label,
                "gold_concepts": list(self.gold_concepts),
            }
        )


@dataclass(frozen=True)
class GeneratorConfig:
    n_concepts: int = 18
    dim: int = 64
    samples: int = 2000
    tokens: int = 8
    regions: int = 4
    noise: float = 0.1
    offensive: tuple[int, ...] | None = None
    positive_rate: float = 0.5
    max_planted: int = 3
    pool_size: int = 6
    filler_tokens: int = 16
    token_signal: float = 0.75
    correlated: bool = False
    correlation: float = 0.6
    orthogonalize: bool = True
    seed: int = 42

    def offensive_ids(self) -> tuple[int, ...]:
        if self.offensive is not None:
            return tuple(sorted(set(int(i) for i in self.offensive)))
        benign = {i for i in DEFAULT_NON_OFFENSIVE if i < self.n_concepts} or {self.n_concepts - 1}
        return tuple(i for i in range(self.n_concepts) if i not in benign)

    @property
    def vocab_size(self) -> int:
        return self.n_concepts * self.pool_size + self.filler_tokens

    def validate(self) -> None:
        off = set(self.offensive_ids())
        if not off or len(off) >= self.n_concepts:
            raise ValueError("offensive concept subset must be nonempty and proper")
        if not off <= set(range(self.n_concepts)):
            raise ValueError("offensive ids outside the vocabulary")
        if self.noise < 0:
            raise ValueError("noise scale must be >= 0")
        if self.orthogonalize and self.dim < self.n_concepts:
            raise ValueError(
                f"cannot orthogonalize {self.n_concepts} concepts in dimension {self.dim}"
            )
        if self.tokens < 1 or self.regions < 1 or self.max_planted < 1:
            raise ValueError("tokens, regions and max_planted must be >= 1")
        if not 0.0 <= self.positive_rate <= 1.0:
            raise ValueError("positive_rate must lie in [0, 1]")

    def to_json(self) -> dict:
        d = asdict(self)
        d["offensive"] = list(self.offensive_ids())
        return d


@dataclass
class SyntheticData:
    samples: list[MemeSample]
    vocabulary: ConceptVocabulary
    prototypes: np.ndarray
    config: GeneratorConfig
    offensive: tuple[int, ...] = field(default=())


def _basis(rng: np.random.Generator, n: int, d: int, orthogonalize: bool) -> np.ndarray:
    raw = rng.normal(size=(d, n))
    if orthogonalize:
        q, r = np.linalg.qr(raw)
        # fix the sign ambiguity of QR so the basis is a function of the draw
        q = q * np.sign(np.diag(r))
        return q.T.copy()
    return (raw / np.linalg.norm(raw, axis=0)).T.copy()


def _correlated_pairs(n: int) -> list[tuple[int, int]]:
    if n == 18:
        return list(DEFAULT_CORRELATED_PAIRS)
    return [(i, i + 1) for i in range(0, n - 1, 2)]


def generate(config: GeneratorConfig) -> SyntheticData:
    """Draw a dataset and its vocabulary; a pure function of ``config``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    n, d = config.n_concepts, config.dim
    offensive = config.offensive_ids()
    benign = tuple(i for i in range(n) if i not in offensive)

    concepts = _basis(rng, n, d, config.orthogonalize)
    prototypes = _basis(rng, n, d, config.orthogonalize)
    pairs = _correlated_pairs(n) if config.correlated else []
    partner: dict[int, int] = {}
    if pairs:
        base = concepts.copy()
        for a, b in pairs:
            for i, j in ((a, b), (b, a)):
                v = base[i] + config.correlation * base[j]
                concepts[i] = v / np.linalg.norm(v)
            partner[a], partner[b] = b, a

    off_set = set(offensive)
    samples = []
    for sid in range(config.samples):
        label = int(rng.random() < config.positive_rate)
        k = int(rng.integers(1, config.max_planted + 1))
        if label:
            first = int(rng.choice(offensive))
            rest = [c for c in range(n) if c != first]
            others = rng.choice(rest, size=k - 1, replace=False) if k > 1 else []
            planted = [first, *[int(c) for c in others]]
        else:
            k = min(k, len(benign))
            planted = [int(c) for c in rng.choice(benign, size=k, replace=False)]
        if pairs and label:
            # correlated concepts co-occur: plant a partner alongside half the time
            extra = partner.get(planted[0])
            if extra is not None and extra not in planted and rng.random() < 0.5:
                planted.append(extra)
        planted = sorted(planted)

        tokens = np.empty(config.tokens, dtype=np.int64)
        for j in range(config.tokens):
            if rng.random() < config.token_signal:
                c = planted[int(rng.integers(len(planted)))]
                tokens[j] = c * config.pool_size + int(rng.integers(config.pool_size))
            else:
                tokens[j] = n * config.pool_size + int(rng.integers(config.filler_tokens))

        mean_proto = prototypes[planted].mean(axis=0)
        image = np.tile(mean_proto, (config.regions, 1))
        if config.noise > 0:
            image = image + config.noise * rng.normal(size=image.shape)

        rule_label = int(bool(off_set.intersection(planted)))
        samples.append(MemeSample(sid, tokens, image, rule_label, tuple(planted)))

    vocab = ConceptVocabulary(default_names(n), concepts)
    return SyntheticData(samples, vocab, prototypes, config, offensive)


def split(
    samples: Sequence[MemeSample], train_fraction: float = 0.92, seed: int = 42
) -> tuple[list[MemeSample], list[MemeSample]]:
    """Seeded random train/test split."""
    order = np.random.default_rng(seed).permutation(len(samples))
    cut = int(round(train_fraction * len(samples)))
    train = [samples[i] for i in sorted(order[:cut])]
    test = [samples[i] for i in sorted(order[cut:])]
    return train, test


def save(samples: Sequence[MemeSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(s.to_json_line())
            fh.write("\n")


def load(path: str | Path, vocabulary: ConceptVocabulary | None = None) -> list[MemeSample]:
    """Read a dataset JSONL file.

    Raises:
        DatasetFormatError: on a malformed line (the message names the line
            number) or when a sample disagrees with ``vocabulary``.
    """
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                sample = MemeSample(
                    int(obj["id"]),
                    obj["text_tokens"],
                    obj["image_feats"],
                    obj["label"],
                    tuple(obj.get("gold_concepts", ())),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from exc
            if vocabulary is not None:
                if sample.image_feats.shape[1] != vocabulary.dim:
                    raise DatasetFormatError(
                        f"{path}: line {lineno}: image feature width "
                        f"{sample.image_feats.shape[1]} != vocabulary dim {vocabulary.dim}"
                    )
                if any(c < 0 or c >= vocabulary.size for c in sample.gold_concepts):
                    raise DatasetFormatError(
                        f"{path}: line {lineno}: gold concept outside vocabulary"
                    )
            samples.append(sample)
    return samples


def stack(samples: Sequence[MemeSample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch samples into ``(tokens[B, M], image[B, N, d])``."""
    tokens = np.stack([s.text_tokens for s in samples])
    image = np.stack([s.image_feats for s in samples])
    return tokens, image
