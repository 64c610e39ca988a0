"""Per-concept treatment effects by intervention on the concept latent.

The effect of concept ``i`` on a sample is the change in the predicted-class
probability when concept ``i`` is masked out of the latent.  Everything is
batched: one forward pass with ``n + 1`` mask rows per sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import ConceptModel
from .synthdata import MemeSample
from .serialization import dumps
from .vocabulary import ConceptVocabulary

SOURCES = ("causal", "saliency", "inputxgrad", "ig", "gradshap", "deeplift", "deepliftshap")


@dataclass(frozen=True)
class RiteScore:
    concept: int
    rite: float
    target: int


@dataclass(frozen=True)
class RankedConceptSet:
    """Concept ids in descending score order; ties go to the smaller id."""

    order: tuple[int, ...]
    scores: tuple[float, ...]
    source: str
    sample_id: int = -1

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown ranking source {self.source!r}")
        if sorted(self.order) != list(range(len(self.order))):
            raise ValueError("order must be a permutation of 0..n-1")
        if len(self.scores) != len(self.order):
            raise ValueError("one score per ranked concept")

    @classmethod
    def from_scores(cls, scores: Sequence[float], source: str, sample_id: int = -1) -> RankedConceptSet:
        s = np.asarray(scores, dtype=np.float64)
        if s.ndim != 1 or not np.isfinite(s).all():
            raise ValueError("scores must be a finite vector")
        # lexsort uses the last key as primary: descending score, then ascending id
        order = np.lexsort((np.arange(s.size), -s))
        return cls(tuple(int(i) for i in order), tuple(float(x) for x in s[order]), source, sample_id)

    def top(self, k: int) -> tuple[int, ...]:
        return self.order[:k]

    def rank_of(self, concept: int) -> int:
        """0-based position of ``concept``."""
        return self.order.index(concept)

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "source": self.source,
            "order": list(self.order),
            "scores": list(self.scores),
        }

    @classmethod
    def from_record(cls, obj: dict) -> RankedConceptSet:
        return cls(tuple(obj["order"]), tuple(obj["scores"]), obj["source"], int(obj["sample_id"]))


def intervention_masks(n: int) -> np.ndarray:
    """Row 0 keeps everything; row ``i + 1`` masks concept ``i``."""
    return np.vstack([np.ones((1, n)), 1.0 - np.eye(n)])


def rite_matrix(
    model: ConceptModel,
    vocabulary: ConceptVocabulary,
    samples: Sequence[MemeSample],
    signed: bool = False,
    batch_size: int = 16,
) -> tuple[np.ndarray, np.ndarray]:
    """RITE for every (sample, concept) pair.

    Returns ``(scores[S, n], targets[S])`` where ``targets`` is the argmax class
    of the un-intervened pass.  With ``signed`` the score is
    ``p_k(masked) - p_k(original)`` instead of its absolute value.
    """
    n = vocabulary.size
    masks = intervention_masks(n)
    scores, targets = [], []
    for start in range(0, len(samples), batch_size):
        chunk = list(samples[start : start + batch_size])
        rows = [s for s in chunk for _ in range(n + 1)]
        probs = model.run(rows, vocabulary, np.tile(masks, (len(chunk), 1))).probs.data
        probs = probs.reshape(len(chunk), n + 1, -1)
        k = probs[:, 0, :].argmax(axis=1)
        pk = probs[np.arange(len(chunk)), :, k]
        delta = pk[:, 1:] - pk[:, :1]
        scores.append(delta if signed else np.abs(delta))
        targets.append(k)
    return np.concatenate(scores), np.concatenate(targets)


def rite(
    sample: MemeSample, model: ConceptModel, vocabulary: ConceptVocabulary, concept: int
) -> RiteScore:
    if not 0 <= concept < vocabulary.size:
        raise IndexError(f"concept {concept} outside vocabulary of {vocabulary.size}")
    scores, targets = rite_matrix(model, vocabulary, [sample])
    return RiteScore(concept, float(scores[0, concept]), int(targets[0]))


def causal_ranking(
    sample: MemeSample, model: ConceptModel, vocabulary: ConceptVocabulary
) -> RankedConceptSet:
    scores, _ = rite_matrix(model, vocabulary, [sample])
    return RankedConceptSet.from_scores(scores[0], "causal", sample.id)


def causal_rankings(
    samples: Sequence[MemeSample], model: ConceptModel, vocabulary: ConceptVocabulary
) -> list[RankedConceptSet]:
    scores, _ = rite_matrix(model, vocabulary, samples)
    return [RankedConceptSet.from_scores(s, "causal", x.id) for s, x in zip(scores, samples)]


@dataclass
class RiteProfile:
    mean: np.ndarray
    std: np.ndarray

    @property
    def dispersion(self) -> float:
        """Across-concept standard deviation of the mean RITE."""
        return float(self.mean.std())


def mean_rite_profile(
    samples: Sequence[MemeSample], model: ConceptModel, vocabulary: ConceptVocabulary
) -> RiteProfile:
    if not samples:
        raise ValueError("mean RITE needs a nonempty dataset")
    scores, _ = rite_matrix(model, vocabulary, samples)
    return RiteProfile(scores.mean(axis=0), scores.std(axis=0))


def write_rankings(path: str | Path, rankings: Iterable[RankedConceptSet]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rankings:
            fh.write(dumps(r.to_record()))
            fh.write("\n")


def read_rankings(path: str | Path) -> list[RankedConceptSet]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(RankedConceptSet.from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
    return out
