"""Named concepts and their embedding matrix."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .serialization import read_json, write_json

# Default concept list; index order is the concept id.
DEFAULT_CONCEPT_NAMES = (
    "holocaust",
    "nazism",
    "genocide",
    "funny",
    "anti-muslim",
    "terrorism",
    "violence",
    "politics",
    "racism",
    "international-relation",
    "adult",
    "gore",
    "misogynistic",
    "immigration",
    "extremism",
    "immoral",
    "white supremacy",
    "indecency",
)


def default_names(n: int) -> tuple[str, ...]:
    names = list(DEFAULT_CONCEPT_NAMES[:n])
    names += [f"concept-{i}" for i in range(len(names), n)]
    return tuple(names)


@dataclass(frozen=True, eq=False)
class ConceptVocabulary:
    """``n`` named concepts, row ``i`` of ``embeddings`` is concept ``i``."""

    names: tuple[str, ...]
    embeddings: np.ndarray

    def __post_init__(self):
        emb = np.array(self.embeddings, dtype=np.float64)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "names", tuple(self.names))
        if emb.ndim != 2 or emb.shape[0] != len(self.names):
            raise ValueError(
                f"embeddings shape {emb.shape} does not match {len(self.names)} names"
            )
        if len(self.names) < 2:
            raise ValueError("a vocabulary needs at least 2 concepts")
        if len(set(self.names)) != len(self.names):
            raise ValueError("concept names must be unique")
        if not np.isfinite(emb).all():
            raise ValueError("concept embeddings must be finite")
        emb.setflags(write=False)

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def with_embeddings(self, embeddings: np.ndarray) -> ConceptVocabulary:
        return ConceptVocabulary(self.names, embeddings)

    def __eq__(self, other):
        return (
            isinstance(other, ConceptVocabulary)
            and self.names == other.names
            and np.array_equal(self.embeddings, other.embeddings)
        )

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "concepts": [
                {"id": i, "name": name, "embedding": self.embeddings[i]}
                for i, name in enumerate(self.names)
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> ConceptVocabulary:
        concepts = sorted(obj["concepts"], key=lambda c: c["id"])
        if [c["id"] for c in concepts] != list(range(len(concepts))):
            raise ValueError("concept ids must be 0..n-1")
        emb = np.array([c["embedding"] for c in concepts], dtype=np.float64)
        if emb.ndim != 2 or emb.shape[1] != obj["dim"]:
            raise ValueError(f"embedding width does not match dim={obj['dim']}")
        return cls(tuple(c["name"] for c in concepts), emb)

    def save(self, path: str | Path) -> None:
        write_json(path, self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> ConceptVocabulary:
        return cls.from_json(read_json(path))
