"""Nullspace de-confounding of the concept vocabulary.

A linear reconstructor ``W`` is fit so that ``W @ L_cf ~= C``, where column
``i`` of ``L_cf`` is the counterfactual latent with concept ``i`` removed and
column ``i`` of ``C`` is concept ``i``.  Projecting every concept through the
nullspace projector ``P`` of ``W`` makes every rebuilt counterfactual latent
vanish under ``W``: ``W @ (P @ L) = 0`` for any latent ``L`` because latents are
linear in the concepts.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .model import ConceptModel
from .synthdata import MemeSample, stack
from .vocabulary import ConceptVocabulary

log = logging.getLogger(__name__)

RANK_TOLERANCE = 1e-10


@dataclass
class Reconstructor:
    weight: np.ndarray
    loss_history: list[float] = field(default_factory=list)
    steps: int = 0
    degenerate: bool = False

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1]


@dataclass
class NullspaceProjector:
    matrix: np.ndarray
    rank: int
    iteration: int = 1

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.matrix).tobytes()).hexdigest()


def counterfactual_latents(
    model: ConceptModel,
    vocabulary: ConceptVocabulary,
    samples: Sequence[MemeSample],
    batch_size: int = 128,
) -> np.ndarray:
    """Per-sample counterfactual latents, shape ``(S, n, d)``.

    Entry ``[s, i]`` is sample ``s``'s latent with concept ``i`` masked.
    """
    if not samples:
        raise ValueError("counterfactual bank needs at least one sample")
    n = vocabulary.size
    masks = 1.0 - np.eye(n)
    P = model.tensors()
    C = Tensor(vocabulary.embeddings)
    out = []
    for start in range(0, len(samples), batch_size):
        tokens, image = stack(samples[start : start + batch_size])
        B = len(tokens)
        _, ctx = model.content(P, model.embed_text(P, tokens), Tensor(image))
        if model.config.dynamic_routing:
            w_d = model.route(P, ctx, C).data
        else:
            w_d = np.zeros((B, n))
        # one row per (sample, masked concept)
        w_rows = Tensor(np.repeat(w_d, n, axis=0))
        L, _ = model.latent(P, w_rows, C, np.tile(masks, (B, 1)))
        out.append(L.data.reshape(B, n, -1))
    return np.concatenate(out, axis=0)


def build_counterfactual_bank(
    model: ConceptModel,
    vocabulary: ConceptVocabulary,
    samples: Sequence[MemeSample],
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(L_cf, C)``, both ``d x n``; ``L_cf`` averages over ``samples``."""
    latents = counterfactual_latents(model, vocabulary, samples)
    return latents.mean(axis=0).T.copy(), vocabulary.embeddings.T.copy()


def fit_reconstructor(
    L_cf: np.ndarray,
    C: np.ndarray,
    max_steps: int = 5000,
    window: int = 50,
    min_improvement: float = 1e-9,
) -> Reconstructor:
    """Least-squares fit of ``W @ L_cf ~= C`` by gradient descent from zero.

    Stops when the loss improves by less than ``min_improvement`` over
    ``window`` steps, or after ``max_steps``.
    """
    L_cf = np.asarray(L_cf, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if L_cf.shape[1] != C.shape[1]:
        raise ValueError(f"column counts differ: {L_cf.shape[1]} vs {C.shape[1]}")
    d = L_cf.shape[0]
    W = np.zeros((C.shape[0], d))
    sv = np.linalg.svd(L_cf, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        log.warning("counterfactual bank is all zeros; reconstructor is unconstrained")
        loss = float((C * C).sum())
        return Reconstructor(W, [loss], 0, degenerate=True)
    nonzero = sv[sv > RANK_TOLERANCE * sv[0]]
    # optimal fixed step for the quadratic restricted to the bank's column space
    step = 1.0 / (nonzero[0] ** 2 + nonzero[-1] ** 2)
    history = []
    for it in range(max_steps):
        resid = W @ L_cf - C
        loss = float((resid * resid).sum())
        if not np.isfinite(loss):
            raise ArithmeticError(f"reconstructor diverged at step {it}")
        history.append(loss)
        if it >= window and history[it - window] - loss < min_improvement:
            break
        W = W - step * 2.0 * resid @ L_cf.T
    resid = W @ L_cf - C
    history.append(float((resid * resid).sum()))
    return Reconstructor(W, history, len(history) - 1)


def nullspace_projector(weight: np.ndarray, tolerance: float = RANK_TOLERANCE) -> NullspaceProjector:
    """``P = I - V_r V_r^T`` with ``V_r`` spanning the row space of ``weight``."""
    weight = np.asarray(weight, dtype=np.float64)
    d = weight.shape[1]
    _, s, vt = np.linalg.svd(weight)
    rank = int((s > tolerance * s[0]).sum()) if s.size and s[0] > 0 else 0
    V = vt[:rank].T
    P = np.eye(d) - V @ V.T
    if rank == d:
        log.warning("reconstructor has full rank; the projector annihilates everything")
    return NullspaceProjector(P, rank)


def project_vocabulary(vocabulary: ConceptVocabulary, projector: np.ndarray) -> ConceptVocabulary:
    """``C <- P C`` with concepts as columns of ``C``."""
    return vocabulary.with_embeddings(vocabulary.embeddings @ np.asarray(projector).T)


def reconstruction_residual(
    weight: np.ndarray,
    model: ConceptModel,
    vocabulary: ConceptVocabulary,
    samples: Sequence[MemeSample],
    per_sample: bool = False,
) -> float:
    """``max |W @ L_cf|`` over the averaged bank, or over every sample's bank."""
    latents = counterfactual_latents(model, vocabulary, samples)
    if per_sample:
        return float(np.abs(latents @ weight.T).max())
    return float(np.abs(weight @ latents.mean(axis=0).T).max())


@dataclass
class DeconfoundResult:
    vocabulary: ConceptVocabulary
    reconstructors: list[Reconstructor]
    projectors: list[NullspaceProjector]
    residuals: list[float]
    retained_energy: float

    @property
    def projector(self) -> np.ndarray:
        """Composite projector over all rounds."""
        P = np.eye(self.vocabulary.dim)
        for proj in self.projectors:
            P = proj.matrix @ P
        return P

    def report(self) -> dict:
        return {
            "iterations": len(self.projectors),
            "rounds": [
                {
                    "rank": p.rank,
                    "reconstructor_loss": r.final_loss,
                    "reconstructor_steps": r.steps,
                    "degenerate_bank": r.degenerate,
                    "residual": res,
                    "projector_sha256": p.checksum(),
                }
                for r, p, res in zip(self.reconstructors, self.projectors, self.residuals)
            ],
            "retained_concept_energy": self.retained_energy,
        }


def deconfound(
    model: ConceptModel,
    vocabulary: ConceptVocabulary,
    samples: Sequence[MemeSample],
    iterations: int = 1,
    tolerance: float = RANK_TOLERANCE,
) -> DeconfoundResult:
    """Fit, project and (optionally) repeat; returns the projected vocabulary.

    The residual of each round is ``max |W @ L_cf'|`` where ``L_cf'`` is the
    bank rebuilt from the projected vocabulary.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    current = vocabulary
    recs, projs, residuals = [], [], []
    for it in range(iterations):
        L_cf, C = build_counterfactual_bank(model, current, samples)
        rec = fit_reconstructor(L_cf, C)
        proj = nullspace_projector(rec.weight, tolerance)
        proj.iteration = it + 1
        current = project_vocabulary(current, proj.matrix)
        residual = reconstruction_residual(rec.weight, model, current, samples)
        log.info("deconfound round %d: rank %d residual %.3e", it + 1, proj.rank, residual)
        recs.append(rec)
        projs.append(proj)
        residuals.append(residual)
    base = np.linalg.norm(vocabulary.embeddings)
    retained = float(np.linalg.norm(current.embeddings) / base) if base > 0 else 0.0
    if retained < 1e-6:
        log.warning(
            "projection removed %.1f%% of the concept energy; latents are now ~0",
            100 * (1 - retained),
        )
    return DeconfoundResult(current, recs, projs, residuals, retained)


def latent_linearity_gap(projector: np.ndarray, concepts: np.ndarray, weights: np.ndarray) -> float:
    """``|P (sum w_i c_i) - sum w_i (P c_i)|_max`` for concepts as rows."""
    lhs = projector @ (weights @ concepts)
    rhs = weights @ (concepts @ projector.T)
    return float(np.abs(lhs - rhs).max())


__all__ = [
    "Reconstructor",
    "NullspaceProjector",
    "DeconfoundResult",
    "counterfactual_latents",
    "build_counterfactual_bank",
    "fit_reconstructor",
    "nullspace_projector",
    "project_vocabulary",
    "reconstruction_residual",
    "deconfound",
    "latent_linearity_gap",
]
