"""Evaluation metrics: rank correlation, simulatability and gold-concept overlap."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .causal import RankedConceptSet
from .serialization import write_json
from .vocabulary import ConceptVocabulary

log = logging.getLogger(__name__)

GAMMA = 0.9
MODES = ("exp", "inp", "both")


# -- rank correlation -------------------------------------------------------------


def _ranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based), ties share the mean of their positions."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _positions(order: Sequence[int]) -> np.ndarray:
    order = np.asarray(order, dtype=np.int64)
    pos = np.empty(order.size)
    pos[order] = np.arange(order.size)
    return pos


def _check_orders(a: Sequence[int], b: Sequence[int]) -> None:
    if len(a) != len(b):
        raise ValueError(f"order lengths differ: {len(a)} vs {len(b)}")
    if sorted(a) != sorted(b) or sorted(a) != list(range(len(a))):
        raise ValueError("orders must be permutations of the same ids 0..n-1")


def kendall_tau_b(x: Sequence[float], y: Sequence[float]) -> float:
    """Kendall's tau-b between two score vectors; 0 when either is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("length mismatch")
    dx = np.sign(x[:, None] - x[None, :])
    dy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(x.size, k=1)
    dx, dy = dx[iu], dy[iu]
    s = float((dx * dy).sum())
    nx, ny = float((dx != 0).sum()), float((dy != 0).sum())
    if nx == 0 or ny == 0:
        return 0.0
    return s / math.sqrt(nx * ny)


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average ranks; 0 when either is constant."""
    rx, ry = _ranks(x), _ranks(y)
    if rx.shape != ry.shape:
        raise ValueError("length mismatch")
    rx, ry = rx - rx.mean(), ry - ry.mean()
    den = math.sqrt(float((rx * rx).sum() * (ry * ry).sum()))
    return float((rx * ry).sum() / den) if den > 0 else 0.0


def kendall_tau(order_a: Sequence[int], order_b: Sequence[int]) -> float:
    """Tau-b between two rankings given as ordered concept ids."""
    _check_orders(order_a, order_b)
    return kendall_tau_b(_positions(order_a), _positions(order_b))


def spearman_rho(order_a: Sequence[int], order_b: Sequence[int]) -> float:
    _check_orders(order_a, order_b)
    return spearman(_positions(order_a), _positions(order_b))


# -- simulator -------------------------------------------------------------------


def rank_weighted_bag(order: Sequence[int], embeddings: np.ndarray, gamma: float = GAMMA) -> np.ndarray:
    """``(1/n) sum_i gamma^i x_i`` with ``x_i`` the concept ranked ``i`` (1-based)."""
    order = np.asarray(order, dtype=np.int64)
    n = order.size
    w = gamma ** np.arange(1, n + 1)
    return (w[:, None] * np.asarray(embeddings)[order]).sum(axis=0) / n


def build_simulator_input(
    ranked: RankedConceptSet,
    vocabulary: ConceptVocabulary,
    m_hat: np.ndarray,
    mode: str,
    gamma: float = GAMMA,
) -> np.ndarray:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "inp":
        return np.asarray(m_hat, dtype=np.float64).copy()
    bag = rank_weighted_bag(ranked.order, vocabulary.embeddings, gamma)
    if mode == "exp":
        return bag
    return np.concatenate([bag, np.asarray(m_hat, dtype=np.float64)])


@dataclass
class LinearSimulator:
    """Max-margin linear classifier on standardized features."""

    weight: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray

    def margin(self, X: np.ndarray) -> np.ndarray:
        return ((np.asarray(X) - self.mean) / self.scale) @ self.weight + self.bias

    def confidence(self, X: np.ndarray) -> np.ndarray:
        """Class confidences ``(S, 2)``; class 1 gets ``sigmoid(margin)``."""
        z = self.margin(X)
        p1 = 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow-free sigmoid
        return np.stack([1.0 - p1, p1], axis=1)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.margin(X) >= 0).astype(np.int64)


def train_simulator(
    X: np.ndarray,
    y: np.ndarray,
    reg: float = 1e-3,
    epochs: int = 300,
    batch_size: int = 32,
    seed: int = 42,
) -> LinearSimulator:
    """Hinge loss plus L2 penalty, minibatch subgradient descent (Pegasos steps).

    Returns the average of the iterates, which converges for this objective.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("simulator needs both classes in its training labels")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    Z = (X - mean) / scale
    s = 2.0 * y - 1.0
    rng = np.random.default_rng(seed)
    w = np.zeros(X.shape[1])
    b = 0.0
    w_avg, b_avg = np.zeros_like(w), 0.0
    t = 0
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start : start + batch_size]
            t += 1
            eta = 1.0 / (reg * (t + 100))
            active = s[idx] * (Z[idx] @ w + b) < 1.0
            gw = reg * w - (s[idx, None] * Z[idx])[active].sum(axis=0) / len(idx)
            gb = -s[idx][active].sum() / len(idx)
            w = w - eta * gw
            b = b - eta * gb
            w_avg += (w - w_avg) / t
            b_avg += (b - b_avg) / t
    return LinearSimulator(w_avg, float(b_avg), mean, scale)


def f1_macro(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    scores = []
    for c in (0, 1):
        tp = float(((y_pred == c) & (y_true == c)).sum())
        fp = float(((y_pred == c) & (y_true != c)).sum())
        fn = float(((y_pred != c) & (y_true == c)).sum())
        scores.append(2 * tp / (2 * tp + fp + fn) if tp + fp + fn > 0 else 1.0)
    return float(np.mean(scores))


def stratified_split(y: np.ndarray, test_fraction: float = 0.2, seed: int = 42) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays ``(train, test)`` preserving the class ratio."""
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(test_fraction * idx.size))
        if idx.size > 1:
            k = min(max(k, 1), idx.size - 1)
        test.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


@dataclass
class SimulatorResult:
    f1: dict[str, float]
    comprehensiveness: float
    sufficiency: float


def comprehensiveness_sufficiency(
    sim_both: LinearSimulator,
    sim_inp: LinearSimulator,
    sim_exp: LinearSimulator,
    X_both: np.ndarray,
    X_inp: np.ndarray,
    X_exp: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample confidence drops for the class the full simulator predicts."""
    conf = sim_both.confidence(X_both)
    k = conf.argmax(axis=1)
    rows = np.arange(len(k))
    comp = conf[rows, k] - sim_inp.confidence(X_inp)[rows, k]
    suff = conf[rows, k] - sim_exp.confidence(X_exp)[rows, k]
    return comp, suff


def simulatability(
    rankings: Sequence[RankedConceptSet],
    vocabulary: ConceptVocabulary,
    m_hat: np.ndarray,
    y_hat: np.ndarray,
    seed: int = 42,
) -> SimulatorResult:
    """Train the three simulators on 80% of the set, score the other 20%."""
    X = {
        mode: np.stack([build_simulator_input(r, vocabulary, m, mode) for r, m in zip(rankings, m_hat)])
        for mode in MODES
    }
    y_hat = np.asarray(y_hat, dtype=np.int64)
    tr, te = stratified_split(y_hat, 0.2, seed)
    sims = {mode: train_simulator(X[mode][tr], y_hat[tr], seed=seed) for mode in MODES}
    f1 = {mode: f1_macro(y_hat[te], sims[mode].predict(X[mode][te])) for mode in MODES}
    comp, suff = comprehensiveness_sufficiency(
        sims["both"], sims["inp"], sims["exp"], X["both"][te], X["inp"][te], X["exp"][te]
    )
    return SimulatorResult(f1, float(comp.mean()), float(suff.mean()))


# -- gold-concept overlap -----------------------------------------------------------


def precision_recall_map_at_k(
    ranked: Sequence[int], gold: Sequence[int], k: int = 5
) -> tuple[float, float, float]:
    """P@k, R@k and MAP@k (mean of P@j for j = 1..k)."""
    gold = set(int(g) for g in gold)
    if not gold:
        raise ValueError("gold concept set must be nonempty")
    ranked = [int(c) for c in ranked]
    if len(ranked) < k:
        warnings.warn(f"only {len(ranked)} ranked concepts; computing at {len(ranked)}", stacklevel=2)
        k = len(ranked)
    hits = np.cumsum([c in gold for c in ranked[:k]])
    precision = hits[-1] / k
    recall = hits[-1] / len(gold)
    map_k = float(np.mean(hits / np.arange(1, k + 1)))
    return float(precision), float(recall), map_k


def random_recall_at_k(n: int, k: int = 5) -> float:
    """Expected R@k of a uniformly random ranking: each gold id lands in the top k w.p. k/n."""
    return min(k, n) / n


@dataclass
class GoldOverlap:
    precision: float
    recall: float
    map: float
    count: int


def gold_overlap(
    rankings: Sequence[RankedConceptSet], gold: Sequence[Sequence[int]], k: int = 5
) -> GoldOverlap:
    rows = [precision_recall_map_at_k(r.order, g, k) for r, g in zip(rankings, gold) if len(g)]
    if not rows:
        raise ValueError("no samples with gold concepts")
    arr = np.array(rows)
    return GoldOverlap(*[float(v) for v in arr.mean(axis=0)], count=len(rows))


# -- report ----------------------------------------------------------------------


@dataclass
class MethodMetrics:
    method: str
    ablation: str
    kendall: float
    spearman: float
    f1_exp: float
    f1_inp: float
    f1_both: float
    comprehensiveness: float
    sufficiency: float
    p_at_5: float
    r_at_5: float
    map_at_5: float

    def __post_init__(self):
        for name in ("kendall", "spearman"):
            if not -1.0 - 1e-12 <= getattr(self, name) <= 1.0 + 1e-12:
                raise ValueError(f"{name} outside [-1, 1]")
        for name in ("f1_exp", "f1_inp", "f1_both", "p_at_5", "r_at_5", "map_at_5"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} outside [0, 1]")


def evaluate_method(
    method: str,
    ablation: str,
    rankings: Sequence[RankedConceptSet],
    causal: Sequence[RankedConceptSet],
    vocabulary: ConceptVocabulary,
    m_hat: np.ndarray,
    y_hat: np.ndarray,
    gold: Sequence[Sequence[int]],
    seed: int = 42,
) -> MethodMetrics:
    """All metrics for one method's rankings on one evaluation set.

    ``gold[i]`` may be empty for samples without annotations; those samples are
    skipped by the overlap metrics only.
    """
    if [r.sample_id for r in rankings] != [c.sample_id for c in causal]:
        raise ValueError("method and causal rankings cover different samples")
    tau = float(np.mean([kendall_tau(c.order, r.order) for c, r in zip(causal, rankings)]))
    rho = float(np.mean([spearman_rho(c.order, r.order) for c, r in zip(causal, rankings)]))
    sim = simulatability(rankings, vocabulary, m_hat, y_hat, seed)
    overlap = gold_overlap(rankings, gold)
    return MethodMetrics(
        method, ablation, tau, rho,
        sim.f1["exp"], sim.f1["inp"], sim.f1["both"],
        sim.comprehensiveness, sim.sufficiency,
        overlap.precision, overlap.recall, overlap.map,
    )


TABLE1_COLUMNS = ("method", "kendall", "spearman", "f1_exp", "f1_inp", "f1_both", "comprehensiveness", "sufficiency")
TABLE2_METRICS = (("R@5", "r_at_5"), ("P@5", "p_at_5"), ("MAP@5", "map_at_5"))
ABLATIONS = ("full", "no-dynamic-routing", "no-adversarial", "no-deconfounding")


@dataclass
class MetricsReport:
    rows: list[MethodMetrics] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def get(self, method: str, ablation: str = "full") -> MethodMetrics:
        for r in self.rows:
            if r.method == method and r.ablation == ablation:
                return r
        raise KeyError((method, ablation))

    def to_json(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "extra": self.extra}

    def save_json(self, path: str | Path) -> None:
        write_json(path, self.to_json())

    @classmethod
    def from_json(cls, obj: dict) -> MetricsReport:
        return cls([MethodMetrics(**r) for r in obj["rows"]], obj.get("extra", {}))

    def write_flat_csv(self, path: str | Path) -> None:
        names = list(asdict(self.rows[0]).keys()) if self.rows else []
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for r in self.rows:
                w.writerow([_cell(v) for v in asdict(r).values()])

    def write_table1(self, path: str | Path, ablation: str = "full") -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE1_COLUMNS)
            for r in self.rows:
                if r.ablation == ablation:
                    w.writerow([_cell(getattr(r, c)) for c in TABLE1_COLUMNS])

    def write_table2(self, path: str | Path, method: str = "causal") -> None:
        present = [a for a in ABLATIONS if any(r.ablation == a and r.method == method for r in self.rows)]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", *present])
            for label, attr in TABLE2_METRICS:
                w.writerow([label, *[_cell(getattr(self.get(method, a), attr)) for a in present]])


def _cell(v) -> str:
    if isinstance(v, float):
        return format(v, ".6f")
    return str(v)
