"""Candidate scoring: materialize a parse tree into a column, score it by
k-fold cross-validated learner performance, cache by canonical form, and
charge an evaluation budget.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, Task
from .dsl import Apply, Leaf, ParseTree, canonical_key
from .forest import LearnerConfig, fit_predict_learner
from .metrics import f1_score, one_minus_rae

__all__ = [
    "EvalRecord",
    "BudgetTracker",
    "BudgetExhausted",
    "EvalCache",
    "LeafIndexOutOfRange",
    "materialize",
    "fold_assignment",
    "cross_val_metric",
    "evaluate_feature",
    "evaluate_baseline",
    "evaluate_joint",
]

DEFAULT_BUDGET = 4096
DEFAULT_FOLDS = 5


class BudgetExhausted(RuntimeError):
    """The cap on expensive cross-validated evaluations has been hit."""


class LeafIndexOutOfRange(IndexError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    """Cross-validated score of one candidate feature.

    ``metric`` is clamped to [0,1] (higher better); ``loss`` is exactly
    1 - metric and is what the rest of the search consumes.
    """

    key: str
    metric: float
    fold_metrics: tuple[float, ...]

    @property
    def loss(self) -> float:
        return 1.0 - self.metric


class BudgetTracker:
    """Thread-safe counter of completed expensive evaluations.

    ``reserve`` atomically claims a slot before CV starts; ``release`` hands
    it back if the evaluation never ran (invalid feature).
    """

    def __init__(self, cap: int = DEFAULT_BUDGET):
        self.cap = cap
        self._spent = 0
        self._lock = threading.Lock()

    @property
    def spent(self) -> int:
        return self._spent

    @property
    def remaining(self) -> int:
        return self.cap - self._spent

    def reserve(self):
        with self._lock:
            if self._spent >= self.cap:
                raise BudgetExhausted(f"evaluation budget of {self.cap} exhausted")
            self._spent += 1

    def release(self):
        with self._lock:
            self._spent -= 1


class EvalCache:
    """Canonical-key keyed record store shared across workers."""

    def __init__(self):
        self._records: dict[str, EvalRecord] = {}
        self._lock = threading.Lock()

    def get(self, key: str) -> Optional[EvalRecord]:
        with self._lock:
            return self._records.get(key)

    def put(self, record: EvalRecord):
        with self._lock:
            self._records[record.key] = record

    def __len__(self):
        return len(self._records)


def materialize(tree: ParseTree, dataset: Dataset) -> Optional[np.ndarray]:
    """Evaluate a tree bottom-up into a column of length n.

    Transformation semantics are safeguarded (see the registry), so the only
    failure modes are a non-finite or constant result, reported as None.
    """

    def evaluate(node: ParseTree) -> np.ndarray:
        if isinstance(node, Leaf):
            if not 0 <= node.index < dataset.n_features:
                raise LeafIndexOutOfRange(f"leaf index {node.index} out of range")
            return dataset.columns[:, node.index]
        args = [evaluate(c) for c in node.children]
        return node.transformation.fn(*args)

    column = np.asarray(evaluate(tree), dtype=np.float64)
    if not np.isfinite(column).all():
        return None
    if column.min() == column.max():
        return None
    return column


def fold_assignment(n: int, folds: int, seed: int) -> np.ndarray:
    """Fold index per row; a pure function of (seed, n) so every candidate in
    a run is scored on identical splits."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(3,)))
    perm = rng.permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    for f, chunk in enumerate(np.array_split(perm, folds)):
        assignment[chunk] = f
    return assignment


def _score_fold(y_true, predictions, task: Task) -> float:
    if task is Task.CLASSIFICATION:
        return f1_score(y_true, predictions)
    return one_minus_rae(y_true, predictions)


def cross_val_metric(
    X: np.ndarray,
    dataset: Dataset,
    learner: LearnerConfig,
    folds: int,
    seed: int,
) -> tuple[float, tuple[float, ...]]:
    """Mean cross-validated metric of the learner on feature matrix X."""
    assign = fold_assignment(dataset.n_rows, folds, seed)
    y = dataset.target
    scores = []
    for f in range(folds):
        test = assign == f
        train = ~test
        preds = fit_predict_learner(
            learner, X[train], y[train], X[test], dataset.task, dataset.n_classes
        )
        scores.append(_score_fold(y[test], preds, dataset.task))
    return float(np.mean(scores)), tuple(scores)


def _to_record(key: str, metric: float, fold_metrics: tuple[float, ...]) -> EvalRecord:
    return EvalRecord(key=key, metric=float(np.clip(metric, 0.0, 1.0)), fold_metrics=fold_metrics)


def evaluate_feature(
    tree: ParseTree,
    dataset: Dataset,
    learner: LearnerConfig,
    cache: EvalCache,
    budget: BudgetTracker,
    folds: int = DEFAULT_FOLDS,
    seed: int = 0,
) -> Optional[EvalRecord]:
    """Score F + {tree} by k-fold CV, with canonical-key caching.

    Cache hits and invalid features (None) never consume budget; a budget
    slot is reserved before CV and released if materialization fails.
    """
    key = canonical_key(tree, dataset.feature_names)
    hit = cache.get(key)
    if hit is not None:
        return hit
    budget.reserve()
    column = materialize(tree, dataset)
    if column is None:
        budget.release()
        return None
    X = np.hstack([dataset.columns, column[:, None]])
    metric, fold_metrics = cross_val_metric(X, dataset, learner, folds, seed)
    record = _to_record(key, metric, fold_metrics)
    cache.put(record)
    return record


def evaluate_baseline(
    dataset: Dataset, learner: LearnerConfig, folds: int = DEFAULT_FOLDS, seed: int = 0
) -> EvalRecord:
    """CV metric of the raw feature set alone (budget-exempt)."""
    metric, fold_metrics = cross_val_metric(dataset.columns, dataset, learner, folds, seed)
    return _to_record("", metric, fold_metrics)


def evaluate_joint(
    trees: Sequence[ParseTree],
    dataset: Dataset,
    learner: LearnerConfig,
    folds: int = DEFAULT_FOLDS,
    seed: int = 0,
) -> Optional[EvalRecord]:
    """CV metric of the raw set plus several features at once (budget-exempt,
    used by final selection).  None if any feature fails to materialize."""
    columns = []
    for tree in trees:
        col = materialize(tree, dataset)
        if col is None:
            return None
        columns.append(col[:, None])
    X = np.hstack([dataset.columns, *columns]) if columns else dataset.columns
    metric, fold_metrics = cross_val_metric(X, dataset, learner, folds, seed)
    key = " | ".join(canonical_key(t, dataset.feature_names) for t in trees)
    return _to_record(key, metric, fold_metrics)
