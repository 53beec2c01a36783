"""Dataset container and CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .dsl import sanitize_feature_names


class Task(Enum):
    CLASSIFICATION = "clf"
    REGRESSION = "reg"


class IngestionError(ValueError):
    """Raised when a CSV cannot be turned into a usable dataset."""


class TargetColumnMissing(IngestionError):
    """The configured target column is absent (a configuration mistake)."""


AUTO_CLASS_MAX_LABELS = 20


@dataclass
class Dataset:
    """Numeric feature matrix plus target.

    ``columns`` has shape (n, d); classification targets are dense integer
    labels 0..C-1.  ``feature_names`` are already sanitized to token form.
    """

    columns: np.ndarray
    target: np.ndarray
    task: Task
    feature_names: list[str]
    target_name: str = "target"
    dropped_rows: int = 0
    class_labels: Optional[np.ndarray] = None  # original label per dense id

    def __post_init__(self):
        n, d = self.columns.shape
        if len(self.target) != n:
            raise IngestionError("target length does not match feature rows")
        if n < 10:
            raise IngestionError(f"need at least 10 rows after cleaning, got {n}")
        if d != len(self.feature_names):
            raise IngestionError("feature_names does not match column count")
        if not np.isfinite(self.columns).all() or not np.isfinite(self.target).all():
            raise IngestionError("non-finite values survived ingestion cleaning")

    @property
    def n_rows(self) -> int:
        return self.columns.shape[0]

    @property
    def n_features(self) -> int:
        return self.columns.shape[1]

    @property
    def n_classes(self) -> int:
        if self.task is not Task.CLASSIFICATION:
            return 0
        return int(self.target.max()) + 1


MISSING_MARKERS = ("", "na", "nan", "null", "?")


def _is_missing(cell: str) -> bool:
    return cell.strip().lower() in MISSING_MARKERS


def _parse_cell(cell: str) -> Optional[float]:
    if _is_missing(cell):
        return None
    try:
        return float(cell.strip())
    except ValueError:
        return None


def _is_integral(values: np.ndarray) -> bool:
    return bool(np.all(values == np.round(values)))


def infer_task(target: np.ndarray) -> Task:
    """Auto-detection rule: integer-valued targets with few distinct values
    are treated as class labels."""
    if _is_integral(target) and len(np.unique(target)) <= AUTO_CLASS_MAX_LABELS:
        return Task.CLASSIFICATION
    return Task.REGRESSION


def from_arrays(
    columns: np.ndarray,
    target: np.ndarray,
    task: Task,
    feature_names: Optional[Sequence[str]] = None,
    reserved_names: Sequence[str] = (),
) -> Dataset:
    """Build a Dataset from in-memory arrays (fixtures, tests)."""
    columns = np.asarray(columns, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if feature_names is None:
        feature_names = [f"f{i}" for i in range(columns.shape[1])]
    names = sanitize_feature_names(feature_names, reserved=reserved_names)
    if task is Task.CLASSIFICATION:
        labels, target = np.unique(target, return_inverse=True)
        return Dataset(columns, target.astype(np.float64), task, names, class_labels=labels)
    return Dataset(columns, target, task, names)


def load_csv(
    path: str,
    target_column: str,
    task: str = "auto",
    reserved_names: Sequence[str] = (),
) -> Dataset:
    """Read a headered CSV into a Dataset.

    Non-numeric feature columns are label-encoded to integers; rows with any
    missing value are dropped (the count is kept on the dataset).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        rows = [row for row in reader if row and any(c.strip() for c in row)]

    header = [h.strip() for h in header]
    if target_column not in header:
        raise TargetColumnMissing(f"target column {target_column!r} not found in {header}")
    target_idx = header.index(target_column)
    width = len(header)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise IngestionError(f"row {i + 2} has {len(row)} cells, expected {width}")

    # Column-wise parse: numeric where every non-missing cell parses, else
    # label-encode the raw strings.
    raw_cols: list[list[str]] = [[row[j] for row in rows] for j in range(width)]
    parsed: list[list[Optional[float]]] = []
    for j, col in enumerate(raw_cols):
        values = [_parse_cell(c) for c in col]
        unparsed = [c.strip() for c in col if not _is_missing(c) and _parse_cell(c) is None]
        if unparsed:
            # non-numeric column: label-encode every non-missing cell
            levels = sorted({c.strip() for c in col if not _is_missing(c)})
            code = {lvl: float(i) for i, lvl in enumerate(levels)}
            values = [None if _is_missing(c) else code[c.strip()] for c in col]
        parsed.append(values)

    keep = [i for i in range(len(rows)) if all(parsed[j][i] is not None for j in range(width))]
    dropped = len(rows) - len(keep)
    if not keep:
        raise IngestionError(f"{path}: no complete rows after dropping missing values")

    matrix = np.array([[parsed[j][i] for j in range(width)] for i in keep], dtype=np.float64)
    target = matrix[:, target_idx]
    feature_cols = np.delete(matrix, target_idx, axis=1)
    feature_headers = [h for j, h in enumerate(header) if j != target_idx]

    if task == "auto":
        resolved = infer_task(target)
    elif task in ("clf", "classification"):
        if not _is_integral(target):
            raise IngestionError("classification target must be integer labels")
        resolved = Task.CLASSIFICATION
    elif task in ("reg", "regression"):
        resolved = Task.REGRESSION
    else:
        raise IngestionError(f"unknown task {task!r}")

    ds = from_arrays(feature_cols, target, resolved, feature_headers, reserved_names)
    ds.target_name = target_column
    ds.dropped_rows = dropped
    return ds
