"""
Accuracy matrices and the forgetting metrics computed from them.

A[i, n] is the accuracy on task n after training through task i with the
argmax restricted to task n's columns; R[i, n] uses the argmax over every
column seen through task i. Both are stored 0-based internally and filled
only for n <= i.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from .errors import UndefinedMetricError
from .schemas import MetricsReport

logger = logging.getLogger(__name__)


@dataclass
class AccuracyMatrix:
    task_sizes: List[int]
    test_counts: List[int]
    A: Optional[np.ndarray] = None
    R: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.task_sizes)
        if n == 0:
            raise ValueError("an accuracy matrix needs at least one task")
        if len(self.test_counts) != n:
            raise ValueError(f"{len(self.test_counts)} test counts for {n} tasks")
        if any(s <= 0 for s in self.task_sizes):
            raise ValueError(f"task sizes must be positive, got {self.task_sizes}")
        if any(c < 0 for c in self.test_counts):
            raise ValueError(f"test counts must be nonnegative, got {self.test_counts}")
        for name in ("A", "R"):
            table = getattr(self, name)
            if table is None:
                setattr(self, name, np.full((n, n), np.nan))
            elif np.asarray(table).shape != (n, n):
                raise ValueError(f"table {name} must be {n}x{n}, got {np.asarray(table).shape}")
            else:
                setattr(self, name, np.array(table, dtype=np.float64))

    @property
    def N(self) -> int:
        return len(self.task_sizes)

    def set_row(self, i: int, local: Sequence[float], global_: Sequence[float]) -> None:
        """Fill row i (1-based) with A[i, 1..i] and R[i, 1..i]."""
        if not 1 <= i <= self.N:
            raise IndexError(f"row {i} outside 1..{self.N}")
        for name, values in (("A", local), ("R", global_)):
            values = np.asarray(values, dtype=np.float64)
            if values.shape != (i,):
                raise ValueError(f"row {i} of {name} needs {i} entries, got {values.shape}")
            if np.any((values < 0) | (values > 1)):
                raise ValueError(f"accuracy entries must lie in [0, 1], got {values.tolist()}")
            getattr(self, name)[i - 1, :i] = values

    def row_complete(self, i: int) -> bool:
        return not (np.isnan(self.A[i - 1, :i]).any() or np.isnan(self.R[i - 1, :i]).any())

    def is_complete(self) -> bool:
        return all(self.row_complete(i) for i in range(1, self.N + 1))

    def require_complete(self) -> None:
        missing = [i for i in range(1, self.N + 1) if not self.row_complete(i)]
        if missing:
            raise UndefinedMetricError(f"accuracy matrix rows {missing} are incomplete")

    # ── CSV form ──

    def to_frame(self) -> pd.DataFrame:
        cols = [f"task_{n}" for n in range(1, self.N + 1)]
        rows = [
            {"table": "task_size", "i": 0, **dict(zip(cols, map(float, self.task_sizes)))},
            {"table": "test_count", "i": 0, **dict(zip(cols, map(float, self.test_counts)))},
        ]
        for name in ("A", "R"):
            table = getattr(self, name)
            for i in range(1, self.N + 1):
                rows.append({"table": name, "i": i, **dict(zip(cols, table[i - 1]))})
        return pd.DataFrame(rows, columns=["table", "i"] + cols)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "AccuracyMatrix":
        cols = [c for c in frame.columns if c.startswith("task_")]
        cols.sort(key=lambda c: int(c.split("_")[1]))

        def _table(name: str) -> pd.DataFrame:
            part = frame[frame["table"] == name]
            if part.empty:
                raise UndefinedMetricError(f"accuracy matrix file has no '{name}' rows")
            return part

        sizes = [int(v) for v in _table("task_size")[cols].iloc[0]]
        counts = [int(v) for v in _table("test_count")[cols].iloc[0]]
        matrix = cls(task_sizes=sizes, test_counts=counts)
        for name in ("A", "R"):
            part = _table(name).sort_values("i")
            getattr(matrix, name)[:, :] = part[cols].to_numpy(dtype=np.float64)
        return matrix


# ── Metrics ──────────────────────────────────────────────────────

def final_accuracy(matrix: AccuracyMatrix, global_row: Optional[Sequence[float]] = None) -> float:
    """Test-count-weighted mean of R[N, n]; equals pooled accuracy over every seen test example."""
    row = np.asarray(global_row if global_row is not None else matrix.R[matrix.N - 1], dtype=np.float64)
    if row.shape != (matrix.N,) or np.isnan(row).any():
        raise UndefinedMetricError(f"final row is incomplete: {row.tolist()}")
    counts = np.asarray(matrix.test_counts, dtype=np.float64)
    if counts.sum() == 0:
        raise UndefinedMetricError("no test examples to weight the final accuracy")
    return float((counts * row).sum() / counts.sum())


def _need_two_tasks(matrix: AccuracyMatrix, metric: str) -> None:
    if matrix.N < 2:
        raise UndefinedMetricError(f"{metric} is undefined for a single task")
    matrix.require_complete()


def global_forgetting(matrix: AccuracyMatrix) -> float:
    """Size-weighted drop of R from its on-task value, averaged over tasks 2..N."""
    _need_two_tasks(matrix, "global forgetting")
    sizes = np.asarray(matrix.task_sizes, dtype=np.float64)
    diag = np.diag(matrix.R)
    total = 0.0
    for i in range(1, matrix.N):
        seen = sizes[:i + 1].sum()
        total += float((sizes[:i] / seen * (diag[:i] - matrix.R[i, :i])).sum())
    return total / (matrix.N - 1)


def local_forgetting(matrix: AccuracyMatrix) -> float:
    """Mean of A[n, n] - A[N, n] over n < N; positive means forgetting."""
    _need_two_tasks(matrix, "local forgetting")
    last = matrix.N - 1
    drops = np.diag(matrix.A)[:last] - matrix.A[last, :last]
    return float(drops.mean())


def plasticity_curve(matrix: AccuracyMatrix) -> List[float]:
    """A[n, n] for each n: accuracy on the task just learned."""
    return [float(v) for v in np.diag(matrix.A)]


def accuracy_curve(matrix: AccuracyMatrix) -> List[float]:
    """Accuracy over all seen classes after each task, A[n, 1:n]."""
    counts = np.asarray(matrix.test_counts, dtype=np.float64)
    curve = []
    for i in range(1, matrix.N + 1):
        row, w = matrix.R[i - 1, :i], counts[:i]
        curve.append(float((w * row).sum() / w.sum()) if w.sum() else float("nan"))
    return curve


def build_report(matrix: AccuracyMatrix) -> MetricsReport:
    matrix.require_complete()
    multi = matrix.N >= 2
    return MetricsReport(
        final_accuracy=final_accuracy(matrix),
        global_forgetting=global_forgetting(matrix) if multi else None,
        local_forgetting=local_forgetting(matrix) if multi else None,
        accuracy_curve=accuracy_curve(matrix),
        plasticity=plasticity_curve(matrix),
    )


def mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Per-metric mean over trials."""
    if not reports:
        raise UndefinedMetricError("no trial reports to average")

    def _mean(values):
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else None

    return MetricsReport(
        final_accuracy=_mean(r.final_accuracy for r in reports),
        global_forgetting=_mean(r.global_forgetting for r in reports),
        local_forgetting=_mean(r.local_forgetting for r in reports),
        accuracy_curve=np.mean([r.accuracy_curve for r in reports], axis=0).tolist(),
        plasticity=np.mean([r.plasticity for r in reports], axis=0).tolist(),
    )
