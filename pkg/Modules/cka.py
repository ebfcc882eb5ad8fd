"""
Linear centered kernel alignment between layer activations of task checkpoints.

CKA is invariant to orthogonal transforms and isotropic scaling of either
argument, so it compares what a layer encodes rather than its coordinates.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import DimensionError, UndefinedSimilarityError
from .model import LINEAR_TAP, forward

logger = logging.getLogger(__name__)


@dataclass
class ActivationMatrix:
    """Probe rows by features at one tap of one checkpoint."""
    values: np.ndarray
    tap: str = ""
    task_index: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError(f"activation matrix must be 2-D, got shape {self.values.shape}")
        if self.values.shape[0] < 2:
            raise DimensionError(f"activation matrix needs at least 2 rows, got {self.values.shape[0]}")
        if not np.all(np.isfinite(self.values)):
            raise UndefinedSimilarityError(f"non-finite activations at tap '{self.tap}'", tap=self.tap)


def centering(x: np.ndarray) -> np.ndarray:
    """Subtract each column's mean."""
    return x - x.mean(axis=0, keepdims=True)


def linear_hsic(x: np.ndarray, y: np.ndarray) -> float:
    """Unnormalized linear HSIC on centered features: ||Ycᵀ Xc||_F²."""
    return float(np.sum((y.T @ x) ** 2))


def linear_cka(x, y) -> float:
    x_m = x if isinstance(x, ActivationMatrix) else ActivationMatrix(x)
    y_m = y if isinstance(y, ActivationMatrix) else ActivationMatrix(y, tap=x_m.tap)
    if x_m.values.shape[0] != y_m.values.shape[0]:
        raise DimensionError(
            f"CKA needs equal row counts: {x_m.values.shape} vs {y_m.values.shape}"
        )
    tap = x_m.tap or y_m.tap
    xc, yc = centering(x_m.values), centering(y_m.values)
    norm_x = np.linalg.norm(xc.T @ xc)
    norm_y = np.linalg.norm(yc.T @ yc)
    if norm_x == 0.0 or norm_y == 0.0:
        where = f" at tap '{tap}'" if tap else ""
        raise UndefinedSimilarityError(f"zero-variance activations{where}; CKA is undefined", tap=tap)
    return linear_hsic(xc, yc) / (norm_x * norm_y)


# ── Trajectories ─────────────────────────────────────────────────

@dataclass
class CKATrajectory:
    """Per tap, CKA of the first checkpoint's features against each later checkpoint's."""
    taps: List[str]
    values: Dict[str, List[float]] = field(default_factory=dict)
    accuracy: List[float] = field(default_factory=list)

    @property
    def num_tasks(self) -> int:
        return len(next(iter(self.values.values()), []))

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for tap in self.taps:
            for n, value in enumerate(self.values[tap], start=1):
                acc = self.accuracy[n - 1] if n - 1 < len(self.accuracy) else float("nan")
                rows.append({"task": n, "tap": tap, "cka": value, "acc": acc})
        return pd.DataFrame(rows, columns=["task", "tap", "cka", "acc"])

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "CKATrajectory":
        taps = list(dict.fromkeys(frame["tap"]))
        values = {t: frame[frame["tap"] == t].sort_values("task")["cka"].tolist() for t in taps}
        first = frame[frame["tap"] == taps[0]].sort_values("task") if taps else frame
        return cls(taps=taps, values=values, accuracy=first["acc"].tolist())


def tap_activations(checkpoint, probe_x: np.ndarray, tap: str,
                    first_block: Tuple[int, int]) -> ActivationMatrix:
    """Post-activation features at `tap`; the linear tap keeps only task-1 columns."""
    if tap not in checkpoint.registry:
        raise DimensionError(
            f"tap '{tap}' missing in the task-{getattr(checkpoint, 'task_index', '?')} checkpoint; "
            f"available: {list(checkpoint.registry.keys())}"
        )
    _, acts = forward(checkpoint, probe_x, [tap])
    values = acts[tap].data
    if tap == LINEAR_TAP:
        start, stop = first_block
        values = values[:, start:stop]
    return ActivationMatrix(values, tap=tap, task_index=getattr(checkpoint, "task_index", 0))


def cka_trajectory(checkpoints: Sequence, probe_x: np.ndarray, taps: Sequence[str],
                   first_block: Optional[Tuple[int, int]] = None,
                   accuracy: Optional[Sequence[float]] = None) -> CKATrajectory:
    """Compare every checkpoint against the first on an identical probe batch."""
    if not checkpoints:
        raise ValueError("cka_trajectory needs at least one checkpoint")
    probe_x = np.asarray(probe_x, dtype=np.float64)
    if first_block is None:
        first_block = (0, checkpoints[0].head.block_sizes[0])

    trajectory = CKATrajectory(taps=list(taps), accuracy=list(accuracy or []))
    for tap in taps:
        reference = tap_activations(checkpoints[0], probe_x, tap, first_block)
        series = []
        for ckpt in checkpoints:
            series.append(linear_cka(reference, tap_activations(ckpt, probe_x, tap, first_block)))
        trajectory.values[tap] = series
        logger.debug("tap %s: CKA %s", tap, ["%.4f" % v for v in series])
    return trajectory
