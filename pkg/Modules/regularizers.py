"""
Classification, distillation and parameter-regularization losses.

Labels are logit column indices. A class scope is a contiguous column range
(start, stop), which is how task blocks are laid out in the expanding head.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DimensionError, NumericalError
from .schemas import LossWeights
from .tensor import (
    Tape, Tensor, columns, elementwise, log_sigmoid, log_softmax, reduce,
    softmax_array, square, stable_sigmoid,
)

logger = logging.getLogger(__name__)

Scope = Union[Tuple[int, int], range]


@dataclass
class FisherDiagonal:
    """Per-parameter diagonal Fisher estimate, tagged with the task it was computed on."""
    values: Dict[str, np.ndarray]
    task_index: int = 0

    def __post_init__(self):
        for name, arr in self.values.items():
            if np.any(arr < 0):
                raise ValueError(f"Fisher entries must be nonnegative; '{name}' has negative values")

    def congruent_with(self, arrays: Mapping[str, np.ndarray]) -> bool:
        return set(self.values) == set(arrays) and all(
            self.values[n].shape == arrays[n].shape for n in arrays
        )


@dataclass
class PredictionDistribution:
    probs: np.ndarray
    head_mode: str
    class_range: Tuple[int, int]


def prediction_distribution(logits: Tensor, head_mode: str, class_range: Optional[Scope] = None,
                            temperature: float = 1.0) -> PredictionDistribution:
    start, stop = _scope_bounds(logits, class_range)
    z = logits.data[..., start:stop] / temperature
    if head_mode == "softmax":
        probs = softmax_array(z)
    elif head_mode == "sigmoid":
        probs = stable_sigmoid(z)
    else:
        raise ValueError(f"Unknown head_mode '{head_mode}'. Choose from: ['softmax', 'sigmoid']")
    return PredictionDistribution(probs=probs, head_mode=head_mode, class_range=(start, stop))


# ── Helpers ──────────────────────────────────────────────────────

def _scope_bounds(logits: Tensor, scope: Optional[Scope]) -> Tuple[int, int]:
    width = logits.shape[-1]
    if scope is None:
        return 0, width
    if isinstance(scope, range):
        if scope.step != 1:
            raise ValueError("class scope must be a contiguous range")
        start, stop = scope.start, scope.stop
    else:
        start, stop = scope
    if stop <= start:
        raise ValueError(f"class scope [{start}, {stop}) is empty")
    if start < 0 or stop > width:
        raise DimensionError(f"class scope [{start}, {stop}) exceeds logit width {width}")
    return start, stop


def _labels(labels, lo: int, hi: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < lo or labels.max() >= hi):
        raise ValueError(f"labels must lie in [{lo}, {hi}), got range [{labels.min()}, {labels.max()}]")
    return labels


def _one_hot(labels: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((labels.size, width))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _bce_terms(z: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise -(t log σ(z) + (1 - t) log σ(-z))."""
    pos = elementwise("mul", log_sigmoid(z), targets)
    neg = elementwise("mul", log_sigmoid(elementwise("neg", z)), 1.0 - targets)
    return elementwise("neg", elementwise("add", pos, neg))


# ── Classification losses ────────────────────────────────────────

def softmax_ce_loss(logits: Tensor, labels) -> Tensor:
    labels = _labels(labels, 0, logits.shape[-1])
    picked = reduce("sum", elementwise("mul", log_softmax(logits), _one_hot(labels, logits.shape[-1])), axis=-1)
    return elementwise("neg", reduce("mean", picked))


def bce_loss(logits: Tensor, labels, classes_in_scope: Optional[Scope] = None) -> Tensor:
    start, stop = _scope_bounds(logits, classes_in_scope)
    labels = _labels(labels, start, stop)
    z = columns(logits, start, stop) if (start, stop) != (0, logits.shape[-1]) else logits
    return reduce("mean", _bce_terms(z, _one_hot(labels - start, stop - start)))


def balanced_bce_loss(logits: Tensor, labels, classes_in_scope: Optional[Scope] = None) -> Tensor:
    """BCE whose negative targets weigh 1/(C-1) each, so each example carries 1:1 positive/negative mass."""
    start, stop = _scope_bounds(logits, classes_in_scope)
    count = stop - start
    if count < 2:
        raise ValueError(f"balanced BCE needs at least 2 classes in scope, got {count}")
    labels = _labels(labels, start, stop)
    targets = _one_hot(labels - start, count)
    weights = targets + (1.0 - targets) / (count - 1)
    z = columns(logits, start, stop) if (start, stop) != (0, logits.shape[-1]) else logits
    weighted = reduce("sum", elementwise("mul", _bce_terms(z, targets), weights))
    # Per example the weights total 2 (positive 1, negatives 1).
    return elementwise("mul", weighted, 1.0 / (2.0 * labels.size))


def classification_loss(logits: Tensor, labels, scope: Scope, head_mode: str, balanced: bool = False) -> Tensor:
    """The configured classification loss restricted to `scope`."""
    start, stop = _scope_bounds(logits, scope)
    if head_mode == "softmax":
        labels = _labels(labels, start, stop)
        z = columns(logits, start, stop) if (start, stop) != (0, logits.shape[-1]) else logits
        return softmax_ce_loss(z, labels - start)
    if head_mode == "sigmoid":
        if balanced:
            return balanced_bce_loss(logits, labels, (start, stop))
        return bce_loss(logits, labels, (start, stop))
    raise ValueError(f"Unknown head_mode '{head_mode}'. Choose from: ['softmax', 'sigmoid']")


# ── Parameter regularization ─────────────────────────────────────

def _drift_pairs(current, anchor) -> Sequence[Tuple[str, Tensor, np.ndarray]]:
    current_params = current.parameters()
    pairs = []
    for name, ref in anchor.parameters().items():
        if name not in current_params:
            raise DimensionError(f"anchor parameter '{name}' has no counterpart in the current model")
        cur = current_params[name]
        if cur.shape != ref.shape:
            raise DimensionError(f"parameter '{name}' shape mismatch: {cur.shape} vs anchor {ref.shape}")
        pairs.append((name, cur, ref.data))
    return pairs


def l2_param_loss(current, anchor) -> Tensor:
    """Sum of squared drift over every anchor parameter."""
    total: Optional[Tensor] = None
    for _, cur, ref in _drift_pairs(current, anchor):
        term = reduce("sum", square(elementwise("sub", cur, ref)))
        total = term if total is None else elementwise("add", total, term)
    return total if total is not None else Tensor(0.0)


def ewc_param_loss(current, anchor, fisher: Optional[FisherDiagonal] = None) -> Tensor:
    """Sum of Fisher-weighted squared drift over every anchor parameter."""
    fisher = fisher if fisher is not None else getattr(anchor, "fisher", None)
    if fisher is None:
        raise ValueError("EWC needs a Fisher diagonal computed on the previous task")
    total: Optional[Tensor] = None
    for name, cur, ref in _drift_pairs(current, anchor):
        if name not in fisher.values:
            raise DimensionError(f"Fisher diagonal has no entry for '{name}'")
        f = fisher.values[name]
        if f.shape != ref.shape:
            raise DimensionError(f"Fisher entry '{name}' shape {f.shape} does not match anchor {ref.shape}")
        if np.any(f < 0):
            raise ValueError(f"Fisher entry '{name}' has negative values")
        term = reduce("sum", elementwise("mul", square(elementwise("sub", cur, ref)), f))
        total = term if total is None else elementwise("add", total, term)
    return total if total is not None else Tensor(0.0)


def compute_fisher_diagonal(model, x: np.ndarray, labels, head_mode: str, scope: Scope,
                            balanced: bool = False, task_index: int = 0,
                            max_samples: Optional[int] = None) -> FisherDiagonal:
    """Empirical Fisher: mean over samples of squared per-sample loss gradients, true labels."""
    from .model import forward

    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("Fisher estimation needs at least one sample")
    rows = np.arange(x.shape[0])
    if max_samples is not None and max_samples < rows.size:
        rows = np.linspace(0, x.shape[0] - 1, max_samples).round().astype(np.int64)

    params = model.parameters()
    accum = {name: np.zeros_like(p.data) for name, p in params.items()}
    for i in rows:
        for p in params.values():
            p.grad = None
        with Tape() as tape:
            logits, _ = forward(model, x[i:i + 1])
            loss = classification_loss(logits, labels[i:i + 1], scope, head_mode, balanced)
        tape.backward(loss)
        for name, p in params.items():
            if p.grad is not None:
                accum[name] += p.grad * p.grad

    for p in params.values():
        p.grad = None
    values = {name: total / rows.size for name, total in accum.items()}
    logger.info("Fisher diagonal for task %d from %d samples", task_index, rows.size)
    return FisherDiagonal(values=values, task_index=task_index)


# ── Distillation ─────────────────────────────────────────────────

def pred_kd_loss(current_logits_old: Tensor, checkpoint_logits_old: Tensor, head_mode: str,
                 temperature: float = 1.0) -> Tensor:
    """Cross-entropy of current old-class predictions against the frozen checkpoint's predictions."""
    if current_logits_old.shape != checkpoint_logits_old.shape:
        raise DimensionError(
            f"class-range mismatch: current {current_logits_old.shape} vs checkpoint {checkpoint_logits_old.shape}"
        )
    target = prediction_distribution(checkpoint_logits_old, head_mode, temperature=temperature).probs
    z = current_logits_old if temperature == 1.0 else elementwise("mul", current_logits_old, 1.0 / temperature)

    if head_mode == "softmax":
        per_row = reduce("sum", elementwise("mul", log_softmax(z), target), axis=-1)
        return elementwise("neg", reduce("mean", per_row))
    return reduce("mean", _bce_terms(z, target))


def feat_kd_loss(current_features: Tensor, checkpoint_features: Tensor) -> Tensor:
    """Mean over the batch of the squared feature distance to the checkpoint."""
    if current_features.shape != checkpoint_features.shape:
        raise DimensionError(
            f"feature shape mismatch: current {current_features.shape} vs checkpoint {checkpoint_features.shape}"
        )
    batch = current_features.shape[0]
    total = reduce("sum", square(elementwise("sub", current_features, checkpoint_features.data)))
    return elementwise("mul", total, 1.0 / batch)


# ── Composition ──────────────────────────────────────────────────

def total_loss(cls_loss: Tensor, kd_terms: Mapping[str, Optional[Tensor]],
               param_terms: Mapping[str, Optional[Tensor]], weights: LossWeights) -> Tensor:
    """cls + λ_pred·pred_kd + λ_feat·feat_kd + λ_ewc·ewc + λ_l2·l2 over the terms present."""
    lambdas = {"pred_kd": weights.pred_kd, "feat_kd": weights.feat_kd, "ewc": weights.ewc, "l2": weights.l2}
    terms = {"cls": cls_loss, **dict(kd_terms), **dict(param_terms)}
    for key, term in terms.items():
        if term is None:
            continue
        if key != "cls" and key not in lambdas:
            raise KeyError(f"Unknown loss term '{key}'. Choose from: {list(lambdas.keys())}")
        if not np.all(np.isfinite(term.data)):
            raise NumericalError(f"loss term '{key}' is not finite")

    total = cls_loss
    for key, term in list(kd_terms.items()) + list(param_terms.items()):
        if term is None or lambdas[key] == 0.0:
            continue
        total = elementwise("add", total, elementwise("mul", term, lambdas[key]))
    return total
