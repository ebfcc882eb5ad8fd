"""
Pydantic schemas for experiment configuration and emitted reports.
Every config model rejects unknown fields so a typo fails validation.
"""

import hashlib
import json
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .config import (
    CIFAR_VARIANTS, DEFAULT_BATCH_SIZE, DEFAULT_CKA_TAPS, DEFAULT_EPOCHS, DEFAULT_FEAT_TAPS,
    DEFAULT_HIDDEN_DIMS, DEFAULT_LEARNING_RATE, DEFAULT_LR_DECAY_EPOCHS,
    DEFAULT_LR_DECAY_FACTOR, DEFAULT_OUTPUT_DIR, DEFAULT_PROBE_SIZE,
    DEFAULT_WEIGHT_DECAY, METHODS, TUNED_LOSS_WEIGHTS,
)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ── Model and loss schemas ───────────────────────────────────────

class EncoderSpec(StrictModel):
    input_dim: int = Field(..., gt=0, description="Width of one input feature vector")
    hidden_dims: List[int] = Field(default_factory=lambda: list(DEFAULT_HIDDEN_DIMS),
                                   description="ReLU layer widths, first to penultimate")

    @field_validator("hidden_dims")
    @classmethod
    def _positive_layers(cls, dims: List[int]) -> List[int]:
        if not dims:
            raise ValueError("at least one hidden layer is required")
        if any(d <= 0 for d in dims):
            raise ValueError(f"hidden widths must be positive, got {dims}")
        return dims


class LossWeights(StrictModel):
    ewc: float = Field(0.0, ge=0.0, description="Weight of the Fisher-weighted drift penalty")
    l2: float = Field(0.0, ge=0.0, description="Weight of the unweighted drift penalty")
    pred_kd: float = Field(0.0, ge=0.0, description="Weight of prediction distillation")
    feat_kd: float = Field(0.0, ge=0.0, description="Weight of feature distillation")


class MethodSpec(StrictModel):
    name: str = Field("PredKD", description="Method name from the METHODS registry")
    head_mode: Literal["softmax", "sigmoid"] = "sigmoid"
    balanced_bce: bool = Field(False, description="Weight negative BCE targets by 1/(C-1)")
    weights: Optional[LossWeights] = Field(None, description="Defaults to the tuned weights of the active terms")
    feat_taps: List[str] = Field(default_factory=lambda: list(DEFAULT_FEAT_TAPS))
    temperature: float = Field(1.0, gt=0.0)
    freeze_old_heads: bool = False
    fisher_max_samples: Optional[int] = Field(None, gt=0)

    @field_validator("name")
    @classmethod
    def _known_method(cls, name: str) -> str:
        if name not in METHODS:
            raise ValueError(f"Unknown method '{name}'. Choose from: {list(METHODS.keys())}")
        return name

    @model_validator(mode="after")
    def _resolve_weights(self) -> "MethodSpec":
        if self.balanced_bce and self.head_mode != "sigmoid":
            raise ValueError("balanced_bce requires head_mode 'sigmoid'")
        if self.weights is None:
            entry = METHODS[self.name]
            reg = entry["param_reg"]
            self.weights = LossWeights(
                ewc=TUNED_LOSS_WEIGHTS["ewc"] if reg == "ewc" else 0.0,
                l2=TUNED_LOSS_WEIGHTS["l2"] if reg == "l2" else 0.0,
                pred_kd=TUNED_LOSS_WEIGHTS["pred_kd"] if entry["pred_kd"] else 0.0,
                feat_kd=TUNED_LOSS_WEIGHTS["feat_kd"] if entry["feat_kd"] else 0.0,
            )
        if self.name == "Naive" and any(self.weights.model_dump().values()):
            raise ValueError(f"Naive trains without regularizers; got nonzero weights {self.weights.model_dump()}")
        if self.weights.ewc > 0 and self.weights.l2 > 0:
            raise ValueError("ewc and l2 are alternatives; a method may weight at most one of them")
        if not self.feat_taps:
            raise ValueError("feat_taps must name at least one layer")
        if "linear" in self.feat_taps:
            raise ValueError("feat_taps must name encoder layers; the classifier output changes width per task")
        return self

    @property
    def is_upper_bound(self) -> bool:
        return self.name == "UpperBound"

    @property
    def display_name(self) -> str:
        return f"{self.name} ({'BCE' if self.head_mode == 'sigmoid' else 'Soft'})"


class TrainSchedule(StrictModel):
    epochs: int = Field(DEFAULT_EPOCHS, gt=0)
    batch_size: int = Field(DEFAULT_BATCH_SIZE, gt=0)
    lr: float = Field(DEFAULT_LEARNING_RATE, ge=0.0)
    lr_decay_epochs: List[int] = Field(default_factory=lambda: list(DEFAULT_LR_DECAY_EPOCHS))
    lr_decay_factor: float = Field(DEFAULT_LR_DECAY_FACTOR, gt=0.0)
    weight_decay: float = Field(DEFAULT_WEIGHT_DECAY, ge=0.0)
    seed: int = Field(0, ge=0, description="Varies initialization and minibatch order for a fixed task split")

    @model_validator(mode="after")
    def _decay_inside_schedule(self) -> "TrainSchedule":
        epochs = self.lr_decay_epochs
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError(f"lr_decay_epochs must be strictly increasing, got {epochs}")
        if epochs and (epochs[0] < 0 or epochs[-1] >= self.epochs):
            raise ValueError(f"lr_decay_epochs must lie in [0, {self.epochs}), got {epochs}")
        return self

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * self.lr_decay_factor ** drops


# ── Data schemas ─────────────────────────────────────────────────

class SplitSpec(StrictModel):
    kind: Literal["uniform", "expansion"] = "uniform"
    num_tasks: Optional[int] = Field(None, gt=0, description="uniform: number of tasks")
    per_task: Optional[int] = Field(None, gt=0, description="uniform: classes per task")
    first_size: Optional[int] = Field(None, gt=0, description="expansion: classes in task 1")
    tail_sizes: Optional[List[int]] = Field(None, description="expansion: classes in later tasks")
    seed: int = Field(0, ge=0, description="Class-assignment shuffle seed")

    @model_validator(mode="after")
    def _complete_for_kind(self) -> "SplitSpec":
        if self.kind == "uniform":
            if self.num_tasks is None or self.per_task is None:
                raise ValueError("uniform split needs num_tasks and per_task")
        else:
            if self.first_size is None or self.tail_sizes is None:
                raise ValueError("expansion split needs first_size and tail_sizes")
            if any(s <= 0 for s in self.tail_sizes):
                raise ValueError(f"tail_sizes must be positive, got {self.tail_sizes}")
        return self

    def sizes(self) -> List[int]:
        if self.kind == "uniform":
            return [self.per_task] * self.num_tasks
        return [self.first_size] + list(self.tail_sizes)


class DatasetSpec(StrictModel):
    kind: Literal["synthetic", "cifar"] = "synthetic"
    num_classes: int = Field(20, ge=2)
    dim: int = Field(16, ge=2)
    per_class: int = Field(100, ge=2)
    separation: float = Field(6.0, ge=0.0)
    seed: int = Field(0, ge=0)
    variant: Literal["cifar10", "cifar100_fine"] = "cifar100_fine"
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    cache_file: Optional[str] = Field(None, description="Synthetic only: reuse or write a cached copy of the data")

    @model_validator(mode="after")
    def _source_is_complete(self) -> "DatasetSpec":
        if self.kind == "cifar" and (not self.train_path or not self.test_path):
            raise ValueError("cifar datasets need train_path and test_path")
        if self.kind == "cifar" and self.cache_file is not None:
            raise ValueError("cache_file applies to synthetic datasets only")
        return self


# ── Experiment schemas ───────────────────────────────────────────

class PretrainSpec(StrictModel):
    enabled: bool = False
    aux_fraction: float = Field(0.5, gt=0.0, lt=1.0, description="Share of classes held out for pre-training")
    encoder_file: Optional[str] = Field(None, description="Use a saved encoder instead of training one")
    epochs: Optional[int] = Field(None, gt=0, description="Defaults to the main schedule's epochs")


class AnalysisSpec(StrictModel):
    cka_taps: List[str] = Field(default_factory=lambda: list(DEFAULT_CKA_TAPS))
    probe_size: int = Field(DEFAULT_PROBE_SIZE, ge=2)


class ExperimentConfig(StrictModel):
    name: str = "experiment"
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    split: SplitSpec = Field(default_factory=lambda: SplitSpec(num_tasks=5, per_task=4))
    method: MethodSpec = Field(default_factory=MethodSpec)
    hidden_dims: List[int] = Field(default_factory=lambda: list(DEFAULT_HIDDEN_DIMS))
    schedule: TrainSchedule = Field(default_factory=TrainSchedule)
    pretrain: PretrainSpec = Field(default_factory=PretrainSpec)
    analysis: AnalysisSpec = Field(default_factory=AnalysisSpec)
    output_dir: str = DEFAULT_OUTPUT_DIR
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    debug_numerics: bool = False

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentConfig":
        if not self.seeds:
            raise ValueError("seeds must list at least one trial seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"seeds must be distinct, got {self.seeds}")
        if self.dataset.kind == "synthetic":
            available = self.dataset.num_classes
        else:
            available = CIFAR_VARIANTS[self.dataset.variant]["num_classes"]
        continual = available
        if self.pretrain.enabled and self.pretrain.encoder_file is None:
            continual = available - round(self.pretrain.aux_fraction * available)
        if sum(self.split.sizes()) > continual:
            raise ValueError(
                f"split needs {sum(self.split.sizes())} classes but only {continual} are available"
            )
        EncoderSpec(input_dim=1, hidden_dims=self.hidden_dims)
        depth = len(self.hidden_dims)
        known = {"pen", "linear"} | {f"L-{d}" for d in range(2, depth + 1)}
        for label, taps in (("method.feat_taps", self.method.feat_taps), ("analysis.cka_taps", self.analysis.cka_taps)):
            unknown = [t for t in taps if t not in known]
            if unknown:
                raise ValueError(f"{label} names unknown taps {unknown}. Choose from: {sorted(known)}")
        return self

    def resolved(self) -> dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        payload = self.resolved()
        payload.pop("output_dir", None)
        payload["dataset"].pop("cache_file", None)
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]


# ── Report schemas ───────────────────────────────────────────────

class MetricsReport(BaseModel):
    """Final accuracy and forgetting for one trial."""
    final_accuracy: float = Field(..., description="A_{1:N}, pooled over all test examples")
    global_forgetting: Optional[float] = Field(None, description="F^G_N; undefined for one task")
    local_forgetting: Optional[float] = Field(None, description="F^L_N, positive means forgetting")
    accuracy_curve: List[float] = Field(default_factory=list, description="A_{n,1:n} for each n")
    plasticity: List[float] = Field(default_factory=list, description="A_{n,n} for each n")
