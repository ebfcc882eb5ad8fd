"""
Continual core modules: tensor, optimizer, model, regularizers, trainer, metrics, cka, data, store, formatter.
"""

from .config import METHODS, TUNED_LOSS_WEIGHTS
from .errors import (
    ArtifactError, CifarFormatError, ContinualError, CorruptHeaderError, DimensionError,
    DomainError, FrozenModelError, NumericalError, ShapeTableError, TapeError, TaskError,
    TruncatedPayloadError, UndefinedMetricError, UndefinedSimilarityError,
)
from .tensor import Tape, Tensor, backward, elementwise, matmul, reduce
from .optimizer import Adam, AdamState, adam_step
from .model import (
    CheckpointModel, Model, expand_head, forward, freeze_checkpoint, load_checkpoint, save_checkpoint,
)
from .regularizers import (
    FisherDiagonal, balanced_bce_loss, bce_loss, compute_fisher_diagonal, ewc_param_loss,
    feat_kd_loss, l2_param_loss, pred_kd_loss, total_loss,
)
from .metrics import AccuracyMatrix, build_report, final_accuracy, global_forgetting, local_forgetting
from .cka import CKATrajectory, cka_trajectory, linear_cka
from .data import Dataset, TaskSequence, auxiliary_split, generate_synthetic, load_cifar_binary, make_task_sequence
from .schemas import ExperimentConfig, LossWeights, MethodSpec, MetricsReport, SplitSpec, TrainSchedule
from .trainer import RunState, evaluate, pretrain_encoder, run_all_seeds, run_experiment, train_task
from .formatter import build_report_frame, format_report_table
