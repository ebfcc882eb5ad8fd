"""
Class-incremental training loop.

For each task n the live model's head grows by |T_n| outputs, the model is
trained on task-n samples only, every seen task is evaluated, and a frozen
checkpoint is taken to anchor distillation and drift penalties for task n+1.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .cka import CKATrajectory, cka_trajectory
from .data import (
    Dataset, TaskSequence, auxiliary_split, cached_synthetic, generate_synthetic, load_cifar_binary,
    make_task_sequence,
)
from .errors import ArtifactError, NumericalError, TaskError, UndefinedSimilarityError
from .metrics import AccuracyMatrix, accuracy_curve, build_report, mean_report
from .model import (
    CheckpointModel, Model, copy_encoder, expand_head, forward, freeze_checkpoint,
    load_checkpoint, save_checkpoint,
)
from .optimizer import Adam
from .regularizers import (
    FisherDiagonal, classification_loss, compute_fisher_diagonal, ewc_param_loss,
    feat_kd_loss, l2_param_loss, pred_kd_loss, total_loss,
)
from .schemas import DatasetSpec, EncoderSpec, ExperimentConfig, MethodSpec, MetricsReport, TrainSchedule
from .store import (
    ACC_MATRIX, CKA, CONFIG, ENCODER, LOSS_LOG, MANIFEST, METRICS, METRICS_MEAN, PROBE,
    checkpoint_name, experiment_dir, is_seed_complete, prepare_seed_dir, write_csv, write_json, write_tensors,
)
from .tensor import Tape, Tensor, argmax, columns, debug_enabled, debug_numerics, detach

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
LOSS_TERMS = ("cls", "pred_kd", "feat_kd", "ewc", "l2")


@dataclass
class RunState:
    """Everything one trial carries from task to task."""
    model: Model
    dataset: Dataset
    tasks: TaskSequence
    method: MethodSpec
    schedule: TrainSchedule
    matrix: AccuracyMatrix
    rng: np.random.Generator
    head_rng: np.random.Generator
    checkpoint: Optional[CheckpointModel] = None
    fisher: Optional[FisherDiagonal] = None
    task_cursor: int = 0
    step: int = 0
    checkpoints: List[CheckpointModel] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)
    loss_log: List[dict] = field(default_factory=list)

    @property
    def uses_ewc(self) -> bool:
        return self.method.weights.ewc > 0


# ── Setup ────────────────────────────────────────────────────────

def resolve_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "synthetic":
        params = (spec.num_classes, spec.dim, spec.per_class, spec.separation, spec.seed)
        if spec.cache_file is not None:
            return cached_synthetic(spec.cache_file, *params)
        return generate_synthetic(*params)
    return load_cifar_binary(spec.train_path, spec.variant, spec.test_path)


def _seed_sequence(entropy, schedule: TrainSchedule) -> np.random.SeedSequence:
    """The trial seed fixes the task split; a nonzero schedule seed reshuffles init and minibatches only."""
    if schedule.seed == 0:
        return np.random.SeedSequence(entropy)
    return np.random.SeedSequence(entropy, spawn_key=(schedule.seed,))


def init_state(dataset: Dataset, tasks: TaskSequence, method: MethodSpec, schedule: TrainSchedule,
               hidden_dims: Sequence[int], seed: int) -> RunState:
    init_seq, batch_seq, head_seq = _seed_sequence(seed, schedule).spawn(3)
    spec = EncoderSpec(input_dim=dataset.dim, hidden_dims=list(hidden_dims))
    test_counts = [int(tasks.task_data(dataset, n, "test")[0].shape[0]) for n in range(1, tasks.num_tasks + 1)]
    return RunState(
        model=Model(spec, np.random.default_rng(init_seq)),
        dataset=dataset,
        tasks=tasks,
        method=method,
        schedule=schedule,
        matrix=AccuracyMatrix(task_sizes=tasks.sizes, test_counts=test_counts),
        rng=np.random.default_rng(batch_seq),
        head_rng=np.random.default_rng(head_seq),
    )


# ── Training ─────────────────────────────────────────────────────

def _task_scope(state: RunState, n: int) -> Tuple[np.ndarray, np.ndarray, Tuple[int, int]]:
    """Training rows, their column labels and the classification scope for task n."""
    if state.method.is_upper_bound:
        parts = [state.tasks.task_data(state.dataset, k, "train") for k in range(1, n + 1)]
        x = np.concatenate([p[0] for p in parts])
        y = np.concatenate([p[1] for p in parts])
        return x, y, (0, state.tasks.seen_width(n))
    x, y = state.tasks.task_data(state.dataset, n, "train")
    return x, y, state.tasks.block(n)


def _trainable_names(state: RunState, n: int) -> List[str]:
    names = list(state.model.parameters())
    if state.method.freeze_old_heads and n >= 2:
        frozen = {name for k in range(n - 1) for name in state.model.head_block_names(k)}
        names = [name for name in names if name not in frozen]
    return names


def _check_anchor(state: RunState, n: int) -> None:
    if n == 1 or state.method.is_upper_bound:
        return
    ckpt = state.checkpoint
    if ckpt is None or ckpt.task_index != n - 1:
        raise RuntimeError(f"task {n} needs the checkpoint frozen after task {n - 1}")
    if ckpt.frozen_step > state.step:
        raise RuntimeError(f"checkpoint frozen at step {ckpt.frozen_step} is later than step {state.step}")
    if state.uses_ewc and (state.fisher is None or state.fisher.task_index != n - 1):
        raise RuntimeError(f"task {n} needs a Fisher diagonal computed on task {n - 1}")


def train_step(state: RunState, optimizer: Adam, xb: np.ndarray, yb: np.ndarray,
               scope: Tuple[int, int], n: int, names: Sequence[str]) -> Dict[str, float]:
    """One minibatch update; returns the value of every loss term."""
    method, weights = state.method, state.method.weights
    anchor = state.checkpoint if n >= 2 and not method.is_upper_bound else None
    feat_taps = list(method.feat_taps) if anchor is not None and weights.feat_kd > 0 else []
    old_width = state.tasks.seen_width(n - 1)

    optimizer.zero_grad()
    x = Tensor(xb)
    with Tape() as tape:
        logits, acts = forward(state.model, x, feat_taps)
        cls = classification_loss(logits, yb, scope, method.head_mode, method.balanced_bce)
        kd_terms: Dict[str, Optional[Tensor]] = {}
        param_terms: Dict[str, Optional[Tensor]] = {}
        if anchor is not None:
            ckpt_logits, ckpt_acts = forward(anchor, x, feat_taps)
            if weights.pred_kd > 0:
                kd_terms["pred_kd"] = pred_kd_loss(
                    columns(logits, 0, old_width), detach(columns(ckpt_logits, 0, old_width)),
                    method.head_mode, method.temperature,
                )
            for tap in feat_taps:
                term = feat_kd_loss(acts[tap], detach(ckpt_acts[tap]))
                kd_terms["feat_kd"] = term if "feat_kd" not in kd_terms else kd_terms["feat_kd"] + term
            if weights.ewc > 0:
                param_terms["ewc"] = ewc_param_loss(state.model, anchor, state.fisher)
            if weights.l2 > 0:
                param_terms["l2"] = l2_param_loss(state.model, anchor)
        try:
            loss = total_loss(cls, kd_terms, param_terms, weights)
        except NumericalError as e:
            raise NumericalError(f"step {state.step}: {e}") from e
    if not np.isfinite(loss.item()):
        raise NumericalError(f"step {state.step}: loss is not finite")

    tape.backward(loss)
    optimizer.step(names)
    state.step += 1
    state.step_losses.append(loss.item())

    values = {"loss": loss.item(), "cls": cls.item()}
    for key, term in {**kd_terms, **param_terms}.items():
        values[key] = term.item()
    return values


def train_task(state: RunState, n: int) -> RunState:
    """Train the live model on task n; the head must already cover task n's columns."""
    method, schedule = state.method, state.schedule
    if state.model.num_classes != state.tasks.seen_width(n):
        raise RuntimeError(
            f"head has {state.model.num_classes} outputs but tasks 1..{n} need {state.tasks.seen_width(n)}"
        )
    _check_anchor(state, n)
    x, y, scope = _task_scope(state, n)
    lo, hi = (0, state.tasks.seen_width(n)) if method.is_upper_bound else state.tasks.block(n)
    names = _trainable_names(state, n)
    optimizer = Adam(state.model.parameters(), lr=schedule.lr, weight_decay=schedule.weight_decay)
    logger.info("task %d: training %s on %d samples, scope %s", n, method.display_name, len(y), scope)

    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        optimizer.set_learning_rate(lr)
        order = state.rng.permutation(len(y))
        totals = dict.fromkeys(("loss",) + LOSS_TERMS, 0.0)
        batches = 0
        for start in range(0, len(order), schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            yb = y[idx]
            if yb.min() < lo or yb.max() >= hi:
                raise RuntimeError(f"task {n} batch holds columns outside [{lo}, {hi})")
            values = train_step(state, optimizer, x[idx], yb, scope, n, names)
            for key, value in values.items():
                totals[key] += value
            batches += 1
        row = {"task": n, "epoch": epoch, "lr": lr, "steps": batches}
        row.update({key: total / batches for key, total in totals.items()})
        state.loss_log.append(row)
        logger.debug("task %d epoch %d: loss %.6f", n, epoch, row["loss"])
    # Backward accumulates into leaf grads; nothing from the last step may leak past the task.
    optimizer.zero_grad()
    return state


# ── Evaluation ───────────────────────────────────────────────────

def predict_accuracy(model, x: np.ndarray, labels: np.ndarray, start: int = 0, stop: Optional[int] = None) -> float:
    """Share of rows whose argmax over columns [start, stop) hits the label column."""
    logits, _ = forward(model, x)
    stop = logits.shape[1] if stop is None else stop
    predicted = argmax(columns(logits, start, stop), axis=1) + start
    return float(np.mean(predicted == labels))


def evaluate(model, dataset: Dataset, tasks: TaskSequence, i: int) -> Tuple[List[float], List[float]]:
    """A[i, n] (argmax inside task n's block) and R[i, n] (argmax over all seen columns) for n <= i."""
    seen = tasks.seen_width(i)
    local, global_ = [], []
    for n in range(1, i + 1):
        x, cols = tasks.task_data(dataset, n, "test")
        if x.shape[0] == 0:
            raise ValueError(f"task {n} has no test split")
        start, stop = tasks.block(n)
        local.append(predict_accuracy(model, x, cols, start, stop))
        global_.append(predict_accuracy(model, x, cols, 0, seen))
    return local, global_


# ── Pre-training ─────────────────────────────────────────────────

def pretrain_encoder(aux: Dataset, continual: Optional[Dataset], encoder_spec: EncoderSpec,
                     schedule: TrainSchedule, path: Optional[PathLike] = None, seed: int = 0) -> Model:
    """Train encoder plus a throwaway softmax head jointly on the auxiliary classes."""
    if aux.num_classes == 0 or aux.train_y.size == 0:
        raise ValueError("auxiliary split is empty")
    if continual is not None:
        overlap = set(aux.class_ids) & set(continual.class_ids)
        if overlap:
            raise ValueError(f"auxiliary and continual splits share classes {sorted(overlap)}")

    init_seq, head_seq, batch_seq = _seed_sequence([seed, 1], schedule).spawn(3)
    model = Model(encoder_spec, np.random.default_rng(init_seq))
    expand_head(model, aux.num_classes, np.random.default_rng(head_seq))
    optimizer = Adam(model.parameters(), lr=schedule.lr, weight_decay=schedule.weight_decay)
    rng = np.random.default_rng(batch_seq)
    x, y = aux.train_x, aux.train_y

    for epoch in range(schedule.epochs):
        optimizer.set_learning_rate(schedule.lr_at(epoch))
        order = rng.permutation(len(y))
        for start in range(0, len(order), schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            optimizer.zero_grad()
            with Tape() as tape:
                logits, _ = forward(model, x[idx])
                loss = classification_loss(logits, y[idx], (0, aux.num_classes), "softmax")
            if not np.isfinite(loss.item()):
                raise NumericalError(f"pre-training epoch {epoch}: loss is not finite")
            tape.backward(loss)
            optimizer.step()

    if aux.test_y.size:
        logger.info("pre-trained encoder: auxiliary test accuracy %.4f",
                    predict_accuracy(model, aux.test_x, aux.test_y))
    if path is not None:
        save_checkpoint(model, path)
    return model


# ── Experiment ───────────────────────────────────────────────────

def _finish_task(state: RunState, n: int) -> None:
    """Freeze the post-task model and, for EWC, its Fisher diagonal."""
    fisher = None
    if state.uses_ewc and n < state.tasks.num_tasks:
        x, y = state.tasks.task_data(state.dataset, n, "train")
        fisher = compute_fisher_diagonal(
            state.model, x, y, state.method.head_mode, state.tasks.block(n),
            balanced=state.method.balanced_bce, task_index=n,
            max_samples=state.method.fisher_max_samples,
        )
    ckpt = freeze_checkpoint(state.model, fisher=fisher, frozen_step=state.step, task_index=n)
    state.checkpoints.append(ckpt)
    state.checkpoint = ckpt
    state.fisher = fisher


def run_tasks(state: RunState) -> RunState:
    for n in range(1, state.tasks.num_tasks + 1):
        try:
            expand_head(state.model, state.tasks.sizes[n - 1], state.head_rng)
            train_task(state, n)
            local, global_ = evaluate(state.model, state.dataset, state.tasks, n)
            state.matrix.set_row(n, local, global_)
            state.task_cursor = n
            _finish_task(state, n)
        except TaskError:
            raise
        except Exception as e:
            raise TaskError(n, e) from e
        logger.info("task %d done: A[%d, %d]=%.4f, seen-class accuracy %.4f",
                    n, n, n, local[-1], accuracy_curve(state.matrix)[n - 1])
    return state


def make_probe(dataset: Dataset, tasks: TaskSequence, size: int, seed: int) -> np.ndarray:
    """A fixed subset of task-1 test rows, in a seed-determined order."""
    x, _ = tasks.task_data(dataset, 1, "test")
    order = np.random.default_rng(np.random.SeedSequence([seed, 2])).permutation(x.shape[0])
    probe = x[order[:size]]
    if probe.shape[0] < 2:
        raise ValueError(f"CKA probe needs at least 2 task-1 test rows, found {x.shape[0]}")
    return probe


def compute_cka(checkpoints: Sequence[CheckpointModel], probe: np.ndarray, taps: Sequence[str],
                accuracy: Sequence[float]) -> CKATrajectory:
    """Trajectory over every tap; an undefined tap is logged and filled with NaN."""
    first_block = (0, checkpoints[0].head.block_sizes[0])
    trajectory = CKATrajectory(taps=list(taps), accuracy=list(accuracy))
    for tap in taps:
        try:
            trajectory.values[tap] = cka_trajectory(checkpoints, probe, [tap], first_block).values[tap]
        except UndefinedSimilarityError as e:
            logger.warning("CKA undefined for tap '%s': %s", tap, e)
            trajectory.values[tap] = [float("nan")] * len(checkpoints)
    return trajectory


def prepare_data(config: ExperimentConfig, seed: int) -> Tuple[Dataset, Optional[Dataset], TaskSequence]:
    """Continual dataset, optional auxiliary dataset, and the trial's task sequence."""
    dataset = resolve_dataset(config.dataset)
    aux = None
    if config.pretrain.enabled and config.pretrain.encoder_file is None:
        aux, dataset = auxiliary_split(dataset, config.pretrain.aux_fraction, config.split.seed)
    dataset.check_coverage()
    split = config.split.model_copy(update={"seed": config.split.seed + seed})
    return dataset, aux, make_task_sequence(dataset, split)


def run_experiment(config: ExperimentConfig, seed: int, out_dir: Optional[PathLike] = None,
                   force: bool = False) -> RunState:
    """One trial: optional pre-training, the task loop, then metrics and artifacts."""
    debug_numerics(config.debug_numerics or debug_enabled())
    if out_dir is not None:
        out_dir = prepare_seed_dir(out_dir, force)
    dataset, aux, tasks = prepare_data(config, seed)
    state = init_state(dataset, tasks, config.method, config.schedule, config.hidden_dims, seed)

    if config.pretrain.enabled:
        if config.pretrain.encoder_file is not None:
            source = load_checkpoint(config.pretrain.encoder_file)
        else:
            epochs = config.pretrain.epochs or config.schedule.epochs
            decay = [e for e in config.schedule.lr_decay_epochs if e < epochs]
            schedule = config.schedule.model_copy(update={"epochs": epochs, "lr_decay_epochs": decay})
            path = Path(out_dir) / ENCODER if out_dir is not None else None
            source = pretrain_encoder(aux, dataset, state.model.spec, schedule, path, seed)
        copy_encoder(source, state.model)

    run_tasks(state)
    if out_dir is not None:
        write_artifacts(state, config, seed, Path(out_dir))
    return state


def write_artifacts(state: RunState, config: ExperimentConfig, seed: int, out_dir: Path) -> MetricsReport:
    report = build_report(state.matrix)
    for ckpt in state.checkpoints:
        save_checkpoint(ckpt, out_dir / checkpoint_name(ckpt.task_index))
    write_csv(out_dir / ACC_MATRIX, state.matrix.to_frame())
    write_csv(out_dir / LOSS_LOG, pd.DataFrame(state.loss_log))

    probe = make_probe(state.dataset, state.tasks, config.analysis.probe_size, seed)
    write_tensors(out_dir / PROBE, {"probe": probe})
    trajectory = compute_cka(state.checkpoints, probe, config.analysis.cka_taps, report.accuracy_curve)
    write_csv(out_dir / CKA, trajectory.to_frame())

    digest = config.digest()
    write_json(out_dir / METRICS, {
        "digest": digest,
        "seed": seed,
        "method": config.method.display_name,
        **report.model_dump(),
    })
    write_json(out_dir / MANIFEST, {
        "digest": digest,
        "seed": seed,
        "name": config.name,
        "method": config.method.display_name,
        "provenance": state.dataset.provenance,
        "tasks": [[state.dataset.class_ids[c] for c in task] for task in state.tasks.tasks],
        "checkpoints": [checkpoint_name(c.task_index) for c in state.checkpoints],
        "frozen_steps": [c.frozen_step for c in state.checkpoints],
        "config": config.resolved(),
    })
    logger.info("seed %d artifacts written to %s", seed, out_dir)
    return report


def run_trial(config_payload: dict, seed: int, output_root: str, force: bool = False) -> dict:
    """Process-pool entry point: rebuild the config, run one seed, return its report."""
    config = ExperimentConfig.model_validate(config_payload)
    out = experiment_dir(output_root, config.digest()) / str(seed)
    state = run_experiment(config, seed, out, force)
    return build_report(state.matrix).model_dump()


def run_all_seeds(config: ExperimentConfig, output_root: Optional[PathLike] = None, force: bool = False,
                  workers: int = 1) -> Dict[int, MetricsReport]:
    """Run every configured seed and write the experiment-level mean report."""
    root = str(output_root if output_root is not None else config.output_dir)
    exp_dir = experiment_dir(root, config.digest())
    if not force:
        done = [s for s in config.seeds if is_seed_complete(exp_dir / str(s))]
        if done:
            raise ArtifactError(f"artifacts exist in {exp_dir} for seeds {done}; pass --force to overwrite")
    payload = config.resolved()

    if workers > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {s: pool.submit(run_trial, payload, s, root, force) for s in config.seeds}
            results = {s: f.result() for s, f in futures.items()}
    else:
        results = {s: run_trial(payload, s, root, force) for s in config.seeds}

    reports = {s: MetricsReport.model_validate(r) for s, r in results.items()}
    mean = mean_report([reports[s] for s in config.seeds])
    write_json(exp_dir / CONFIG, payload)
    write_json(exp_dir / METRICS_MEAN, {
        "digest": config.digest(),
        "method": config.method.display_name,
        "seeds": list(config.seeds),
        **mean.model_dump(),
    })
    return reports
