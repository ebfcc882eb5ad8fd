import numpy as np
import pytest

from Modules.data import Dataset, TaskSequence
from Modules.errors import ArtifactError, TaskError
from Modules.metrics import build_report
from Modules.model import Model, expand_head, forward, freeze_checkpoint, load_checkpoint, parameter_fingerprint
from Modules.regularizers import feat_kd_loss, pred_kd_loss
from Modules.schemas import EncoderSpec, ExperimentConfig, MethodSpec, TrainSchedule
from Modules.store import read_json
from Modules.tensor import Tape, Tensor, columns
from Modules.trainer import (
    compute_cka, evaluate, init_state, make_probe, predict_accuracy, pretrain_encoder, run_all_seeds,
    run_experiment, train_task,
)


def one_hot_dataset() -> Dataset:
    eye = np.eye(4)
    labels = np.arange(4)
    return Dataset(eye.copy(), labels.copy(), eye.copy(), labels.copy(), num_classes=4)


def identity_model(head_bias=None) -> Model:
    model = Model(EncoderSpec(input_dim=4, hidden_dims=[4]))
    model.layers[0][0].data = np.eye(4)
    model.layers[0][1].data = np.zeros(4)
    expand_head(model, 2)
    expand_head(model, 2)
    eye = np.eye(4)
    bias = np.zeros(4) if head_bias is None else np.asarray(head_bias, dtype=float)
    for k, (w, b) in enumerate(model.head.blocks):
        w.data = eye[:, 2 * k:2 * k + 2].copy() if head_bias is None else np.zeros((4, 2))
        b.data = bias[2 * k:2 * k + 2].copy()
    return model


class TestEvaluate:
    tasks = TaskSequence(((0, 1), (2, 3)))

    def test_perfect_classifier(self):
        local, global_ = evaluate(identity_model(), one_hot_dataset(), self.tasks, 2)
        assert local == [1.0, 1.0]
        assert global_ == [1.0, 1.0]

    def test_constant_classifier(self):
        local, global_ = evaluate(identity_model(head_bias=[1, 0, 0, 0]), one_hot_dataset(), self.tasks, 2)
        assert local == [0.5, 0.5]
        assert global_ == [0.5, 0.0]

    def test_global_only_sees_seen_columns(self):
        # Task 2's columns win everywhere, but after task 1 they are not yet in play.
        local, global_ = evaluate(identity_model(head_bias=[0, 0, 9, 9]), one_hot_dataset(), self.tasks, 1)
        assert global_ == [0.5]

    def test_predict_accuracy_offsets_columns(self):
        model = identity_model()
        x, labels = np.eye(4)[2:], np.array([2, 3])
        assert predict_accuracy(model, x, labels, 2, 4) == 1.0


class TestTrainTask:
    def _state(self, small_dataset, three_tasks, method="Naive", **schedule):
        schedule = {"epochs": 2, "lr_decay_epochs": [], "batch_size": 8, **schedule}
        return init_state(small_dataset, three_tasks, MethodSpec(name=method, head_mode="sigmoid"),
                          TrainSchedule(**schedule), [6, 4], seed=0)

    def test_zero_learning_rate_leaves_parameters(self, small_dataset, three_tasks):
        state = self._state(small_dataset, three_tasks, lr=0.0, weight_decay=0.0)
        expand_head(state.model, 2, state.head_rng)
        before = parameter_fingerprint(state.model)
        train_task(state, 1)
        assert parameter_fingerprint(state.model) == before
        assert state.step == 2 * 4

    def test_loss_log_has_one_row_per_epoch(self, small_dataset, three_tasks):
        state = self._state(small_dataset, three_tasks)
        expand_head(state.model, 2, state.head_rng)
        train_task(state, 1)
        assert [row["epoch"] for row in state.loss_log] == [0, 1]
        assert all(row["task"] == 1 for row in state.loss_log)

    def test_head_must_cover_the_task(self, small_dataset, three_tasks):
        state = self._state(small_dataset, three_tasks)
        with pytest.raises(RuntimeError, match="head has 0 outputs"):
            train_task(state, 1)

    def test_task_two_needs_the_task_one_checkpoint(self, small_dataset, three_tasks):
        state = self._state(small_dataset, three_tasks, method="PredKD")
        expand_head(state.model, 2, state.head_rng)
        train_task(state, 1)
        expand_head(state.model, 2, state.head_rng)
        with pytest.raises(RuntimeError, match="checkpoint"):
            train_task(state, 2)

    def test_gradients_are_cleared_after_the_task(self, small_dataset, three_tasks):
        state = self._state(small_dataset, three_tasks)
        expand_head(state.model, 2, state.head_rng)
        train_task(state, 1)
        for t in state.model.parameters().values():
            assert t.grad is None or not np.any(t.grad)

    def test_distillation_gradient_vanishes_at_task_start(self, small_dataset, three_tasks):
        state = self._state(small_dataset, three_tasks, method="PredKD+FeatKD")
        expand_head(state.model, 2, state.head_rng)
        train_task(state, 1)
        ckpt = freeze_checkpoint(state.model, frozen_step=state.step, task_index=1)
        expand_head(state.model, 2, state.head_rng)
        x, _ = three_tasks.task_data(small_dataset, 2, "train")
        with Tape() as tape:
            logits, acts = forward(state.model, x, ["pen"])
            ckpt_logits, ckpt_acts = forward(ckpt, x, ["pen"])
            loss = pred_kd_loss(columns(logits, 0, 2), Tensor(ckpt_logits.data), "sigmoid")
            loss = loss + feat_kd_loss(acts["pen"], ckpt_acts["pen"])
        tape.backward(loss)
        for t in state.model.parameters().values():
            if t.grad is not None:
                assert np.max(np.abs(t.grad)) <= 1e-10


class TestRunExperiment:
    def test_same_seed_is_reproducible(self, config_factory):
        config = config_factory()
        a = run_experiment(config, seed=0)
        b = run_experiment(config, seed=0)
        assert a.step_losses == b.step_losses
        assert run_experiment(config, seed=1).step_losses != a.step_losses

    def test_zero_weights_match_naive(self, config_factory):
        naive = run_experiment(config_factory(), seed=0)
        silent = config_factory(method={
            "name": "PredKD", "head_mode": "softmax",
            "weights": {"pred_kd": 0.0, "feat_kd": 0.0, "ewc": 0.0, "l2": 0.0},
        })
        assert run_experiment(silent, seed=0).step_losses == naive.step_losses

    def test_checkpoints_follow_the_task_order(self, config_factory):
        state = run_experiment(config_factory(split={"kind": "uniform", "num_tasks": 3, "per_task": 2}), seed=0)
        assert [c.task_index for c in state.checkpoints] == [1, 2, 3]
        steps = [c.frozen_step for c in state.checkpoints]
        assert steps == sorted(steps) and steps[-1] == state.step
        assert [c.num_classes for c in state.checkpoints] == [2, 4, 6]
        assert state.matrix.is_complete()

    def test_fisher_only_for_anchoring_tasks(self, config_factory):
        config = config_factory(method={"name": "EWC", "head_mode": "sigmoid"})
        state = run_experiment(config, seed=0)
        first, last = state.checkpoints
        assert first.fisher is not None and first.fisher.task_index == 1
        assert last.fisher is None

    def test_upper_bound_trains_on_every_seen_class(self, config_factory):
        state = run_experiment(config_factory(method={"name": "UpperBound", "head_mode": "softmax"}), seed=0)
        task_two_steps = [row["steps"] for row in state.loss_log if row["task"] == 2]
        task_one_steps = [row["steps"] for row in state.loss_log if row["task"] == 1]
        assert task_two_steps[0] > task_one_steps[0]

    def test_failures_name_the_task(self, config_factory, monkeypatch):
        import Modules.trainer as trainer

        def boom(state, n):
            if n == 2:
                raise FloatingPointError("overflow")
            return state

        monkeypatch.setattr(trainer, "train_task", boom)
        with pytest.raises(TaskError, match="task 2"):
            run_experiment(config_factory(), seed=0)

    def test_writes_seed_artifacts(self, config_factory, tmp_path):
        config = config_factory()
        out = tmp_path / "0"
        run_experiment(config, seed=0, out_dir=out)
        for name in ("manifest.json", "acc_matrix.csv", "metrics.json", "loss.csv", "cka.csv", "probe.bin",
                     "ckpt_task_1.bin", "ckpt_task_2.bin"):
            assert (out / name).exists(), name
        manifest = read_json(out / "manifest.json")
        assert manifest["digest"] == config.digest()
        assert manifest["checkpoints"] == ["ckpt_task_1.bin", "ckpt_task_2.bin"]
        assert sorted(c for task in manifest["tasks"] for c in task) == list(range(6))

    def test_probe_is_fixed_per_seed(self, small_dataset, three_tasks):
        a = make_probe(small_dataset, three_tasks, 5, seed=3)
        np.testing.assert_array_equal(a, make_probe(small_dataset, three_tasks, 5, seed=3))
        assert a.shape == (5, 4)

    def test_mean_over_seeds(self, config_factory, tmp_path):
        config = config_factory(seeds=[0, 1])
        reports = run_all_seeds(config, output_root=tmp_path)
        mean = read_json(tmp_path / config.digest() / "metrics_mean.json")
        expected = np.mean([r.final_accuracy for r in reports.values()])
        assert mean["final_accuracy"] == pytest.approx(expected)
        assert mean["seeds"] == [0, 1]

    def test_existing_seed_blocks_the_experiment(self, config_factory, tmp_path):
        config = config_factory(seeds=[0, 1])
        done = tmp_path / config.digest() / "1"
        done.mkdir(parents=True)
        for name in ("manifest.json", "acc_matrix.csv", "metrics.json", "loss.csv"):
            (done / name).write_text("{}")
        with pytest.raises(ArtifactError, match=r"seeds \[1\]"):
            run_all_seeds(config, output_root=tmp_path)
        assert not (tmp_path / config.digest() / "config.json").exists()
        assert not (tmp_path / config.digest() / "0").exists()

    def test_schedule_seed_reshuffles_training_only(self, config_factory):
        base = run_experiment(config_factory(), seed=0)
        reseeded = run_experiment(config_factory(schedule={"epochs": 2, "lr_decay_epochs": [1], "batch_size": 16,
                                                           "seed": 5}), seed=0)
        assert reseeded.tasks.tasks == base.tasks.tasks
        assert reseeded.step_losses != base.step_losses

    def test_dataset_cache_is_reused(self, config_factory, tmp_path):
        cache = tmp_path / "data.bin"
        dataset = {"kind": "synthetic", "num_classes": 6, "dim": 4, "per_class": 20, "separation": 5.0,
                   "cache_file": str(cache)}
        config = config_factory(dataset=dataset)
        first = run_experiment(config, seed=0)
        written = cache.stat().st_mtime_ns
        second = run_experiment(config, seed=0)
        assert cache.stat().st_mtime_ns == written
        assert second.step_losses == first.step_losses == run_experiment(config_factory(), seed=0).step_losses
        assert second.dataset.provenance == first.dataset.provenance
        assert config.digest() == config_factory().digest()


class TestPretrain:
    def test_overlapping_splits_rejected(self, small_dataset):
        aux = small_dataset.subset([0, 1, 2])
        continual = small_dataset.subset([2, 3, 4])
        with pytest.raises(ValueError, match="share classes"):
            pretrain_encoder(aux, continual, EncoderSpec(input_dim=4, hidden_dims=[4]), TrainSchedule(
                epochs=1, lr_decay_epochs=[]))

    def test_empty_auxiliary_split(self):
        empty = Dataset(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros((0, 4)),
                        np.zeros(0, dtype=np.int64), num_classes=2)
        with pytest.raises(ValueError, match="empty"):
            pretrain_encoder(empty, None, EncoderSpec(input_dim=4, hidden_dims=[4]),
                             TrainSchedule(epochs=1, lr_decay_epochs=[]))

    def test_saved_encoder_reproduces_accuracy(self, small_dataset, tmp_path):
        aux = small_dataset.subset([0, 1, 2])
        schedule = TrainSchedule(epochs=3, lr_decay_epochs=[], batch_size=16, lr=1e-2)
        path = tmp_path / "encoder.bin"
        model = pretrain_encoder(aux, small_dataset.subset([3, 4, 5]), EncoderSpec(input_dim=4, hidden_dims=[8, 4]),
                                 schedule, path=path, seed=0)
        loaded = load_checkpoint(path)
        assert predict_accuracy(loaded, aux.test_x, aux.test_y) == predict_accuracy(model, aux.test_x, aux.test_y)

    def test_experiment_with_pretraining(self, config_factory, tmp_path):
        config = config_factory(
            dataset={"kind": "synthetic", "num_classes": 12, "dim": 4, "per_class": 20, "separation": 5.0},
            pretrain={"enabled": True, "aux_fraction": 0.5, "epochs": 1},
        )
        run_experiment(config, seed=0, out_dir=tmp_path / "0")
        assert (tmp_path / "0" / "encoder.bin").exists()


# Desk-scale benchmark: 50 Gaussian classes in 16 dimensions, five tasks of ten.
BENCHMARK = {
    "dataset": {"kind": "synthetic", "num_classes": 50, "dim": 16, "per_class": 100, "separation": 6.0},
    "split": {"kind": "uniform", "num_tasks": 5, "per_task": 10},
    "hidden_dims": [256, 128, 128, 64],
    "schedule": {},
    "analysis": {"cka_taps": ["L-4", "linear"], "probe_size": 256},
    "seeds": [0, 1, 2],
}


def run_seeds(method, **overrides):
    config = ExperimentConfig.model_validate({"name": "benchmark", **BENCHMARK, "method": method, **overrides})
    return [run_experiment(config, seed=s) for s in config.seeds]


def mean_of(states, metric):
    return float(np.mean([getattr(build_report(s.matrix), metric) for s in states]))


def mean_first_task(states, row):
    return float(np.mean([s.matrix.A[row, 0] for s in states]))


@pytest.fixture(scope="module")
def benchmark_runs():
    cache = {}

    def get(name, head_mode, **overrides):
        key = (name, head_mode, repr(sorted(overrides.items())))
        if key not in cache:
            cache[key] = run_seeds({"name": name, "head_mode": head_mode}, **overrides)
        return cache[key]

    return get


@pytest.mark.slow
class TestTrends:
    def test_naive_forgets_and_joint_training_does_not(self, benchmark_runs):
        naive = benchmark_runs("Naive", "softmax")
        joint = benchmark_runs("UpperBound", "softmax")
        assert mean_of(naive, "final_accuracy") <= 0.5 * mean_of(joint, "final_accuracy")
        assert mean_of(naive, "global_forgetting") > 0.3

    def test_prediction_distillation_with_bce_beats_naive(self, benchmark_runs):
        naive = benchmark_runs("Naive", "softmax")
        predkd = benchmark_runs("PredKD", "sigmoid")
        assert mean_of(predkd, "final_accuracy") >= mean_of(naive, "final_accuracy") + 0.10

    def test_parameter_penalty_trades_plasticity_for_stability(self, benchmark_runs):
        predkd = benchmark_runs("PredKD", "sigmoid")
        ewc = benchmark_runs("PredKD+EWC", "sigmoid")
        feat = benchmark_runs("PredKD+FeatKD", "sigmoid")
        assert mean_of(ewc, "local_forgetting") <= mean_of(predkd, "local_forgetting")
        assert mean_of(predkd, "final_accuracy") >= mean_of(feat, "final_accuracy")

    def test_pretrained_encoder_favours_the_drift_penalty(self, benchmark_runs):
        pretrained = {
            "split": {"kind": "uniform", "num_tasks": 5, "per_task": 5},
            "pretrain": {"enabled": True, "aux_fraction": 0.5},
        }
        predkd = benchmark_runs("PredKD", "sigmoid", **pretrained)
        predkd_l2 = benchmark_runs("PredKD+L2", "sigmoid", **pretrained)
        assert mean_of(predkd_l2, "final_accuracy") >= mean_of(predkd, "final_accuracy")

    def test_balanced_bce_under_head_expansion(self):
        expansion = {
            "dataset": {"kind": "synthetic", "num_classes": 20, "dim": 16, "per_class": 100, "separation": 6.0},
            "split": {"kind": "expansion", "first_size": 16, "tail_sizes": [4]},
        }
        plain = run_seeds({"name": "PredKD", "head_mode": "sigmoid"}, **expansion)
        balanced = run_seeds({"name": "PredKD", "head_mode": "sigmoid", "balanced_bce": True}, **expansion)
        # A[0, 0] is task 1 right after training it, A[1, 0] after the head grows.
        for row in (0, 1):
            assert mean_first_task(balanced, row) > mean_first_task(plain, row)

    def test_later_layers_drift_more(self, benchmark_runs):
        finals = {"L-4": [], "linear": []}
        for seed, state in enumerate(benchmark_runs("Naive", "softmax")):
            probe = make_probe(state.dataset, state.tasks, 256, seed)
            trajectory = compute_cka(state.checkpoints, probe, ["L-4", "linear"],
                                     build_report(state.matrix).accuracy_curve)
            for tap in finals:
                finals[tap].append(trajectory.values[tap][-1])
        assert np.mean(finals["linear"]) < np.mean(finals["L-4"])
