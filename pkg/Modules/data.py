"""
Datasets, class-incremental task splits, and CIFAR binary ingestion.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import CIFAR_PIXEL_BYTES, CIFAR_VARIANTS, TRAIN_FRACTION
from .errors import CifarFormatError
from .schemas import SplitSpec
from .store import read_tensors, write_tensors

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class Dataset:
    """Labelled feature vectors with a per-class train/test partition."""
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int
    provenance: str = ""
    class_ids: Tuple[int, ...] = ()

    def __post_init__(self):
        if not self.class_ids:
            object.__setattr__(self, "class_ids", tuple(range(self.num_classes)))
        if len(self.class_ids) != self.num_classes:
            raise ValueError(f"class_ids lists {len(self.class_ids)} ids for {self.num_classes} classes")
        for part in ("train", "test"):
            x, y = getattr(self, f"{part}_x"), getattr(self, f"{part}_y")
            if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
                raise ValueError(f"{part} split has inconsistent shapes {x.shape} / {y.shape}")
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise ValueError(f"{part} labels must lie in 0..{self.num_classes - 1}")
            x.flags.writeable = False
            y.flags.writeable = False
        if self.train_x.shape[1] != self.test_x.shape[1]:
            raise ValueError("train and test feature widths differ")

    @property
    def dim(self) -> int:
        return self.train_x.shape[1]

    def check_coverage(self) -> None:
        """Every class needs at least one train and one test example."""
        for part, y in (("train", self.train_y), ("test", self.test_y)):
            counts = np.bincount(y, minlength=self.num_classes)
            empty = np.flatnonzero(counts == 0)
            if empty.size:
                raise ValueError(f"classes {empty.tolist()} have no {part} examples")

    def rows(self, classes: Sequence[int], part: str = "train") -> Tuple[np.ndarray, np.ndarray]:
        x, y = (self.train_x, self.train_y) if part == "train" else (self.test_x, self.test_y)
        mask = np.isin(y, np.asarray(classes, dtype=np.int64))
        return x[mask], y[mask]

    def subset(self, classes: Sequence[int], provenance: str = "") -> "Dataset":
        """Keep only `classes`, relabelled densely in the given order."""
        classes = [int(c) for c in classes]
        remap = np.full(self.num_classes, -1, dtype=np.int64)
        remap[classes] = np.arange(len(classes))
        tx, ty = self.rows(classes, "train")
        vx, vy = self.rows(classes, "test")
        return Dataset(
            train_x=tx.copy(), train_y=remap[ty], test_x=vx.copy(), test_y=remap[vy],
            num_classes=len(classes),
            provenance=provenance or self.provenance,
            class_ids=tuple(self.class_ids[c] for c in classes),
        )


@dataclass(frozen=True)
class TaskSequence:
    """Ordered, pairwise-disjoint class sets; logit columns follow task order."""
    tasks: Tuple[Tuple[int, ...], ...]
    column_of: Dict[int, int] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        seen = set()
        for n, task in enumerate(self.tasks, start=1):
            if not task:
                raise ValueError(f"task {n} is empty")
            overlap = seen.intersection(task)
            if overlap:
                raise ValueError(f"task {n} repeats classes {sorted(overlap)}")
            seen.update(task)
        mapping = {c: col for col, c in enumerate(c for task in self.tasks for c in task)}
        object.__setattr__(self, "column_of", mapping)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def sizes(self) -> List[int]:
        return [len(t) for t in self.tasks]

    def block(self, n: int) -> Tuple[int, int]:
        """Column range [start, stop) of task n (1-based)."""
        start = sum(self.sizes[:n - 1])
        return start, start + self.sizes[n - 1]

    def seen_width(self, i: int) -> int:
        return sum(self.sizes[:i])

    def to_columns(self, labels: np.ndarray) -> np.ndarray:
        return np.array([self.column_of[int(c)] for c in labels], dtype=np.int64)

    def task_data(self, dataset: Dataset, n: int, part: str = "train") -> Tuple[np.ndarray, np.ndarray]:
        """Rows of task n with labels mapped to logit columns."""
        x, y = dataset.rows(self.tasks[n - 1], part)
        return x, self.to_columns(y)


# ── Synthetic data ───────────────────────────────────────────────

def _train_count(n: int) -> int:
    return min(max(int(round(TRAIN_FRACTION * n)), 1), n - 1)


def generate_synthetic(num_classes: int, dim: int, per_class: int, separation: float, seed: int) -> Dataset:
    """Gaussian clusters around unit-norm random means scaled by `separation`."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be at least 2, got {num_classes}")
    if dim < 2:
        raise ValueError(f"dim must be at least 2, got {dim}")
    if per_class < 2:
        raise ValueError(f"per_class must be at least 2, got {per_class}")
    if separation < 0:
        raise ValueError(f"separation must be nonnegative, got {separation}")

    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= separation

    n_train = _train_count(per_class)
    train_x, train_y, test_x, test_y = [], [], [], []
    for c in range(num_classes):
        samples = means[c] + rng.standard_normal((per_class, dim))
        train_x.append(samples[:n_train])
        test_x.append(samples[n_train:])
        train_y.append(np.full(n_train, c, dtype=np.int64))
        test_y.append(np.full(per_class - n_train, c, dtype=np.int64))

    return Dataset(
        train_x=np.concatenate(train_x), train_y=np.concatenate(train_y),
        test_x=np.concatenate(test_x), test_y=np.concatenate(test_y),
        num_classes=num_classes,
        provenance=synthetic_provenance(num_classes, dim, per_class, separation, seed),
    )


def synthetic_provenance(num_classes: int, dim: int, per_class: int, separation: float, seed: int) -> str:
    return f"synthetic:M={num_classes},d={dim},n={per_class},sep={separation},seed={seed}"


def save_dataset(dataset: Dataset, path: PathLike) -> Path:
    """Cache a dataset in the tensor container format."""
    tensors = {
        "train_x": dataset.train_x,
        "train_y": dataset.train_y.astype(np.float64),
        "test_x": dataset.test_x,
        "test_y": dataset.test_y.astype(np.float64),
        "__meta__.class_ids": np.asarray(dataset.class_ids, dtype=np.float64),
    }
    if dataset.provenance:
        raw = np.frombuffer(dataset.provenance.encode("utf-8"), dtype=np.uint8)
        tensors["__meta__.provenance"] = raw.astype(np.float64)
    return write_tensors(path, tensors)


def load_dataset(path: PathLike) -> Dataset:
    t = read_tensors(path)
    class_ids = tuple(int(c) for c in t["__meta__.class_ids"])
    provenance = f"file:{Path(path).name}"
    if "__meta__.provenance" in t:
        provenance = t["__meta__.provenance"].astype(np.uint8).tobytes().decode("utf-8")
    return Dataset(
        train_x=t["train_x"], train_y=t["train_y"].astype(np.int64),
        test_x=t["test_x"], test_y=t["test_y"].astype(np.int64),
        num_classes=len(class_ids), provenance=provenance, class_ids=class_ids,
    )


def cached_synthetic(path: PathLike, num_classes: int, dim: int, per_class: int, separation: float,
                     seed: int) -> Dataset:
    """Reuse the cache at `path` if it was generated with these parameters, else rebuild it."""
    path = Path(path)
    expected = synthetic_provenance(num_classes, dim, per_class, separation, seed)
    if path.exists():
        cached = load_dataset(path)
        if cached.provenance == expected:
            logger.info("loaded cached dataset %s", path)
            return cached
        logger.warning("cached dataset %s holds %s, regenerating", path, cached.provenance)
    dataset = generate_synthetic(num_classes, dim, per_class, separation, seed)
    save_dataset(dataset, path)
    return dataset


# ── CIFAR binary records ─────────────────────────────────────────

def _record_length(variant: str) -> int:
    if variant not in CIFAR_VARIANTS:
        raise ValueError(f"Unknown CIFAR variant '{variant}'. Choose from: {list(CIFAR_VARIANTS.keys())}")
    return CIFAR_VARIANTS[variant]["label_bytes"] + CIFAR_PIXEL_BYTES


def read_cifar_records(path: PathLike, variant: str) -> Tuple[np.ndarray, np.ndarray]:
    """Return (pixels scaled to [0, 1], labels); fine labels for CIFAR-100."""
    record = _record_length(variant)
    blob = Path(path).read_bytes()
    if not blob:
        raise CifarFormatError(f"{path}: empty file, expected records of {record} bytes", record, 0, 0)
    if len(blob) % record:
        whole = len(blob) // record
        expected = (whole + 1) * record
        raise CifarFormatError(
            f"{path}: length {len(blob)} is not a multiple of the {record}-byte record; "
            f"expected {expected} bytes, incomplete record starts at byte offset {whole * record}",
            expected, len(blob), whole * record,
        )
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, record)
    label_bytes = CIFAR_VARIANTS[variant]["label_bytes"]
    labels = raw[:, label_bytes - 1].astype(np.int64)
    pixels = raw[:, label_bytes:].astype(np.float64) / 255.0
    num_classes = CIFAR_VARIANTS[variant]["num_classes"]
    if labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise CifarFormatError(
            f"{path}: label {labels[bad]} out of range in record {bad}",
            record, len(blob), bad * record + label_bytes - 1,
        )
    return pixels, labels


def load_cifar_binary(path: PathLike, variant: str, test_path: Optional[PathLike] = None) -> Dataset:
    """Training records from `path`, test records from `test_path` when given."""
    train_x, train_y = read_cifar_records(path, variant)
    if test_path is not None:
        test_x, test_y = read_cifar_records(test_path, variant)
    else:
        test_x = np.empty((0, CIFAR_PIXEL_BYTES))
        test_y = np.empty(0, dtype=np.int64)
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]
    logger.info("loaded %d train / %d test %s records from %s", len(train_y), len(test_y), variant, path)
    return Dataset(
        train_x=train_x, train_y=train_y, test_x=test_x, test_y=test_y,
        num_classes=CIFAR_VARIANTS[variant]["num_classes"],
        provenance=f"{variant}:sha256={digest}",
    )


def write_cifar_binary(path: PathLike, pixels: np.ndarray, labels: Sequence[int], variant: str,
                       coarse_labels: Optional[Sequence[int]] = None) -> Path:
    """Write uint8 pixel rows in the exact CIFAR record layout."""
    _record_length(variant)
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), CIFAR_PIXEL_BYTES)
    columns = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if CIFAR_VARIANTS[variant]["label_bytes"] == 2:
        coarse = np.zeros(len(labels), dtype=np.uint8) if coarse_labels is None else np.asarray(coarse_labels, dtype=np.uint8)
        columns.insert(0, coarse[:, None])
    path = Path(path)
    path.write_bytes(np.hstack(columns + [pixels]).tobytes())
    return path


# ── Task splitting ───────────────────────────────────────────────

def make_task_sequence(dataset: Dataset, spec: SplitSpec) -> TaskSequence:
    """Shuffle class ids with the split seed, then assign them greedily to the schedule."""
    sizes = spec.sizes()
    if sum(sizes) > dataset.num_classes:
        raise ValueError(f"split needs {sum(sizes)} classes but the dataset has {dataset.num_classes}")
    order = np.random.default_rng(spec.seed).permutation(dataset.num_classes)
    tasks, start = [], 0
    for size in sizes:
        tasks.append(tuple(int(c) for c in order[start:start + size]))
        start += size
    return TaskSequence(tuple(tasks))


def auxiliary_split(dataset: Dataset, aux_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Partition classes into a pre-training side and a continual side."""
    if not 0.0 < aux_fraction < 1.0:
        raise ValueError(f"aux_fraction must lie in (0, 1), got {aux_fraction}")
    n_aux = int(round(aux_fraction * dataset.num_classes))
    if n_aux < 2 or dataset.num_classes - n_aux < 2:
        raise ValueError(
            f"aux_fraction {aux_fraction} leaves {n_aux} auxiliary and "
            f"{dataset.num_classes - n_aux} continual classes; both sides need at least 2"
        )
    order = np.random.default_rng(seed).permutation(dataset.num_classes)
    aux_classes = sorted(int(c) for c in order[:n_aux])
    continual_classes = sorted(int(c) for c in order[n_aux:])
    aux = dataset.subset(aux_classes, provenance=f"{dataset.provenance}|aux")
    continual = dataset.subset(continual_classes, provenance=f"{dataset.provenance}|continual")
    return aux, continual
