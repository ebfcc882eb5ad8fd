"""
Artifact persistence: the binary tensor container, atomic JSON/CSV writes,
and the per-experiment directory layout.
"""

import json
import logging
import os
import shutil
import struct
import tempfile
from pathlib import Path
from typing import Dict, List, Mapping, Union

import numpy as np
import pandas as pd

from .config import CHECKPOINT_MAGIC
from .errors import ArtifactError, CorruptHeaderError, ShapeTableError, TruncatedPayloadError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MANIFEST = "manifest.json"
ACC_MATRIX = "acc_matrix.csv"
METRICS = "metrics.json"
CKA = "cka.csv"
LOSS_LOG = "loss.csv"
PROBE = "probe.bin"
ENCODER = "encoder.bin"
CONFIG = "config.json"
METRICS_MEAN = "metrics_mean.json"
SEED_ARTIFACTS = (MANIFEST, ACC_MATRIX, METRICS, LOSS_LOG)


def checkpoint_name(task_index: int) -> str:
    return f"ckpt_task_{task_index}.bin"


# ── Tensor container ─────────────────────────────────────────────

def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named float64 arrays: magic, u32 count, then name/rank/dims/values per entry."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.blob):
            raise TruncatedPayloadError(
                f"truncated payload: needed {n} bytes for {what} at offset {self.pos}, "
                f"only {len(self.blob) - self.pos} remain"
            )
        chunk = self.blob[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_tensors(blob: bytes) -> Dict[str, np.ndarray]:
    if len(blob) < len(CHECKPOINT_MAGIC) or blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptHeaderError(f"corrupt header: expected magic {CHECKPOINT_MAGIC!r}")
    reader = _Reader(blob)
    reader.take(len(CHECKPOINT_MAGIC), "magic")
    (count,) = reader.unpack("<I", "tensor count")

    tensors: Dict[str, np.ndarray] = {}
    for index in range(count):
        (name_len,) = reader.unpack("<I", f"name length of entry {index}")
        try:
            name = reader.take(name_len, f"name of entry {index}").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptHeaderError(f"corrupt header: entry {index} name is not UTF-8") from e
        (rank,) = reader.unpack("<I", f"rank of '{name}'")
        dims = reader.unpack(f"<{rank}Q", f"dims of '{name}'")
        if any(d == 0 for d in dims):
            raise ShapeTableError(f"shape table entry '{name}' has a zero dimension: {dims}")
        if name in tensors:
            raise ShapeTableError(f"shape table lists '{name}' twice")
        size = int(np.prod(dims)) if dims else 1
        raw = reader.take(8 * size, f"values of '{name}'")
        tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)

    if reader.pos != len(blob):
        raise ShapeTableError(
            f"shape table accounts for {reader.pos} bytes but the file holds {len(blob)}"
        )
    return tensors


def write_tensors(path: PathLike, tensors: Mapping[str, np.ndarray]) -> Path:
    return atomic_write_bytes(path, encode_tensors(tensors))


def read_tensors(path: PathLike) -> Dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


# ── Atomic writes ────────────────────────────────────────────────

def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """Write to a temp file in the same directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.debug("wrote %s (%d bytes)", path, len(data))
    return path


def write_json(path: PathLike, payload) -> Path:
    text = json.dumps(payload, indent=2, sort_keys=True)
    return atomic_write_bytes(path, (text + "\n").encode("utf-8"))


def read_json(path: PathLike):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_csv(path: PathLike, frame: pd.DataFrame) -> Path:
    return atomic_write_bytes(path, frame.to_csv(index=False, float_format="%.17g").encode("utf-8"))


def read_csv(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


# ── Directory layout ─────────────────────────────────────────────

def experiment_dir(output_root: PathLike, digest: str) -> Path:
    return Path(output_root) / digest


def seed_dir(output_root: PathLike, digest: str, seed: int) -> Path:
    return experiment_dir(output_root, digest) / str(seed)


def is_seed_complete(directory: PathLike) -> bool:
    return all((Path(directory) / name).exists() for name in SEED_ARTIFACTS)


def prepare_seed_dir(directory: PathLike, force: bool = False) -> Path:
    """Create a fresh seed directory.

    A complete earlier trial is kept unless forced. A partial one, left by an
    interrupted run, is cleared so the trial can start over.
    """
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()):
        if is_seed_complete(directory) and not force:
            raise ArtifactError(f"artifacts exist in {directory}; pass --force to overwrite")
        if force:
            logger.info("removing previous artifacts in %s", directory)
        else:
            logger.warning("clearing incomplete artifacts in %s, missing %s",
                           directory, missing_artifacts(directory, SEED_ARTIFACTS))
        shutil.rmtree(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def missing_artifacts(directory: PathLike, names) -> List[str]:
    return [name for name in names if not (Path(directory) / name).exists()]


def list_seed_dirs(experiment: PathLike) -> List[Path]:
    experiment = Path(experiment)
    if (experiment / MANIFEST).exists():
        return [experiment]
    seeds = [p for p in experiment.iterdir() if p.is_dir() and p.name.isdigit()]
    return sorted(seeds, key=lambda p: int(p.name))
