"""
MLP feature encoder with an expanding multi-block linear classifier.

Layer taps are named from the rear, so a four-layer encoder exposes
L-4, L-3, L-2, pen and the classifier output as linear.
"""

import copy
import hashlib
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np

from .errors import DimensionError, FrozenModelError, ShapeTableError
from .schemas import EncoderSpec
from .store import atomic_write_bytes, decode_tensors, encode_tensors
from .tensor import Tensor, concat, elementwise, matmul, relu

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
LINEAR_TAP = "linear"
META_ENCODER = "__meta__.encoder_dims"
META_HEAD = "__meta__.head_blocks"


def layer_names(num_hidden: int) -> List[str]:
    names = []
    for j in range(num_hidden):
        distance = num_hidden - j
        names.append("pen" if distance == 1 else f"L-{distance}")
    return names


def _uniform_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(fan_in)
    weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    bias = rng.uniform(-bound, bound, size=fan_out)
    return weight, bias


class ClassifierHead:
    """Ordered per-task (weight, bias) blocks; output width is the sum of block sizes."""

    def __init__(self, in_features: int):
        self.in_features = in_features
        self.blocks: List[Tuple[Tensor, Tensor]] = []

    @property
    def block_sizes(self) -> List[int]:
        return [w.shape[1] for w, _ in self.blocks]

    @property
    def width(self) -> int:
        return sum(self.block_sizes)

    def expand(self, new_classes: int, rng: np.random.Generator) -> None:
        if new_classes < 1:
            raise ValueError(f"new_classes must be at least 1, got {new_classes}")
        weight, bias = _uniform_init(rng, self.in_features, new_classes)
        index = len(self.blocks)
        self.blocks.append((
            Tensor(weight, requires_grad=True, name=f"head.{index}.weight"),
            Tensor(bias, requires_grad=True, name=f"head.{index}.bias"),
        ))

    def __call__(self, features: Tensor) -> Tensor:
        if not self.blocks:
            raise DimensionError("classifier head has no blocks; expand it before the forward pass")
        return concat([elementwise("add", matmul(features, w), b) for w, b in self.blocks])


class Model:
    """Encoder layers plus classifier head; owns the live parameters of one run."""

    def __init__(self, spec: EncoderSpec, rng: Optional[np.random.Generator] = None):
        self.spec = spec
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [spec.input_dim] + list(spec.hidden_dims)
        self.layers: List[Tuple[Tensor, Tensor]] = []
        for j, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            weight, bias = _uniform_init(rng, fan_in, fan_out)
            self.layers.append((
                Tensor(weight, requires_grad=True, name=f"encoder.{j}.weight"),
                Tensor(bias, requires_grad=True, name=f"encoder.{j}.bias"),
            ))
        self.head = ClassifierHead(dims[-1])
        self.tap_names = layer_names(len(spec.hidden_dims))

    @property
    def registry(self) -> Dict[str, int]:
        """Tap name -> layer index; the classifier output sits after the last hidden layer."""
        taps = {name: j for j, name in enumerate(self.tap_names)}
        taps[LINEAR_TAP] = len(self.tap_names)
        return taps

    @property
    def num_classes(self) -> int:
        return self.head.width

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for w, b in self.layers:
            params[w.name] = w
            params[b.name] = b
        for w, b in self.head.blocks:
            params[w.name] = w
            params[b.name] = b
        return params

    def encoder_parameters(self) -> Dict[str, Tensor]:
        return {n: t for n, t in self.parameters().items() if n.startswith("encoder.")}

    def head_block_names(self, index: int) -> List[str]:
        return [f"head.{index}.weight", f"head.{index}.bias"]

    def forward(self, x: Union[Tensor, np.ndarray], taps: Iterable[str] = ()) -> Tuple[Tensor, Dict[str, Tensor]]:
        return forward(self, x, taps)


def forward(model, x: Union[Tensor, np.ndarray], taps: Iterable[str] = ()) -> Tuple[Tensor, Dict[str, Tensor]]:
    """Logits over every head seen so far plus post-activation outputs at the requested taps."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    taps = list(taps)
    registry = model.registry
    unknown = [t for t in taps if t not in registry]
    if unknown:
        raise KeyError(f"Unknown tap(s) {unknown}. Choose from: {list(registry.keys())}")
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise DimensionError(f"input shape {x.shape} does not match encoder input width {model.spec.input_dim}")

    activations: Dict[str, Tensor] = {}
    h = x
    for name, (w, b) in zip(model.tap_names, model.layers):
        h = relu(elementwise("add", matmul(h, w), b))
        if name in taps:
            activations[name] = h
    logits = model.head(h)
    if LINEAR_TAP in taps:
        activations[LINEAR_TAP] = logits
    return logits, activations


def expand_head(model: Model, new_classes: int, rng: Optional[np.random.Generator] = None) -> Model:
    """Append a block of `new_classes` outputs; earlier blocks are left untouched."""
    model.head.expand(new_classes, rng if rng is not None else np.random.default_rng(model.head.width))
    logger.debug("expanded head by %d to %d outputs", new_classes, model.head.width)
    return model


# ── Frozen checkpoints ───────────────────────────────────────────

class CheckpointModel:
    """Immutable copy of a model taken at the end of a task, with an optional Fisher diagonal."""

    def __init__(self, model: Model, fisher=None, frozen_step: int = 0, task_index: int = 0):
        self._model = copy.deepcopy(model)
        for t in self._model.parameters().values():
            t.requires_grad = False
            t.grad = None
            t.data.flags.writeable = False
        self.fisher = fisher
        self.frozen_step = frozen_step
        self.task_index = task_index

    @property
    def spec(self) -> EncoderSpec:
        return self._model.spec

    @property
    def registry(self) -> Dict[str, int]:
        return self._model.registry

    @property
    def tap_names(self) -> List[str]:
        return self._model.tap_names

    @property
    def layers(self):
        return self._model.layers

    @property
    def head(self) -> ClassifierHead:
        return self._model.head

    @property
    def num_classes(self) -> int:
        return self._model.num_classes

    def parameters(self) -> Dict[str, Tensor]:
        return self._model.parameters()

    def parameter_arrays(self) -> Dict[str, np.ndarray]:
        return {n: t.data for n, t in self._model.parameters().items()}

    def forward(self, x, taps: Iterable[str] = ()) -> Tuple[Tensor, Dict[str, Tensor]]:
        return forward(self, x, taps)

    def update(self, *args, **kwargs) -> None:
        raise FrozenModelError("checkpoint models are frozen and cannot be updated")


def freeze_checkpoint(model: Union[Model, CheckpointModel], fisher=None, frozen_step: int = 0,
                      task_index: int = 0) -> CheckpointModel:
    source = model._model if isinstance(model, CheckpointModel) else model
    if isinstance(model, CheckpointModel) and fisher is None:
        fisher = model.fisher
    return CheckpointModel(source, fisher=fisher, frozen_step=frozen_step, task_index=task_index)


# ── Checkpoint files ─────────────────────────────────────────────

def _model_tensors(model: Union[Model, CheckpointModel]) -> Dict[str, np.ndarray]:
    tensors: Dict[str, np.ndarray] = {
        META_ENCODER: np.asarray([model.spec.input_dim] + list(model.spec.hidden_dims), dtype=np.float64),
    }
    if model.head.blocks:
        tensors[META_HEAD] = np.asarray(model.head.block_sizes, dtype=np.float64)
    for name, t in model.parameters().items():
        tensors[name] = t.data
    return tensors


def checkpoint_bytes(model: Union[Model, CheckpointModel]) -> bytes:
    return encode_tensors(_model_tensors(model))


def save_checkpoint(model: Union[Model, CheckpointModel], path: PathLike) -> Path:
    path = atomic_write_bytes(path, checkpoint_bytes(model))
    logger.info("saved checkpoint with %d head outputs to %s", model.head.width, path)
    return path


def model_from_tensors(tensors: Mapping[str, np.ndarray]) -> Model:
    if META_ENCODER not in tensors:
        raise ShapeTableError(f"shape table has no '{META_ENCODER}' record")
    dims = [int(d) for d in tensors[META_ENCODER]]
    blocks = [int(s) for s in tensors.get(META_HEAD, [])]
    spec = EncoderSpec(input_dim=dims[0], hidden_dims=dims[1:])
    model = Model(spec)

    expected: Dict[str, Tuple[int, ...]] = {}
    for j, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        expected[f"encoder.{j}.weight"] = (fan_in, fan_out)
        expected[f"encoder.{j}.bias"] = (fan_out,)
    for k, size in enumerate(blocks):
        expected[f"head.{k}.weight"] = (dims[-1], size)
        expected[f"head.{k}.bias"] = (size,)

    present = {n for n in tensors if not n.startswith("__meta__.")}
    if present != set(expected):
        raise ShapeTableError(
            f"shape table names do not match the stored structure: "
            f"missing {sorted(set(expected) - present)}, unexpected {sorted(present - set(expected))}"
        )
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ShapeTableError(f"'{name}' has shape {tensors[name].shape}, structure requires {shape}")

    for size in blocks:
        model.head.expand(size, np.random.default_rng(0))
    for name, t in model.parameters().items():
        t.data = np.array(tensors[name], dtype=np.float64)
    return model


def load_checkpoint(path: PathLike) -> Model:
    model = load_checkpoint_bytes(Path(path).read_bytes())
    logger.info("loaded checkpoint with %d head outputs from %s", model.head.width, path)
    return model


def load_checkpoint_bytes(blob: bytes) -> Model:
    return model_from_tensors(decode_tensors(blob))


def copy_encoder(source: Union[Model, CheckpointModel], target: Model) -> Model:
    """Overwrite the encoder of `target` with the encoder of `source`."""
    if list(source.spec.hidden_dims) != list(target.spec.hidden_dims) or source.spec.input_dim != target.spec.input_dim:
        raise DimensionError(
            f"encoder structures differ: {source.spec.input_dim}->{source.spec.hidden_dims} "
            f"vs {target.spec.input_dim}->{target.spec.hidden_dims}"
        )
    for (sw, sb), (tw, tb) in zip(source.layers, target.layers):
        tw.data = np.array(sw.data, dtype=np.float64)
        tb.data = np.array(sb.data, dtype=np.float64)
    return target


def parameter_fingerprint(model: Union[Model, CheckpointModel]) -> str:
    """Stable hash over every parameter, used to show a checkpoint never changes."""
    digest = hashlib.sha256()
    for name, t in sorted(model.parameters().items()):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(t.data).tobytes())
    return digest.hexdigest()
