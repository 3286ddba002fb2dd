"""Scene classifiers (mean-feature MLP and TDNN variants) and checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels as K
from .datamodel import NUM_CLASSES, NUM_FEATURES, SceneLabel, Segment

MODEL_KINDS = ("mlp_baseline", "tdnn_small", "tdnn_big")
CLI_NAMES = {"mlp": "mlp_baseline", "tdnn-small": "tdnn_small", "tdnn-big": "tdnn_big"}

# (kernel, dilation) per frame-level layer
TDNN_CONTEXTS = ((5, 1), (3, 2), (3, 3), (1, 1), (1, 1))

CKPT_MAGIC = b"EGSC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class UnsupportedOperation(TypeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int = NUM_FEATURES
    num_classes: int = NUM_CLASSES
    # TDNN: (kernel, dilation, width) per frame layer; empty for the MLP
    frames: tuple[tuple[int, int, int], ...] = ()
    hidden: tuple[int, ...] = ()
    dropout: float = 0.3
    affine_bn: bool = True

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        object.__setattr__(self, "frames", tuple(tuple(int(v) for v in f) for f in self.frames))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind == "mlp_baseline" and self.frames:
            raise ValueError("the MLP baseline has no frame-level layers")
        if self.kind != "mlp_baseline" and not self.frames:
            raise ValueError("TDNN spec needs frame-level layers")

    @property
    def is_tdnn(self) -> bool:
        return self.kind != "mlp_baseline"

    @property
    def context(self) -> int:
        return sum((k - 1) * d for k, d, _ in self.frames)

    def to_json(self) -> dict:
        d = asdict(self)
        d["frames"] = [list(f) for f in self.frames]
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        return cls(**{**d, "frames": tuple(tuple(f) for f in d.get("frames", ())), "hidden": tuple(d.get("hidden", ()))})


def tdnn_spec(kind: str, filters: int, stats_dim: int, hidden: int, input_dim=NUM_FEATURES, dropout=0.3):
    widths = [filters] * (len(TDNN_CONTEXTS) - 1) + [stats_dim]
    frames = tuple((k, d, w) for (k, d), w in zip(TDNN_CONTEXTS, widths))
    return ModelSpec(kind, input_dim, NUM_CLASSES, frames, (hidden, hidden), dropout)


def preset(kind: str) -> ModelSpec:
    kind = CLI_NAMES.get(kind, kind)
    if kind == "mlp_baseline":
        # non-affine BN keeps the learnable total at the baseline's layerwise count
        return ModelSpec("mlp_baseline", hidden=(512, 1024, 512), affine_bn=False)
    if kind == "tdnn_small":
        return tdnn_spec("tdnn_small", 128, 256, 128)
    if kind == "tdnn_big":
        return tdnn_spec("tdnn_big", 256, 512, 256)
    raise ValueError(f"unknown model kind {kind!r}")


def _block(prefix, affine_layer, width, spec, dtype):
    return [
        (f"{prefix}.{affine_layer.name}", affine_layer),
        (f"{prefix}.bn", K.BatchNorm(width, affine=spec.affine_bn, dtype=dtype)),
        (f"{prefix}.relu", K.ReLU()),
        (f"{prefix}.dropout", K.Dropout(spec.dropout)),
    ]


class Model:
    """Trunk (frame layers, TDNN only) -> temporal mean -> dense head.

    For the MLP the trunk is empty, so the head sees the mean feature vector.
    """

    def __init__(self, spec: ModelSpec, rng: np.random.Generator | None = None, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = rng if rng is not None else K.make_rng(0, "init")
        trunk, head = [], []
        width = spec.input_dim
        for i, (k, d, w) in enumerate(spec.frames, start=1):
            conv = K.Conv1d(width, w, k, d, rng=rng, dtype=dtype, name="conv")
            trunk += _block(f"frame{i}", conv, w, spec, dtype)
            width = w
        seg_prefix = "seg" if spec.is_tdnn else "hidden"
        for i, h in enumerate(spec.hidden, start=1):
            head += _block(f"{seg_prefix}{i}", K.Linear(width, h, rng=rng, dtype=dtype, name="linear"), h, spec, dtype)
            width = h
        head.append(("out", K.Linear(width, spec.num_classes, rng=rng, dtype=dtype, name="out")))
        self.trunk = trunk
        self.pool = K.TemporalMean()
        self.head = head

    # -- parameter access

    def _layers(self):
        return self.trunk + [("pool", self.pool)] + self.head

    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, layer in self._layers() for k, v in layer.params.items()}

    def named_grads(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, layer in self._layers() for k, v in layer.grads.items()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, layer in self._layers() for k, v in layer.buffers().items()}

    def bn_layers(self):
        return [(n, l) for n, l in self._layers() if isinstance(l, K.BatchNorm)]

    # -- passes

    def _prep(self, x):
        x = np.asarray(x)
        if x.shape[-1] != self.spec.input_dim:
            raise K.ShapeError(f"expected {self.spec.input_dim} features per frame, got {x.shape[-1]}")
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3:
            raise K.ShapeError(f"expected (L, F) or (B, L, F) input, got {x.shape}")
        return x.astype(self.dtype, copy=False)

    def embed_batch(self, x, mode="eval", rng=None):
        if not self.spec.is_tdnn:
            raise UnsupportedOperation("embedding sequences exist only for TDNN models")
        h = self._prep(x)
        for _, layer in self.trunk:
            h = layer.forward(h, mode, rng)
        return h

    def head_forward(self, pooled, mode="eval", rng=None):
        h = pooled
        for _, layer in self.head:
            h = layer.forward(h, mode, rng)
        return h

    def forward_batch(self, x, mode="eval", rng=None):
        h = self._prep(x)
        for _, layer in self.trunk:
            h = layer.forward(h, mode, rng)
        h = self.pool.forward(h, mode, rng)
        return self.head_forward(h, mode, rng)

    def backward(self, grad_logits):
        g = grad_logits
        for _, layer in reversed(self._layers()):
            g = layer.backward(g)
        return g

    def loss_and_grads(self, x, labels, rng=None, mode="train"):
        logits = self.forward_batch(x, mode, rng)
        loss, grad = K.softmax_cross_entropy(logits, labels)
        self.backward(grad)
        return loss, self.named_grads()

    def predict_batch(self, x, batch_size=64) -> np.ndarray:
        x = np.asarray(x)
        out = [self.forward_batch(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.argmax(np.concatenate(out), axis=1)


def build_model(spec: ModelSpec, rng: np.random.Generator | None = None, dtype=np.float32) -> Model:
    return Model(spec, rng, dtype)


def count_params(model: Model) -> int:
    """Learnable scalars: weights, biases and BN affine terms."""
    return int(sum(p.size for p in model.named_params().values()))


def count_params_for_spec(spec: ModelSpec) -> int:
    """Closed-form layerwise count, independent of ``Model`` construction."""
    total = 0
    width = spec.input_dim
    bn = 2 if spec.affine_bn else 0
    for k, _, w in spec.frames:
        total += width * k * w + w + bn * w
        width = w
    for h in spec.hidden:
        total += width * h + h + bn * h
        width = h
    return total + width * spec.num_classes + spec.num_classes


def forward(model: Model, segment: Segment | np.ndarray, mode="eval", rng=None) -> np.ndarray:
    x = segment.matrix if isinstance(segment, Segment) else segment
    return model.forward_batch(x, mode, rng)[0]


def predict(model: Model, segment: Segment | np.ndarray) -> SceneLabel:
    return label_from_logits(forward(model, segment))


def label_from_logits(logits) -> SceneLabel:
    # np.argmax returns the first maximum, i.e. the smallest class index on ties
    return SceneLabel(int(np.argmax(logits)))


def embed(model: Model, segment: Segment | np.ndarray) -> np.ndarray:
    x = segment.matrix if isinstance(segment, Segment) else segment
    return model.embed_batch(x)[0]


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: Model
    meta: dict = field(default_factory=dict)


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def checkpoint_bytes(model: Model, meta: dict | None = None) -> bytes:
    block = json.dumps({"spec": model.spec.to_json(), "meta": meta or {}}, sort_keys=True, separators=(",", ":"))
    block_b = block.encode("utf-8")
    tensors = {**model.named_params(), **model.named_buffers()}
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(block_b)), block_b,
             struct.pack("<I", len(tensors))]
    parts += [_tensor_record(name, arr) for name, arr in tensors.items()]
    return b"".join(parts)


def save_checkpoint(model: Model, path, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, meta))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint_bytes(data: bytes, spec: ModelSpec | None = None) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = r.u32()
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        block = json.loads(r.take(r.u32()).decode("utf-8"))
        stored_spec = ModelSpec.from_json(block["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt spec block: {exc}") from None
    if spec is not None and spec != stored_spec:
        raise CheckpointError(f"checkpoint holds a {stored_spec.kind} model, expected {spec.kind} ({spec} != {stored_spec})")
    model = Model(stored_spec, dtype=np.float32)
    params = model.named_params()
    layers = dict(model._layers())
    expected_buffers = {f"{n}.{k}" for n, l in model.bn_layers() for k in ("running_mean", "running_var")}
    buffers: dict[str, dict[str, np.ndarray]] = {}
    loaded = set()
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8", errors="replace")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        if name in params:
            if params[name].shape != arr.shape:
                raise CheckpointError(f"tensor {name} has shape {arr.shape}, spec expects {params[name].shape}")
            params[name][...] = arr
            loaded.add(name)
        elif name in expected_buffers:
            layer_name, key = name.rsplit(".", 1)
            if arr.shape != (layers[layer_name].channels,):
                raise CheckpointError(f"buffer {name} has shape {arr.shape}")
            buffers.setdefault(layer_name, {})[key] = arr
        else:
            raise CheckpointError(f"unexpected tensor {name!r} in checkpoint")
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint tensors")
    missing = sorted(set(params) - loaded)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {', '.join(missing[:5])}")
    for layer_name, buf in buffers.items():
        if set(buf) != {"running_mean", "running_var"}:
            raise CheckpointError(f"incomplete running statistics for {layer_name}")
        layers[layer_name].load_buffers(buf)
    return Checkpoint(model, block.get("meta", {}))


def load_checkpoint(path, spec: ModelSpec | None = None) -> Checkpoint:
    return load_checkpoint_bytes(Path(path).read_bytes(), spec)


def copy_model(model: Model) -> Model:
    """Snapshot of a model at checkpoint precision (float32)."""
    return load_checkpoint_bytes(checkpoint_bytes(model)).model
