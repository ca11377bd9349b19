"""
Network builders for the generator and the segmenter, the architecture
registry and the checkpoint format.

Checkpoint layout (all integers little-endian):
    b"LBCK" | u32 version | u32 tensor_count
    per tensor: u32 name_len | name (utf-8) | u8 dtype (0 = float32) | u8 rank | rank x u64 dims | payload
    u64 CRC-64 of every preceding byte
A `<path>.meta.json` sidecar stores the ModelSpec, seed and epoch.
"""
import io
import json
import struct
import logging
from functools import lru_cache
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
import crcmod.predefined

import tensor
from tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"LBCK"
VERSION = 1
DTYPE_FLOAT32 = 0

_crc64 = crcmod.predefined.mkPredefinedCrcFun("crc-64-we")


class ModelSpecError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class ChecksumMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "unet"
    in_channels: int = 1
    out_channels: int = 1
    base_channels: int = 16
    depth: int = 4
    final_activation: str = "none"

    def __post_init__(self):
        if self.kind not in _REGISTRY:
            raise ModelSpecError(f"unknown model kind '{self.kind}', available: {available_models()}")
        if self.depth < 1:
            raise ModelSpecError(f"depth must be >= 1, got {self.depth}")
        if self.in_channels < 1 or self.out_channels < 1 or self.base_channels < 1:
            raise ModelSpecError("channel counts must be positive")
        if self.final_activation not in ("sigmoid", "none"):
            raise ModelSpecError(f"final_activation must be 'sigmoid' or 'none', got '{self.final_activation}'")

    @classmethod
    def generator(cls, kind: str = "unet", base_channels: int = 16, depth: int = 4) -> "ModelSpec":
        return cls(kind, 1, 1, base_channels, depth, "sigmoid")

    @classmethod
    def segmenter(cls, num_classes: int, kind: str = "unet", base_channels: int = 16, depth: int = 4) -> "ModelSpec":
        return cls(kind, 1, num_classes, base_channels, depth, "none")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ParameterSet:
    """Named parameter tensors, iterated in lexicographic name order."""
    tensors: Dict[str, Tensor] = field(default_factory=dict)
    spec: Optional[ModelSpec] = None
    seed: int = 0
    epoch: int = 0
    checksum_ok: bool = True

    def __post_init__(self):
        self.tensors = {name: self.tensors[name] for name in sorted(self.tensors)}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def parameter_count(self) -> int:
        return int(np.sum([t.data.size for t in self.tensors.values()], dtype=np.int64))

    def zero_grad(self):
        tensor.zero_grad(self.tensors.values())

    def to_bytes(self) -> bytes:
        return serialize(self)

    def checksum(self) -> str:
        return f"{_crc64(self.to_bytes()):016x}"

    def meta(self) -> dict:
        return {"spec": self.spec.to_dict() if self.spec else None, "seed": self.seed, "epoch": self.epoch}


def freeze(params: ParameterSet) -> ParameterSet:
    for t in params.tensors.values():
        t.requires_grad = False
        t.grad = None
    return params


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

ForwardFn = Callable[[ParameterSet, Tensor], Tensor]
_REGISTRY: Dict[str, Callable[["ModelSpec", "_LayerFactory"], ForwardFn]] = {}


def register_model(kind: str):
    def wrap(builder):
        _REGISTRY[kind] = builder
        return builder
    return wrap


def available_models() -> List[str]:
    return sorted(_REGISTRY)


class _LayerFactory:
    """Creates named parameters in construction order with He initialization."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.tensors: Dict[str, Tensor] = {}

    def conv(self, name: str, in_ch: int, out_ch: int, kernel: int = 3):
        fan_in = in_ch * kernel * kernel
        weight = self.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, kernel, kernel))
        self.tensors[f"{name}.weight"] = Tensor(weight.astype(np.float32), requires_grad=True, dtype=np.float32)
        self.tensors[f"{name}.bias"] = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True, dtype=np.float32)

    def norm(self, name: str, channels: int):
        self.tensors[f"{name}.gamma"] = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True, dtype=np.float32)
        self.tensors[f"{name}.beta"] = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True, dtype=np.float32)


def _conv_block(params: ParameterSet, x: Tensor, name: str) -> Tensor:
    x = tensor.conv2d(x, params[f"{name}.conv.weight"], params[f"{name}.conv.bias"], stride=1, padding=1)
    x = tensor.instance_norm(x, params[f"{name}.norm.gamma"], params[f"{name}.norm.beta"])
    return tensor.relu(x)


def _add_block(factory: _LayerFactory, name: str, in_ch: int, out_ch: int):
    factory.conv(f"{name}.conv", in_ch, out_ch)
    factory.norm(f"{name}.norm", out_ch)


def _check_input(spec: ModelSpec, x: Tensor):
    if x.data.ndim != 4:
        raise ModelSpecError(f"model input must be N x C x H x W, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ModelSpecError(f"model expects {spec.in_channels} input channel(s), got {x.shape[1]}")
    step = 2 ** spec.depth
    if x.shape[2] % step or x.shape[3] % step:
        raise ModelSpecError(f"input {x.shape[2]}x{x.shape[3]} is not divisible by 2^depth = {step}")


def _head(spec: ModelSpec, params: ParameterSet, x: Tensor) -> Tensor:
    x = tensor.conv2d(x, params["head.weight"], params["head.bias"])
    return tensor.sigmoid(x) if spec.final_activation == "sigmoid" else x


@register_model("unet")
def _build_unet(spec: ModelSpec, factory: _LayerFactory) -> ForwardFn:
    """Two conv blocks per stage; decoder upsamples, convolves, then concatenates the skip."""
    widths = [spec.base_channels * 2 ** k for k in range(spec.depth + 1)]
    in_ch = spec.in_channels
    for k in range(spec.depth):
        _add_block(factory, f"enc{k}.a", in_ch, widths[k])
        _add_block(factory, f"enc{k}.b", widths[k], widths[k])
        in_ch = widths[k]
    _add_block(factory, "bottleneck.a", widths[-2], widths[-1])
    _add_block(factory, "bottleneck.b", widths[-1], widths[-1])
    for k in reversed(range(spec.depth)):
        _add_block(factory, f"dec{k}.up", widths[k + 1], widths[k])
        _add_block(factory, f"dec{k}.a", 2 * widths[k], widths[k])
        _add_block(factory, f"dec{k}.b", widths[k], widths[k])
    factory.conv("head", widths[0], spec.out_channels, kernel=1)

    def forward(params: ParameterSet, x: Tensor) -> Tensor:
        _check_input(spec, x)
        skips = []
        for k in range(spec.depth):
            x = _conv_block(params, _conv_block(params, x, f"enc{k}.a"), f"enc{k}.b")
            skips.append(x)
            x = tensor.pool_max2x2(x)
        x = _conv_block(params, _conv_block(params, x, "bottleneck.a"), "bottleneck.b")
        for k in reversed(range(spec.depth)):
            x = _conv_block(params, tensor.upsample_nearest2x(x), f"dec{k}.up")
            x = tensor.concat_channels(x, skips[k])
            x = _conv_block(params, _conv_block(params, x, f"dec{k}.a"), f"dec{k}.b")
        return _head(spec, params, x)

    return forward


@register_model("mini_unet")
def _build_mini_unet(spec: ModelSpec, factory: _LayerFactory) -> ForwardFn:
    """One conv block per stage and no up-convolution: the upsampled map is concatenated directly."""
    widths = [spec.base_channels * 2 ** k for k in range(spec.depth + 1)]
    in_ch = spec.in_channels
    for k in range(spec.depth):
        _add_block(factory, f"enc{k}", in_ch, widths[k])
        in_ch = widths[k]
    _add_block(factory, "bottleneck", widths[-2], widths[-1])
    for k in reversed(range(spec.depth)):
        _add_block(factory, f"dec{k}", widths[k + 1] + widths[k], widths[k])
    factory.conv("head", widths[0], spec.out_channels, kernel=1)

    def forward(params: ParameterSet, x: Tensor) -> Tensor:
        _check_input(spec, x)
        skips = []
        for k in range(spec.depth):
            x = _conv_block(params, x, f"enc{k}")
            skips.append(x)
            x = tensor.pool_max2x2(x)
        x = _conv_block(params, x, "bottleneck")
        for k in reversed(range(spec.depth)):
            x = tensor.concat_channels(tensor.upsample_nearest2x(x), skips[k])
            x = _conv_block(params, x, f"dec{k}")
        return _head(spec, params, x)

    return forward


def build_model(spec: ModelSpec, seed: int) -> Tuple[ParameterSet, ForwardFn]:
    factory = _LayerFactory(seed)
    forward = _REGISTRY[spec.kind](spec, factory)
    params = ParameterSet(factory.tensors, spec=spec, seed=seed)
    logger.debug("built %s with %d parameters", spec.kind, params.parameter_count())
    return params, forward


@lru_cache(maxsize=None)
def forward_fn(spec: ModelSpec) -> ForwardFn:
    """Forward function of a spec without keeping the freshly initialized weights."""
    return build_model(spec, 0)[1]


def _run(params: ParameterSet, batch: np.ndarray, role: str) -> Tensor:
    if params.spec is None:
        raise ModelSpecError(f"{role} parameters carry no ModelSpec")
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim == 3:
        batch = batch[:, None]
    if batch.ndim != 4 or batch.shape[1] != params.spec.in_channels:
        raise ModelSpecError(f"{role} expects {params.spec.in_channels} input channel(s), got batch of shape {batch.shape}")
    return forward_fn(params.spec)(params, Tensor(batch))


def forward_generator(params: ParameterSet, edges) -> Tensor:
    """Generated images in [0,1] from a batch of binary edge maps (N x H x W or N x 1 x H x W)."""
    if params.spec is not None and params.spec.final_activation != "sigmoid":
        raise ModelSpecError("generator spec must end in a sigmoid")
    return _run(params, edges, "generator")


def forward_segmenter(params: ParameterSet, images) -> Tensor:
    return _run(params, images, "segmenter")


def predict_labels(logits: Tensor) -> np.ndarray:
    return tensor.softmax_channels(logits).data.argmax(axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def serialize(params: ParameterSet) -> bytes:
    buffer = io.BytesIO()
    buffer.write(MAGIC)
    buffer.write(struct.pack("<II", VERSION, len(params)))
    for name, t in params.items():
        encoded = name.encode("utf-8")
        buffer.write(struct.pack("<I", len(encoded)))
        buffer.write(encoded)
        buffer.write(struct.pack("<BB", DTYPE_FLOAT32, t.data.ndim))
        buffer.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
        buffer.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    payload = buffer.getvalue()
    return payload + struct.pack("<Q", _crc64(payload))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.blob):
            raise TruncatedCheckpointError(f"checkpoint ends at byte {len(self.blob)}, needed {self.offset + size}")
        chunk = self.blob[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize(blob: bytes) -> ParameterSet:
    reader = _Reader(blob)
    if reader.take(4) != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    version, count = reader.unpack("<II")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        dtype, rank = reader.unpack("<BB")
        if dtype != DTYPE_FLOAT32:
            raise CheckpointError(f"tensor '{name}' has unknown dtype code {dtype}")
        dims = reader.unpack(f"<{rank}Q")
        size = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(reader.take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
        tensors[name] = Tensor(values, requires_grad=True, dtype=np.float32)
    payload_end = reader.offset
    (stored,) = reader.unpack("<Q")
    params = ParameterSet(tensors)
    if stored != _crc64(blob[:payload_end]):
        logger.warning("checkpoint checksum mismatch: stored %016x", stored)
        params.checksum_ok = False
    return params


def save_checkpoint(params: ParameterSet, path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = serialize(params)
    path.write_bytes(blob)
    with open(f"{path}.meta.json", "w", encoding="utf-8") as meta:
        json.dump(params.meta(), meta, indent=2, sort_keys=True)
    checksum = f"{_crc64(blob):016x}"
    logger.info("saved checkpoint %s (%d tensors, id %s)", path, len(params), checksum)
    return checksum


def load_checkpoint(path, strict: bool = False) -> ParameterSet:
    path = Path(path)
    params = deserialize(path.read_bytes())
    if strict and not params.checksum_ok:
        raise ChecksumMismatchError(f"{path}: stored checksum does not match the payload")
    meta_path = Path(f"{path}.meta.json")
    if meta_path.exists():
        with open(meta_path, encoding="utf-8") as meta_file:
            meta = json.load(meta_file)
        params.spec = ModelSpec(**meta["spec"]) if meta.get("spec") else None
        params.seed = meta.get("seed", 0)
        params.epoch = meta.get("epoch", 0)
    return params
