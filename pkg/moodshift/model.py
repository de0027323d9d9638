#!/usr/bin/env python3
"""
Mood Transformation Model
=========================

f(x_s, y_s, y_t) = p_f(concat(p_s(x_s), p_y(y_t - y_s)))

    p_s: d -> 1024 (ReLU, dropout 0.3) -> 512
    p_y: m -> 64 (ReLU, dropout 0.4) -> 128
    p_f: dropout 0.3 on the 640-wide concat -> d

Forward and backward passes are written out by hand in numpy. Dropout is
inverted (kept units scaled by 1/keep at train time), so eval mode simply
skips it.

Checkpoint file (little-endian):
    magic "MDL1" | u32 version | u32 d | u32 m | per tensor: u32 rank, u32 dims..., float32 payload
with a JSON sidecar (``.json``) holding hyperparameters and provenance.
"""

import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .catalog import one_hot
from .errors import CatalogFormatError, DimensionMismatchError, ValidationError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SEED_HIDDEN = 1024
SEED_OUT = 512
GUIDE_HIDDEN = 64
GUIDE_OUT = 128
CONCAT_WIDTH = SEED_OUT + GUIDE_OUT

SEED_DROPOUT = 0.3
GUIDE_DROPOUT = 0.4
OUTPUT_DROPOUT = 0.3

TENSOR_ORDER = (
    "seed_w1", "seed_b1", "seed_w2", "seed_b2",
    "guide_w1", "guide_b1", "guide_w2", "guide_b2",
    "out_w", "out_b",
)

CHECKPOINT_MAGIC = b"MDL1"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct("<4sIII")
_U32 = struct.Struct("<I")

TRAIN = "train"
EVAL = "eval"


def tensor_shapes(d: int, m: int) -> Dict[str, Tuple[int, ...]]:
    """Shape of every parameter tensor; weights are stored (fan_in, fan_out)."""
    return {
        "seed_w1": (d, SEED_HIDDEN), "seed_b1": (SEED_HIDDEN,),
        "seed_w2": (SEED_HIDDEN, SEED_OUT), "seed_b2": (SEED_OUT,),
        "guide_w1": (m, GUIDE_HIDDEN), "guide_b1": (GUIDE_HIDDEN,),
        "guide_w2": (GUIDE_HIDDEN, GUIDE_OUT), "guide_b2": (GUIDE_OUT,),
        "out_w": (CONCAT_WIDTH, d), "out_b": (d,),
    }


def parameter_count(d: int, m: int) -> int:
    return int(sum(np.prod(shape) for shape in tensor_shapes(d, m).values()))


@dataclass(eq=False)
class ModelParams:
    """Weights and biases of the three projectors."""
    d: int
    m: int
    tensors: Dict[str, np.ndarray]

    def __post_init__(self):
        expected = tensor_shapes(self.d, self.m)
        if list(self.tensors) != list(TENSOR_ORDER):
            self.tensors = {name: self.tensors[name] for name in TENSOR_ORDER}
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise DimensionMismatchError(
                    f"Tensor '{name}' has shape {self.tensors[name].shape}, expected {shape}"
                )

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(self.d, self.m, {k: v.copy() for k, v in self.tensors.items()})

    def rounded(self) -> "ModelParams":
        """Copy with every value rounded through float32, as a checkpoint stores it."""
        return ModelParams(self.d, self.m, {
            k: v.astype(np.float32).astype(np.float64) for k, v in self.tensors.items()
        })

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in TENSOR_ORDER:
            digest.update(np.ascontiguousarray(self.tensors[name], dtype="<f4").tobytes())
        return digest.hexdigest()


def init_params(d: int, m: int, rng_seed: int) -> ModelParams:
    """
    He-uniform weights for layers feeding a ReLU, LeCun-uniform for the
    linear output layers, zero biases. Deterministic given ``rng_seed``.
    """
    if d < 1:
        raise ValidationError(f"Embedding dimension must be >= 1, got {d}")
    if m < 2:
        raise ValidationError(f"Mood count must be >= 2, got {m}")
    rng = np.random.default_rng(rng_seed)
    relu_fed = {"seed_w1", "guide_w1"}
    tensors = {}
    for name, shape in tensor_shapes(d, m).items():
        if len(shape) == 1:
            tensors[name] = np.zeros(shape, dtype=np.float64)
            continue
        gain = 6.0 if name in relu_fed else 3.0
        limit = np.sqrt(gain / shape[0])
        tensors[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(d, m, tensors)


def guidance_vectors(y_s: Sequence[int], y_t: Sequence[int], m: int) -> np.ndarray:
    """g = onehot(y_t) - onehot(y_s); all-zero rows for identity pairs."""
    return one_hot(y_t, m) - one_hot(y_s, m)


def dropout_mask(rng: np.random.Generator, shape: Tuple[int, ...], rate: float) -> np.ndarray:
    """Inverted-dropout mask: 0 for dropped units, 1/keep for kept ones."""
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep


@dataclass(eq=False)
class ForwardTrace:
    """Cached activations and dropout masks of one forward pass."""
    params: ModelParams
    mode: str
    x: np.ndarray
    g: np.ndarray
    seed_pre: np.ndarray
    seed_hidden: np.ndarray
    guide_pre: np.ndarray
    guide_hidden: np.ndarray
    concat: np.ndarray
    concat_dropped: np.ndarray
    masks: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return self.x.shape[0]


def forward(params: ModelParams, x_s: np.ndarray, y_s: Sequence[int], y_t: Sequence[int], mode: str = EVAL,
            rng: Optional[np.random.Generator] = None,
            masks: Optional[Dict[str, np.ndarray]] = None) -> Tuple[np.ndarray, ForwardTrace]:
    """
    Transform a batch of seed embeddings toward their target moods.

    In train mode dropout masks are drawn from ``rng`` unless ``masks`` (as
    recorded in an earlier trace) are supplied.

    Returns:
        (x_hat, trace) with x_hat of shape (B, d)

    Raises:
        ValidationError: on non-finite input rows or inconsistent shapes
    """
    x = np.asarray(x_s, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != params.d:
        raise DimensionMismatchError(f"Input dimension {x.shape[1]} does not match model dimension {params.d}")
    bad = np.flatnonzero(~np.isfinite(x).all(axis=1))
    if bad.size:
        raise ValidationError(f"Non-finite input at batch row {int(bad[0])}")
    y_s = np.atleast_1d(np.asarray(y_s, dtype=np.int64))
    y_t = np.atleast_1d(np.asarray(y_t, dtype=np.int64))
    if y_s.shape != (x.shape[0],) or y_t.shape != (x.shape[0],):
        raise ValidationError(f"Mood label batches must have length {x.shape[0]}")
    for labels in (y_s, y_t):
        if ((labels < 0) | (labels >= params.m)).any():
            raise ValidationError(f"Mood index out of range [0, {params.m})")
    if mode not in (TRAIN, EVAL):
        raise ValidationError(f"Unknown mode '{mode}'")

    batch = x.shape[0]
    if mode == TRAIN and masks is None:
        if rng is None:
            raise ValidationError("Train mode requires an rng for dropout masks")
        masks = {
            "seed": dropout_mask(rng, (batch, SEED_HIDDEN), SEED_DROPOUT),
            "guide": dropout_mask(rng, (batch, GUIDE_HIDDEN), GUIDE_DROPOUT),
            "concat": dropout_mask(rng, (batch, CONCAT_WIDTH), OUTPUT_DROPOUT),
        }
    elif mode == EVAL:
        masks = {}

    p = params.tensors
    g = guidance_vectors(y_s, y_t, params.m)

    seed_pre = x @ p["seed_w1"] + p["seed_b1"]
    seed_hidden = np.maximum(seed_pre, 0.0)
    if masks:
        seed_hidden = seed_hidden * masks["seed"]
    seed_out = seed_hidden @ p["seed_w2"] + p["seed_b2"]

    guide_pre = g @ p["guide_w1"] + p["guide_b1"]
    guide_hidden = np.maximum(guide_pre, 0.0)
    if masks:
        guide_hidden = guide_hidden * masks["guide"]
    guide_out = guide_hidden @ p["guide_w2"] + p["guide_b2"]

    concat = np.concatenate([seed_out, guide_out], axis=1)
    concat_dropped = concat * masks["concat"] if masks else concat
    x_hat = concat_dropped @ p["out_w"] + p["out_b"]

    trace = ForwardTrace(
        params=params, mode=mode, x=x, g=g,
        seed_pre=seed_pre, seed_hidden=seed_hidden,
        guide_pre=guide_pre, guide_hidden=guide_hidden,
        concat=concat, concat_dropped=concat_dropped, masks=dict(masks),
    )
    return x_hat, trace


def backward(trace: ForwardTrace, grad_output: np.ndarray,
             params: Optional[ModelParams] = None) -> Dict[str, np.ndarray]:
    """
    Exact gradients of a scalar loss w.r.t. every parameter, given dL/dx_hat.

    Raises:
        ValidationError: if the trace does not belong to ``params`` or the
            upstream gradient has the wrong shape
    """
    if params is not None and params is not trace.params:
        raise ValidationError("Trace was produced by a different set of parameters")
    p = trace.params.tensors
    grad_output = np.asarray(grad_output, dtype=np.float64)
    if grad_output.shape != (trace.batch_size, trace.params.d):
        raise ValidationError(
            f"Upstream gradient has shape {grad_output.shape}, expected {(trace.batch_size, trace.params.d)}"
        )
    masks = trace.masks

    grads = {
        "out_w": trace.concat_dropped.T @ grad_output,
        "out_b": grad_output.sum(axis=0),
    }
    d_concat = grad_output @ p["out_w"].T
    if masks:
        d_concat = d_concat * masks["concat"]
    d_seed_out = d_concat[:, :SEED_OUT]
    d_guide_out = d_concat[:, SEED_OUT:]

    grads["seed_w2"] = trace.seed_hidden.T @ d_seed_out
    grads["seed_b2"] = d_seed_out.sum(axis=0)
    d_seed_hidden = d_seed_out @ p["seed_w2"].T
    if masks:
        d_seed_hidden = d_seed_hidden * masks["seed"]
    d_seed_pre = d_seed_hidden * (trace.seed_pre > 0)
    grads["seed_w1"] = trace.x.T @ d_seed_pre
    grads["seed_b1"] = d_seed_pre.sum(axis=0)

    grads["guide_w2"] = trace.guide_hidden.T @ d_guide_out
    grads["guide_b2"] = d_guide_out.sum(axis=0)
    d_guide_hidden = d_guide_out @ p["guide_w2"].T
    if masks:
        d_guide_hidden = d_guide_hidden * masks["guide"]
    d_guide_pre = d_guide_hidden * (trace.guide_pre > 0)
    grads["guide_w1"] = trace.g.T @ d_guide_pre
    grads["guide_b1"] = d_guide_pre.sum(axis=0)

    return {name: grads[name] for name in TENSOR_ORDER}


class MoodTransformer:
    """Eval-mode wrapper around a set of parameters."""

    def __init__(self, params: ModelParams, metadata: Optional[Dict] = None):
        self.params = params
        self.metadata = metadata or {}

    @property
    def dim(self) -> int:
        return self.params.d

    @property
    def mood_count(self) -> int:
        return self.params.m

    def transform(self, x_s: np.ndarray, y_s: Sequence[int], y_t: Sequence[int]) -> np.ndarray:
        x_hat, _ = forward(self.params, x_s, y_s, y_t, mode=EVAL)
        return x_hat

    @classmethod
    def load(cls, path: PathLike) -> "MoodTransformer":
        params, metadata = load_checkpoint(path)
        return cls(params, metadata)


def checkpoint_sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def checkpoint_bytes(params: ModelParams) -> bytes:
    buffer = io.BytesIO()
    buffer.write(_CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.d, params.m))
    for name in TENSOR_ORDER:
        tensor = params.tensors[name]
        buffer.write(_U32.pack(tensor.ndim))
        for dim in tensor.shape:
            buffer.write(_U32.pack(dim))
        buffer.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes(order="C"))
    return buffer.getvalue()


def save_checkpoint(params: ModelParams, path: PathLike, metadata: Optional[Dict] = None):
    """Write the MDL1 binary and its JSON sidecar (hyperparameters, provenance)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(params))
    sidecar = dict(metadata or {})
    sidecar.update({"d": params.d, "m": params.m, "parameter_count": params.count(), "checksum": params.checksum()})
    with open(checkpoint_sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    logger.info(f"Saved checkpoint {path} ({params.count():,} parameters)")


def load_checkpoint(path: PathLike) -> Tuple[ModelParams, Dict]:
    """
    Read an MDL1 checkpoint; tensors are returned as float64 arrays.

    Raises:
        CatalogFormatError: on magic, version or shape violations
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _CHECKPOINT_HEADER.size:
        raise CatalogFormatError("Truncated checkpoint header", path=str(path))
    magic, version, d, m = _CHECKPOINT_HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CatalogFormatError(f"Magic mismatch: expected {CHECKPOINT_MAGIC!r}, found {magic!r}", path=str(path))
    if version != CHECKPOINT_VERSION:
        raise CatalogFormatError(f"Version mismatch: expected {CHECKPOINT_VERSION}, found {version}", path=str(path))

    offset = _CHECKPOINT_HEADER.size
    expected = tensor_shapes(d, m)
    tensors = {}
    try:
        for name in TENSOR_ORDER:
            (rank,) = _U32.unpack_from(data, offset)
            offset += _U32.size
            shape = tuple(_U32.unpack_from(data, offset + 4 * i)[0] for i in range(rank))
            offset += 4 * rank
            if shape != expected[name]:
                raise CatalogFormatError(f"Tensor '{name}' has shape {shape}, expected {expected[name]}", path=str(path))
            count = int(np.prod(shape))
            if offset + 4 * count > len(data):
                raise CatalogFormatError(f"Truncated payload in tensor '{name}'", path=str(path))
            tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float64)
            offset += 4 * count
    except struct.error:
        raise CatalogFormatError(f"Truncated checkpoint at byte {offset}", path=str(path))
    if offset != len(data):
        raise CatalogFormatError(f"{len(data) - offset} trailing bytes in checkpoint", path=str(path))

    metadata: Dict = {}
    sidecar = checkpoint_sidecar_path(path)
    if sidecar.exists():
        with open(sidecar, "r", encoding="utf-8") as f:
            metadata = json.load(f)
    return ModelParams(d, m, tensors), metadata
