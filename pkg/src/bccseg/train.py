"""Adam, the training loop and checkpoint persistence."""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import stack_batch
from .model import Model, ModelConfig, build_model, forward
from .rng import Xoshiro256
from .tensor import ShapeError, Tape, Tensor

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.t < 0:
            raise ValueError("step count must be >= 0")

    @classmethod
    def for_params(cls, params: Mapping, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        for name, p in params.items():
            arr = p.data if isinstance(p, Tensor) else p
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        return state


def adam_step(params: Mapping, grads: Mapping, state: AdamState) -> None:
    """One bias-corrected Adam update of ``params`` in place; zeroes ``grads``.

    ``params`` and ``grads`` map names to arrays of equal shape.
    """
    for name in params:
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        p, g, m, v = params[name], grads[name], state.m[name], state.v[name]
        if not p.shape == g.shape == m.shape == v.shape:
            raise ShapeError(f"{name}: param {p.shape}, grad {g.shape}, moments {m.shape}/{v.shape} disagree")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g, m, v = grads[name], state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        g[...] = 0


def step_model(model: Model, state: AdamState) -> None:
    params = {n: p.data for n, p in model.params.items()}
    grads = {n: p.grad for n, p in model.params.items()}
    adam_step(params, grads, state)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 4
    lr: float = 1e-3
    class_weights: Optional[tuple] = None
    seed: int = 42
    checkpoint_path: Optional[str] = None
    log_every: int = 10

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.class_weights is not None:
            cw = tuple(float(w) for w in self.class_weights)
            if len(cw) != 2 or min(cw) < 0:
                raise ValueError("class_weights must be two non-negative numbers")
            self.class_weights = cw
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")


@dataclass
class StepLog:
    step: int
    epoch: int
    loss: float
    pixel_acc: float


@dataclass
class TrainReport:
    epoch_loss: list = field(default_factory=list)
    epoch_pixel_acc: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    state: Optional[AdamState] = None

    def write_log(self, path) -> None:
        """CSV training log with columns step,epoch,loss,pixel_acc."""
        with open(path, "w") as fh:
            fh.write("step,epoch,loss,pixel_acc\n")
            for s in self.steps:
                fh.write(f"{s.step},{s.epoch},{s.loss:.8f},{s.pixel_acc:.8f}\n")


def training_records(dataset) -> list:
    """Records with split ``train``; all records when none are marked."""
    records = list(dataset)
    marked = [r for r in records if r.split == "train"]
    return marked if any(r.split is not None for r in records) else records


def train_step(model: Model, state: AdamState, x: np.ndarray, y: np.ndarray, class_weights=None) -> tuple:
    """Forward, backward and Adam update on one batch; returns ``(loss, pixel_acc)``."""
    model.train()
    with Tape() as tape:
        logits = forward(model, Tensor(x))
        loss = T.cross_entropy_loss(logits, y, class_weights)
    tape.backward(loss)
    step_model(model, state)
    pred = logits.data[:, 1] > logits.data[:, 0]
    return loss.item(), float((pred == y.astype(bool)).mean())


def fit(model: Model, dataset, config: TrainConfig, state: Optional[AdamState] = None) -> TrainReport:
    """Train ``model`` on the training split of ``dataset``.

    Batches are drawn from a fresh xoshiro256** shuffle each epoch. When
    ``config.checkpoint_path`` is set a checkpoint is written after every epoch.
    """
    records = training_records(dataset)
    if not records:
        raise ValueError("dataset has no training records")
    sizes = {(r.height, r.width) for r in records}
    if len(sizes) != 1:
        raise ValueError(f"training images must share one size, found {sorted(sizes)}")
    x_all, y_all = stack_batch(records)
    state = state or AdamState.for_params(model.params, lr=config.lr)
    rng = Xoshiro256(config.seed)
    report = TrainReport(state=state)
    step = state.t
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(records))
        losses, accs, weights = [], [], []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, acc = train_step(model, state, x_all[idx], y_all[idx], config.class_weights)
            step += 1
            losses.append(loss)
            accs.append(acc)
            weights.append(len(idx))
            report.steps.append(StepLog(step, epoch, loss, acc))
            if step % config.log_every == 0:
                logger.info("step %d epoch %d loss %.5f pixel_acc %.4f", step, epoch, loss, acc)
        report.epoch_loss.append(float(np.average(losses, weights=weights)))
        report.epoch_pixel_acc.append(float(np.average(accs, weights=weights)))
        report.epoch_seconds.append(time.perf_counter() - t0)
        if config.checkpoint_path:
            save_checkpoint(model, state, config.checkpoint_path)
    model.eval()
    return report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"BCCM"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointLayoutError(CheckpointError):
    pass


def _dims4(shape: Sequence[int]) -> tuple:
    if len(shape) > 4:
        raise CheckpointLayoutError(f"cannot store rank-{len(shape)} tensor")
    return tuple(shape) + (1,) * (4 - len(shape))


def _checkpoint_tensors(model: Model, state: Optional[AdamState]) -> list:
    items = list(model.state_arrays())
    if state is not None:
        items += [(f"adam.m.{n}", state.m[n]) for n in model.params]
        items += [(f"adam.v.{n}", state.v[n]) for n in model.params]
        items.append(("adam.t", np.array([state.t], dtype=np.float32)))
    return items


def save_checkpoint(model: Model, state: Optional[AdamState], path) -> None:
    """Little-endian ``BCCM`` v1 file: config JSON, then named float32 tensors."""
    blob = {"model": model.config.to_dict()}
    if state is not None:
        blob["adam"] = {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps}
    blob_bytes = json.dumps(blob, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = _checkpoint_tensors(model, state)
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob_bytes)), blob_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<B4Q", 4, *_dims4(arr.shape)))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple:
    """Returns ``(model, state)``; ``state`` is None when no optimizer tensors were saved."""
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise BadMagicError(f"{path}: bad magic, not a BCCM checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = r.unpack("<I")
    try:
        blob = json.loads(r.take(blob_len).decode("utf-8"))
        config = ModelConfig.from_dict(blob["model"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, TruncatedCheckpointError):
            raise
        raise CheckpointLayoutError(f"{path}: invalid config blob ({exc})") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        rank, *dims = r.unpack("<B4Q")
        if rank != 4:
            raise CheckpointLayoutError(f"{path}: tensor {name} has rank {rank}, expected 4")
        if name in tensors:
            raise CheckpointLayoutError(f"{path}: duplicate tensor {name}")
        n = int(np.prod(dims))
        tensors[name] = (tuple(dims), np.frombuffer(r.take(4 * n), dtype="<f4"))
    if r.pos != len(buf):
        raise CheckpointLayoutError(f"{path}: {len(buf) - r.pos} trailing bytes")

    model = build_model(config)

    def fill(name, target: np.ndarray):
        if name not in tensors:
            raise CheckpointLayoutError(f"{path}: missing tensor {name}")
        dims, data = tensors.pop(name)
        if dims != _dims4(target.shape):
            raise CheckpointLayoutError(f"{path}: tensor {name} has dims {dims}, model expects {target.shape}")
        target[...] = data.reshape(target.shape)

    for name, p in model.params.items():
        fill(name, p.data)
    for name, buf_arr in model.buffers.items():
        fill(name, buf_arr)
    state = None
    if "adam.t" in tensors:
        hp = blob.get("adam", {})
        state = AdamState.for_params(model.params, **hp)
        for name in model.params:
            fill(f"adam.m.{name}", state.m[name])
            fill(f"adam.v.{name}", state.v[name])
        t_arr = np.zeros(1, dtype=np.float32)
        fill("adam.t", t_arr)
        state.t = int(t_arr[0])
    if tensors:
        raise CheckpointLayoutError(f"{path}: unexpected tensors {sorted(tensors)[:3]}")
    model.eval()
    return model, state
