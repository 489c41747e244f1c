"""Rank-4 tensors and tape-based reverse-mode differentiation.

Every op takes and returns :class:`Tensor` objects in ``(N, C, H, W)`` layout.
When a :class:`Tape` is active and at least one input requires a gradient, the
op appends a record holding its inputs, its output and a backward rule.
:meth:`Tape.backward` walks that record in reverse and accumulates gradients
into ``Tensor.grad``.

Float32 is the working precision. Ops preserve the dtype of their inputs, so
building tensors from float64 arrays gives a float64 graph suitable for finite
difference checks.
"""

from __future__ import annotations

import contextlib
import threading
import weakref
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf from its inputs."""


class Tensor:
    """A numeric array with an optional gradient buffer.

    Leaf tensors created with ``requires_grad=True`` start with a zero gradient
    buffer, so a parameter that does not influence the loss keeps a zero grad.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if requires_grad else None
        # weak so that tape -> record -> output -> tape is not a reference cycle
        self._tape_ref: Optional[weakref.ref] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    @property
    def _tape(self) -> Optional["Tape"]:
        return self._tape_ref() if self._tape_ref is not None else None

    def backward(self) -> None:
        tape = self._tape
        if tape is None:
            raise RuntimeError("tensor was not produced on a live tape")
        tape.backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    name: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of executed ops for one forward/backward pass.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded. Tapes nest, the innermost one receives the records. The active
    stack is per thread.
    """

    _local = threading.local()

    def __init__(self):
        self.records: list[_Record] = []

    @classmethod
    def _stack(cls) -> list:
        if not hasattr(cls._local, "stack"):
            cls._local.stack = []
        return cls._local.stack

    def __enter__(self) -> "Tape":
        Tape._stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack().remove(self)

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def current(cls) -> Optional["Tape"]:
        stack = cls._stack()
        return stack[-1] if stack else None

    def record(self, name, inputs, output, backward) -> None:
        self.records.append(_Record(name, tuple(inputs), output, backward))
        output._tape_ref = weakref.ref(self)

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` of every requires-grad tensor reachable from ``loss``."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise RuntimeError("loss was not produced on this tape")
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self.records):
            g_out = rec.output.grad
            if g_out is None:
                continue
            grads = rec.backward(g_out)
            for inp, g in zip(rec.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(g, dtype=inp.dtype, copy=True)
                else:
                    inp.grad += g


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    (tape or loss._tape or _missing_tape()).backward(loss)


def _missing_tape():
    raise RuntimeError("loss was not produced on a tape")


# MAC accounting for the instrumented forward pass.
_mac_tally: list = []


@contextlib.contextmanager
def count_macs() -> Iterator[list]:
    """Tally multiply-accumulates of every convolution executed in the block.

    Yields a one-element list whose entry holds the running total.
    """
    box = [0]
    _mac_tally.append(box)
    try:
        yield box
    finally:
        _mac_tally.remove(box)


def _emit(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(data, dtype=data.dtype)
    out.requires_grad = needs_grad
    tape = Tape.current()
    if needs_grad and tape is not None:
        tape.record(name, inputs, out, backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_rank4(t: Tensor, what: str) -> None:
    if t.ndim != 4:
        raise ShapeError(f"{what} must be rank 4 (N, C, H, W), got shape {t.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _tap_view(xp: np.ndarray, i: int, j: int, dilation: int, stride: int, oh: int, ow: int):
    r, c = i * dilation, j * dilation
    return xp[:, :, r : r + stride * (oh - 1) + 1 : stride, c : c + stride * (ow - 1) + 1 : stride]


def conv2d(
    input: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation with zero padding, dilation and channel groups.

    The kernel is applied tap by tap, so a dilated kernel and its zero-inflated
    undilated equivalent accumulate their nonzero taps in the same order.
    """
    x, w = _as_tensor(input), _as_tensor(weight)
    _check_rank4(x, "conv2d input")
    _check_rank4(w, "conv2d weight")
    n, c_in, h, wd = x.shape
    c_out, c_per_group, kh, kw = w.shape
    if stride < 1 or dilation < 1 or padding < 0 or groups < 1:
        raise ShapeError(f"invalid conv2d geometry stride={stride} padding={padding} dilation={dilation} groups={groups}")
    if c_in % groups or c_out % groups:
        raise ShapeError(f"channels in={c_in} out={c_out} not divisible by groups={groups}")
    if c_per_group != c_in // groups:
        raise ShapeError(f"weight expects {c_per_group} channels per group, input gives {c_in // groups}")
    if bias is not None and _as_tensor(bias).shape != (c_out,):
        raise ShapeError(f"bias shape {_as_tensor(bias).shape} does not match {c_out} output channels")
    oh = conv_output_size(h, kh, stride, padding, dilation)
    ow = conv_output_size(wd, kw, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be {oh}x{ow} for input {h}x{wd}")

    for box in _mac_tally:
        box[0] += n * oh * ow * kh * kw * c_per_group * c_out

    dtype = x.dtype
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wdata = w.data.astype(dtype, copy=False)
    g, og = groups, c_out // groups
    depthwise = c_per_group == 1 and og == 1
    out = np.zeros((n, c_out, oh, ow), dtype=dtype)
    if depthwise:
        for i in range(kh):
            for j in range(kw):
                out += wdata[:, 0, i, j].reshape(1, c_out, 1, 1) * _tap_view(xp, i, j, dilation, stride, oh, ow)
    else:
        out_g = out.reshape(n, g, og, oh * ow)
        for i in range(kh):
            for j in range(kw):
                tap = _tap_view(xp, i, j, dilation, stride, oh, ow).reshape(n, g, c_per_group, oh * ow)
                out_g += np.matmul(wdata[:, :, i, j].reshape(g, og, c_per_group), tap)
    b = None
    if bias is not None:
        b = _as_tensor(bias)
        out += b.data.astype(dtype, copy=False).reshape(1, c_out, 1, 1)

    def backward_fn(gy):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
        if w.requires_grad:
            gw = np.zeros_like(w.data)
        if depthwise:
            for i in range(kh):
                for j in range(kw):
                    tap = _tap_view(xp, i, j, dilation, stride, oh, ow)
                    if w.requires_grad:
                        gw[:, 0, i, j] = np.einsum("nchw,nchw->c", gy, tap)
                    if x.requires_grad:
                        _tap_view(gxp, i, j, dilation, stride, oh, ow)[...] += gy * wdata[:, 0, i, j].reshape(1, c_out, 1, 1)
        else:
            gy_g = gy.reshape(n, g, og, oh * ow)
            for i in range(kh):
                for j in range(kw):
                    w_tap = wdata[:, :, i, j].reshape(g, og, c_per_group)
                    if w.requires_grad:
                        tap = _tap_view(xp, i, j, dilation, stride, oh, ow).reshape(n, g, c_per_group, oh * ow)
                        gw[:, :, i, j] = np.einsum("ngol,ngcl->goc", gy_g, tap).reshape(c_out, c_per_group)
                    if x.requires_grad:
                        gtap = np.matmul(w_tap.transpose(0, 2, 1), gy_g).reshape(n, c_in, oh, ow)
                        _tap_view(gxp, i, j, dilation, stride, oh, ow)[...] += gtap
        if x.requires_grad:
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        if b is not None and b.requires_grad:
            gb = gy.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, w) + ((b,) if b is not None else ())
    return _emit("conv2d", out, inputs, backward_fn)


def depthwise_separable_conv(
    input: Tensor,
    depthwise_weight: Tensor,
    pointwise_weight: Tensor,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    pointwise_bias: Optional[Tensor] = None,
) -> Tensor:
    """Per-channel spatial convolution followed by a 1x1 channel-mixing convolution."""
    x = _as_tensor(input)
    _check_rank4(x, "separable conv input")
    c_in = x.shape[1]
    dw = conv2d(x, depthwise_weight, None, stride=stride, padding=padding, dilation=dilation, groups=c_in)
    return conv2d(dw, pointwise_weight, pointwise_bias)


# ---------------------------------------------------------------------------
# elementwise, normalization, pooling
# ---------------------------------------------------------------------------


def relu(input: Tensor) -> Tensor:
    x = _as_tensor(input)
    out = np.maximum(x.data, 0)
    return _emit("relu", out, (x,), lambda g: (g * (x.data > 0),))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch {a.shape} vs {b.shape}")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch {a.shape} vs {b.shape}")
    return _emit("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def sum(input: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(input)
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _emit("sum", out, (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean(input: Tensor) -> Tensor:
    x = _as_tensor(input)
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return _emit("mean", out, (x,), lambda g: (np.broadcast_to(g / x.data.size, x.shape),))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat_channels needs at least one tensor")
    for t in ts:
        _check_rank4(t, "concat_channels input")
        if (t.shape[0],) + t.shape[2:] != (ts[0].shape[0],) + ts[0].shape[2:]:
            raise ShapeError(f"concat_channels shape mismatch {t.shape} vs {ts[0].shape}")
    out = np.concatenate([t.data for t in ts], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in ts])

    def backward_fn(g):
        return [g[:, bounds[k] : bounds[k + 1]] for k in range(len(ts))]

    return _emit("concat_channels", out, ts, backward_fn)


def global_avg_pool(input: Tensor) -> Tensor:
    x = _as_tensor(input)
    _check_rank4(x, "global_avg_pool input")
    h, w = x.shape[2:]
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _emit("global_avg_pool", out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape),))


def max_pool(input: Tensor, k: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    x = _as_tensor(input)
    _check_rank4(x, "max_pool input")
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    oh = conv_output_size(h, k, stride, padding, 1)
    ow = conv_output_size(w, k, stride, padding, 1)
    if oh < 1 or ow < 1:
        raise ShapeError(f"max_pool output would be {oh}x{ow}")
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad, constant_values=-np.inf) if padding else x.data
    taps = np.stack([_tap_view(xp, i, j, 1, stride, oh, ow) for i in range(k) for j in range(k)], axis=-1)
    arg = taps.argmax(axis=-1)
    out = np.take_along_axis(taps, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for t in range(k * k):
            i, j = divmod(t, k)
            _tap_view(gxp, i, j, 1, stride, oh, ow)[...] += np.where(arg == t, g, 0)
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return _emit("max_pool", out, (x,), backward_fn)


def batch_norm(
    input: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place as ``momentum * running + (1 - momentum) * batch``.
    In eval mode only the running buffers are used.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x, gm, bt = _as_tensor(input), _as_tensor(gamma), _as_tensor(beta)
    _check_rank4(x, "batch_norm input")
    c = x.shape[1]
    for what, arr in (("gamma", gm.data), ("beta", bt.data), ("running_mean", running_mean), ("running_var", running_var)):
        if np.shape(arr) != (c,):
            raise ShapeError(f"batch_norm {what} shape {np.shape(arr)} does not match {c} channels")
    dtype = x.dtype
    bshape = (1, c, 1, 1)
    g4 = gm.data.astype(dtype, copy=False).reshape(bshape)
    b4 = bt.data.astype(dtype, copy=False).reshape(bshape)

    if training:
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv
        running_mean *= momentum
        running_mean += (1 - momentum) * mu.reshape(c)
        running_var *= momentum
        running_var += (1 - momentum) * var.reshape(c)
        m = x.data.size // c

        def backward_fn(g):
            gg = gb = gx = None
            if gm.requires_grad:
                gg = (g * xhat).sum(axis=(0, 2, 3))
            if bt.requires_grad:
                gb = g.sum(axis=(0, 2, 3))
            if x.requires_grad:
                dxhat = g * g4
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv / m) * (m * dxhat - s1 - xhat * s2)
            return gx, gg, gb

    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(dtype).reshape(bshape)
        xhat = (x.data - running_mean.astype(dtype).reshape(bshape)) * inv

        def backward_fn(g):
            return (
                g * g4 * inv,
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

    out = (xhat * g4 + b4).astype(dtype, copy=False)
    return _emit("batch_norm", out, (x, gm, bt), backward_fn)


def softmax_channels(input: Tensor) -> Tensor:
    x = _as_tensor(input)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit("softmax_channels", y, (x,), backward_fn)


# ---------------------------------------------------------------------------
# resize
# ---------------------------------------------------------------------------


def interpolation_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """Dense ``(out_size, in_size)`` linear-interpolation weights, half-pixel centers."""
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    m = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def resize_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes of a float array."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be at least 1x1, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    ry = interpolation_matrix(h, out_h, x.dtype)
    rx = interpolation_matrix(w, out_w, x.dtype)
    return np.matmul(ry, np.matmul(x, rx.T))


def bilinear_resize(input: Tensor, out_h: int, out_w: int) -> Tensor:
    x = _as_tensor(input)
    _check_rank4(x, "bilinear_resize input")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be at least 1x1, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    ry = interpolation_matrix(h, out_h, x.dtype)
    rx = interpolation_matrix(w, out_w, x.dtype)
    out = np.matmul(ry, np.matmul(x.data, rx.T))
    return _emit("bilinear_resize", out, (x,), lambda g: (np.matmul(ry.T, np.matmul(g, rx)),))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def cross_entropy_loss(logits: Tensor, target: np.ndarray, class_weights=None) -> Tensor:
    """Mean per-pixel cross-entropy of 2-class logits against a {0, 1} label map.

    With ``class_weights=(w0, w1)`` each pixel's term is scaled by the weight of
    its true class; the mean is still taken over all pixels.
    """
    x = _as_tensor(logits)
    _check_rank4(x, "cross_entropy logits")
    n, c, h, w = x.shape
    if c != 2:
        raise ShapeError(f"cross_entropy expects 2 classes, got {c}")
    y = np.asarray(target)
    if y.shape != (n, h, w):
        raise ShapeError(f"target shape {y.shape} does not match logits {(n, h, w)}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("target labels must be 0 or 1")
    y = y.astype(np.int64)
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, y[:, None], axis=1)[:, 0]
    if class_weights is None:
        wpix = np.ones_like(picked)
    else:
        cw = np.asarray(class_weights, dtype=x.dtype)
        if cw.shape != (2,):
            raise ShapeError("class_weights must be a pair")
        wpix = cw[y]
    count = picked.size
    loss = np.asarray(-(wpix * picked).sum() / count, dtype=x.dtype)

    def backward_fn(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, y[:, None], 1.0, axis=1)
        return ((p - onehot) * (wpix[:, None] * (g / count)),)

    return _emit("cross_entropy_loss", loss, (x,), backward_fn)
