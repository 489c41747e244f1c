"""Micro Xception encoder + ASPP head + bilinear decoder.

Architecture (``S`` stem channels, ``c1..c3`` entry channels, ``A`` ASPP
channels, ``K`` classes)::

    stem      3x3 conv stride 2, 3 -> S, BN, ReLU                    /2
    block1-3  separable residual block, stride 2, c_{i-1} -> c_i      /16
    block4..  ``middle_blocks`` separable residual blocks, stride 1
    aspp      1x1 | 3x3 rate r1 | 3x3 rate r2 | 3x3 rate r3 | pool,
              each -> A with BN+ReLU, concatenated, 1x1 fuse -> A
    classifier 1x1 conv A -> K (with bias), bilinear x16 to input size

A separable residual block is::

    sep1  depthwise 3x3 + pointwise (in -> out), BN, ReLU
    sep2  depthwise 3x3 (stride s) + pointwise (out -> out), BN
    skip  1x1 conv stride s + BN when s > 1 or in != out, else identity
    out   ReLU(sep2 + skip)

Convolutions followed by batch norm carry no bias.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

OUTPUT_STRIDE = 16
ENTRY_BLOCKS = 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 2
    output_stride: int = OUTPUT_STRIDE
    aspp_rates: tuple = (6, 12, 18)
    stem_channels: int = 16
    block_channels: tuple = (32, 64, 128)
    middle_blocks: int = 2
    aspp_channels: int = 64
    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, "aspp_rates", tuple(int(r) for r in self.aspp_rates))
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        if self.output_stride != OUTPUT_STRIDE:
            raise ConfigError(f"output_stride must be {OUTPUT_STRIDE}, got {self.output_stride}")
        rates = self.aspp_rates
        if len(rates) != 3 or any(r < 1 for r in rates) or any(a >= b for a, b in zip(rates, rates[1:])):
            raise ConfigError(f"aspp_rates must be three strictly increasing positive ints, got {rates}")
        if not 1 <= len(self.block_channels) <= ENTRY_BLOCKS:
            raise ConfigError(f"block_channels needs 1 to {ENTRY_BLOCKS} entries, got {self.block_channels}")
        for name in ("num_classes", "stem_channels", "aspp_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if any(c < 1 for c in self.block_channels):
            raise ConfigError("block_channels entries must be >= 1")
        if self.middle_blocks < 0:
            raise ConfigError("middle_blocks must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def entry_channels(self) -> tuple:
        """Channels of the three stride-2 blocks; a short list repeats its last entry."""
        bc = self.block_channels
        return bc + (bc[-1],) * (ENTRY_BLOCKS - len(bc))

    @property
    def encoder_channels(self) -> int:
        return self.entry_channels[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aspp_rates"] = list(self.aspp_rates)
        d["block_channels"] = list(self.block_channels)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class ConvSpec:
    """One convolution layer of the network, in execution order."""

    name: str
    c_in: int
    c_out: int
    k: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    bias: bool = False
    bn: Optional[str] = None

    @property
    def weight_shape(self) -> tuple:
        return (self.c_out, self.c_in // self.groups, self.k, self.k)


@dataclass(frozen=True)
class BlockSpec:
    name: str
    c_in: int
    c_out: int
    stride: int

    @property
    def has_skip_conv(self) -> bool:
        return self.stride != 1 or self.c_in != self.c_out


def block_specs(config: ModelConfig) -> list:
    blocks = []
    c = config.stem_channels
    for i, out in enumerate(config.entry_channels):
        blocks.append(BlockSpec(f"block{i + 1}", c, out, 2))
        c = out
    for j in range(config.middle_blocks):
        blocks.append(BlockSpec(f"block{ENTRY_BLOCKS + j + 1}", c, c, 1))
    return blocks


def _block_convs(b: BlockSpec) -> list:
    p = b.name
    convs = [
        ConvSpec(f"{p}.sep1.depthwise", b.c_in, b.c_in, 3, padding=1, groups=b.c_in),
        ConvSpec(f"{p}.sep1.pointwise", b.c_in, b.c_out, 1, bn=f"{p}.sep1.bn"),
        ConvSpec(f"{p}.sep2.depthwise", b.c_out, b.c_out, 3, stride=b.stride, padding=1, groups=b.c_out),
        ConvSpec(f"{p}.sep2.pointwise", b.c_out, b.c_out, 1, bn=f"{p}.sep2.bn"),
    ]
    if b.has_skip_conv:
        convs.append(ConvSpec(f"{p}.skip.conv", b.c_in, b.c_out, 1, stride=b.stride, bn=f"{p}.skip.bn"))
    return convs


def conv_specs(config: ModelConfig) -> list:
    """Every convolution in the network, in forward order."""
    s, a = config.stem_channels, config.aspp_channels
    c_enc = config.encoder_channels
    specs = [ConvSpec("stem.conv", 3, s, 3, stride=2, padding=1, bn="stem.bn")]
    for b in block_specs(config):
        specs += _block_convs(b)
    specs.append(ConvSpec("aspp.branch_1x1", c_enc, a, 1, bn="aspp.branch_1x1.bn"))
    for r in config.aspp_rates:
        specs.append(ConvSpec(f"aspp.branch_r{r}", c_enc, a, 3, padding=r, dilation=r, bn=f"aspp.branch_r{r}.bn"))
    specs.append(ConvSpec("aspp.pool", c_enc, a, 1, bn="aspp.pool.bn"))
    specs.append(ConvSpec("aspp.fuse", a * (len(config.aspp_rates) + 2), a, 1, bn="aspp.fuse.bn"))
    specs.append(ConvSpec("classifier", a, config.num_classes, 1, bias=True))
    return specs


def parameter_count(config: ModelConfig) -> int:
    """Closed-form trainable parameter count (conv weights, biases, BN affine)."""
    s, a, k = config.stem_channels, config.aspp_channels, config.num_classes
    c1, c2, c3 = config.entry_channels
    m = config.middle_blocks
    n_rates = len(config.aspp_rates)

    def entry(ci, co):
        # sep1 (dw + pw + bn) + sep2 (dw + pw + bn) + skip (1x1 + bn)
        return (9 * ci + ci * co + 2 * co) + (9 * co + co * co + 2 * co) + (ci * co + 2 * co)

    stem = 27 * s + 2 * s
    entries = entry(s, c1) + entry(c1, c2) + entry(c2, c3)
    middle = m * 2 * (9 * c3 + c3 * c3 + 2 * c3)
    aspp = (c3 * a + 2 * a) + n_rates * (9 * c3 * a + 2 * a) + (c3 * a + 2 * a)
    fuse = (n_rates + 2) * a * a + 2 * a
    head = a * k + k
    return stem + entries + middle + aspp + fuse + head


class Model:
    """Parameters, batch-norm buffers and mode of one segmentation network."""

    def __init__(self, config: ModelConfig, params: dict, buffers: dict):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.specs = {spec.name: spec for spec in conv_specs(config)}
        self.training = True

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def parameters(self) -> dict:
        return self.params

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> Iterator[tuple]:
        """``(name, array)`` for every parameter then every buffer, in build order."""
        for name, p in self.params.items():
            yield name, p.data
        yield from self.buffers.items()

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)


def build_model(config: Optional[ModelConfig] = None, dtype=np.float32) -> Model:
    """Build a model with deterministic He-uniform initialization from ``config.seed``."""
    config = config or ModelConfig()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    params: dict = {}
    buffers: dict = {}
    for spec in conv_specs(config):
        fan_in = (spec.c_in // spec.groups) * spec.k * spec.k
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=spec.weight_shape).astype(dtype)
        params[f"{spec.name}.weight"] = Tensor(w, requires_grad=True)
        if spec.bias:
            params[f"{spec.name}.bias"] = Tensor(np.zeros(spec.c_out, dtype=dtype), requires_grad=True)
        if spec.bn:
            params[f"{spec.bn}.gamma"] = Tensor(np.ones(spec.c_out, dtype=dtype), requires_grad=True)
            params[f"{spec.bn}.beta"] = Tensor(np.zeros(spec.c_out, dtype=dtype), requires_grad=True)
            buffers[f"{spec.bn}.running_mean"] = np.zeros(spec.c_out, dtype=dtype)
            buffers[f"{spec.bn}.running_var"] = np.ones(spec.c_out, dtype=dtype)
    return Model(config, params, buffers)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def _bn(model: Model, name: str, x: Tensor) -> Tensor:
    return T.batch_norm(
        x,
        model.params[f"{name}.gamma"],
        model.params[f"{name}.beta"],
        model.buffers[f"{name}.running_mean"],
        model.buffers[f"{name}.running_var"],
        training=model.training,
    )


def _conv(model: Model, name: str, x: Tensor) -> Tensor:
    spec = model.specs[name]
    bias = model.params.get(f"{spec.name}.bias")
    y = T.conv2d(
        x,
        model.params[f"{spec.name}.weight"],
        bias,
        stride=spec.stride,
        padding=spec.padding,
        dilation=spec.dilation,
        groups=spec.groups,
    )
    return _bn(model, spec.bn, y) if spec.bn else y


def _separable(model: Model, prefix: str, x: Tensor, stride: int) -> Tensor:
    y = T.depthwise_separable_conv(
        x,
        model.params[f"{prefix}.depthwise.weight"],
        model.params[f"{prefix}.pointwise.weight"],
        stride=stride,
        padding=1,
    )
    return _bn(model, f"{prefix}.bn", y)


def _block(model: Model, b: BlockSpec, x: Tensor) -> Tensor:
    y = T.relu(_separable(model, f"{b.name}.sep1", x, 1))
    y = _separable(model, f"{b.name}.sep2", y, b.stride)
    if b.has_skip_conv:
        skip = _conv(model, f"{b.name}.skip.conv", x)
    else:
        skip = x
    return T.relu(T.add(y, skip))


def check_input_dims(x: Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"model input must have shape (N, 3, H, W), got {x.shape}")
    h, w = x.shape[2:]
    if h % OUTPUT_STRIDE:
        raise ShapeError(f"input height {h} is not divisible by {OUTPUT_STRIDE}")
    if w % OUTPUT_STRIDE:
        raise ShapeError(f"input width {w} is not divisible by {OUTPUT_STRIDE}")


def encoder_forward(model: Model, x: Tensor) -> Tensor:
    check_input_dims(x)
    y = T.relu(_conv(model, "stem.conv", x))
    for b in block_specs(model.config):
        y = _block(model, b, y)
    return y


def aspp_forward(model: Model, features: Tensor) -> Tensor:
    cfg = model.config
    c_enc = cfg.encoder_channels
    if features.ndim != 4 or features.shape[1] != c_enc:
        raise ShapeError(f"ASPP expects (N, {c_enc}, h, w) features, got {features.shape}")
    h, w = features.shape[2:]
    branches = [T.relu(_conv(model, "aspp.branch_1x1", features))]
    for r in cfg.aspp_rates:
        branches.append(T.relu(_conv(model, f"aspp.branch_r{r}", features)))
    pooled = T.relu(_conv(model, "aspp.pool", T.global_avg_pool(features)))
    branches.append(T.bilinear_resize(pooled, h, w))
    return T.relu(_conv(model, "aspp.fuse", T.concat_channels(branches)))


def forward(model: Model, x: Tensor) -> Tensor:
    """Per-pixel class logits at the input resolution."""
    feats = encoder_forward(model, x)
    y = aspp_forward(model, feats)
    y = _conv(model, "classifier", y)
    return T.bilinear_resize(y, x.shape[2], x.shape[3])


def masks_from_logits(logits: np.ndarray) -> tuple:
    """Tumor probability and argmax mask from ``(N, 2, H, W)`` logits.

    Ties go to background.
    """
    diff = logits[:, 1].astype(np.float64) - logits[:, 0].astype(np.float64)
    prob = 0.5 * (1.0 + np.tanh(0.5 * diff))
    mask = (logits[:, 1] > logits[:, 0]).astype(np.uint8)
    return prob, mask


def predict_mask(model: Model, x: Tensor) -> tuple:
    """``(prob_map, binary_mask)`` arrays of shape (N, H, W) in eval mode."""
    was_training = model.training
    model.eval()
    try:
        logits = forward(model, x)
    finally:
        model.training = was_training
    return masks_from_logits(logits.data)
