"""Learnable layer parameters and the functions that apply them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from lacrange.autodiff import tensor as T
from lacrange.autodiff.tensor import Tensor
from lacrange.errors import ConfigError, DimensionError, InvalidInputError

KINDS = ("mlp", "scale", "conv1x1", "conv3x3", "batchnorm", "leaky_relu", "sigmoid", "softmax",
         "linear_attention_proj")
ACTIVATIONS = ("leaky_relu", "linear", "sigmoid")

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class LayerParams:
    """Weights plus kind-specific hyper-parameters of one layer.

    ``weights`` holds learnable tensors in a fixed per-kind order:
    mlp / linear_attention_proj -> [W (cin, cout), b (cout)];
    conv1x1 / conv3x3 -> [W (cout, cin, k, k), b (cout)];
    batchnorm -> [gamma (C), beta (C)].
    ``buffers`` holds non-learnable state (batchnorm running statistics).
    """

    kind: str
    weights: list = field(default_factory=list)
    hyper: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")

    @property
    def fan_in(self) -> int:
        w = self.weights[0].data
        return w.shape[0] if self.kind in ("mlp", "linear_attention_proj") else int(np.prod(w.shape[1:]))

    @property
    def fan_out(self) -> int:
        w = self.weights[0].data
        return w.shape[1] if self.kind in ("mlp", "linear_attention_proj") else w.shape[0]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = math.sqrt(1.0 / max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def mlp_params(cin: int, cout: int, rng: np.random.Generator,
               activation: str = "leaky_relu") -> LayerParams:
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    return LayerParams("mlp", [_uniform(rng, (cin, cout), cin), _uniform(rng, (cout,), cin)],
                       {"activation": activation, "slope": T.LEAKY_SLOPE})


def attention_proj_params(din: int, dout: int, rng: np.random.Generator) -> LayerParams:
    return LayerParams("linear_attention_proj",
                       [_uniform(rng, (din, dout), din), _uniform(rng, (dout,), din)])


def conv_params(cin: int, cout: int, k: int, rng: np.random.Generator) -> LayerParams:
    if k not in (1, 3):
        raise ConfigError("only 1x1 and 3x3 convolutions are supported")
    fan = cin * k * k
    return LayerParams(f"conv{k}x{k}",
                       [_uniform(rng, (cout, cin, k, k), fan), _uniform(rng, (cout,), fan)])


def scale_params(channels: int, value: float = 1.0) -> LayerParams:
    """One learnable multiplier per channel."""
    return LayerParams("scale", [Tensor(np.full(channels, float(value)), requires_grad=True)])


def batchnorm_params(channels: int) -> LayerParams:
    return LayerParams(
        "batchnorm",
        [Tensor(np.ones(channels), requires_grad=True), Tensor(np.zeros(channels), requires_grad=True)],
        {"eps": BN_EPS, "momentum": BN_MOMENTUM},
        {"running_mean": np.zeros(channels), "running_var": np.ones(channels)},
    )


def _activate(x: Tensor, name: str, slope: float = T.LEAKY_SLOPE) -> Tensor:
    if name == "leaky_relu":
        return T.leaky_relu(x, slope)
    if name == "sigmoid":
        return T.sigmoid(x)
    return x


def apply_mlp(params: LayerParams, x) -> Tensor:
    """Affine map along the last axis followed by the configured activation."""
    if params.kind not in ("mlp", "linear_attention_proj"):
        raise ConfigError(f"apply_mlp got a {params.kind} layer")
    x = T.as_tensor(x)
    w, b = params.weights
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"mlp expects last dim {w.shape[0]}, got {x.shape}")
    if x.ndim == 1:
        y = T.reshape(T.matmul(T.reshape(x, (1, -1)), w), (w.shape[1],)) + b
    elif x.ndim == 2:
        y = T.matmul(x, w) + b
    else:
        lead = x.shape[:-1]
        y = T.reshape(T.matmul(T.reshape(x, (-1, w.shape[0])), w) + b, lead + (w.shape[1],))
    return _activate(y, params.hyper.get("activation", "linear"), params.hyper.get("slope", T.LEAKY_SLOPE))


def apply_conv2d(params: LayerParams, x) -> Tensor:
    if params.kind not in ("conv1x1", "conv3x3"):
        raise ConfigError(f"apply_conv2d got a {params.kind} layer")
    x = T.as_tensor(x)
    w, b = params.weights
    if x.ndim != 3 or x.shape[0] != w.shape[1]:
        raise DimensionError(f"conv expects [{w.shape[1]},H,W], got {x.shape}")
    return T.conv2d(x, w, b, pad=w.shape[2] // 2)


def apply_batchnorm(params: LayerParams, x, training: bool = True) -> Tensor:
    """Batch normalisation over every axis except the channel axis.

    Channel axis is 0 for 3-D ``[C,H,W]`` maps and the last axis otherwise.
    Training mode normalises with batch statistics (biased variance) and
    updates the running estimates; inference mode uses the running estimates.
    """
    x = T.as_tensor(x)
    gamma, beta = params.weights
    c = gamma.shape[0]
    if x.ndim == 3:
        if x.shape[0] != c:
            raise DimensionError(f"batchnorm expects {c} channels, got {x.shape}")
        axes, bshape = (1, 2), (c, 1, 1)
    else:
        if x.shape[-1] != c:
            raise DimensionError(f"batchnorm expects {c} channels, got {x.shape}")
        axes, bshape = tuple(range(x.ndim - 1)), (c,)
    eps = params.hyper.get("eps", BN_EPS)
    if training:
        mu = T.mean(x, axis=axes, keepdims=True)
        xc = x - mu
        var = T.mean(xc * xc, axis=axes, keepdims=True)
        xhat = xc / T.sqrt(var + eps)
        m = params.hyper.get("momentum", BN_MOMENTUM)
        rm, rv = params.buffers["running_mean"], params.buffers["running_var"]
        params.buffers["running_mean"] = (1 - m) * rm + m * mu.data.reshape(c)
        params.buffers["running_var"] = (1 - m) * rv + m * var.data.reshape(c)
    else:
        rm = params.buffers["running_mean"].reshape(bshape).astype(x.dtype)
        rv = params.buffers["running_var"].reshape(bshape).astype(x.dtype)
        xhat = (x - rm) / np.sqrt(rv + eps)
    return xhat * T.reshape(gamma, bshape) + T.reshape(beta, bshape)


def pool_global(x, axis: str = "space", mode: str = "avg_and_max") -> Tensor:
    """Global pooling of ``x[C,H,W]``.

    ``axis="space"`` reduces H and W, giving ``[C]`` (``[2C]`` for
    avg_and_max, average first).  ``axis="channel"`` reduces C, giving
    ``[H,W]`` (``[2,H,W]``).
    """
    x = T.as_tensor(x)
    if x.ndim != 3 or min(x.shape) < 1:
        raise DimensionError(f"pool_global expects non-empty [C,H,W], got {x.shape}")
    if axis == "space":
        red, keep = (1, 2), False
    elif axis == "channel":
        red, keep = 0, False
    else:
        raise ConfigError(f"unknown pooling axis {axis!r}")
    if mode == "avg":
        return T.mean(x, axis=red, keepdims=keep)
    if mode == "max":
        return T.max_(x, axis=red, keepdims=keep)
    if mode != "avg_and_max":
        raise ConfigError(f"unknown pooling mode {mode!r}")
    avg, mx = T.mean(x, axis=red), T.max_(x, axis=red)
    if axis == "space":
        return T.concat([avg, mx], axis=0)
    return T.stack([avg, mx], axis=0)


def attend_cross(q, k, v, proj: LayerParams) -> Tensor:
    """Scaled dot-product cross-attention followed by a linear layer.

    q: [Lq, D], k: [Lk, D], v: [Lk, Dv]  ->  [Lq, Dv'].
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if k.shape[0] == 0:
        raise InvalidInputError("cross-attention needs at least one key")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError("keys and values must have the same length")
    scores = T.matmul(q, T.transpose(k)) * (1.0 / math.sqrt(q.shape[-1]))
    weights = T.softmax(scores, axis=-1)
    return apply_mlp(proj, T.matmul(weights, v))


def apply_layer(params: LayerParams, x, training: bool = True) -> Tensor:
    """Dispatch on ``params.kind``."""
    kind = params.kind
    if kind in ("mlp", "linear_attention_proj"):
        return apply_mlp(params, x)
    if kind in ("conv1x1", "conv3x3"):
        return apply_conv2d(params, x)
    if kind == "batchnorm":
        return apply_batchnorm(params, x, training)
    if kind == "leaky_relu":
        return T.leaky_relu(x, params.hyper.get("slope", T.LEAKY_SLOPE))
    if kind == "sigmoid":
        return T.sigmoid(x)
    return T.softmax(x, axis=params.hyper.get("axis", -1))


def _walk(name: str, val):
    """Yield (path, item) for LayerParams/Blocks inside nested lists and dicts."""
    if isinstance(val, (LayerParams, Block)):
        yield name, val
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(f"{name}.{i}", item)
    elif isinstance(val, dict):
        for key, item in val.items():
            yield from _walk(f"{name}.{key}", item)


class Block:
    """Container that discovers LayerParams and child Blocks in its attributes.

    Parameter names are dotted attribute paths; list entries use their index.
    """

    training: bool = True

    def _children(self):
        for name, val in vars(self).items():
            yield from _walk(name, val)

    def named_layers(self, prefix: str = ""):
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, LayerParams):
                yield full, child
            else:
                yield from child.named_layers(full + ".")

    def named_parameters(self):
        for name, lp in self.named_layers():
            for i, w in enumerate(lp.weights):
                yield f"{name}.w{i}", w

    def parameters(self) -> list:
        return [w for _, w in self.named_parameters()]

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            if isinstance(child, Block):
                child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        out = {}
        for name, lp in self.named_layers():
            for i, w in enumerate(lp.weights):
                out[f"{name}.w{i}"] = w.data
            for key, buf in lp.buffers.items():
                out[f"{name}.{key}"] = buf
        return out

    def load_state_dict(self, state: dict):
        for name, lp in self.named_layers():
            for i, w in enumerate(lp.weights):
                arr = np.asarray(state[f"{name}.w{i}"], dtype=w.data.dtype)
                if arr.shape != w.shape:
                    raise DimensionError(f"{name}.w{i}: checkpoint shape {arr.shape} != {w.shape}")
                w.data = arr.copy()
            for key in lp.buffers:
                lp.buffers[key] = np.asarray(state[f"{name}.{key}"], dtype=np.float64).copy()
        return self

    def astype(self, dtype):
        """Cast every weight and buffer in place (float32 for benchmarking)."""
        for _, lp in self.named_layers():
            for w in lp.weights:
                w.data = w.data.astype(dtype)
            for key, buf in lp.buffers.items():
                lp.buffers[key] = np.asarray(buf).astype(dtype)
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def bn(params: LayerParams, x, block: Block) -> Tensor:
    return apply_batchnorm(params, x, training=block.training)
