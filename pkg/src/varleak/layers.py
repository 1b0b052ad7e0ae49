"""Feed-forward layer stacks: specs, parameters, forward and backward.

A network is a list of :class:`LayerSpec` rows plus a :class:`ParamSet`
holding the trainable tensors.  The spec kinds cover affine and strided
convolution layers, the usual activations, flatten, and batch
normalization, which is enough to express every reference stack used by
the encoder/decoder/discriminator presets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad

LAYER_KINDS = (
    "affine",
    "conv2d",
    "leaky-relu",
    "tanh",
    "elu",
    "sigmoid",
    "softmax",
    "flatten",
    "batch-norm",
)

FORWARD_MODES = ("train", "train-frozen-stats", "eval")


class ConfigError(ValueError):
    """Raised for invalid layer stacks or shape mismatches."""


@dataclass(frozen=True)
class LayerSpec:
    """One row of a network stack description."""

    kind: str
    units: int = 0            # affine fan-out
    channels: int = 0         # conv2d output channels
    kernel: int = 0           # conv2d kernel size (square)
    stride: int = 1           # conv2d stride
    slope: float = 0.2        # leaky-relu negative slope
    alpha: float = 1.0        # elu saturation constant
    momentum: float = 0.99    # batch-norm running-stat momentum
    eps: float = 1e-5         # batch-norm variance epsilon

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")


def affine(units):
    if units < 1:
        raise ConfigError("affine layer needs at least one output unit")
    return LayerSpec("affine", units=units)


def conv2d(channels, kernel, stride=1):
    if channels < 1 or kernel < 1 or stride < 1:
        raise ConfigError("conv2d needs positive channels, kernel, and stride")
    return LayerSpec("conv2d", channels=channels, kernel=kernel, stride=stride)


def leaky_relu(slope=0.2):
    return LayerSpec("leaky-relu", slope=slope)


def tanh():
    return LayerSpec("tanh")


def elu(alpha=1.0):
    return LayerSpec("elu", alpha=alpha)


def sigmoid():
    return LayerSpec("sigmoid")


def softmax():
    return LayerSpec("softmax")


def flatten():
    return LayerSpec("flatten")


def batch_norm(momentum=0.99, eps=1e-5):
    return LayerSpec("batch-norm", momentum=momentum, eps=eps)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


class ParamSet:
    """Named parameter tensors plus per-parameter optimizer state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._state: dict[str, AdamState] = {}

    def add(self, name, value):
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self._state[name] = AdamState(np.zeros_like(t.data), np.zeros_like(t.data))
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def state(self, name):
        return self._state[name]

    def n_scalars(self):
        return sum(p.data.size for p in self._params.values())

    def zero_grads(self):
        for p in self._params.values():
            p.grad = None

    def grad_map(self):
        """Gradients keyed by name; parameters untouched by the loss get zeros."""
        out = {}
        for name, p in self._params.items():
            if p.grad is None:
                out[name] = np.zeros_like(p.data)
            else:
                if p.grad.shape != p.data.shape:
                    raise ConfigError(
                        f"gradient shape {p.grad.shape} != parameter shape "
                        f"{p.data.shape} for {name!r}"
                    )
                out[name] = p.grad
        return out

    def values_snapshot(self):
        return {name: p.data.copy() for name, p in self._params.items()}


def _conv_same_geometry(size, kernel, stride):
    out = -(-size // stride)
    pad = max((out - 1) * stride + kernel - size, 0)
    return out, pad // 2, pad - pad // 2


def conv2d_op(x, w, b, stride):
    """Strided 2-d convolution with 'same' padding via im2col.

    x: (B, H, W, C) tensor; w: (k, k, C, F); b: (F,).
    """
    B, H, W, C = x.data.shape
    kh, kw, _, F = w.data.shape
    OH, pt, pb = _conv_same_geometry(H, kh, stride)
    OW, pl, pr = _conv_same_geometry(W, kw, stride)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))

    cols = np.empty((B, OH, OW, kh, kw, C), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[
                :, i : i + (OH - 1) * stride + 1 : stride,
                j : j + (OW - 1) * stride + 1 : stride, :,
            ]
    cols_mat = cols.reshape(B * OH * OW, kh * kw * C)
    w_mat = w.data.reshape(kh * kw * C, F)
    out_data = (cols_mat @ w_mat).reshape(B, OH, OW, F) + b.data

    def backward(g):
        g_mat = g.reshape(B * OH * OW, F)
        gw = (cols_mat.T @ g_mat).reshape(w.data.shape)
        gb = g.sum(axis=(0, 1, 2))
        gcols = (g_mat @ w_mat.T).reshape(B, OH, OW, kh, kw, C)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[
                    :, i : i + (OH - 1) * stride + 1 : stride,
                    j : j + (OW - 1) * stride + 1 : stride, :,
                ] += gcols[:, :, :, i, j, :]
        gx = gxp[:, pt : pt + H, pl : pl + W, :]
        return gx, gw, gb

    return Tensor._op(out_data, (x, w, b), backward)


class Network:
    """A layer stack with parameters, buffers, and a mode-aware forward."""

    def __init__(self, specs, input_shape, rng=None, zero_init=False, name="net"):
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.name = name
        self.params = ParamSet()
        self.buffers: dict[str, np.ndarray] = {}
        self._build(rng, zero_init)

    def _init_weight(self, shape, fan_in, rng, zero_init):
        if zero_init:
            return np.zeros(shape)
        if rng is None:
            raise ConfigError(f"{self.name}: rng required for random initialization")
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    def _build(self, rng, zero_init):
        shape = self.input_shape
        for idx, spec in enumerate(self.specs):
            tag = f"{idx}.{spec.kind}"
            if spec.kind == "affine":
                if len(shape) != 1:
                    raise ConfigError(
                        f"{self.name} layer {idx} (affine): needs a flat input, "
                        f"got shape {shape}; insert a flatten layer"
                    )
                fan_in = shape[0]
                self.params.add(f"{tag}.weight",
                                self._init_weight((fan_in, spec.units), fan_in, rng, zero_init))
                self.params.add(f"{tag}.bias", np.zeros(spec.units))
                shape = (spec.units,)
            elif spec.kind == "conv2d":
                if len(shape) != 3:
                    raise ConfigError(
                        f"{self.name} layer {idx} (conv2d): needs an image input "
                        f"(H, W, C), got shape {shape}"
                    )
                H, W, C = shape
                fan_in = spec.kernel * spec.kernel * C
                self.params.add(
                    f"{tag}.weight",
                    self._init_weight((spec.kernel, spec.kernel, C, spec.channels),
                                      fan_in, rng, zero_init),
                )
                self.params.add(f"{tag}.bias", np.zeros(spec.channels))
                OH, _, _ = _conv_same_geometry(H, spec.kernel, spec.stride)
                OW, _, _ = _conv_same_geometry(W, spec.kernel, spec.stride)
                shape = (OH, OW, spec.channels)
            elif spec.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif spec.kind == "batch-norm":
                n_feat = shape[-1]
                self.params.add(f"{tag}.gamma", np.ones(n_feat))
                self.params.add(f"{tag}.beta", np.zeros(n_feat))
                self.buffers[f"{tag}.running_mean"] = np.zeros(n_feat)
                self.buffers[f"{tag}.running_var"] = np.ones(n_feat)
            # activations leave the shape unchanged
        self.output_shape = shape

    def forward(self, x, mode="eval"):
        """Run the stack. mode: 'train' | 'train-frozen-stats' | 'eval'.

        Train modes normalize batch-norm with batch statistics;
        'train-frozen-stats' skips the running-statistics update.  Eval mode
        uses running statistics and records no gradient graph.
        """
        if mode not in FORWARD_MODES:
            raise ConfigError(f"unknown forward mode {mode!r}")
        if mode == "eval":
            with no_grad():
                return self._run(x, mode)
        return self._run(x, mode)

    def _run(self, x, mode):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.data.shape[1:] != self.input_shape:
            raise ConfigError(
                f"{self.name}: input shape {x.data.shape[1:]} does not match "
                f"expected {self.input_shape}"
            )
        out = x
        for idx, spec in enumerate(self.specs):
            tag = f"{idx}.{spec.kind}"
            if spec.kind == "affine":
                out = out @ self.params[f"{tag}.weight"] + self.params[f"{tag}.bias"]
            elif spec.kind == "conv2d":
                out = conv2d_op(out, self.params[f"{tag}.weight"],
                                self.params[f"{tag}.bias"], spec.stride)
            elif spec.kind == "flatten":
                out = out.reshape(out.data.shape[0], -1)
            elif spec.kind == "leaky-relu":
                out = out.leaky_relu(spec.slope)
            elif spec.kind == "tanh":
                out = out.tanh()
            elif spec.kind == "elu":
                out = out.elu(spec.alpha)
            elif spec.kind == "sigmoid":
                out = out.sigmoid()
            elif spec.kind == "softmax":
                out = out.softmax(axis=-1)
            elif spec.kind == "batch-norm":
                out = self._batch_norm(out, spec, tag, mode)
        return out

    def _batch_norm(self, x, spec, tag, mode):
        gamma = self.params[f"{tag}.gamma"]
        beta = self.params[f"{tag}.beta"]
        axes = tuple(range(x.data.ndim - 1))
        if mode == "eval":
            mean = self.buffers[f"{tag}.running_mean"]
            var = self.buffers[f"{tag}.running_var"]
            inv = 1.0 / np.sqrt(var + spec.eps)
            return (x - Tensor(mean)) * Tensor(inv) * gamma + beta
        mu = x.mean(axis=axes, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        inv = (var + spec.eps).power(-0.5)
        if mode == "train":
            m = spec.momentum
            self.buffers[f"{tag}.running_mean"] = (
                m * self.buffers[f"{tag}.running_mean"]
                + (1.0 - m) * mu.data.reshape(-1)
            )
            self.buffers[f"{tag}.running_var"] = (
                m * self.buffers[f"{tag}.running_var"]
                + (1.0 - m) * var.data.reshape(-1)
            )
        return centered * inv * gamma + beta


def forward(net, x, mode="eval"):
    """Run ``net`` on a batch; see :meth:`Network.forward`."""
    return net.forward(x, mode)


def backward(net, loss):
    """Backpropagate ``loss`` (once) and return ``net``'s gradient map.

    Parameters the loss never touched map to zero arrays.  Raises
    :class:`~varleak.autodiff.UsageError` if the loss carries no recorded
    graph (e.g. it came from an eval-mode forward).
    """
    if loss.grad is None:
        loss.backward()
    return net.params.grad_map()
