"""Layer primitives and block composition.

Convolution is cross-correlation (no kernel flip) computed by im2col + one
GEMM; the backward pass scatters column gradients back with a k*k loop of
strided slice adds. All tensors are N x C x H x W, row-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError
from .rng import Rng
from .tensor import Tensor, get_default_dtype, make_op

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


# -- functional kernels ------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Column matrix of shape (C*kh*kw, N*OH*OW).

    Rows are ordered (c, ki, kj) to match a weight reshaped to (Cout, C*kh*kw);
    columns are ordered (n, oh, ow). Built from one channel-major copy of the
    input plus one strided block copy per kernel offset.
    """
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    xt = x.transpose(1, 0, 2, 3)
    if padding:
        xt = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(c * kh * kw, n * oh * ow)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back to an N x C x H x W array."""
    n, c, h, w = x_shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    cols = cols.reshape(c, kh, kw, n, oh, ow)
    out = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects N x C x H x W input, got {x.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {cin}")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise DimensionError(f"conv2d: non-positive output size {oh}x{ow}")
    cols = im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, oh, ow).transpose(1, 0, 2, 3))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = col2im(wmat.T @ gmat, x.shape, kh, kw, stride, padding) if x.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=1)

    return make_op("conv2d", out, inputs, bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    wd = weight.data
    out = x.data @ wd.T
    if bias is not None:
        out = out + bias.data
    xd = x.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return make_op("linear", out, inputs, bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalisation for (N, C) or (N, C, H, W) input.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch`` (unbiased batch
    variance). Eval mode reads them and never writes.
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batch_norm expects 2-D or 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,):
        raise DimensionError(f"batch_norm: {c} channels but gamma has shape {gamma.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    xd = x.data
    dt = xd.dtype.type
    m = xd.size // c
    if training:
        if x.shape[0] < 2:
            raise DimensionError("batch_norm in train mode needs a batch of at least 2")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (m / max(m - 1, 1))
    else:
        mu = running_mean.astype(xd.dtype, copy=False)
        var = running_var.astype(xd.dtype, copy=False)
    inv_std = (1.0 / np.sqrt(var + dt(eps))).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    gd = gamma.data

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        if not x.requires_grad:
            return None, ggamma, gbeta
        scale_ = (gd * inv_std).reshape(bshape)
        if training:
            gx = scale_ * (g - gbeta.reshape(bshape) / m - xhat * ggamma.reshape(bshape) / m)
        else:
            gx = g * scale_
        return gx, ggamma, gbeta

    return make_op("batch_norm", out, (x, gamma, beta), bw)


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Max pooling over non-overlapping windows (stride == kernel).

    Trailing rows/columns that do not fill a window are dropped. Gradient
    goes to the first maximal element of each window.
    """
    stride = stride or kernel
    if stride != kernel:
        raise ConfigError("max_pool2d supports only stride == kernel")
    n, c, h, w = x.shape
    oh, ow = h // kernel, w // kernel
    if oh <= 0 or ow <= 0:
        raise DimensionError(f"max_pool2d: window {kernel} larger than input {h}x{w}")
    xd = x.data[:, :, :oh * kernel, :ow * kernel]
    win = xd.reshape(n, c, oh, kernel, ow, kernel).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, oh, ow, kernel * kernel)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((n, c, oh, ow, kernel * kernel), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, oh, ow, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        gx[:, :, :oh * kernel, :ow * kernel] = gw.reshape(n, c, oh * kernel, ow * kernel)
        return (gx,)

    return make_op("max_pool2d", np.ascontiguousarray(out), (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    inv = x.dtype.type(1.0 / (h * w))
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], (n, c, h, w)).copy(),)

    return make_op("global_avg_pool", out, (x,), bw)


# -- modules -------------------------------------------------------------

def Parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Container that discovers parameters, buffers and children by attribute."""

    training = True
    _buffer_names: tuple[str, ...] = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, x):
        raise NotImplementedError

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for key in self._buffer_names:
            yield prefix + key, getattr(self, key)
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def _he_normal(rng: Rng, shape, fan_in: int) -> np.ndarray:
    return rng.normal(shape, std=math.sqrt(2.0 / fan_in), dtype=get_default_dtype())


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 0, bias: bool = True, rng: Rng | None = None):
        rng = rng or Rng(0)
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(_he_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(out_ch, dtype=get_default_dtype())) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: Rng | None = None):
        rng = rng or Rng(0)
        self.weight = Parameter(_he_normal(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features, dtype=get_default_dtype())) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class BatchNorm(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        dt = get_default_dtype()
        self.gamma = Parameter(np.ones(channels, dtype=dt))
        self.beta = Parameter(np.zeros(channels, dtype=dt))
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)


class ReLU(Module):
    def forward(self, x):
        return x.relu()


class MaxPool2d(Module):
    def __init__(self, kernel: int):
        self.kernel = kernel

    def forward(self, x):
        return max_pool2d(x, self.kernel)


class GlobalAvgPool(Module):
    def forward(self, x):
        return global_avg_pool(x)


class Flatten(Module):
    def forward(self, x):
        return x.reshape(x.shape[0], -1)


class Sequential(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)


# -- block specs ---------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: int | None = None
    kernel: int = 3
    stride: int = 1
    padding: int | None = None
    bn: bool = True
    activation: str | None = "relu"

    def __str__(self):
        if self.kind == "conv":
            s = f"conv:{self.channels}"
            if self.kernel != 3:
                s += f":k{self.kernel}"
            if self.stride != 1:
                s += f":s{self.stride}"
            if self.padding is not None and self.padding != self.kernel // 2:
                s += f":p{self.padding}"
            if not self.bn:
                s += ":nobn"
            if self.activation is None:
                s += ":noact"
            return s
        if self.kind == "maxpool":
            return f"maxpool:{self.kernel}"
        if self.kind == "linear" and self.channels is not None:
            return f"linear:{self.channels}"
        return self.kind


_KINDS = ("conv", "maxpool", "gap", "linear", "flatten", "relu")


@dataclass(frozen=True)
class BlockSpec:
    """Ordered layer descriptors, e.g. ``conv:16, maxpool:2, conv:32``.

    Grammar per token: ``conv:<ch>[:k<k>][:s<s>][:p<p>][:nobn][:noact]``,
    ``maxpool:<k>``, ``gap``, ``flatten``, ``relu``, ``linear[:<out>]``.
    A bare ``linear`` emits one output per class.
    """

    layers: tuple[LayerSpec, ...] = field(default_factory=tuple)

    @classmethod
    def parse(cls, text: str) -> "BlockSpec":
        layers = []
        for token in (t.strip() for t in text.split(",")):
            if not token:
                continue
            parts = token.split(":")
            kind = parts[0].lower()
            if kind not in _KINDS:
                raise ConfigError(f"unknown layer kind {kind!r} in block spec {text!r}")
            try:
                if kind == "conv":
                    kw = {"channels": int(parts[1])}
                    for opt in parts[2:]:
                        if opt == "nobn":
                            kw["bn"] = False
                        elif opt == "noact":
                            kw["activation"] = None
                        elif opt[0] in "ksp":
                            kw[{"k": "kernel", "s": "stride", "p": "padding"}[opt[0]]] = int(opt[1:])
                        else:
                            raise ValueError(opt)
                    layers.append(LayerSpec("conv", **kw))
                elif kind == "maxpool":
                    layers.append(LayerSpec("maxpool", kernel=int(parts[1]) if len(parts) > 1 else 2))
                elif kind == "linear":
                    layers.append(LayerSpec("linear", channels=int(parts[1]) if len(parts) > 1 else None))
                else:
                    layers.append(LayerSpec(kind))
            except (IndexError, ValueError) as exc:
                raise ConfigError(f"malformed layer token {token!r}") from exc
        return cls(tuple(layers))

    def __str__(self):
        return ",".join(str(layer) for layer in self.layers)


def build_block(spec: BlockSpec, in_shape: tuple[int, ...], num_classes: int,
                rng: Rng) -> tuple[Sequential, tuple[int, ...]]:
    """Instantiate ``spec`` for inputs of shape ``in_shape`` (without batch dim).

    Returns the module and its per-sample output shape. Raises ConfigError
    when any layer would produce a non-positive extent or receives input of
    the wrong rank.
    """
    shape = tuple(in_shape)
    mods: list[Module] = []
    for i, ls in enumerate(spec.layers):
        lrng = rng.child(i)
        if ls.kind == "conv":
            if len(shape) != 3:
                raise ConfigError(f"layer {i} ({ls}) needs C x H x W input, got {shape}")
            pad = ls.kernel // 2 if ls.padding is None else ls.padding
            c, h, w = shape
            oh = conv_output_size(h, ls.kernel, ls.stride, pad)
            ow = conv_output_size(w, ls.kernel, ls.stride, pad)
            mods.append(Conv2d(c, ls.channels, ls.kernel, ls.stride, pad, bias=not ls.bn, rng=lrng))
            if ls.bn:
                mods.append(BatchNorm(ls.channels))
            if ls.activation == "relu":
                mods.append(ReLU())
            shape = (ls.channels, oh, ow)
        elif ls.kind == "maxpool":
            if len(shape) != 3:
                raise ConfigError(f"layer {i} ({ls}) needs C x H x W input, got {shape}")
            mods.append(MaxPool2d(ls.kernel))
            shape = (shape[0], shape[1] // ls.kernel, shape[2] // ls.kernel)
        elif ls.kind == "gap":
            if len(shape) != 3:
                raise ConfigError(f"layer {i} (gap) needs C x H x W input, got {shape}")
            mods.append(GlobalAvgPool())
            shape = (shape[0],)
        elif ls.kind == "flatten":
            mods.append(Flatten())
            shape = (int(np.prod(shape)),)
        elif ls.kind == "relu":
            mods.append(ReLU())
        elif ls.kind == "linear":
            if len(shape) != 1:
                raise ConfigError(f"layer {i} (linear) needs flat input, got {shape}; add gap or flatten")
            out = ls.channels if ls.channels is not None else num_classes
            mods.append(Linear(shape[0], out, rng=lrng))
            shape = (out,)
        if any(s <= 0 for s in shape):
            raise ConfigError(f"layer {i} ({ls}) yields non-positive output shape {shape}")
    return Sequential(mods), shape


# -- cost accounting -----------------------------------------------------

def block_flops(spec: BlockSpec, in_shape: tuple[int, ...], num_classes: int) -> int:
    """Forward FLOPs per sample (multiply-add counted as 2) for ``spec``."""
    shape = tuple(in_shape)
    total = 0
    for ls in spec.layers:
        if ls.kind == "conv":
            c, h, w = shape
            pad = ls.kernel // 2 if ls.padding is None else ls.padding
            oh = conv_output_size(h, ls.kernel, ls.stride, pad)
            ow = conv_output_size(w, ls.kernel, ls.stride, pad)
            n_out = ls.channels * oh * ow
            total += 2 * c * ls.kernel * ls.kernel * n_out
            if ls.bn:
                total += 2 * n_out
            if ls.activation:
                total += n_out
            shape = (ls.channels, oh, ow)
        elif ls.kind == "maxpool":
            total += int(np.prod(shape))
            shape = (shape[0], shape[1] // ls.kernel, shape[2] // ls.kernel)
        elif ls.kind == "gap":
            total += int(np.prod(shape))
            shape = (shape[0],)
        elif ls.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif ls.kind == "relu":
            total += int(np.prod(shape))
        elif ls.kind == "linear":
            out = ls.channels if ls.channels is not None else num_classes
            total += 2 * shape[0] * out + out
            shape = (out,)
    return total
