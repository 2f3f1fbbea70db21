"""Convolution, transposed convolution, batch norm, pooling and SE blocks.

Parameter containers subclass :class:`Module` so that a network can walk
them by name for optimisation and checkpointing. The functional forms
(:func:`conv2d`, :func:`batchnorm`, ...) take the container explicitly.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _make, mul, reduce_mean, relu, reshape, sigmoid

__all__ = [
    "Module",
    "ConvParams",
    "BatchNormParams",
    "SEParams",
    "conv2d",
    "transposed_conv2d",
    "batchnorm",
    "max_pool2d",
    "se_block",
    "relu",
    "sigmoid",
]


class Module:
    """Minimal parameter container.

    Attributes that are tensors with ``requires_grad`` are parameters;
    tensors without it are buffers. Child modules and lists of modules are
    walked in attribute insertion order, which fixes checkpoint ordering.
    """

    training: bool = True

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Module, Tensor)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Tensor)):
                        yield f"{name}.{i}", item

    def named_tensors(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_tensors(full + ".")
            else:
                yield full, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, t in self.named_tensors(prefix):
            if t.requires_grad:
                yield name, t

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, t in self.named_tensors(prefix):
            if not t.requires_grad:
                yield name, t

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def he_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ConvParams(Module):
    """Weights for a square-kernel convolution.

    For :func:`conv2d` the weight is ``[out_ch, in_ch, k, k]``. For
    :func:`transposed_conv2d` it is ``[in_ch, out_ch, k, k]``, i.e. the
    weight of the forward convolution whose adjoint it computes.
    """

    def __init__(self, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0,
                 transposed: bool = False):
        if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
            raise ShapeError(f"conv weight must be [a, b, k, k], got {weight.shape}")
        out_ch = weight.shape[1] if transposed else weight.shape[0]
        if bias.shape != (out_ch,):
            raise ShapeError(f"bias shape {bias.shape} does not match {out_ch} output channels")
        if stride < 1 or padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        self.weight = weight
        self.bias = bias
        self.stride = int(stride)
        self.padding = int(padding)
        self.transposed = transposed

    @classmethod
    def init(cls, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, stride: int = 1,
             padding: Optional[int] = None, transposed: bool = False) -> "ConvParams":
        shape = (in_ch, out_ch, k, k) if transposed else (out_ch, in_ch, k, k)
        w = he_uniform(shape, in_ch * k * k, rng)
        pad = (k // 2) if padding is None else padding
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(out_ch), requires_grad=True),
                   stride=stride, padding=pad, transposed=transposed)

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def __call__(self, x: Tensor) -> Tensor:
        return transposed_conv2d(x, self) if self.transposed else conv2d(x, self)


def _conv_out(size: int, k: int, pad: int, stride: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(f"extent {size} with kernel {k}, pad {pad}, stride {stride} "
                         "gives a non-integral output extent")
    return span // stride + 1


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """``[N, C, Hp, Wp]`` -> contiguous ``[C*k*k, N*Ho*Wo]`` patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo))
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + s * ho:s, j:j + s * wo:s]
    return cols.reshape(c * k * k, n * ho * wo)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """2-D cross-correlation of ``x`` [N,Ci,H,W] with ``p.weight`` [Co,Ci,k,k]."""
    w, b = p.weight, p.bias
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-D input, got {x.shape}")
    co, ci, k, _ = w.shape
    if x.shape[1] != ci:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {ci}")
    n, _, h, wd = x.shape
    s, pad = p.stride, p.padding
    ho, wo = _conv_out(h, k, pad, s), _conv_out(wd, k, pad, s)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, s, ho, wo)
    wmat = w.data.reshape(co, ci * k * k)
    out = (wmat @ cols).reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out) + b.data[None, :, None, None]

    def bw(g):
        gx = gw = gb = None
        if b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        gc = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, -1)
        if w.requires_grad:
            gw = (gc @ cols.T).reshape(co, ci, k, k)
        if x.requires_grad:
            if s == 1 and pad <= k - 1:
                # stride 1: correlate the padded output grad with the flipped kernel
                q = k - 1 - pad
                gp = np.pad(g, ((0, 0), (0, 0), (q, q), (q, q))) if q else g
                wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(ci, co * k * k)
                gx = (wflip @ _im2col(gp, k, 1, h, wd)).reshape(ci, n, h, wd).transpose(1, 0, 2, 3)
                gx = np.ascontiguousarray(gx)
            else:
                dcols = (wmat.T @ gc).reshape(ci, k, k, n, ho, wo)
                gxp = np.zeros((ci, n) + xp.shape[2:])
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i, j]
                gxp = gxp.transpose(1, 0, 2, 3)
                gx = np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd])
        return gx, gw, gb

    return _make(out, (x, w, b), bw, "conv2d")


def transposed_conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Stride-2 transposed convolution that exactly doubles spatial extents.

    Equivalent to the adjoint of a stride-2, 3x3 convolution whose input is
    padded by one row/column at the top/left only (PyTorch's padding=1,
    output_padding=1). ``p.weight`` is ``[Ci, Co, 3, 3]``.
    """
    w, b = p.weight, p.bias
    if x.ndim != 4:
        raise ShapeError(f"transposed_conv2d expects a 4-D input, got {x.shape}")
    ci, co, k, _ = w.shape
    if x.shape[1] != ci:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {ci}")
    if p.stride != 2 or k != 3 or p.padding != 1:
        raise ShapeError("transposed_conv2d supports stride 2, 3x3 kernel, padding 1 only")
    n, _, h, wd = x.shape
    s = 2
    full_h, full_w = s * h + 1, s * wd + 1

    contrib = np.tensordot(x.data, w.data, axes=([1], [0]))  # N,H,W,Co,k,k
    full = np.zeros((n, co, full_h, full_w))
    for i in range(k):
        for j in range(k):
            full[:, :, i:i + s * h:s, j:j + s * wd:s] += contrib[..., i, j].transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(full[:, :, 1:, 1:]) + b.data[None, :, None, None]
    xdat, wdat = x.data, w.data

    def bw(g):
        gx = gw = gb = None
        if b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        gfull = np.pad(g, ((0, 0), (0, 0), (1, 0), (1, 0)))
        # patches: [N, Co, H, W, k, k]
        patches = sliding_window_view(gfull, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        if w.requires_grad:
            gw = np.tensordot(xdat, patches, axes=([0, 2, 3], [0, 2, 3]))  # Ci,Co,k,k
        if x.requires_grad:
            gx = np.tensordot(patches, wdat, axes=([1, 4, 5], [1, 2, 3]))  # N,H,W,Ci
            gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        return gx, gw, gb

    return _make(out, (x, w, b), bw, "transposed_conv2d")


class BatchNormParams(Module):
    """Per-channel affine normalisation with running statistics."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))
        self.momentum = momentum
        self.eps = eps

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm(x, self, "train" if self.training else "eval")


def batchnorm(x: Tensor, p: BatchNormParams, mode: str = "train") -> Tensor:
    """Batch normalisation over N, H, W for each channel.

    In ``"train"`` mode the batch statistics normalise ``x`` and the running
    estimates are updated in place (unbiased variance, exponential moving
    average). ``"eval"`` mode uses the running estimates.
    """
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"batchnorm over {p.channels} channels got input {x.shape}")
    gamma, beta = p.gamma, p.beta
    bshape = (1, -1, 1, 1)
    if mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count == 1:
            raise ValueError("batchnorm in train mode needs more than one value per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = p.momentum
        p.running_mean.data = (1 - m) * p.running_mean.data + m * mean
        p.running_var.data = (1 - m) * p.running_var.data + m * var * count / (count - 1)
    elif mode == "eval":
        count = None
        mean = p.running_mean.data
        var = p.running_var.data
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    gdat = gamma.data

    def bw(g):
        gb = g.sum(axis=(0, 2, 3))
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gdat.reshape(bshape)
        if count is None:
            gx = gxhat * inv_std.reshape(bshape)
        else:
            gx = (inv_std.reshape(bshape) / count) * (
                count * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw, "batchnorm")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size`` x ``size`` max pooling."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"spatial extents {h}x{w} not divisible by pool size {size}")
    blocks = x.data.reshape(n, c, h // size, size, w // size, size).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // size, w // size, size * size)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros((n, c, h // size, w // size, size * size))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // size, w // size, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return _make(np.ascontiguousarray(out), (x,), bw, "max_pool2d")


class SEParams(Module):
    """Squeeze-and-excitation weights: ``reduce`` is [C/r, C], ``expand`` is [C, C/r]."""

    def __init__(self, reduce_weight: Tensor, expand_weight: Tensor, reduction: int):
        hidden, ch = reduce_weight.shape
        if expand_weight.shape != (ch, hidden):
            raise ShapeError(f"expand weight {expand_weight.shape} != ({ch}, {hidden})")
        self.reduce_weight = reduce_weight
        self.expand_weight = expand_weight
        self.reduction = reduction

    @classmethod
    def init(cls, channels: int, reduction: int, rng: np.random.Generator) -> "SEParams":
        # ch // r floored at 1 so narrow layers still get a gate
        hidden = max(1, channels // reduction)
        rw = he_uniform((hidden, channels), channels, rng)
        ew = he_uniform((channels, hidden), hidden, rng)
        return cls(Tensor(rw, requires_grad=True), Tensor(ew, requires_grad=True), reduction)

    @property
    def channels(self) -> int:
        return self.reduce_weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return se_block(x, self)


def _linear(x: Tensor, w: Tensor) -> Tensor:
    """``x`` [N, In] times ``w.T`` with ``w`` [Out, In]."""
    xd, wd = x.data, w.data

    def bw(g):
        return g @ wd, g.T @ xd

    return _make(xd @ wd.T, (x, w), bw, "linear")


def se_block(x: Tensor, p: SEParams) -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"SE block for {p.channels} channels got input {x.shape}")
    n, c = x.shape[:2]
    squeezed = reshape(reduce_mean(x, axes=(2, 3)), (n, c))
    hidden = relu(_linear(squeezed, p.reduce_weight))
    gate = sigmoid(_linear(hidden, p.expand_weight))
    return mul(x, reshape(gate, (n, c, 1, 1)))
