"""Learnable layers: conv2d, transposed conv2d, batch norm, fully connected.

Convolution is cross-correlation (no kernel flip) computed as one matrix product over an
im2col matrix, which is kept for the weight gradient. The transposed convolution is implemented as the exact
adjoint of :func:`conv2d`, reusing the same scatter (col2im) routine that
computes the input gradient of the forward convolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, ConfigurationError, ShapeError
from .tensor import Tensor, _op, derive_seed, uniform

TRAIN, EVAL = "train", "eval"


# ---------------------------------------------------------------- kernels


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> read-only view (B, C, Ho, Wo, kh, kw)."""
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _conv_forward(x, w, stride, padding):
    """Returns the output (B, O, Ho, Wo) and the im2col matrix (B*Ho*Wo, C*kh*kw)."""
    O, C, kh, kw = w.shape
    win = _windows(_pad(x, padding), kh, kw, stride)
    B, _, Ho, Wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    out = (cols @ w.reshape(O, -1).T).reshape(B, Ho, Wo, O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cols


def _conv_input_grad(g, w, stride, padding, in_hw):
    """Scatter ``g`` (B, O, Ho, Wo) back through weight (O, C, kh, kw) onto (B, C, H, W)."""
    B, _, Ho, Wo = g.shape
    _, C, kh, kw = w.shape
    H, W = in_hw
    cols = np.tensordot(g, w, axes=([1], [0]))  # (B, Ho, Wo, C, kh, kw)
    dxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=g.dtype)
    hspan = stride * (Ho - 1) + 1
    wspan = stride * (Wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + hspan:stride, j:j + wspan:stride] += cols[..., i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, padding:padding + H, padding:padding + W]


def _conv_weight_grad(cols, g, w_shape):
    # cols (B*Ho*Wo, C*kh*kw), g (B, O, Ho, Wo) -> (O, C, kh, kw)
    gm = g.transpose(0, 2, 3, 1).reshape(-1, g.shape[1])
    return (gm.T @ cols).reshape(w_shape)


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv_transpose_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n - 1) * stride - 2 * padding + k


# ---------------------------------------------------------------- parameter sets


@dataclass
class Conv2dParams:
    weight: Tensor  # (out_ch, in_ch, kh, kw)
    bias: Optional[Tensor]  # (out_ch,); None when a batch norm follows
    stride: int = 1
    padding: int = 0

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> tuple:
        return self.weight.shape[2:]

    def output_hw(self, h: int, w: int) -> tuple:
        kh, kw = self.kernel
        return (conv_output_size(h, kh, self.stride, self.padding),
                conv_output_size(w, kw, self.stride, self.padding))

    def named_parameters(self) -> dict:
        if self.bias is None:
            return {"weight": self.weight}
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class ConvT2dParams:
    weight: Tensor  # (in_ch, out_ch, kh, kw)
    bias: Optional[Tensor]  # (out_ch,); None when a batch norm follows
    stride: int = 1
    padding: int = 0

    @property
    def in_ch(self) -> int:
        return self.weight.shape[0]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> tuple:
        return self.weight.shape[2:]

    def output_hw(self, h: int, w: int) -> tuple:
        kh, kw = self.kernel
        return (conv_transpose_output_size(h, kh, self.stride, self.padding),
                conv_transpose_output_size(w, kw, self.stride, self.padding))

    def named_parameters(self) -> dict:
        if self.bias is None:
            return {"weight": self.weight}
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class BatchNorm2dParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = TRAIN

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def named_parameters(self) -> dict:
        return {"gamma": self.gamma, "beta": self.beta}

    def named_buffers(self) -> dict:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


@dataclass
class LinearParams:
    weight: Tensor  # (out_features, in_features)
    bias: Tensor  # (out_features,)

    def named_parameters(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}


# ---------------------------------------------------------------- forward ops


def _check_input(x: Tensor, in_ch: int, weight: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected NCHW input, got shape {x.shape}")
    if x.shape[1] != in_ch:
        raise ShapeError(f"{name}: input has {x.shape[1]} channels, layer expects {in_ch}")
    if x.dtype != weight.dtype:
        raise ArgumentError(f"{name}: input dtype {x.dtype} != weight dtype {weight.dtype}")


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    _check_input(x, p.in_ch, p.weight, "conv2d")
    ho, wo = p.output_hw(x.shape[2], x.shape[3])
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape[2:]} too small for kernel {p.kernel}")
    w = p.weight.data
    s, pad = p.stride, p.padding
    in_hw = x.shape[2:]
    out, cols = _conv_forward(x.data, w, s, pad)
    if p.bias is None:
        return _op(out, (x, p.weight), lambda g: (_conv_input_grad(g, w, s, pad, in_hw),
                                                  _conv_weight_grad(cols, g, w.shape)))
    out += p.bias.data[None, :, None, None]

    def vjp(g):
        return (_conv_input_grad(g, w, s, pad, in_hw),
                _conv_weight_grad(cols, g, w.shape),
                g.sum(axis=(0, 2, 3)))

    return _op(out, (x, p.weight, p.bias), vjp)


def conv_transpose2d(x: Tensor, p: ConvT2dParams) -> Tensor:
    _check_input(x, p.in_ch, p.weight, "conv_transpose2d")
    ho, wo = p.output_hw(x.shape[2], x.shape[3])
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: output extent {(ho, wo)} is empty")
    w, xd = p.weight.data, x.data
    s, pad = p.stride, p.padding
    out = _conv_input_grad(xd, w, s, pad, (ho, wo))
    if p.bias is not None:
        out = out + p.bias.data[None, :, None, None]

    def vjp(g):
        # adjoint of the scatter: convolve g with the same weight; weight grad pairs x with g's windows
        gx, cols = _conv_forward(g, w, s, pad)
        gw = _conv_weight_grad(cols, xd, w.shape)
        return (gx, gw) if p.bias is None else (gx, gw, g.sum(axis=(0, 2, 3)))

    parents = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)
    return _op(np.ascontiguousarray(out), parents, vjp)


def batchnorm2d(x: Tensor, p: BatchNorm2dParams, mode: str | None = None) -> Tensor:
    """Per-channel normalization over (batch, h, w).

    Train mode uses batch statistics and updates the running estimates in
    place (unbiased variance, torch-style momentum); eval mode only reads them.
    """
    mode = mode or p.mode
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"batchnorm2d: input {x.shape} does not match {p.channels} channels")
    xd = x.data
    dt = xd.dtype
    gamma = p.gamma.data[None, :, None, None]
    beta = p.beta.data[None, :, None, None]
    eps = dt.type(p.eps)

    if mode == EVAL:
        inv = 1.0 / np.sqrt(p.running_var.data + eps)
        xhat = (xd - p.running_mean.data[None, :, None, None]) * inv[None, :, None, None]

        def vjp_eval(g):
            return (g * gamma * inv[None, :, None, None],
                    (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return _op(gamma * xhat + beta, (x, p.gamma, p.beta), vjp_eval)

    if mode != TRAIN:
        raise ArgumentError(f"unknown batchnorm mode {mode!r}")
    n = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if n < 2:
        raise ArgumentError("batchnorm2d in train mode needs at least 2 values per channel")
    mu = xd.mean(axis=(0, 2, 3))
    var = xd.var(axis=(0, 2, 3))
    inv = (1.0 / np.sqrt(var + eps))[None, :, None, None]
    xhat = (xd - mu[None, :, None, None]) * inv

    m = dt.type(p.momentum)
    p.running_mean = Tensor._wrap((1 - m) * p.running_mean.data + m * mu)
    p.running_var = Tensor._wrap((1 - m) * p.running_var.data + m * var * dt.type(n / (n - 1)))

    def vjp_train(g):
        gb = g.sum(axis=(0, 2, 3))
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gx = (gamma * inv / n) * (n * g - gb[None, :, None, None] - xhat * gg[None, :, None, None])
        return gx, gg, gb

    return _op(gamma * xhat + beta, (x, p.gamma, p.beta), vjp_train)


def linear(x: Tensor, p: LinearParams) -> Tensor:
    w, b = p.weight.data, p.bias.data
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if x.dtype != w.dtype:
        raise ArgumentError("linear: input and weight dtypes differ")
    xd = x.data
    return _op(xd @ w.T + b, (x, p.weight, p.bias), lambda g: (g @ w, g.T @ xd, g.sum(axis=0)))


# ---------------------------------------------------------------- initialization


def _fan_in_uniform(shape, fan_in, seed, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    w = uniform(shape, -bound, bound, seed, dtype)
    w.requires_grad = True
    return w


def _zeros_param(n, dtype):
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)


def init_params(kind: str, in_ch: int, out_ch: int, kernel: int = 1, stride: int = 1,
                padding: int = 0, seed: int = 0, dtype=np.float32, bias: bool = True, **bn_options):
    """Fresh parameters for one layer.

    Weights are uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)) with
    fan_in = in_ch * kernel**2 (in_features for ``linear``); biases are zero.
    ``kind`` is one of ``conv2d``, ``conv_transpose2d``, ``linear``, ``batchnorm2d``
    (the latter uses ``in_ch`` as its channel count). ``bias=False`` builds a
    (transposed) convolution without bias, for a convolution that feeds a batch norm.
    """
    if kind == "conv2d":
        w = _fan_in_uniform((out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, seed, dtype)
        return Conv2dParams(w, _zeros_param(out_ch, dtype) if bias else None, stride, padding)
    if kind == "conv_transpose2d":
        w = _fan_in_uniform((in_ch, out_ch, kernel, kernel), in_ch * kernel * kernel, seed, dtype)
        return ConvT2dParams(w, _zeros_param(out_ch, dtype) if bias else None, stride, padding)
    if kind == "linear":
        w = _fan_in_uniform((out_ch, in_ch), in_ch, seed, dtype)
        return LinearParams(w, _zeros_param(out_ch, dtype))
    if kind == "batchnorm2d":
        return BatchNorm2dParams(
            gamma=Tensor(np.ones(in_ch, dtype=dtype), requires_grad=True),
            beta=_zeros_param(in_ch, dtype),
            running_mean=Tensor(np.zeros(in_ch, dtype=dtype)),
            running_var=Tensor(np.ones(in_ch, dtype=dtype)),
            **bn_options,
        )
    raise ConfigurationError(f"unknown layer kind {kind!r}")


def child_seed(seed: int, index: int) -> int:
    """Seed for the ``index``-th layer built from a common model seed."""
    return derive_seed(seed, index)
