"""Differentiable layers: convolution, batch norm, pooling, linear, loss.

Each layer is a single graph node with a hand-written backward rule. Inputs
use the [N, C, H, W] layout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels as _k
from .tensor import Tensor, TensorError, make_op

__all__ = [
    "Conv2dParams", "BatchNormParams", "LinearParams", "conv2d", "batchnorm",
    "maxpool2", "global_avg_pool", "linear", "softmax_cross_entropy",
    "conv_out_extent", "kaiming_uniform",
]


def kaiming_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator,
                    dtype=np.float64) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


@dataclass
class Conv2dParams:
    weight: Tensor  # [F, C, kh, kw]
    bias: Tensor | None = None
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.weight.data.ndim != 4:
            raise TensorError("conv weight must be [F, C, kh, kw]")
        if self.stride < 1 or self.pad < 0:
            raise TensorError(f"bad stride/pad ({self.stride}, {self.pad})")

    @classmethod
    def init(cls, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
             stride: int = 1, pad: int = 0, bias: bool = False, dtype=np.float64):
        w = kaiming_uniform((c_out, c_in, kernel, kernel), c_in * kernel * kernel, rng, dtype)
        b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None
        return cls(w, b, stride, pad)

    def parameters(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    def __post_init__(self):
        if self.eps <= 0:
            raise TensorError("batchnorm eps must be positive")
        if np.any(self.running_var.data < 0):
            raise TensorError("running variance must be non-negative")

    @classmethod
    def init(cls, channels: int, dtype=np.float64, **kw):
        return cls(Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
                   Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
                   Tensor(np.zeros(channels, dtype=dtype)),
                   Tensor(np.ones(channels, dtype=dtype)), **kw)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


@dataclass
class LinearParams:
    weight: Tensor  # [out, in]
    bias: Tensor = field(default=None)

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64):
        return cls(kaiming_uniform((n_out, n_in), n_in, rng, dtype),
                   Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True))

    def parameters(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


def conv_out_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


# im2col blocks are sized to stay inside L2; larger GEMM operands thrash it
_COLS_BLOCK_BYTES = 1 << 19


def _windows(x: np.ndarray, kh: int, kw: int, s: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """Strided view (N, C, kh, kw, Ho, Wo) of the zero-padded input."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    return win.transpose(0, 1, 4, 5, 2, 3)


def _block_rows(ck: int, ho: int, wo: int, itemsize: int) -> int:
    return max(1, min(ho, _COLS_BLOCK_BYTES // (ck * wo * itemsize)))


def _scatter_cols(dxp: np.ndarray, dcols: np.ndarray, kh: int, kw: int, s: int,
                  r0: int, r1: int, wo: int) -> None:
    # adjoint of the window gather for output rows [r0, r1)
    lead = dxp.ndim - 3
    d = dcols.reshape(dcols.shape[:lead] + (-1, kh, kw, r1 - r0, wo))
    for i in range(kh):
        for j in range(kw):
            dxp[..., i + s * r0:i + s * (r1 - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += d[..., i, j, :, :]


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Zero-padded 2-D cross-correlation (no kernel flip)."""
    if x.data.ndim != 4:
        raise TensorError(f"conv2d expects [N,C,H,W], got {list(x.shape)}")
    n, c, h, w = x.shape
    f, cw, kh, kw = p.weight.shape
    if c != cw:
        raise TensorError(f"conv2d: input has {c} channels, weight expects {cw}")
    s, pad = p.stride, p.pad
    ho, wo = conv_out_extent(h, kh, s, pad), conv_out_extent(w, kw, s, pad)
    if ho < 1 or wo < 1:
        raise TensorError(f"conv2d: output extent {ho}x{wo} < 1 for input {h}x{w}")
    xd = x.data
    w2 = p.weight.data.reshape(f, -1)
    ck = w2.shape[1]
    pointwise = kh == 1 and kw == 1 and pad == 0
    win = cols = None
    rows = ho
    if pointwise:
        sub = xd if s == 1 else xd[:, :, ::s, ::s][:, :, :ho, :wo]
        cols = np.ascontiguousarray(sub).reshape(n, c, ho * wo)
        out = np.matmul(w2, cols)
    else:
        win = _windows(xd, kh, kw, s, pad, ho, wo)
        rows = _block_rows(ck, ho, wo, xd.itemsize)
        if rows >= ho:
            cols = win.reshape(n, ck, ho * wo)
            out = np.matmul(w2, cols)
        else:
            out = np.empty((n, f, ho * wo), dtype=np.result_type(xd, w2))
            for ni in range(n):
                for r0 in range(0, ho, rows):
                    r1 = min(ho, r0 + rows)
                    block = win[ni, :, :, :, r0:r1].reshape(ck, -1)
                    np.matmul(w2, block, out=out[ni, :, r0 * wo:r1 * wo])
    if p.bias is not None:
        out += p.bias.data[:, None]
    out = out.reshape(n, f, ho, wo)
    inputs = (x, p.weight) + ((p.bias,) if p.bias is not None else ())

    def bw(g):
        g2 = g.reshape(n, f, ho * wo)
        need_w, need_x = p.weight.requires_grad, x.requires_grad
        gw = gb = gx = None
        if p.bias is not None and p.bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if cols is not None:
            if need_w:
                gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            if need_x:
                dcols = np.matmul(w2.T, g2)
                if pointwise:
                    if s == 1:
                        gx = dcols.reshape(x.shape)
                    else:
                        gx = np.zeros(x.shape, dtype=dcols.dtype)
                        gx[:, :, ::s, ::s][:, :, :ho, :wo] = dcols.reshape(n, c, ho, wo)
                else:
                    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
                    _scatter_cols(dxp, dcols, kh, kw, s, 0, ho, wo)
                    gx = dxp[:, :, pad:pad + h, pad:pad + w]
        else:
            gw = np.zeros_like(w2) if need_w else None
            dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype) if need_x else None
            for ni in range(n):
                for r0 in range(0, ho, rows):
                    r1 = min(ho, r0 + rows)
                    gblk = g2[ni, :, r0 * wo:r1 * wo]
                    if need_w:
                        gw += gblk @ win[ni, :, :, :, r0:r1].reshape(ck, -1).T
                    if need_x:
                        _scatter_cols(dxp[ni], w2.T @ gblk, kh, kw, s, r0, r1, wo)
            if need_x:
                gx = dxp[:, :, pad:pad + h, pad:pad + w]
        if gw is not None:
            gw = gw.reshape(p.weight.shape)
        return (gx, gw, gb)[:len(inputs)]

    return make_op("conv2d", out, inputs, bw)


def batchnorm(x: Tensor, p: BatchNormParams, mode: str | None = None) -> Tensor:
    """Per-channel normalization; train mode also updates the running statistics."""
    mode = mode or p.mode
    if x.data.ndim != 4 or x.shape[1] != p.gamma.size:
        raise TensorError(f"batchnorm: input {list(x.shape)} vs {p.gamma.size} channels")
    xd = x.data
    n, c, h, w = xd.shape
    m = n * h * w
    if mode == "train":
        if m < 2:
            raise TensorError("batchnorm train mode needs at least 2 elements per channel")
        mean, var = _k.bn_stats(xd)
        inv = 1.0 / np.sqrt(var + p.eps)
        mom = p.momentum
        dt = p.running_mean.dtype
        # running variance tracks the unbiased estimate
        p.running_mean = Tensor(((1 - mom) * p.running_mean.data + mom * mean).astype(dt))
        p.running_var = Tensor(((1 - mom) * p.running_var.data
                                + mom * var * (m / (m - 1))).astype(dt))
    elif mode == "infer":
        mean = p.running_mean.data.astype(np.float64)
        inv = 1.0 / np.sqrt(p.running_var.data.astype(np.float64) + p.eps)
    else:
        raise TensorError(f"unknown batchnorm mode {mode!r}")
    gamma = p.gamma.data
    out = _k.bn_apply(xd, mean, inv, gamma, p.beta.data)
    train = mode == "train"

    def bw(g):
        gx, ggamma, gbeta = _k.bn_backward(xd, g, mean, inv, gamma, train)
        return (gx if x.requires_grad else None,
                ggamma.astype(gamma.dtype), gbeta.astype(gamma.dtype))

    return make_op("batchnorm", out, (x, p.gamma, p.beta), bw)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pool, stride 2; gradient goes to the first max in row-major order."""
    if x.data.ndim != 4:
        raise TensorError("maxpool2 expects [N,C,H,W]")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise TensorError(f"maxpool2 needs even extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(n, c, h, w),)

    return make_op("maxpool2", out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise TensorError("global_avg_pool expects [N,C,H,W]")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape),)

    return make_op("global_avg_pool", out, (x,), bw)


def linear(x: Tensor, p: LinearParams) -> Tensor:
    """x @ W.T + b for x of shape [N, in]."""
    if x.data.ndim != 2 or x.shape[1] != p.weight.shape[1]:
        raise TensorError(f"linear: input {list(x.shape)} vs weight {list(p.weight.shape)}")
    wd = p.weight.data
    out = x.data @ wd.T
    if p.bias is not None:
        out = out + p.bias.data
    inputs = (x, p.weight) + ((p.bias,) if p.bias is not None else ())

    def bw(g):
        grads = (g @ wd if x.requires_grad else None,
                 g.T @ x.data if p.weight.requires_grad else None,
                 g.sum(axis=0))
        return grads[:len(inputs)]

    return make_op("linear", out, inputs, bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-shift stabilised."""
    z = logits.data
    if z.ndim != 2 or z.shape[0] < 1:
        raise TensorError("softmax_cross_entropy expects [N, K] logits")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = z.shape
    if labels.size != n:
        raise TensorError(f"{labels.size} labels for {n} rows")
    if labels.min() < 0 or labels.max() >= k:
        raise TensorError(f"label out of range [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(n)
    loss = np.array([-logp[rows, labels].mean()], dtype=z.dtype)

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g[0] / n),)

    return make_op("softmax_cross_entropy", loss, (logits,), bw)
