"""Dense NCHW kernels: convolution, batch norm, pooling, resampling, affine maps.

Tensors are plain ``numpy`` arrays of rank 4 laid out as (batch, channels,
height, width).  Every forward kernel has a matching ``*_backward`` that maps
an output gradient to input/parameter gradients, so the graph engine can stay
free of numerical code.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "ConvSpec",
    "as_tensor",
    "conv_output_size",
    "conv2d",
    "conv2d_backward",
    "batch_norm",
    "batch_norm_backward",
    "relu",
    "relu_backward",
    "pool",
    "pool_backward",
    "scaled_size",
    "fractional_subsample",
    "resize_bilinear",
    "resize_bilinear_backward",
    "resize_matrix",
    "linear",
    "linear_backward",
]


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an operation."""


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D convolution.

    ``kernel`` is (out_ch, in_ch, kH, kW).
    """

    kernel: tuple[int, int, int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        object.__setattr__(self, "dilation", _pair(self.dilation))
        if len(self.kernel) != 4 or min(self.kernel) < 1:
            raise ShapeError(f"kernel must be 4 positive ints, got {self.kernel}")
        if min(self.stride) < 1 or min(self.dilation) < 1 or min(self.padding) < 0:
            raise ShapeError(
                f"invalid stride/padding/dilation {self.stride}/{self.padding}/{self.dilation}"
            )

    @classmethod
    def square(cls, out_ch, in_ch, k, stride=1, padding=0, dilation=1) -> "ConvSpec":
        return cls((out_ch, in_ch, k, k), _pair(stride), _pair(padding), _pair(dilation))

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = conv_output_size(h, self.kernel[2], self.stride[0], self.padding[0], self.dilation[0])
        ow = conv_output_size(w, self.kernel[3], self.stride[1], self.padding[1], self.dilation[1])
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"non-positive conv output {oh}x{ow} for input {h}x{w} and kernel {self.kernel}"
            )
        return oh, ow


def conv_output_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def as_tensor(x, dtype=None) -> np.ndarray:
    """Validate and return ``x`` as a rank-4 array with all dims >= 1."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected rank-4 NCHW tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"all tensor dimensions must be >= 1, got {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp, kh, kw, oh, ow, stride, dilation):
    n, c = xp.shape[:2]
    sh, sw = stride
    dh, dw = dilation
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        hi = i * dh
        for j in range(kw):
            wj = j * dw
            cols[:, :, i, j] = xp[:, :, hi:hi + sh * (oh - 1) + 1:sh, wj:wj + sw * (ow - 1) + 1:sw]
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d(x, spec: ConvSpec, weight, bias=None, *, return_cols=False):
    """Cross-correlation of ``x`` with ``weight`` (PyTorch convention)."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got {x.shape}")
    if tuple(weight.shape) != spec.kernel:
        raise ShapeError(f"weight shape {tuple(weight.shape)} does not match spec kernel {spec.kernel}")
    o, c, kh, kw = spec.kernel
    if x.shape[1] != c:
        raise ShapeError(f"input shape {x.shape} has {x.shape[1]} channels, kernel {spec.kernel} expects {c}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} does not match {o} output channels")
    n, _, h, w = x.shape
    oh, ow = spec.output_hw(h, w)
    if kh == kw == 1 and spec.stride == (1, 1) and spec.padding == (0, 0):
        cols = x.reshape(n, c, h * w)
    else:
        ph, pw = spec.padding
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
        cols = _im2col(xp, kh, kw, oh, ow, spec.stride, spec.dilation)
    y = np.matmul(weight.reshape(o, -1), cols)
    if bias is not None:
        y += bias[:, None]
    y = y.reshape(n, o, oh, ow)
    if return_cols:
        return y, cols
    return y


def conv2d_backward(grad_out, x_shape, spec: ConvSpec, weight, cols, has_bias=True):
    """Return (grad_input, grad_weight, grad_bias) for :func:`conv2d`.

    ``cols`` is the column matrix saved by the forward pass.
    """
    o, c, kh, kw = spec.kernel
    n, _, h, w = x_shape
    oh, ow = grad_out.shape[2:]
    g = grad_out.reshape(n, o, oh * ow)
    gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(spec.kernel)
    gb = g.sum(axis=(0, 2)) if has_bias else None
    dcols = np.matmul(weight.reshape(o, -1).T, g)
    if kh == kw == 1 and spec.stride == (1, 1) and spec.padding == (0, 0):
        return dcols.reshape(n, c, h, w), gw, gb
    ph, pw = spec.padding
    sh, sw = spec.stride
    dh, dw = spec.dilation
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=grad_out.dtype)
    dcols = dcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        hi = i * dh
        for j in range(kw):
            wj = j * dw
            dxp[:, :, hi:hi + sh * (oh - 1) + 1:sh, wj:wj + sw * (ow - 1) + 1:sw] += dcols[:, :, i, j]
    return dxp[:, :, ph:ph + h, pw:pw + w], gw, gb


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm(x, gamma, beta, eps=1e-5, mode="train", running_stats=None, momentum=0.1):
    """Per-channel normalization over (N, H, W).

    ``running_stats`` is a dict with ``mean`` and ``var`` arrays; in train mode
    it is updated in place by an exponential moving average.  Returns
    ``(y, saved)`` where ``saved`` feeds :func:`batch_norm_backward`.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    if eps <= 0:
        raise ValueError("eps must be positive")
    n, _, h, w = x.shape
    if mode == "train":
        m = n * h * w
        if m == 1:
            raise ShapeError("batch_norm in train mode needs more than one value per channel")
        x3 = x.reshape(n, c, h * w)
        mean = x3.sum(axis=2).sum(axis=0) / m
        xc = x - mean[None, :, None, None]
        var = np.square(xc).reshape(n, c, h * w).sum(axis=2).sum(axis=0) / m
        if running_stats is not None:
            running_stats["mean"] = (1 - momentum) * running_stats["mean"] + momentum * mean
            unbiased = var * (m / (m - 1))
            running_stats["var"] = (1 - momentum) * running_stats["var"] + momentum * unbiased
    elif mode == "eval":
        if running_stats is None:
            raise ValueError("eval-mode batch_norm requires running_stats")
        mean = running_stats["mean"].astype(x.dtype)
        var = running_stats["var"].astype(x.dtype)
        xc = x - mean[None, :, None, None]
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv[None, :, None, None]
    y = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return y, (xhat, inv, mode)


def batch_norm_backward(grad_out, gamma, saved):
    """Return (grad_input, grad_gamma, grad_beta)."""
    xhat, inv, mode = saved
    n, c, h, w = grad_out.shape
    gbeta = grad_out.reshape(n, c, h * w).sum(axis=2).sum(axis=0)
    ggamma = (grad_out * xhat).reshape(n, c, h * w).sum(axis=2).sum(axis=0)
    scale = (gamma * inv)[None, :, None, None]
    if mode == "eval":
        return grad_out * scale, ggamma, gbeta
    # d/dx of gamma * xhat, using sum(g) = gbeta and sum(g * xhat) = ggamma
    m = n * h * w
    gx = (grad_out - (gbeta / m)[None, :, None, None] - xhat * (ggamma / m)[None, :, None, None]) * scale
    return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# activation


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    # subgradient at 0 is 0
    return grad_out * (x > 0)


# ---------------------------------------------------------------------------
# pooling


def pool(x, kind="max", window=(2, 2), stride=None, padding=(0, 0), *, return_index=False):
    """Max or average pooling.  Average pooling counts padded cells as zeros."""
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    ph, pw = _pair(padding)
    if kh < 1 or kw < 1:
        raise ShapeError("empty pooling window")
    n, c, h, w = x.shape
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(f"pool window {kh}x{kw} exceeds padded input {h + 2 * ph}x{w + 2 * pw}")
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if kind == "max":
        fill = -np.inf
    elif kind == "avg":
        fill = 0.0
    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=fill) if ph or pw else x
    out = None
    idx = None
    for i in range(kh):
        for j in range(kw):
            s = xp[:, :, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw]
            if out is None:
                out = s.copy()
                if kind == "max":
                    idx = np.zeros(out.shape, dtype=np.int32)
            elif kind == "max":
                better = s > out
                out = np.where(better, s, out)
                idx[better] = i * kw + j
            else:
                out += s
    if kind == "avg":
        out /= kh * kw
    if return_index:
        return out, idx
    return out


def pool_backward(grad_out, x_shape, kind, window, stride, padding, index=None):
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    ph, pw = _pair(padding)
    n, c, h, w = x_shape
    oh, ow = grad_out.shape[2:]
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            if kind == "max":
                g = grad_out * (index == i * kw + j)
            else:
                g = grad_out / (kh * kw)
            dxp[:, :, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw] += g
    return dxp[:, :, ph:ph + h, pw:pw + w]


# ---------------------------------------------------------------------------
# resampling
#
# Sample positions are pixel centers: src = (dst + 0.5) * in / out - 0.5,
# clamped to [0, in - 1].  Up- and down-sampling share this rule.


@functools.lru_cache(maxsize=512)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) float64 matrix of 1-D bilinear interpolation weights."""
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"resize sizes must be >= 1, got {n_in}->{n_out}")
    m = np.zeros((n_out, n_in))
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
    else:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        rows = np.arange(n_out)
        np.add.at(m, (rows, lo), 1 - frac)
        np.add.at(m, (rows, hi), frac)
    m.setflags(write=False)
    return m


def _resize_mats(h, w, oh, ow, dtype):
    return resize_matrix(h, oh).astype(dtype, copy=False), resize_matrix(w, ow).astype(dtype, copy=False)


def resize_bilinear(x, out_h: int, out_w: int):
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be >= 1, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    rh, rw = _resize_mats(h, w, out_h, out_w, x.dtype)
    return np.matmul(np.matmul(rh, x), rw.T)


def resize_bilinear_backward(grad_out, in_h: int, in_w: int):
    oh, ow = grad_out.shape[2:]
    if (oh, ow) == (in_h, in_w):
        return grad_out
    rh, rw = _resize_mats(in_h, in_w, oh, ow, grad_out.dtype)
    return np.matmul(np.matmul(rh.T, grad_out), rw)


def scaled_size(size: int, ratio: float) -> int:
    """round-half-up of ratio * size, floored at 1."""
    return max(1, int(np.floor(ratio * size + 0.5)))


def fractional_subsample(x, ratio: float):
    """Deterministic bilinear downsampling to ``scaled_size`` per axis."""
    if not 0 < ratio <= 1:
        raise ValueError(f"subsample ratio must be in (0, 1], got {ratio}")
    h, w = x.shape[2:]
    return resize_bilinear(x, scaled_size(h, ratio), scaled_size(w, ratio))


# ---------------------------------------------------------------------------
# fully connected


def linear(x, weight, bias=None):
    """``x @ weight + bias`` for ``x`` of shape (N, in) and weight (in, out)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear inner dimension mismatch: input {x.shape}, weight {weight.shape}")
    y = x @ weight
    if bias is not None:
        y = y + bias
    return y


def linear_backward(grad_out, x, weight):
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)
