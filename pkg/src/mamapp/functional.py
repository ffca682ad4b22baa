"""Fused primitive layer ops with hand-written backward rules.

Layouts follow the usual channel-first image convention ``[B, C, H, W]`` and
channel-last token convention ``[B, N, C]``.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .tensor import DimensionError, Tensor, make_op

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# --------------------------------------------------------------------- conv2d
def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over ``[B, Cin, H, W]`` with a ``[Cout, Cin, kh, kw]`` kernel."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be [B,C,H,W], got {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be [Cout,Cin,kh,kw], got {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if Cw != C:
        raise DimensionError(f"conv2d channel axis mismatch: input axis 1 = {C}, weight axis 1 = {Cw}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {Hp}x{Wp} (axes 2,3)")
    if bias is not None and bias.shape != (O,):
        raise DimensionError(f"conv2d bias must be [{O}], got {bias.shape}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # [B, C, Ho, Wo, kh, kw] -> [B, C*kh*kw, Ho*Wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * kh * kw, Ho * Wo)
    wmat = weight.data.reshape(O, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(B, O, Ho, Wo)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.reshape(B, O, Ho * Wo)
        gw = np.einsum("bol,bkl->ok", g2, cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2).reshape(B, C, kh, kw, Ho, Wo)
            gxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
            for p in range(kh):
                for q in range(kw):
                    gxp[:, :, p:p + stride * Ho:stride, q:q + stride * Wo:stride] += gcols[:, :, p, q]
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_op(out, parents, back, "conv2d")


# ----------------------------------------------------------------- batch norm
def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, training: bool, momentum: float = 0.1,
                 eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (B, H, W).

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, exponential moving average).
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm2d input must be [B,C,H,W], got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batch_norm2d affine params must be [{C}], got {gamma.shape}/{beta.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if training:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= (1.0 - momentum)
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mean = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def back(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        scale = (gamma.data * invstd)[None, :, None, None]
        if training:
            gx = scale / m * (m * g - gb[None, :, None, None] - xhat * gg[None, :, None, None])
        else:
            gx = g * scale
        return gx, gg, gb

    return make_op(out, (x, gamma, beta), back, "batch_norm2d")


# ----------------------------------------------------------------- layer norm
def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each position over the last axis only."""
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"layer_norm last axis is {C} but gain/shift are {gamma.shape}/{beta.shape}")
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True)
    xc = xd - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * invstd
    out = xhat * gamma.data + beta.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gxhat = g * gamma.data
        gx = invstd / C * (C * gxhat - gxhat.sum(axis=-1, keepdims=True)
                           - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_op(out, (x, gamma, beta), back, "layer_norm")


# ---------------------------------------------------------------- activations
def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF evaluated through erf."""
    a = x.data
    cdf = 0.5 * (1.0 + special.erf(a * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * a * a)
    return make_op(a * cdf, (x,), lambda g: (g * (cdf + a * pdf),), "gelu")


def sigmoid(x: Tensor) -> Tensor:
    s = special.expit(x.data)
    return make_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    a = x.data
    s = special.expit(a)
    return make_op(a * s, (x,), lambda g: (g * s * (1.0 + a * (1.0 - s)),), "silu")


def softplus(x: Tensor) -> Tensor:
    a = x.data
    out = np.logaddexp(np.zeros((), dtype=a.dtype), a)
    return make_op(out, (x,), lambda g: (g * special.expit(a),), "softplus")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    a = x.data
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    return make_op(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    a = x.data
    shifted = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (x,), back, "log_softmax")


# ---------------------------------------------------------------------- linear
def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ W.T + b`` applied independently at every leading position."""
    if weight.ndim != 2:
        raise DimensionError(f"linear weight must be [Dout,Din], got {weight.shape}")
    Dout, Din = weight.shape
    if x.shape[-1] != Din:
        raise DimensionError(f"linear input last axis is {x.shape[-1]}, weight expects Din={Din}")
    if bias is not None and bias.shape != (Dout,):
        raise DimensionError(f"linear bias must be [{Dout}], got {bias.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, Din)
    out = x2 @ weight.data.T
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (Dout,))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.reshape(-1, Dout)
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_op(out, parents, back, "linear")


# --------------------------------------------------------------- depthwise 1d
def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Causal per-channel 1-D convolution over ``[B, D, L]`` with ``[D, k]`` kernels.

    The input is left-padded with k-1 zeros so output position t only sees
    inputs at positions <= t.
    """
    if x.ndim != 3:
        raise DimensionError(f"depthwise_conv1d input must be [B,D,L], got {x.shape}")
    B, D, L = x.shape
    if weight.ndim != 2 or weight.shape[0] != D:
        raise DimensionError(f"depthwise_conv1d weight must be [{D},k], got {weight.shape}")
    k = weight.shape[1]
    if k < 1:
        raise ValueError("kernel size must be >= 1")
    w = weight.data
    xp = np.pad(x.data, ((0, 0), (0, 0), (k - 1, 0)))
    out = np.zeros((B, D, L), dtype=x.dtype)
    for j in range(k):
        out += w[None, :, j, None] * xp[:, :, j:j + L]
    if bias is not None:
        out += bias.data[None, :, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gw = np.empty_like(w)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gw[:, j] = (g * xp[:, :, j:j + L]).sum(axis=(0, 2))
            gxp[:, :, j:j + L] += g * w[None, :, j, None]
        gx = gxp[:, :, k - 1:]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return make_op(out, parents, back, "depthwise_conv1d")


# --------------------------------------------------------------- token layout
def flatten_transpose(x: Tensor) -> Tensor:
    """``[B, C, H, W]`` -> ``[B, H*W, C]`` with row-major token order."""
    if x.ndim != 4:
        raise DimensionError(f"flatten_transpose input must be [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    return x.reshape(B, C, H * W).transpose(0, 2, 1)


def unflatten_transpose(x: Tensor, height: int, width: int) -> Tensor:
    """Inverse of :func:`flatten_transpose`."""
    B, N, C = x.shape
    if N != height * width:
        raise DimensionError(f"token axis has {N} entries, cannot unflatten to {height}x{width}")
    return x.transpose(0, 2, 1).reshape(B, C, height, width)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the token axis of ``[B, N, C]``."""
    if x.ndim != 3:
        raise DimensionError(f"global_avg_pool input must be [B,N,C], got {x.shape}")
    if x.shape[1] < 1:
        raise DimensionError("global_avg_pool needs at least one token")
    return x.mean(axis=1)
