"""Selective state-space scan and the VisionMamba block.

Shapes used throughout: ``x`` and ``delta`` are ``[B, L, D]`` (batch, tokens,
channels), the state matrix ``A`` is ``[D, N]``, the input-dependent
projections ``Bm`` and ``Cm`` are ``[B, L, N]`` and the skip term is ``[D]``.
Per channel the recurrence is

    h_t = exp(delta_t * A) * h_{t-1} + delta_t * Bm_t * x_t,   h_0 = 0
    y_t = <Cm_t, h_t> + skip * x_t
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np
from numba import njit

from . import functional as F
from .nn import DepthwiseConv1d, LayerNorm, Linear, Module, Parameter
from .tensor import DEFAULT_DTYPE, DimensionError, NumericError, Tensor, is_debug, make_op


# Kernels take the decay factors exp(delta * A) precomputed outside: numpy's
# vectorized exp is several times faster than a scalar call per element.
@njit(cache=True)
def _fill_log_decay(delta, A, out):
    nb, L, D = delta.shape
    N = A.shape[1]
    for b in range(nb):
        for t in range(L):
            for d in range(D):
                dt = delta[b, t, d]
                for n in range(N):
                    out[b, t, d, n] = dt * A[d, n]


@njit(cache=True)
def _scan_forward(x, delta, decay, Bm, Cm, skip, y):
    nb, L, D = x.shape
    N = Bm.shape[2]
    h = np.zeros((D, N), dtype=x.dtype)
    for b in range(nb):
        h[:, :] = 0.0
        for t in range(L):
            for d in range(D):
                u = delta[b, t, d] * x[b, t, d]
                acc = 0.0
                for n in range(N):
                    h[d, n] = decay[b, t, d, n] * h[d, n] + Bm[b, t, n] * u
                    acc += Cm[b, t, n] * h[d, n]
                y[b, t, d] = acc + skip[d] * x[b, t, d]


@njit(cache=True)
def _scan_backward(x, delta, decay, A, Bm, Cm, skip, gy, gx, gdelta, gA, gB, gC, gskip):
    nb, L, D = x.shape
    N = Bm.shape[2]
    H = np.empty((L, D, N), dtype=x.dtype)
    dh = np.empty((D, N), dtype=np.float64)
    gb_t = np.empty(N, dtype=np.float64)
    gc_t = np.empty(N, dtype=np.float64)
    for b in range(nb):
        # recompute states of this batch element; storing [B, L, D, N] is too large at full resolution
        for t in range(L):
            for d in range(D):
                u = delta[b, t, d] * x[b, t, d]
                for n in range(N):
                    prev = H[t - 1, d, n] if t > 0 else 0.0
                    H[t, d, n] = decay[b, t, d, n] * prev + Bm[b, t, n] * u
        dh[:, :] = 0.0
        for t in range(L - 1, -1, -1):
            gb_t[:] = 0.0
            gc_t[:] = 0.0
            for d in range(D):
                g = gy[b, t, d]
                dt = delta[b, t, d]
                xv = x[b, t, d]
                gxv = g * skip[d]
                gskip[d] += g * xv
                gdt = 0.0
                for n in range(N):
                    gc_t[n] += g * H[t, d, n]
                    dhn = dh[d, n] + g * Cm[b, t, n]
                    a = decay[b, t, d, n]
                    prev = H[t - 1, d, n] if t > 0 else 0.0
                    ga = dhn * prev * a
                    gdt += ga * A[d, n] + dhn * Bm[b, t, n] * xv
                    gA[d, n] += ga * dt
                    gb_t[n] += dhn * dt * xv
                    gxv += dhn * dt * Bm[b, t, n]
                    dh[d, n] = dhn * a
                gx[b, t, d] = gxv
                gdelta[b, t, d] = gdt
            for n in range(N):
                gB[b, t, n] = gb_t[n]
                gC[b, t, n] = gc_t[n]


_SLICE_ELEMENTS = 1 << 23


def _batch_slices(shape, n_state):
    nb, L, D = shape
    step = max(1, _SLICE_ELEMENTS // max(1, L * D * n_state))
    return [slice(i, min(i + step, nb)) for i in range(0, nb, step)]


def _decay(delta, A):
    out = np.empty(delta.shape + (A.shape[1],), dtype=delta.dtype)
    _fill_log_decay(delta, A, out)
    return np.exp(out, out=out)


def _check_scan_shapes(x, delta, A, Bm, Cm, skip) -> None:
    if x.ndim != 3:
        raise DimensionError(f"scan input must be [B,L,D], got {x.shape}")
    nb, L, D = x.shape
    if delta.shape != x.shape:
        raise DimensionError(f"delta shape {delta.shape} differs from input {x.shape}")
    if A.ndim != 2 or A.shape[0] != D:
        raise DimensionError(f"state matrix must be [{D},N], got {A.shape}")
    N = A.shape[1]
    if Bm.shape != (nb, L, N) or Cm.shape != (nb, L, N):
        raise DimensionError(f"B/C projections must be [{nb},{L},{N}], got {Bm.shape}/{Cm.shape}")
    if skip.shape != (D,):
        raise DimensionError(f"skip term must be [{D}], got {skip.shape}")


def scan_sequential(x, delta, A, Bm, Cm, skip) -> np.ndarray:
    """Reference token-by-token scan on plain arrays."""
    _check_scan_shapes(x, delta, A, Bm, Cm, skip)
    x, delta, A, Bm, Cm, skip = [np.ascontiguousarray(a, dtype=x.dtype)
                                 for a in (x, delta, A, Bm, Cm, skip)]
    y = np.empty(x.shape, dtype=x.dtype)
    for sl in _batch_slices(x.shape, A.shape[1]):
        _scan_forward(x[sl], delta[sl], _decay(delta[sl], A), Bm[sl], Cm[sl], skip, y[sl])
    return y


def scan_chunked(x, delta, A, Bm, Cm, skip, chunk: int = 16) -> np.ndarray:
    """Same result as :func:`scan_sequential`, vectorized inside chunks of tokens.

    Within a chunk the states are a masked sum over the pairwise decay
    ``exp(cum_t - cum_s)``; only the chunk-boundary state is carried forward.
    """
    _check_scan_shapes(x, delta, A, Bm, Cm, skip)
    nb, L, D = x.shape
    N = A.shape[1]
    y = np.empty_like(x)
    h0 = np.zeros((nb, D, N), dtype=x.dtype)
    tri = np.tril(np.ones((chunk, chunk), dtype=bool))
    for s in range(0, L, chunk):
        e = min(s + chunk, L)
        T = e - s
        dl = delta[:, s:e]
        cum = np.cumsum(dl[..., None] * A, axis=1)                    # [B,T,D,N]
        u = (dl * x[:, s:e])[..., None] * Bm[:, s:e, None, :]         # [B,T,D,N]
        diff = cum[:, :, None] - cum[:, None, :]                      # [B,T,T,D,N]
        diff = np.where(tri[:T, :T, None, None], diff, -np.inf)
        h = np.einsum("btsdn,bsdn->btdn", np.exp(diff), u) + np.exp(cum) * h0[:, None]
        y[:, s:e] = np.einsum("btdn,btn->btd", h, Cm[:, s:e]) + skip * x[:, s:e]
        h0 = h[:, -1]
    return y


def selective_scan_core(x: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor,
                        skip: Tensor) -> Tensor:
    """Differentiable scan given already-discretization-ready inputs (``A`` < 0, ``delta`` > 0)."""
    arrays = [np.ascontiguousarray(t.data, dtype=x.dtype) for t in (x, delta, A, Bm, Cm, skip)]
    y = scan_sequential(*arrays)
    if is_debug():
        bad = np.argwhere(~np.isfinite(y))
        if bad.size:
            raise NumericError(f"selective scan produced non-finite output at token index {int(bad[0, 1])}")

    def back(g):
        xs, ds, As, Bs, Cs, ks = arrays
        g = np.ascontiguousarray(g, dtype=y.dtype)
        gx = np.empty_like(xs)
        gdelta = np.empty_like(ds)
        gA = np.zeros(As.shape, dtype=np.float64)
        gB = np.empty_like(Bs)
        gC = np.empty_like(Cs)
        gskip = np.zeros(ks.shape, dtype=np.float64)
        for sl in _batch_slices(xs.shape, As.shape[1]):
            _scan_backward(xs[sl], ds[sl], _decay(ds[sl], As), As, Bs[sl], Cs[sl], ks, g[sl],
                           gx[sl], gdelta[sl], gA, gB[sl], gC[sl], gskip)
        return gx, gdelta, gA.astype(y.dtype), gB, gC, gskip.astype(y.dtype)

    return make_op(y, (x, delta, A, Bm, Cm, skip), back, "selective_scan")


class SelectiveSSM(Module):
    """Per-block selective SSM parameters.

    ``A_log`` stores log(-A) so the state matrix ``-exp(A_log)`` is strictly
    negative. ``x_proj`` maps each token to ``dt_rank + 2*d_state`` features
    (step-size rank features, then B, then C); ``dt_proj`` lifts the rank
    features back to one step size per channel before softplus.
    """

    def __init__(self, d_inner: int, d_state: int, dt_rank: int, rng: np.random.Generator,
                 dt_min: float = 1e-3, dt_max: float = 1e-1, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.d_inner, self.d_state, self.dt_rank = d_inner, d_state, dt_rank
        self.x_proj = Linear(d_inner, dt_rank + 2 * d_state, rng, bias=False, dtype=dtype)
        self.dt_proj = Linear(dt_rank, d_inner, rng, dtype=dtype)
        bound = dt_rank ** -0.5
        self.dt_proj.weight.data = rng.uniform(-bound, bound, (d_inner, dt_rank)).astype(dtype)
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), d_inner))
        dt = np.maximum(dt, 1e-4)
        self.dt_proj.bias.data = (dt + np.log(-np.expm1(-dt))).astype(dtype)   # inverse softplus
        a_init = np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1))
        self.A_log = Parameter(np.log(a_init).astype(dtype), decay=False)
        self.D = Parameter(np.ones(d_inner, dtype=dtype), decay=False)

    def forward(self, x: Tensor, delta: Optional[Tensor] = None) -> Tensor:
        return selective_scan(x, self, delta=delta)


def selective_scan(x: Tensor, params: SelectiveSSM, delta: Optional[Tensor] = None) -> Tensor:
    """Input-dependent scan over ``[B, L, d_inner]``.

    ``delta`` overrides the computed step sizes (post-softplus); used by tests
    to probe degenerate cases such as a zero step.
    """
    if x.ndim != 3 or x.shape[-1] != params.d_inner:
        raise DimensionError(f"selective_scan expects [B,L,{params.d_inner}], got {x.shape}")
    r, n = params.dt_rank, params.d_state
    proj = params.x_proj(x)
    if delta is None:
        delta = F.softplus(params.dt_proj(proj[..., :r]))
    Bm = proj[..., r:r + n]
    Cm = proj[..., r + n:]
    A = -params.A_log.exp()
    return selective_scan_core(x, delta, A, Bm, Cm, params.D)


class MambaMixer(Module):
    """Input projection, split, causal depthwise conv + SiLU, scan, SiLU gate, output projection."""

    def __init__(self, d_model: int, d_inner: int, d_state: int, dt_rank: int, conv_kernel: int,
                 rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.d_model, self.d_inner = d_model, d_inner
        self.in_proj = Linear(d_model, 2 * d_inner, rng, dtype=dtype)
        self.conv1d = DepthwiseConv1d(d_inner, conv_kernel, rng, dtype=dtype)
        self.ssm = SelectiveSSM(d_inner, d_state, dt_rank, rng, dtype=dtype)
        self.out_proj = Linear(d_inner, d_model, rng, dtype=dtype)

    def forward(self, x_norm: Tensor) -> Tensor:
        return mamba_mixer(x_norm, self)


def mamba_mixer(x_norm: Tensor, mixer: MambaMixer) -> Tensor:
    if x_norm.ndim != 3 or x_norm.shape[-1] != mixer.d_model:
        raise DimensionError(f"mamba_mixer expects [B,N,{mixer.d_model}], got {x_norm.shape}")
    di = mixer.d_inner
    xz = mixer.in_proj(x_norm)
    x_tok, z = xz[..., :di], xz[..., di:]
    x_conv = mixer.conv1d(x_tok.transpose(0, 2, 1)).transpose(0, 2, 1)
    y = mixer.ssm(F.silu(x_conv))
    return mixer.out_proj(y * F.silu(z))


class VisionMambaBlock(Module):
    """``x + mixer(layer_norm(x))``."""

    def __init__(self, d_model: int, d_inner: int, d_state: int, dt_rank: int, conv_kernel: int,
                 rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.norm = LayerNorm(d_model, dtype=dtype)
        self.mixer = MambaMixer(d_model, d_inner, d_state, dt_rank, conv_kernel, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return vision_mamba_block(x, self)


def vision_mamba_block(x: Tensor, block: VisionMambaBlock) -> Tensor:
    return x + block.mixer(block.norm(x))
