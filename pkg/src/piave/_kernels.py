"""Fused inner loops for the hot elementwise ops.

The separator spends most of its time streaming (B, C, T) activations
through PReLU, layer norm and depthwise convolutions; fusing those passes
roughly halves the bytes moved per step. Every kernel has a pure-numpy
fallback with identical semantics, used when numba is unavailable. All
kernels are sequential, so results are bit-reproducible run to run.
"""
from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        if args and callable(args[0]):
            return args[0]
        return wrap


@njit(cache=True)
def _prelu_fwd(x, slope, out):
    b_n, c_n, t_n = x.shape
    for b in range(b_n):
        for c in range(c_n):
            s = slope[c]
            for t in range(t_n):
                v = x[b, c, t]
                out[b, c, t] = v if v > 0 else s * v


@njit(cache=True)
def _prelu_bwd(g, x, slope, gx, gs):
    b_n, c_n, t_n = x.shape
    for b in range(b_n):
        for c in range(c_n):
            s = slope[c]
            acc = 0.0
            for t in range(t_n):
                v = x[b, c, t]
                gv = g[b, c, t]
                if v > 0:
                    gx[b, c, t] = gv
                else:
                    gx[b, c, t] = s * gv
                    acc += gv * v
            gs[c] += acc


@njit(cache=True)
def _relu_bwd(g, x, gx):
    flat_x = x.ravel()
    flat_g = g.ravel()
    flat_o = gx.ravel()
    for i in range(flat_x.size):
        flat_o[i] = flat_g[i] if flat_x[i] > 0 else 0.0


@njit(cache=True)
def _gln_fwd(x, gain, bias, eps, out, xh, inv):
    b_n, c_n, t_n = x.shape
    n = c_n * t_n
    for b in range(b_n):
        s = 0.0
        ss = 0.0
        for c in range(c_n):
            for t in range(t_n):
                v = x[b, c, t]
                s += v
                ss += v * v
        mu = s / n
        var = ss / n - mu * mu
        if var < 0.0:
            var = 0.0
        iv = 1.0 / np.sqrt(var + eps)
        inv[b] = iv
        for c in range(c_n):
            gn = gain[c]
            bs = bias[c]
            for t in range(t_n):
                h = (x[b, c, t] - mu) * iv
                xh[b, c, t] = h
                out[b, c, t] = gn * h + bs


@njit(cache=True)
def _gln_bwd(g, xh, inv, gain, gx, ggain, gbias):
    b_n, c_n, t_n = g.shape
    n = c_n * t_n
    for b in range(b_n):
        s1 = 0.0
        s2 = 0.0
        for c in range(c_n):
            gn = gain[c]
            acc_g = 0.0
            acc_gx = 0.0
            for t in range(t_n):
                gv = g[b, c, t]
                acc_g += gv
                acc_gx += gv * xh[b, c, t]
                d = gv * gn
                s1 += d
                s2 += d * xh[b, c, t]
            gbias[c] += acc_g
            ggain[c] += acc_gx
        iv_n = inv[b] / n
        for c in range(c_n):
            gn = gain[c]
            for t in range(t_n):
                d = g[b, c, t] * gn
                gx[b, c, t] = iv_n * (n * d - s1 - xh[b, c, t] * s2)


@njit(cache=True)
def _dwconv_fwd(xp, w, bias, out, dilation):
    b_n, c_n, t_n = out.shape
    k_n = w.shape[1]
    for b in range(b_n):
        for c in range(c_n):
            bs = bias[c]
            for t in range(t_n):
                acc = bs
                for k in range(k_n):
                    acc += w[c, k] * xp[b, c, t + k * dilation]
                out[b, c, t] = acc


@njit(cache=True)
def _dwconv_bwd(g, xp, w, gxp, gw, dilation):
    b_n, c_n, t_n = g.shape
    k_n = w.shape[1]
    for b in range(b_n):
        for c in range(c_n):
            for k in range(k_n):
                wk = w[c, k]
                off = k * dilation
                acc = 0.0
                for t in range(t_n):
                    gv = g[b, c, t]
                    acc += gv * xp[b, c, t + off]
                    gxp[b, c, t + off] += wk * gv
                gw[c, k] += acc


def _contig(*arrays: np.ndarray) -> bool:
    return all(a.flags["C_CONTIGUOUS"] for a in arrays)


# ---------------------------------------------------------------------------
# Wrappers with numpy fallbacks
# ---------------------------------------------------------------------------

def prelu_forward(x: np.ndarray, slope: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA and _contig(x):
        out = np.empty_like(x)
        _prelu_fwd(x, slope.astype(x.dtype), out)
        return out
    s = slope.astype(x.dtype)[None, :, None]
    return np.where(x > 0, x, s * x)


def prelu_backward(g: np.ndarray, x: np.ndarray, slope: np.ndarray):
    if HAVE_NUMBA and _contig(g, x):
        gx = np.empty_like(x)
        gs = np.zeros(slope.shape[0], dtype=np.float64)
        _prelu_bwd(g, x, slope.astype(x.dtype), gx, gs)
        return gx, gs.astype(slope.dtype)
    s = slope.astype(x.dtype)[None, :, None]
    gx = g * np.where(x > 0, x.dtype.type(1.0), s)
    gs = np.where(x > 0, x.dtype.type(0.0), g * x).sum(axis=(0, 2))
    return gx, gs.astype(slope.dtype)


def relu_backward(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA and _contig(g, x) and g.shape == x.shape:
        gx = np.empty_like(x)
        _relu_bwd(g, x, gx)
        return gx
    return g * (x > 0)


def gln_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    """Returns (out, xh, inv) with inv holding 1/std per batch item."""
    if HAVE_NUMBA and _contig(x):
        out = np.empty_like(x)
        xh = np.empty_like(x)
        inv = np.empty(x.shape[0], dtype=np.float64)
        _gln_fwd(x, gain.astype(x.dtype), bias.astype(x.dtype), eps, out, xh, inv)
        return out, xh, inv
    mu = x.mean(axis=(1, 2), keepdims=True, dtype=np.float64)
    diff = x - mu.astype(x.dtype)
    var = np.mean(diff.astype(np.float64) ** 2, axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = diff * inv.astype(x.dtype)
    out = gain.astype(x.dtype)[None, :, None] * xh + bias.astype(x.dtype)[None, :, None]
    return out, xh, inv.reshape(-1)


def gln_backward(g: np.ndarray, xh: np.ndarray, inv: np.ndarray, gain: np.ndarray):
    """Returns (gx, ggain, gbias) for the global layer norm."""
    if HAVE_NUMBA and _contig(g, xh):
        gx = np.empty_like(xh)
        ggain = np.zeros(gain.shape[0], dtype=np.float64)
        gbias = np.zeros(gain.shape[0], dtype=np.float64)
        _gln_bwd(g, xh, inv, gain.astype(xh.dtype), gx, ggain, gbias)
        return gx, ggain.astype(gain.dtype), gbias.astype(gain.dtype)
    n = g.shape[1] * g.shape[2]
    gain_b = gain.astype(xh.dtype)[None, :, None]
    dxh = g * gain_b
    s1 = dxh.sum(axis=(1, 2), keepdims=True)
    s2 = (dxh * xh).sum(axis=(1, 2), keepdims=True)
    inv_b = inv.reshape(-1, 1, 1).astype(xh.dtype)
    gx = (inv_b / n) * (n * dxh - s1 - xh * s2)
    ggain = (g * xh).sum(axis=(0, 2)).astype(gain.dtype)
    gbias = g.sum(axis=(0, 2)).astype(gain.dtype)
    return gx, ggain, gbias


def dwconv_forward(xp: np.ndarray, w: np.ndarray, bias: np.ndarray | None, dilation: int) -> np.ndarray:
    k = w.shape[1]
    t_len = xp.shape[2] - dilation * (k - 1)
    bias_arr = np.zeros(w.shape[0], dtype=xp.dtype) if bias is None else bias.astype(xp.dtype)
    if HAVE_NUMBA and _contig(xp):
        out = np.empty((xp.shape[0], xp.shape[1], t_len), dtype=xp.dtype)
        _dwconv_fwd(xp, w.astype(xp.dtype), bias_arr, out, dilation)
        return out
    out = np.zeros((xp.shape[0], xp.shape[1], t_len), dtype=xp.dtype)
    for kk in range(k):
        out += w[None, :, kk : kk + 1] * xp[:, :, kk * dilation : kk * dilation + t_len]
    return out + bias_arr[None, :, None]


def dwconv_backward(g: np.ndarray, xp: np.ndarray, w: np.ndarray, dilation: int):
    """Returns (gxp, gw); caller crops the padding off gxp."""
    k = w.shape[1]
    if HAVE_NUMBA and _contig(g, xp):
        gxp = np.zeros_like(xp)
        gw = np.zeros((w.shape[0], k), dtype=np.float64)
        _dwconv_bwd(g, xp, w.astype(xp.dtype), gxp, gw, dilation)
        return gxp, gw.astype(w.dtype)
    t_out = g.shape[2]
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for kk in range(k):
        sl = slice(kk * dilation, kk * dilation + t_out)
        gw[:, kk] = (g * xp[:, :, sl]).sum(axis=(0, 2))
        gxp[:, :, sl] += w[None, :, kk : kk + 1] * g
    return gxp, gw
