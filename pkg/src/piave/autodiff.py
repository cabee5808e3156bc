"""Minimal reverse-mode autodiff over dense numpy tensors.

Provides exactly the operator set the extraction network needs: elementwise
arithmetic with numpy broadcasting, matmul, strided/dilated 1D convolutions
(plain, depthwise, transposed), PReLU/ReLU/sigmoid, global layer norm,
concatenation, nearest-neighbor temporal upsampling, reductions, and a few
scalar transcendentals. Every op registers its backward rule at forward time;
`backward` walks the recorded graph once in reverse topological order.

Graphs are rebuilt on every forward pass, so a graph is confined to the
thread that built it. A `no_grad` block skips graph recording entirely.
"""
from __future__ import annotations

import json
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ConfigError, DimensionError, GraphError, ParameterError

_grad_enabled = True

CHECKPOINT_VERSION = 1


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_done")

    def __init__(self, data, requires_grad: bool = False, _parents=()):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) or (
            _grad_enabled and any(p.requires_grad for p in _parents)
        )
        self._parents = _parents if self.requires_grad else ()
        self._backward_fn = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g), t.data.shape)
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every reachable tensor with requires_grad."""
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss._done:
        raise GraphError("backward already ran on this graph; rebuild it first")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
    loss._done = True


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = Tensor(a.data + b.data, _parents=(a, b))
    if out.requires_grad:
        def fn(g):
            _accum(a, g)
            _accum(b, g)
        out._backward_fn = fn
    return out


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = Tensor(a.data - b.data, _parents=(a, b))
    if out.requires_grad:
        def fn(g):
            _accum(a, g)
            _accum(b, -g)
        out._backward_fn = fn
    return out


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = Tensor(a.data * b.data, _parents=(a, b))
    if out.requires_grad:
        def fn(g):
            _accum(a, g * b.data)
            _accum(b, g * a.data)
        out._backward_fn = fn
    return out


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = Tensor(a.data / b.data, _parents=(a, b))
    if out.requires_grad:
        def fn(g):
            _accum(a, g / b.data)
            _accum(b, -g * a.data / (b.data * b.data))
        out._backward_fn = fn
    return out


def neg(a) -> Tensor:
    a = _lift(a)
    out = Tensor(-a.data, _parents=(a,))
    if out.requires_grad:
        out._backward_fn = lambda g: _accum(a, -g)
    return out


def square(a) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data * a.data, _parents=(a,))
    if out.requires_grad:
        out._backward_fn = lambda g: _accum(a, 2.0 * a.data * g)
    return out


def sqrt(a) -> Tensor:
    a = _lift(a)
    root = np.sqrt(a.data)
    out = Tensor(root, _parents=(a,))
    if out.requires_grad:
        out._backward_fn = lambda g: _accum(a, g / (2.0 * root))
    return out


def log(a) -> Tensor:
    """Natural logarithm; inputs must be positive."""
    a = _lift(a)
    out = Tensor(np.log(a.data), _parents=(a,))
    if out.requires_grad:
        out._backward_fn = lambda g: _accum(a, g / a.data)
    return out


def relu(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.maximum(a.data, a.data.dtype.type(0.0)), _parents=(a,))
    if out.requires_grad:
        out._backward_fn = lambda g: _accum(a, _kernels.relu_backward(g, a.data))
    return out


def sigmoid(a) -> Tensor:
    a = _lift(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s, _parents=(a,))
    if out.requires_grad:
        out._backward_fn = lambda g: _accum(a, g * s * (1.0 - s))
    return out


def prelu(a: Tensor, slope: Tensor) -> Tensor:
    """PReLU with one learned slope per channel; a is (B, C, T), slope (C,)."""
    if a.ndim != 3 or slope.ndim != 1 or slope.shape[0] != a.shape[1]:
        raise DimensionError(
            f"prelu expects (B, C, T) and (C,), got {a.shape} and {slope.shape}"
        )
    out = Tensor(_kernels.prelu_forward(a.data, slope.data), _parents=(a, slope))
    if out.requires_grad:
        def fn(g):
            gx, gs = _kernels.prelu_backward(g, a.data, slope.data)
            _accum(a, gx)
            _accum(slope, gs)
        out._backward_fn = fn
    return out


# ---------------------------------------------------------------------------
# Reductions and shaping
# ---------------------------------------------------------------------------

def _restore_axes(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,))
    if out.requires_grad:
        shape = a.data.shape
        out._backward_fn = lambda g: _accum(a, _restore_axes(g, shape, axis, keepdims))
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    out = Tensor(out_data, _parents=(a,))
    if out.requires_grad:
        shape = a.data.shape
        count = a.data.size / out_data.size
        out._backward_fn = lambda g: _accum(
            a, _restore_axes(g, shape, axis, keepdims) / count
        )
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), _parents=(a,))
    if out.requires_grad:
        orig = a.data.shape
        out._backward_fn = lambda g: _accum(a, g.reshape(orig))
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = [(_lift(t)) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), _parents=tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def fn(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                _accum(t, piece)
        out._backward_fn = fn
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b))
    if out.requires_grad:
        def fn(g):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)
        out._backward_fn = fn
    return out


def crop_pad_time(a: Tensor, length: int) -> Tensor:
    """Trim or zero-pad the last axis to exactly `length` samples."""
    t = a.data.shape[-1]
    if t == length:
        return a
    if t > length:
        out = Tensor(a.data[..., :length], _parents=(a,))
        if out.requires_grad:
            def fn(g):
                gx = np.zeros_like(a.data)
                gx[..., :length] = g
                _accum(a, gx)
            out._backward_fn = fn
        return out
    pad = [(0, 0)] * (a.ndim - 1) + [(0, length - t)]
    out = Tensor(np.pad(a.data, pad), _parents=(a,))
    if out.requires_grad:
        out._backward_fn = lambda g: _accum(a, g[..., :t])
    return out


def nearest_upsample_time(a: Tensor, target_len: int | None = None, factor: int | None = None) -> Tensor:
    """Repeat frames along the last axis; source frame = floor(i * n / T)."""
    n = a.data.shape[-1]
    if target_len is None:
        if factor is None:
            raise ParameterError("need target_len or factor")
        target_len = n * int(factor)
    if target_len < 1:
        raise ParameterError(f"target length must be positive, got {target_len}")
    idx = (np.arange(target_len) * n) // target_len
    out = Tensor(a.data[..., idx], _parents=(a,))
    if out.requires_grad:
        def fn(g):
            gx = np.zeros_like(a.data)
            np.add.at(gx, (Ellipsis, idx), g)
            _accum(a, gx)
        out._backward_fn = fn
    return out


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def _check_conv_params(stride: int, padding: int, dilation: int) -> None:
    if stride < 1 or dilation < 1 or padding < 0:
        raise ParameterError(
            f"invalid conv parameters: stride={stride}, padding={padding}, dilation={dilation}"
        )


def _windows(xp: np.ndarray, k: int, stride: int, dilation: int) -> np.ndarray:
    """Read-only sliding view (B, C, K, T_out) over the padded input."""
    b, c, tp = xp.shape
    t_out = (tp - dilation * (k - 1) - 1) // stride + 1
    sb, sc, st = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, k, t_out),
        strides=(sb, sc, st * dilation, st * stride),
        writeable=False,
    )


def _pad_time(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    b, c, t = x.shape
    out = np.zeros((b, c, t + 2 * padding), dtype=x.dtype)
    out[:, :, padding:-padding] = x
    return out


def _conv1x1(x: Tensor, w: Tensor, bias: Tensor | None) -> Tensor:
    """Pointwise conv as a broadcast matmul; keeps everything contiguous."""
    w2 = w.data[:, :, 0]
    out_data = np.matmul(w2[None], x.data)
    if bias is not None:
        out_data += bias.data[None, :, None]
    parents = (x, w) if bias is None else (x, w, bias)
    out = Tensor(out_data, _parents=parents)
    if out.requires_grad:
        def fn(g):
            if x.requires_grad:
                _accum(x, np.matmul(w2.T[None], g))
            if w.requires_grad:
                _accum(w, np.tensordot(g, x.data, axes=([0, 2], [0, 2]))[:, :, None])
            if bias is not None and bias.requires_grad:
                _accum(bias, g.sum(axis=(0, 2)))
        out._backward_fn = fn
    return out


def conv1d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Cross-correlation of x (B, Cin, T) with w (Cout, Cin, K)."""
    _check_conv_params(stride, padding, dilation)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv1d shapes incompatible: x {x.shape}, w {w.shape}")
    k = w.shape[2]
    if k == 1 and stride == 1 and padding == 0 and dilation == 1:
        return _conv1x1(x, w, bias)
    xp = _pad_time(x.data, padding)
    if xp.shape[2] < dilation * (k - 1) + 1:
        raise DimensionError(
            f"input of length {x.shape[2]} too short for kernel {k} (dilation {dilation})"
        )
    cols = _windows(xp, k, stride, dilation)
    out_data = np.ascontiguousarray(
        np.tensordot(w.data, cols, axes=([1, 2], [1, 2])).transpose(1, 0, 2)
    )
    if bias is not None:
        out_data += bias.data[None, :, None]
    parents = (x, w) if bias is None else (x, w, bias)
    out = Tensor(out_data, _parents=parents)
    if out.requires_grad:
        t_out = out_data.shape[2]
        def fn(g):
            if w.requires_grad:
                _accum(w, np.tensordot(g, cols, axes=([0, 2], [0, 3])))
            if bias is not None and bias.requires_grad:
                _accum(bias, g.sum(axis=(0, 2)))
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for kk in range(k):
                    seg = np.tensordot(g, w.data[:, :, kk], axes=([1], [0]))  # (B, T, C)
                    gxp[:, :, kk * dilation : kk * dilation + stride * t_out : stride] += (
                        seg.transpose(0, 2, 1)
                    )
                if padding:
                    gxp = gxp[:, :, padding:-padding]
                _accum(x, gxp)
        out._backward_fn = fn
    return out


def depthwise_conv1d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Per-channel convolution of x (B, C, T) with w (C, K), stride 1."""
    _check_conv_params(1, padding, dilation)
    if x.ndim != 3 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"depthwise shapes incompatible: x {x.shape}, w {w.shape}")
    k = w.shape[1]
    xp = _pad_time(x.data, padding)
    if xp.shape[2] < dilation * (k - 1) + 1:
        raise DimensionError(f"input too short for kernel {k} (dilation {dilation})")
    out_data = _kernels.dwconv_forward(xp, w.data, None if bias is None else bias.data, dilation)
    parents = (x, w) if bias is None else (x, w, bias)
    out = Tensor(out_data, _parents=parents)
    if out.requires_grad:
        def fn(g):
            gxp, gw = _kernels.dwconv_backward(np.ascontiguousarray(g), xp, w.data, dilation)
            if w.requires_grad:
                _accum(w, gw)
            if bias is not None and bias.requires_grad:
                _accum(bias, g.sum(axis=(0, 2)))
            if x.requires_grad:
                _accum(x, gxp[:, :, padding:-padding] if padding else gxp)
        out._backward_fn = fn
    return out


def depthwise_separable_conv1d(
    x: Tensor,
    depth_w: Tensor,
    point_w: Tensor,
    bias: Tensor | None = None,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Depthwise (C, K) convolution followed by a pointwise (O, C, 1) mix."""
    y = depthwise_conv1d(x, depth_w, None, padding=padding, dilation=dilation)
    return conv1d(y, point_w, bias)


def transposed_conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Adjoint of conv1d: x (B, Cin, T), w (Cin, Cout, K) -> (B, Cout, (T-1)*stride + K)."""
    _check_conv_params(stride, 0, 1)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"transposed conv shapes incompatible: x {x.shape}, w {w.shape}")
    b, _, t = x.shape
    cin, cout, k = w.shape
    out_len = (t - 1) * stride + k
    out_data = np.zeros((b, cout, out_len), dtype=x.data.dtype)
    for kk in range(k):
        seg = np.tensordot(x.data, w.data[:, :, kk], axes=([1], [0]))  # (B, T, Cout)
        out_data[:, :, kk : kk + stride * t : stride] += seg.transpose(0, 2, 1)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None]
    parents = (x, w) if bias is None else (x, w, bias)
    out = Tensor(out_data, _parents=parents)
    if out.requires_grad:
        def fn(g):
            vg = _windows(g, k, stride, 1)  # (B, Cout, K, T)
            if x.requires_grad:
                _accum(
                    x,
                    np.tensordot(w.data, vg, axes=([1, 2], [1, 2])).transpose(1, 0, 2),
                )
            if w.requires_grad:
                _accum(w, np.tensordot(x.data, vg, axes=([0, 2], [0, 3])))
            if bias is not None and bias.requires_grad:
                _accum(bias, g.sum(axis=(0, 2)))
        out._backward_fn = fn
    return out


def global_layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize x (B, C, T) over (C, T) per item, then scale/shift per channel."""
    if x.ndim != 3 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionError(
            f"layer norm expects (B, C, T) with per-channel gain/bias, got {x.shape}"
        )
    out_data, xh, inv = _kernels.gln_forward(x.data, gain.data, bias.data, eps)
    out = Tensor(out_data, _parents=(x, gain, bias))
    if out.requires_grad:
        def fn(g):
            gx, ggain, gbias = _kernels.gln_backward(
                np.ascontiguousarray(g), xh, inv, gain.data
            )
            if gain.requires_grad:
                _accum(gain, ggain)
            if bias.requires_grad:
                _accum(bias, gbias)
            if x.requires_grad:
                _accum(x, gx)
        out._backward_fn = fn
    return out


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

KINK_TOL = 1e-3


def _draw_inputs(rng: np.random.Generator, shapes, positive: bool) -> list[np.ndarray]:
    xs = []
    for s in shapes:
        if positive:
            xs.append(rng.uniform(0.5, 2.5, size=s))
        else:
            a = rng.uniform(-2.0, 2.0, size=s)
            bad = np.abs(a) < KINK_TOL
            while bad.any():
                a[bad] = rng.uniform(-2.0, 2.0, size=int(bad.sum()))
                bad = np.abs(a) < KINK_TOL
            xs.append(a)
    return xs


def _degenerate(xs: list[np.ndarray], positive: bool) -> bool:
    for a in xs:
        if a.size > 1 and np.ptp(a) == 0.0:
            return True  # constant input: zero-variance ops are non-differentiable
        if not positive and (np.abs(a) < KINK_TOL).any():
            return True  # too close to a ReLU/PReLU kink for finite differences
    return False


def grad_check(
    fn,
    shapes,
    seed: int,
    h: float = 1e-4,
    positive: bool = False,
    x0=None,
    max_coords: int | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` maps float64 input Tensors (one per entry of `shapes`) to a scalar
    Tensor. Inputs are sampled away from activation kinks; a supplied `x0`
    that sits on a kink or has zero spread is resampled instead of used.
    """
    rng = np.random.default_rng(seed)
    if x0 is not None:
        xs = [np.asarray(a, dtype=np.float64).copy() for a in x0]
    else:
        xs = _draw_inputs(rng, shapes, positive)
    while _degenerate(xs, positive):
        xs = _draw_inputs(rng, shapes, positive)

    ins = [Tensor(a.copy(), requires_grad=True) for a in xs]
    out = fn(*ins)
    if out.data.size != 1:
        raise GraphError("grad_check target must produce a scalar")
    backward(out)
    analytic = [
        np.zeros_like(xs[i]) if t.grad is None else t.grad.astype(np.float64)
        for i, t in enumerate(ins)
    ]

    coords = [(i, idx) for i, a in enumerate(xs) for idx in np.ndindex(a.shape)]
    if max_coords is not None and len(coords) > max_coords:
        sel = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[j] for j in sel]

    worst = 0.0
    for i, idx in coords:
        orig = xs[i][idx]
        xs[i][idx] = orig + h
        fp = float(fn(*[Tensor(a) for a in xs]).data)
        xs[i][idx] = orig - h
        fm = float(fn(*[Tensor(a) for a in xs]).data)
        xs[i][idx] = orig
        g_fd = (fp - fm) / (2.0 * h)
        rel = abs(analytic[i][idx] - g_fd) / max(1.0, abs(g_fd))
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints: flat binary blob + JSON sidecar
# ---------------------------------------------------------------------------

def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_checkpoint(path, params: dict, extra: dict | None = None) -> None:
    """Write parameters to `path` (raw little-endian blob) + JSON sidecar.

    `params` maps name -> Tensor or ndarray. Entries are laid out in sorted
    name order so the file is a pure function of its contents.
    """
    entries = []
    offset = 0
    blobs = []
    for name in sorted(params):
        arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
        arr = np.ascontiguousarray(arr)
        dtype = "<f8" if arr.dtype == np.float64 else "<f4"
        raw = arr.astype(dtype).tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset}
        )
        blobs.append(raw)
        offset += len(raw)
    Path(path).write_bytes(b"".join(blobs))
    doc = {"version": CHECKPOINT_VERSION, "params": entries}
    if extra:
        doc["extra"] = extra
    sidecar_path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read back (name -> ndarray, extra dict); refuses unknown versions."""
    doc = json.loads(sidecar_path(path).read_text())
    if "version" not in doc:
        raise ConfigError(f"{path}: checkpoint sidecar lacks a version field")
    if doc["version"] != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {doc['version']}")
    blob = Path(path).read_bytes()
    out = {}
    for entry in doc["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            blob, dtype=entry["dtype"], count=count, offset=entry["offset"]
        ).reshape(shape)
        out[entry["name"]] = arr.copy()
    return out, doc.get("extra", {})
