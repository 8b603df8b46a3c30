"""Reverse-mode automatic differentiation over dense float64 tensors.

The graph is dynamic: every operation on a gradient-tracked tensor records
its inputs and a local-gradient closure on the output node. ``backward`` on
a scalar walks the recorded operations once in reverse topological order,
then frees the graph; a second backward on the same graph is an error.

A graph is confined to one thread. Tensors that do not participate in a
graph are plain immutable value holders and safe to share.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import fftconvolve

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "add", "sub", "mul", "div", "matmul",
    "exp", "log", "sqrt", "tanh", "sigmoid", "sin", "cos", "absolute",
    "softmax", "log_softmax",
    "tsum", "tmean", "tvariance",
    "concatenate", "reshape", "transpose", "broadcast_to", "masked_select",
    "gather_last", "take_rows", "take_diagonal",
    "conv1d", "sliding_dot", "lstm_sequence", "multihead_attention",
    "finite_difference_check", "gradient_check", "GradCheckReport",
]

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense float64 array with optional gradient-tape participation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_freed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._freed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A constant view of the same values, cut off from the graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return mul(self, -1.0)

    def __getitem__(self, key):
        return _index(self, key)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return tmean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape if len(shape) > 1 else shape[0])
    def transpose(self, axes): return transpose(self, axes)

    # -- backward ----------------------------------------------------------

    def backward(self) -> None:
        """Accumulate dSelf/dLeaf into every requires_grad leaf.

        Requires a scalar root. Backward on an untracked tensor is a no-op.
        The graph is freed afterwards; re-running without re-recording the
        forward pass raises.
        """
        if self.data.size != 1:
            raise ValueError(f"backward: root must be scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            return
        if self._freed:
            raise RuntimeError("backward: graph already consumed; re-record the forward pass")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)
                node._backward_fn = None
                node._parents = ()
                node._freed = True
                node.grad = None  # interior grads are not retained


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accumulate(parent: Tensor, grad: np.ndarray) -> None:
    if not parent.requires_grad:
        return
    grad = _unbroadcast(np.asarray(grad, dtype=np.float64), parent.data.shape)
    if parent.grad is None:
        parent.grad = grad.copy()
    else:
        parent.grad += grad


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a, b)
    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)
    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("sub", a, b)
    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)
    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a, b)
    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)
    return _node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    def bw(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * out / b.data)
    return _node(out, (a, b), bw)


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ValueError(
            f"{name}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


# -- matmul ------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; supports 1-D/2-D operands and batched stacks.

    A 2-D operand against a batched stack is reduced with a single flat
    GEMM in the backward pass.
    """
    a, b = _lift(a), _lift(b)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ValueError(
            f"matmul: shapes {a.data.shape} and {b.data.shape} are not aligned"
        ) from None

    def bw(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            _accumulate(a, g * bd)
            _accumulate(b, g * ad)
            return
        ga = gb = None
        if ad.ndim == 1:  # (k,) @ (..., k, m)
            if a.requires_grad:
                ga = np.matmul(bd, g[..., None])[..., 0]
            if b.requires_grad:
                gb = ad[:, None] * g[..., None, :]
        elif bd.ndim == 1:  # (..., n, k) @ (k,)
            if a.requires_grad:
                ga = g[..., None] * bd
            if b.requires_grad:
                gb = np.matmul(ad.reshape(-1, ad.shape[-1]).T, g.reshape(-1))
        else:
            if a.requires_grad:
                ga = np.matmul(g, bd.swapaxes(-1, -2))
            if b.requires_grad:
                if bd.ndim == 2 and g.ndim > 2:
                    k = ad.shape[-1]
                    gb = np.matmul(ad.reshape(-1, k).T, g.reshape(-1, g.shape[-1]))
                else:
                    gb = np.matmul(ad.swapaxes(-1, -2), g)
        if ga is not None:
            _accumulate(a, ga)
        if gb is not None:
            _accumulate(b, gb)

    return _node(out, (a, b), bw)


# -- transcendental / pointwise ----------------------------------------------

def exp(x) -> Tensor:
    x = _lift(x)
    out = np.exp(x.data)
    def bw(g):
        _accumulate(x, g * out)
    return _node(out, (x,), bw)


def log(x) -> Tensor:
    x = _lift(x)
    if np.any(x.data <= 0):
        raise ValueError("log: input must be strictly positive")
    def bw(g):
        _accumulate(x, g / x.data)
    return _node(np.log(x.data), (x,), bw)


def sqrt(x) -> Tensor:
    x = _lift(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt: input must be non-negative")
    out = np.sqrt(x.data)
    def bw(g):
        _accumulate(x, g * 0.5 / out)
    return _node(out, (x,), bw)


def tanh(x) -> Tensor:
    x = _lift(x)
    out = np.tanh(x.data)
    def bw(g):
        _accumulate(x, g * (1.0 - out * out))
    return _node(out, (x,), bw)


def sigmoid(x) -> Tensor:
    x = _lift(x)
    out = _sigmoid(x.data)
    def bw(g):
        _accumulate(x, g * out * (1.0 - out))
    return _node(out, (x,), bw)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # large |z| saturates cleanly: exp overflow yields inf and 1/inf == 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def sin(x) -> Tensor:
    x = _lift(x)
    def bw(g):
        _accumulate(x, g * np.cos(x.data))
    return _node(np.sin(x.data), (x,), bw)


def cos(x) -> Tensor:
    x = _lift(x)
    def bw(g):
        _accumulate(x, -g * np.sin(x.data))
    return _node(np.cos(x.data), (x,), bw)


def absolute(x) -> Tensor:
    """|x| with the subgradient at 0 fixed to 0."""
    x = _lift(x)
    def bw(g):
        _accumulate(x, g * np.sign(x.data))
    return _node(np.abs(x.data), (x,), bw)


# -- softmax family ------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    """Overflow-safe softmax along one axis (max subtraction)."""
    x = _lift(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    out = z
    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(x, out * (g - dot))
    return _node(out, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    def bw(g):
        s = g.sum(axis=axis, keepdims=True)
        _accumulate(x, g - np.exp(out) * s)
    return _node(out, (x,), bw)


# -- reductions ----------------------------------------------------------------

def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    def bw(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(gg, x.data.shape))
    return _node(out, (x,), bw)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
    def bw(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g / n, x.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(gg / n, x.data.shape))
    return _node(out, (x,), bw)


def tvariance(x, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance along an axis."""
    x = _lift(x)
    mean = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mean
    out = (centered * centered).mean(axis=axis, keepdims=keepdims)
    n = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
    def bw(g):
        if axis is None:
            gg = g
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
        _accumulate(x, 2.0 / n * centered * gg)
    return _node(out, (x,), bw)


# -- shape ops -------------------------------------------------------------------

def concatenate(parts, axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    def bw(g):
        offset = 0
        for p, s in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + s)
            _accumulate(p, g[tuple(sl)])
            offset += s
    return _node(out, tuple(parts), bw)


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    def bw(g):
        _accumulate(x, g.reshape(x.data.shape))
    return _node(x.data.reshape(shape), (x,), bw)


def transpose(x, axes) -> Tensor:
    x = _lift(x)
    inv = np.argsort(axes)
    def bw(g):
        _accumulate(x, g.transpose(inv))
    return _node(x.data.transpose(axes), (x,), bw)


def broadcast_to(x, shape) -> Tensor:
    x = _lift(x)
    def bw(g):
        _accumulate(x, g)
    return _node(np.broadcast_to(x.data, shape).copy(), (x,), bw)


def _index(x: Tensor, key) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        full[key] = g
        _accumulate(x, full)
    return _node(x.data[key], (x,), bw)


def gather_last(x, idx) -> Tensor:
    """Gather along the last axis with an integer index array; overlapping
    indices accumulate gradient additively."""
    x = _lift(x)
    idx = np.asarray(idx)
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (..., idx), g)
        _accumulate(x, full)
    return _node(x.data[..., idx], (x,), bw)


def take_rows(x, idx) -> Tensor:
    """Select entries along the first axis by integer index."""
    x = _lift(x)
    idx = np.asarray(idx, dtype=np.int64)
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accumulate(x, full)
    return _node(x.data[idx], (x,), bw)


def take_diagonal(x) -> Tensor:
    """Main diagonal of a square 2-D tensor."""
    x = _lift(x)
    n = min(x.data.shape)
    rng_idx = np.arange(n)
    def bw(g):
        full = np.zeros_like(x.data)
        full[rng_idx, rng_idx] = g
        _accumulate(x, full)
    return _node(x.data[rng_idx, rng_idx], (x,), bw)


def masked_select(x, mask) -> Tensor:
    """Select elements where a boolean mask is true, flattened."""
    x = _lift(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.data.shape:
        raise ValueError(
            f"masked_select: mask shape {mask.shape} != tensor shape {x.data.shape}")
    def bw(g):
        full = np.zeros_like(x.data)
        full[mask] = g
        _accumulate(x, full)
    return _node(x.data[mask], (x,), bw)


# -- fused structured primitives ---------------------------------------------

def conv1d(x, kernels, bias=None) -> Tensor:
    """Valid 1-D correlation: x (B, C_in, T), kernels (C_out, C_in, k).

    Returns (B, C_out, T-k+1). Forward runs one flat GEMM over unrolled
    windows; the input gradient is built by a short loop over kernel taps.
    """
    x, kernels = _lift(x), _lift(kernels)
    if x.data.ndim != 3 or kernels.data.ndim != 3 or x.data.shape[1] != kernels.data.shape[1]:
        raise ValueError(
            f"conv1d: incompatible shapes {x.data.shape} and {kernels.data.shape}")
    B, cin, T = x.data.shape
    cout, _, k = kernels.data.shape
    if T < k:
        raise ValueError(f"conv1d: input length {T} shorter than kernel {k}")
    n = T - k + 1
    view = sliding_window_view(x.data, k, axis=2)          # (B, cin, n, k)
    cols = np.ascontiguousarray(view.transpose(0, 2, 1, 3)).reshape(B * n, cin * k)
    wmat = kernels.data.reshape(cout, cin * k)
    out = (cols @ wmat.T).reshape(B, n, cout).transpose(0, 2, 1)
    if bias is not None:
        bias = _lift(bias)
        out = out + bias.data[None, :, None]

    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def bw(g):
        gflat = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(B * n, cout)
        if kernels.requires_grad:
            _accumulate(kernels, (gflat.T @ cols).reshape(cout, cin, k))
        if x.requires_grad:
            if k <= 8:
                gx = np.zeros((B, cin, T))
                for j in range(k):
                    gx[:, :, j:j + n] += np.tensordot(
                        g, kernels.data[:, :, j], axes=([1], [0])).transpose(0, 2, 1)
            else:
                # transposed convolution as one GEMM over the padded gradient
                gpad = np.zeros((B, cout, n + 2 * (k - 1)))
                gpad[:, :, k - 1:k - 1 + n] = g
                gview = sliding_window_view(gpad, k, axis=2)      # (B, cout, T, k)
                kflip = kernels.data[:, :, ::-1]
                gx = np.tensordot(gview, kflip, axes=([1, 3], [0, 2])).transpose(0, 2, 1)
            _accumulate(x, gx)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2)))

    return _node(out, parents, bw)


def sliding_dot(x, w) -> Tensor:
    """Dot product of every length-len(w) sliding window of x with w.

    x (B, T), w (L) -> (B, T-L+1). FFT-based on both passes.
    """
    x, w = _lift(x), _lift(w)
    B, T = x.data.shape
    L = w.data.shape[0]
    if T < L:
        raise ValueError(f"sliding_dot: series length {T} shorter than window {L}")
    out = fftconvolve(x.data, w.data[::-1][None, :], mode="valid", axes=1)

    def bw(g):
        if x.requires_grad:
            _accumulate(x, fftconvolve(g, w.data[None, :], mode="full", axes=1))
        if w.requires_grad:
            view = sliding_window_view(x.data, L, axis=1)   # (B, n, L)
            _accumulate(w, np.einsum("bnl,bn->l", view, g))

    return _node(out, (x, w), bw)


def lstm_sequence(x_seq, wx, wh, b, h0=None, c0=None) -> Tensor:
    """Run a standard LSTM over a full sequence, returning the final hidden state.

    x_seq (B, T, D); wx (D, 4H); wh (H, 4H); b (4H). Gate layout along the
    4H axis is i, f, o (sigmoid) then g (tanh); the cell follows
    c_t = f*c_{t-1} + i*g, h_t = o*tanh(c_t). The input projection for all
    steps runs as one flat GEMM; the whole unroll is a single tape entry
    with an exact hand-written backward (BPTT).
    """
    x_seq, wx, wh, b = _lift(x_seq), _lift(wx), _lift(wh), _lift(b)
    B, T, D = x_seq.data.shape
    H4 = wx.data.shape[1]
    H = H4 // 4
    if wx.data.shape[0] != D or wh.data.shape != (H, H4) or b.data.shape != (H4,):
        raise ValueError(
            f"lstm_sequence: incompatible shapes x{x_seq.data.shape} wx{wx.data.shape} "
            f"wh{wh.data.shape} b{b.data.shape}")
    H3 = 3 * H
    c_in = np.zeros((B, H)) if c0 is None else np.asarray(c0, dtype=np.float64)
    h_in = np.zeros((B, H)) if h0 is None else np.asarray(h0, dtype=np.float64)
    c_first = c_in

    zx = x_seq.data.reshape(B * T, D) @ wx.data
    zx = zx.reshape(B, T, H4) + b.data

    gates = np.empty((T, B, H4))   # activated i, f, o, g per step
    c_s = np.empty((T, B, H))
    tc_s = np.empty((T, B, H))
    h_hist = np.empty((T, B, H))   # h_{t-1} entering each step
    for t in range(T):
        z = zx[:, t] + h_in @ wh.data
        act = gates[t]
        act[:, :H3] = _sigmoid(z[:, :H3])
        act[:, H3:] = np.tanh(z[:, H3:])
        i, f, o, gg = act[:, :H], act[:, H:2 * H], act[:, 2 * H:H3], act[:, H3:]
        c = f * c_in + i * gg
        tc = np.tanh(c)
        c_s[t], tc_s[t], h_hist[t] = c, tc, h_in
        c_in = c
        h_in = o * tc

    out = h_in

    def bw(g):
        dh = np.asarray(g, dtype=np.float64).copy()
        dc = np.zeros((B, H))
        dz_all = np.empty((T, B, H4))
        dwh = np.zeros((H, H4))
        for t in range(T - 1, -1, -1):
            act = gates[t]
            i, f, o, gg = act[:, :H], act[:, H:2 * H], act[:, 2 * H:H3], act[:, H3:]
            tc = tc_s[t]
            c_prev = c_s[t - 1] if t > 0 else c_first
            dc += dh * o * (1.0 - tc * tc)
            dz = dz_all[t]
            dz[:, :H] = dc * gg * i * (1 - i)
            dz[:, H:2 * H] = dc * c_prev * f * (1 - f)
            dz[:, 2 * H:H3] = dh * tc * o * (1 - o)
            dz[:, H3:] = dc * i * (1 - gg * gg)
            dwh += h_hist[t].T @ dz
            dh = dz @ wh.data.T
            dc *= f
        dz_flat = dz_all.transpose(1, 0, 2).reshape(B * T, H4)
        if x_seq.requires_grad:
            _accumulate(x_seq, (dz_flat @ wx.data.T).reshape(B, T, D))
        if wx.requires_grad:
            _accumulate(wx, x_seq.data.reshape(B * T, D).T @ dz_flat)
        if wh.requires_grad:
            _accumulate(wh, dwh)
        if b.requires_grad:
            _accumulate(b, dz_flat.sum(axis=0))

    return _node(out, (x_seq, wx, wh, b), bw)


_ATTN_CHUNK = 64


def multihead_attention(q, k, v) -> Tensor:
    """Scaled dot-product softmax attention, fused: q, k, v (B, heads, n, d_head).

    Large batches are processed in chunks along B so the (n, n) probability
    blocks stay cache-resident; probabilities are retained per chunk for the
    hand-written backward.
    """
    q, k, v = _lift(q), _lift(k), _lift(v)
    if q.data.shape != k.data.shape or q.data.shape != v.data.shape or q.data.ndim != 4:
        raise ValueError(
            f"multihead_attention: shapes {q.data.shape}, {k.data.shape}, {v.data.shape} "
            "must match and be 4-D")
    B = q.data.shape[0]
    dh = q.data.shape[-1]
    scale = 1.0 / math.sqrt(dh)
    qd = np.ascontiguousarray(q.data)
    kd = np.ascontiguousarray(k.data)
    vd = np.ascontiguousarray(v.data)

    out = np.empty_like(qd)
    probs_chunks: list[np.ndarray] = []
    bounds = list(range(0, B, _ATTN_CHUNK)) + [B]
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        s = np.matmul(qd[lo:hi] * scale, kd[lo:hi].swapaxes(-1, -2))
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        probs_chunks.append(s)
        np.matmul(s, vd[lo:hi], out=out[lo:hi])

    def bw(g):
        g = np.ascontiguousarray(g)
        need_qk = q.requires_grad or k.requires_grad
        gq = np.empty_like(qd) if q.requires_grad else None
        gk = np.empty_like(kd) if k.requires_grad else None
        gv = np.empty_like(vd) if v.requires_grad else None
        for (lo, hi), probs in zip(zip(bounds[:-1], bounds[1:]), probs_chunks):
            gc = g[lo:hi]
            if gv is not None:
                np.matmul(probs.swapaxes(-1, -2), gc, out=gv[lo:hi])
            if need_qk:
                ds = np.matmul(gc, vd[lo:hi].swapaxes(-1, -2))
                ds -= np.einsum("bhij,bhij->bhi", ds, probs)[..., None]
                ds *= probs
                ds *= scale
                if gq is not None:
                    np.matmul(ds, kd[lo:hi], out=gq[lo:hi])
                if gk is not None:
                    np.matmul(ds.swapaxes(-1, -2), qd[lo:hi], out=gk[lo:hi])
        if gq is not None:
            _accumulate(q, gq)
        if gk is not None:
            _accumulate(k, gk)
        if gv is not None:
            _accumulate(v, gv)

    return _node(out, (q, k, v), bw)


# -- finite differences -----------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""
    max_rel_error: float
    n_checked: int
    worst: tuple[str, int] | None = None
    per_param: dict = field(default_factory=dict)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def finite_difference_check(f, theta: Tensor, eps: float = 1e-5,
                            rel_tol: float = 1e-4, max_coords: int | None = None,
                            seed: int = 0) -> GradCheckReport:
    """Compare df/dtheta from backward against central differences.

    ``f`` must be a deterministic scalar function of ``theta``. Coordinates
    whose analytic gradient is below 1e-8 in magnitude are compared
    absolutely. When ``max_coords`` is given, a seeded subset of coordinates
    is probed.
    """
    return gradient_check(f, {"theta": theta}, eps=eps, rel_tol=rel_tol,
                          max_coords=max_coords, seed=seed,
                          _single=theta)


def gradient_check(f, params: dict, eps: float = 1e-5, rel_tol: float = 1e-4,
                   max_coords: int | None = None, seed: int = 0,
                   _single: Tensor | None = None) -> GradCheckReport:
    """Gradient check over a named dict of parameter tensors.

    ``f`` is invoked with no arguments when ``_single`` is None (reading the
    parameters it closes over), else with the single tensor.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"finite_difference_check: eps {eps} outside [1e-7, 1e-3]")

    def run():
        return f(_single) if _single is not None else f()

    for p in params.values():
        p.zero_grad()
    loss = run()
    val = loss.item()
    if not math.isfinite(val):
        raise ValueError("finite_difference_check: function value is not finite")
    loss.backward()

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    worst = None
    n_checked = 0
    per_param = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        p_max = 0.0
        for j in idx:
            orig = flat[j]
            flat[j] = orig + eps
            with no_grad():
                fp = run().item()
            flat[j] = orig - eps
            with no_grad():
                fm = run().item()
            flat[j] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise ValueError("finite_difference_check: non-finite perturbed value")
            numeric = (fp - fm) / (2.0 * eps)
            a = aflat[j]
            if max(abs(a), abs(numeric)) < 1e-8:
                err = abs(a - numeric)
            else:
                err = abs(a - numeric) / max(abs(a), abs(numeric))
            n_checked += 1
            p_max = max(p_max, err)
            if err > max_rel:
                max_rel = err
                worst = (name, int(j))
        per_param[name] = p_max
    return GradCheckReport(max_rel_error=max_rel, n_checked=n_checked,
                           worst=worst, per_param=per_param)
