"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the primitives the recognizer needs are implemented: affine algebra,
pointwise nonlinearities, softmax/log-softmax, concat/slice bookkeeping,
sequence LSTM, temporal maxpool, embedding lookup, dropout, and the
monotonic-alignment recurrence used by the chunkwise attention decoder.
Training runs in float32; gradient checking runs the same graph in
float64.

Gradients accumulate into ``Tensor.grad``. Inference code wraps calls in
``no_grad()`` so no graph is recorded.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus an optional backward edge into the graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data: np.ndarray,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    """Create a leaf tensor (copies the input)."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def constant(data) -> Tensor:
    """Wrap an existing array as a non-trainable leaf (no copy)."""
    return Tensor(np.asarray(data))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not _grad_enabled:
        return Tensor(data)
    needs = tuple(p for p in parents)
    if not any(p.requires_grad or p._parents for p in needs):
        return Tensor(data)
    return Tensor(data, parents=needs, backward=backward)


def backward(out: Tensor, seed: np.ndarray | None = None) -> None:
    """Run reverse-mode accumulation from `out` (a scalar unless seeded)."""
    if seed is None:
        if out.data.size != 1:
            raise ValueError("backward() needs a scalar output or an explicit seed gradient")
        seed = np.ones_like(out.data)
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(out): np.array(seed, dtype=out.data.dtype)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.accumulate_grad(g)
        if node._backward is not None:
            for parent, pg in node._backward(g):
                if parent.requires_grad or parent._parents:
                    prev = grads.get(id(parent))
                    if prev is None:
                        # private copy: backward fns may hand the same array
                        # (or views of it) to several parents
                        grads[id(parent)] = np.array(pg)
                    else:
                        prev += pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))

    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return _make(out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bwd(g):
        return (
            (a, _unbroadcast(g / b.data, a.data.shape)),
            (b, _unbroadcast(-g * out / b.data, b.data.shape)),
        )

    return _make(out, (a, b), bwd)


def scale(a: Tensor, k: float) -> Tensor:
    out = a.data * a.data.dtype.type(k)

    def bwd(g):
        return ((a, g * a.data.dtype.type(k)),)

    return _make(out, (a,), bwd)


def add_const(a: Tensor, c) -> Tensor:
    out = a.data + np.asarray(c, dtype=a.data.dtype)

    def bwd(g):
        return ((a, _unbroadcast(g, a.data.shape)),)

    return _make(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data

    def bwd(g):
        if a.data.ndim == 1 and b.data.ndim == 2:
            ga = g @ b.data.T
            gb = np.outer(a.data, g)
        elif a.data.ndim == 2 and b.data.ndim == 2:
            ga = g @ b.data.T
            gb = a.data.T @ g
        elif a.data.ndim == 2 and b.data.ndim == 1:
            ga = np.outer(g, b.data)
            gb = a.data.T @ g
        elif a.data.ndim == 1 and b.data.ndim == 1:
            ga = g * b.data
            gb = g * a.data
        else:  # pragma: no cover
            raise ValueError(f"unsupported matmul ranks {a.data.ndim}x{b.data.ndim}")
        return ((a, ga), (b, gb))

    return _make(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# pointwise


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)

    def bwd(g):
        return ((a, g * out * (1.0 - out)),)

    return _make(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        return ((a, g * (1.0 - out * out)),)

    return _make(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return ((a, g * out),)

    return _make(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bwd(g):
        return ((a, g / a.data),)

    return _make(out, (a,), bwd)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # stable in both tails; keeps the input dtype
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# reductions / shape


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g):
        return ((a, np.broadcast_to(g, a.data.shape)),)

    return _make(out, (a,), bwd)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    out = a.data.sum(axis=axis)

    def bwd(g):
        return ((a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape)),)

    return _make(out, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def bwd(g):
        return ((a, np.broadcast_to(g / a.data.dtype.type(n), a.data.shape)),)

    return _make(out, (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g):
        grads = []
        start = 0
        for p, s in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + s)
            grads.append((p, g[tuple(sl)]))
            start += s
        return tuple(grads)

    return _make(out, tuple(parts), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = a.data[sl]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return ((a, full),)

    return _make(out, (a,), bwd)


def take_row(a: Tensor, index: int) -> Tensor:
    out = a.data[index]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return ((a, full),)

    return _make(out, (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        return ((a, g.reshape(a.data.shape)),)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# softmax family


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((a, out * (g - dot)),)

    return _make(out, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g):
        p = np.exp(out)
        return ((a, g - p * g.sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# network building blocks


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with bias broadcast over leading rows."""
    return add(matmul(x, w), b)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)
    out = table.data[idx]

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return ((table, full),)

    return _make(out, (table,), bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    factor = x.data.dtype.type(1.0 / (1.0 - rate))
    mask = keep * factor
    out = x.data * mask

    def bwd(g):
        return ((x, g * mask),)

    return _make(out, (x,), bwd)


def maxpool_time(x: Tensor, factor: int) -> Tensor:
    """Max over non-overlapping windows of `factor` frames; last window may be partial.

    The subgradient routes to the first argmax element of each window.
    """
    if factor < 1:
        raise ValueError(f"pool factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    t, d = x.data.shape
    t_out = -(-t // factor)
    out = np.empty((t_out, d), dtype=x.data.dtype)
    argmax = np.empty((t_out, d), dtype=np.int64)
    for w in range(t_out):
        lo = w * factor
        hi = min(lo + factor, t)
        seg = x.data[lo:hi]
        idx = seg.argmax(axis=0)
        argmax[w] = lo + idx
        out[w] = seg[idx, np.arange(d)]

    def bwd(g):
        full = np.zeros_like(x.data)
        cols = np.arange(d)
        for w in range(t_out):
            full[argmax[w], cols] += g[w]
        return ((x, full),)

    return _make(out, (x,), bwd)


def lstm(
    x: Tensor,
    wx: Tensor,
    wh: Tensor,
    b: Tensor,
    h0: np.ndarray | None = None,
    c0: np.ndarray | None = None,
    reverse: bool = False,
) -> tuple[Tensor, Tensor, Tensor]:
    """Run a full LSTM pass over a (T, d_in) sequence.

    Gate layout along the 4H axis is (input, forget, candidate, output).
    Returns (outputs (T, H), final h, final c); `reverse=True` consumes the
    sequence right-to-left while keeping outputs aligned with the input.
    """
    t_len, _ = x.data.shape
    hidden = wh.data.shape[0]
    dtype = x.data.dtype
    if h0 is None:
        h0 = np.zeros(hidden, dtype=dtype)
    if c0 is None:
        c0 = np.zeros(hidden, dtype=dtype)
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)

    xp = x.data @ wx.data + b.data
    hs = np.empty((t_len, hidden), dtype=dtype)
    gates = np.empty((t_len, 4 * hidden), dtype=dtype)
    cs = np.empty((t_len, hidden), dtype=dtype)
    tcs = np.empty((t_len, hidden), dtype=dtype)
    h, c = h0, c0
    whd = wh.data
    for t in order:
        z = xp[t] + h @ whd
        i = _sigmoid_np(z[:hidden])
        f = _sigmoid_np(z[hidden : 2 * hidden])
        g_ = np.tanh(z[2 * hidden : 3 * hidden])
        o = _sigmoid_np(z[3 * hidden :])
        c = f * c + i * g_
        tc = np.tanh(c)
        h = o * tc
        gates[t, :hidden] = i
        gates[t, hidden : 2 * hidden] = f
        gates[t, 2 * hidden : 3 * hidden] = g_
        gates[t, 3 * hidden :] = o
        cs[t] = c
        tcs[t] = tc
        hs[t] = h
    final_h, final_c = h.copy(), c.copy()

    steps = list(order)

    def bwd_full(dhs: np.ndarray, dh_last: np.ndarray, dc_last: np.ndarray):
        dz_all = np.zeros((t_len, 4 * hidden), dtype=dtype)
        dh_next = dh_last.astype(dtype, copy=True)
        dc_next = dc_last.astype(dtype, copy=True)
        for pos in range(t_len - 1, -1, -1):
            t = steps[pos]
            i = gates[t, :hidden]
            f = gates[t, hidden : 2 * hidden]
            g_ = gates[t, 2 * hidden : 3 * hidden]
            o = gates[t, 3 * hidden :]
            tc = tcs[t]
            c_prev = cs[steps[pos - 1]] if pos > 0 else c0
            dh = dhs[t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            do = dh * tc
            di = dc * g_
            df = dc * c_prev
            dg = dc * i
            dz = dz_all[t]
            dz[:hidden] = di * i * (1.0 - i)
            dz[hidden : 2 * hidden] = df * f * (1.0 - f)
            dz[2 * hidden : 3 * hidden] = dg * (1.0 - g_ * g_)
            dz[3 * hidden :] = do * o * (1.0 - o)
            dh_next = dz @ whd.T
            dc_next = dc * f
        h_prev = np.empty((t_len, hidden), dtype=dtype)
        for pos, t in enumerate(steps):
            h_prev[t] = hs[steps[pos - 1]] if pos > 0 else h0
        dwx = x.data.T @ dz_all
        dwh = h_prev.T @ dz_all
        db = dz_all.sum(axis=0)
        dx = dz_all @ wx.data.T
        return dx, dwx, dwh, db

    def bwd_hs(g):
        dx, dwx, dwh, db = bwd_full(g, np.zeros(hidden, dtype=dtype), np.zeros(hidden, dtype=dtype))
        return ((x, dx), (wx, dwx), (wh, dwh), (b, db))

    def bwd_h(g):
        dx, dwx, dwh, db = bwd_full(
            np.zeros((t_len, hidden), dtype=dtype), g, np.zeros(hidden, dtype=dtype)
        )
        return ((x, dx), (wx, dwx), (wh, dwh), (b, db))

    def bwd_c(g):
        dx, dwx, dwh, db = bwd_full(
            np.zeros((t_len, hidden), dtype=dtype), np.zeros(hidden, dtype=dtype), g
        )
        return ((x, dx), (wx, dwx), (wh, dwh), (b, db))

    if t_len == 0:
        empty = Tensor(np.zeros((0, hidden), dtype=dtype))
        return empty, Tensor(h0.copy()), Tensor(c0.copy())
    parents = (x, wx, wh, b)
    return (
        _make(hs, parents, bwd_hs),
        _make(final_h, parents, bwd_h),
        _make(final_c, parents, bwd_c),
    )


def lstm_step(
    x_t: np.ndarray,
    wx: np.ndarray,
    wh: np.ndarray,
    b: np.ndarray,
    h: np.ndarray,
    c: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """One inference-only LSTM step on raw arrays (used by beam decoding)."""
    hidden = wh.shape[0]
    z = x_t @ wx + h @ wh + b
    i = _sigmoid_np(z[:hidden])
    f = _sigmoid_np(z[hidden : 2 * hidden])
    g_ = np.tanh(z[2 * hidden : 3 * hidden])
    o = _sigmoid_np(z[3 * hidden :])
    c_new = f * c + i * g_
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def monotonic_alignment(p: Tensor, inflow: Tensor) -> Tensor:
    """Expected monotonic selection distribution.

    ``inflow[j]`` is the probability mass arriving at frame j from the
    previous output step's alignment (shifted one frame forward, so each
    step advances at least one frame). The stable recurrence is

        q[0] = inflow[0]
        q[j] = (1 - p[j-1]) * q[j-1] + inflow[j]
        alpha[j] = p[j] * q[j]
    """
    n = p.data.shape[0]
    q = np.empty(n, dtype=p.data.dtype)
    acc = 0.0
    pd = p.data
    fl = inflow.data
    for j in range(n):
        acc = (1.0 - pd[j - 1]) * acc + fl[j] if j else fl[0]
        q[j] = acc
    alpha = pd * q

    def bwd(g):
        dq_next = 0.0
        dp = np.empty_like(pd)
        dinflow = np.empty_like(q)
        for j in range(n - 1, -1, -1):
            dq = g[j] * pd[j] + (1.0 - pd[j]) * dq_next if j < n - 1 else g[j] * pd[j]
            dp[j] = g[j] * q[j]
            if j < n - 1:
                dp[j] -= q[j] * dq_next
            dinflow[j] = dq
            dq_next = dq
        return ((p, dp), (inflow, dinflow))

    return _make(alpha, (p, inflow), bwd)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    op_closure: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords_per_tensor: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central finite differences.

    `op_closure` must rebuild the graph from `params` and return a scalar.
    Every coordinate is checked unless `max_coords_per_tensor` caps it, in
    which case a seeded sample of coordinates is used. Returns the maximum
    relative error across all checked coordinates.
    """
    out = op_closure()
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued closure")
    for p in params:
        p.zero_grad()
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_tensor is not None and n > max_coords_per_tensor:
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        else:
            coords = range(n)
        for k in coords:
            orig = flat[k]
            with no_grad():
                flat[k] = orig + eps
                f_plus = float(op_closure().data)
                flat[k] = orig - eps
                f_minus = float(op_closure().data)
            flat[k] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            a = float(ana.reshape(-1)[k])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            if rel > worst:
                worst = rel
    return worst


def global_grad_norm(tensors: Sequence[Tensor]) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    return math.sqrt(total)
