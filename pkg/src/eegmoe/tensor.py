"""Minimal dense n-d array with reverse-mode differentiation.

Values live in numpy arrays; every differentiable operation records a node on
the active :class:`Tape`, and :func:`backward` replays the tape in reverse
creation order (creation order is already topological, so no graph search is
needed and deep chains cannot hit the recursion limit).

Conventions:
  * broadcasting follows numpy's trailing-axis alignment, nothing more
  * GELU uses the tanh approximation (the finite-difference oracle in the
    tests evaluates the same formula)
  * a tape and its tensors belong to one worker; parameters (leaf tensors)
    outlive tapes and accumulate gradients until ``zero_grad``

Typical use::

    with tape():
        y = matmul(x, w)
        loss = mean(square(sub(y, target)))
        backward(loss)
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
DIV_EPS = 1e-12

# When True, div() raises on divisor magnitudes below DIV_EPS instead of
# producing huge values silently.
STRICT_DIV = False


class TapeError(RuntimeError):
    pass


class Tape:
    """Ordered record of operations; order of creation == topological order."""

    def __init__(self) -> None:
        self.nodes: list[DiffTensor] = []
        self.consumed = False
        self._next_id = 0

    def record(self, node: "DiffTensor") -> None:
        node.node_id = self._next_id
        self._next_id += 1
        node.tape = self
        self.nodes.append(node)


_ACTIVE: Optional[Tape] = None


@contextmanager
def tape():
    """Install a fresh tape for the duration of the block."""
    global _ACTIVE
    prev = _ACTIVE
    _ACTIVE = Tape()
    try:
        yield _ACTIVE
    finally:
        _ACTIVE = prev


def active_tape() -> Optional[Tape]:
    return _ACTIVE


class DiffTensor:
    """A numpy array plus an optional gradient accumulator and tape node."""

    __slots__ = ("values", "grad", "requires_grad", "node_id", "tape",
                 "_parents", "_backward", "name")

    def __init__(self, values, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(values)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.values = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.tape: Optional[Tape] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.values.copy())

    def __repr__(self):
        tag = ", param" if self.requires_grad and self._backward is None else ""
        return f"DiffTensor(shape={self.values.shape}, dtype={self.values.dtype}{tag})"

    # operator sugar; the named functions below do the work
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(values, name: str = "") -> DiffTensor:
    """Leaf tensor that receives gradients and survives tape resets."""
    return DiffTensor(values, requires_grad=True, name=name)


def constant(values) -> DiffTensor:
    return DiffTensor(values)


def as_tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


def _make(values, parents, backward_rule) -> DiffTensor:
    """Create an op output; record it only when gradients can flow."""
    out = DiffTensor(values)
    needs = _ACTIVE is not None and any(p.requires_grad for p in parents)
    if needs:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_rule
        _ACTIVE.record(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (inverse of trailing-axis broadcasting)."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _coerce(a: DiffTensor, b: DiffTensor):
    """Match a 0-d scalar operand's dtype to the array operand's.

    Keeps float32 graphs in float32 when mixed with float64 scalar
    constants (loss weights and the like).
    """
    if a.dtype != b.dtype:
        if a.values.ndim == 0 and not a.requires_grad:
            a = DiffTensor(a.values.astype(b.dtype))
        elif b.values.ndim == 0 and not b.requires_grad:
            b = DiffTensor(b.values.astype(a.dtype))
    return a, b


def add(a, b) -> DiffTensor:
    a, b = _coerce(as_tensor(a), as_tensor(b))
    out_vals = a.values + b.values

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(out_vals, (a, b), rule)


def sub(a, b) -> DiffTensor:
    a, b = _coerce(as_tensor(a), as_tensor(b))
    out_vals = a.values - b.values

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _make(out_vals, (a, b), rule)


def mul(a, b) -> DiffTensor:
    a, b = _coerce(as_tensor(a), as_tensor(b))
    out_vals = a.values * b.values

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.values, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.values, b.shape))

    return _make(out_vals, (a, b), rule)


def div(a, b) -> DiffTensor:
    a, b = _coerce(as_tensor(a), as_tensor(b))
    if STRICT_DIV and np.any(np.abs(b.values) < DIV_EPS):
        raise FloatingPointError(
            f"div: divisor magnitude below {DIV_EPS} in strict mode")
    out_vals = a.values / b.values

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.values, a.shape))
        if b.requires_grad:
            b.accumulate_grad(
                _unbroadcast(-g * a.values / (b.values * b.values), b.shape))

    return _make(out_vals, (a, b), rule)


def neg(a) -> DiffTensor:
    a = as_tensor(a)

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return _make(-a.values, (a,), rule)


def exp(a) -> DiffTensor:
    a = as_tensor(a)
    out_vals = np.exp(a.values)

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_vals)

    return _make(out_vals, (a,), rule)


def log(a) -> DiffTensor:
    a = as_tensor(a)

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.values)

    return _make(np.log(a.values), (a,), rule)


def sqrt(a) -> DiffTensor:
    a = as_tensor(a)
    out_vals = np.sqrt(a.values)

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(g * 0.5 / out_vals)

    return _make(out_vals, (a,), rule)


def square(a) -> DiffTensor:
    a = as_tensor(a)

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(g * 2.0 * a.values)

    return _make(a.values * a.values, (a,), rule)


def sigmoid(a) -> DiffTensor:
    a = as_tensor(a)
    out_vals = 1.0 / (1.0 + np.exp(-a.values))

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_vals * (1.0 - out_vals))

    return _make(out_vals, (a,), rule)


def tanh(a) -> DiffTensor:
    a = as_tensor(a)
    out_vals = np.tanh(a.values)

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - out_vals * out_vals))

    return _make(out_vals, (a,), rule)


def gelu(a) -> DiffTensor:
    a = as_tensor(a)
    x = a.values
    u = GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out_vals = 0.5 * x * (1.0 + t)

    def rule(g):
        if a.requires_grad:
            du = GELU_C * (1.0 + 3 * 0.044715 * x * x)
            a.accumulate_grad(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _make(out_vals, (a,), rule)


def gelu_scalar(x: float) -> float:
    """Plain-float tanh-approximation GELU, used as a scalar oracle in tests."""
    u = GELU_C * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + math.tanh(u))


_UNARY = {"neg": neg, "exp": exp, "log": log, "sqrt": sqrt, "square": square,
          "sigmoid": sigmoid, "gelu": gelu, "tanh": tanh}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a, b=None) -> DiffTensor:
    """Dispatch by name; binary kinds require b, unary kinds forbid it."""
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} is binary, second operand required")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        if b is not None:
            raise ValueError(f"{op_kind} is unary")
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape) -> DiffTensor:
    a = as_tensor(a)
    old = a.shape

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(old))

    return _make(a.values.reshape(shape), (a,), rule)


def transpose(a, axes) -> DiffTensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inv))

    return _make(a.values.transpose(axes), (a,), rule)


def concat(parts: Sequence, axis: int) -> DiffTensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    out_vals = np.concatenate([p.values for p in parts], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        chunks = np.split(g, splits, axis=axis)
        for p, c in zip(parts, chunks):
            if p.requires_grad:
                p.accumulate_grad(c)

    return _make(out_vals, tuple(parts), rule)


def narrow(a, axis: int, start: int, length: int) -> DiffTensor:
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def rule(g):
        if a.requires_grad:
            buf = np.zeros_like(a.values)
            buf[idx] = g
            a.accumulate_grad(buf)

    return _make(a.values[idx].copy(), (a,), rule)


def pad1d(a, left: int, right: int) -> DiffTensor:
    """Zero padding on the last axis (possibly asymmetric)."""
    a = as_tensor(a)
    width = [(0, 0)] * (a.ndim - 1) + [(left, right)]
    n = a.shape[-1]

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(g[..., left:left + n])

    return _make(np.pad(a.values, width), (a,), rule)


def reflect_pad1d(a, pad: int) -> DiffTensor:
    """Reflect padding on the last axis (no edge repeat)."""
    a = as_tensor(a)
    n = a.shape[-1]
    if pad >= n:
        raise ValueError("reflect padding must be shorter than the signal")
    src = np.concatenate([np.arange(pad, 0, -1),
                          np.arange(n),
                          np.arange(n - 2, n - 2 - pad, -1)])

    def rule(g):
        if a.requires_grad:
            buf = np.zeros_like(a.values)
            np.add.at(buf.reshape(-1, n), (slice(None), src),
                      g.reshape(-1, g.shape[-1]))
            a.accumulate_grad(buf)

    return _make(a.values[..., src], (a,), rule)


def repeat_interleave(a, factor: int) -> DiffTensor:
    """Nearest-neighbour upsampling of the last axis by an integer factor."""
    a = as_tensor(a)

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(*a.shape, factor).sum(axis=-1))

    return _make(np.repeat(a.values, factor, axis=-1), (a,), rule)


def linear_resample(a, new_length: int) -> DiffTensor:
    """Linear-interpolation resampling of the last axis, endpoint to endpoint."""
    a = as_tensor(a)
    n = a.shape[-1]
    if n == 1:
        pos = np.zeros(new_length)
    else:
        pos = np.linspace(0.0, n - 1.0, new_length)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    w = (pos - lo).astype(a.dtype)
    out_vals = a.values[..., lo] * (1.0 - w) + a.values[..., hi] * w

    def rule(g):
        if a.requires_grad:
            buf = np.zeros_like(a.values)
            flat = buf.reshape(-1, n)
            gflat = g.reshape(-1, new_length)
            np.add.at(flat, (slice(None), lo), gflat * (1.0 - w))
            np.add.at(flat, (slice(None), hi), gflat * w)
            a.accumulate_grad(buf)

    return _make(out_vals, (a,), rule)


# ---------------------------------------------------------------------------
# reductions and normalization
# ---------------------------------------------------------------------------

def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % ndim for ax in axes)


def reduce_sum(a, axes=None, keepdims: bool = False) -> DiffTensor:
    a = as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    out_vals = a.values.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if a.requires_grad:
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axes)
            a.accumulate_grad(np.broadcast_to(gg, a.shape).copy())

    return _make(out_vals, (a,), rule)


def reduce_mean(a, axes=None, keepdims: bool = False) -> DiffTensor:
    a = as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out_vals = a.values.mean(axis=axes, keepdims=keepdims)

    def rule(g):
        if a.requires_grad:
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axes)
            a.accumulate_grad(np.broadcast_to(gg, a.shape) / count)

    return _make(out_vals, (a,), rule)


def reduce(op_kind: str, a, axes=None, keepdims: bool = False) -> DiffTensor:
    if op_kind == "sum":
        return reduce_sum(a, axes, keepdims)
    if op_kind == "mean":
        return reduce_mean(a, axes, keepdims)
    raise ValueError(f"unknown reduce op {op_kind!r}")


def softmax(a, axis: int = -1) -> DiffTensor:
    a = as_tensor(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_vals = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        if a.requires_grad:
            dot = (g * out_vals).sum(axis=axis, keepdims=True)
            a.accumulate_grad(out_vals * (g - dot))

    return _make(out_vals, (a,), rule)


def layernorm(a, gamma, beta, eps: float = 1e-5) -> DiffTensor:
    """Normalize the last axis; gamma/beta are 1-d of that axis length."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    n = a.shape[-1]
    mu = a.values.mean(axis=-1, keepdims=True)
    xc = a.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_vals = xhat * gamma.values + beta.values

    def rule(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate_grad(g.reshape(-1, n).sum(axis=0))
        if a.requires_grad:
            gx = g * gamma.values
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            a.accumulate_grad(inv * (gx - m1 - xhat * m2))

    return _make(out_vals, (a, gamma, beta), rule)


# ---------------------------------------------------------------------------
# matmul and conv
# ---------------------------------------------------------------------------

def matmul(a, b) -> DiffTensor:
    """Matrix product; either side may carry stacked leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul: inner dims {a.shape} @ {b.shape}")
    out_vals = np.matmul(a.values, b.values)

    def rule(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return _make(out_vals, (a, b), rule)


def conv_out_length(length: int, kernel: int, stride: int, dilation: int,
                    pad_total: int) -> int:
    return (length + pad_total - dilation * (kernel - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kernel: int, stride: int, dilation: int,
            out_len: int) -> np.ndarray:
    """(B, C, Lp) -> (B, out_len, C*kernel) patch matrix."""
    b, c, lp = xp.shape
    sb, sc, sl = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(b, c, out_len, kernel),
        strides=(sb, sc, sl * stride, sl * dilation), writeable=False)
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(
        b, out_len, c * kernel)


def conv1d(x, w, bias=None, stride: int = 1, dilation: int = 1,
           padding=0) -> DiffTensor:
    """Cross-correlation over the last axis.

    x: (B, C_in, L); w: (C_out, C_in, k); padding is an int (symmetric) or a
    (left, right) pair of zero-padding widths.
    """
    x, w = as_tensor(x), as_tensor(w)
    if isinstance(padding, tuple):
        pl, pr = padding
    else:
        pl = pr = int(padding)
    bdim, cin, length = x.shape
    cout, cin_w, k = w.shape
    if cin != cin_w:
        raise ValueError(f"conv1d: {cin} input channels vs kernel {cin_w}")
    out_len = conv_out_length(length, k, stride, dilation, pl + pr)
    if out_len < 1:
        raise ValueError(
            f"conv1d: output length {out_len} < 1 for L={length}, k={k}, "
            f"stride={stride}, dilation={dilation}, pad=({pl},{pr})")

    xp = np.pad(x.values, ((0, 0), (0, 0), (pl, pr)))
    col = _im2col(xp, k, stride, dilation, out_len)       # (B, L', C*k)
    wmat = w.values.reshape(cout, cin * k)
    out_vals = np.matmul(col, wmat.T).transpose(0, 2, 1)  # (B, C_out, L')
    if bias is not None:
        bias = as_tensor(bias)
        out_vals = out_vals + bias.values[:, None]
    parents = (x, w) if bias is None else (x, w, bias)

    def rule(g):
        gmat = g.transpose(0, 2, 1)                        # (B, L', C_out)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2)))
        if w.requires_grad:
            gw = np.tensordot(gmat, col, axes=((0, 1), (0, 1)))
            w.accumulate_grad(gw.reshape(cout, cin, k))
        if x.requires_grad:
            gcol = np.matmul(gmat, wmat)                   # (B, L', C*k)
            gcol = gcol.reshape(bdim, out_len, cin, k)
            gxp = np.zeros_like(xp)
            for j in range(k):
                start = j * dilation
                gxp[:, :, start:start + out_len * stride:stride] += \
                    gcol[:, :, :, j].transpose(0, 2, 1)
            end = xp.shape[-1] - pr
            x.accumulate_grad(gxp[:, :, pl:end])

    return _make(out_vals, parents, rule)


# ---------------------------------------------------------------------------
# attention with rotary positions
# ---------------------------------------------------------------------------

def rope_tables(positions: np.ndarray, head_dim: int, base: float,
                dtype=np.float64):
    """cos/sin tables of shape (S, head_dim/2) for the given token positions."""
    if head_dim % 2:
        raise ValueError("RoPE needs an even per-head dimension")
    half = head_dim // 2
    freqs = base ** (-np.arange(half) * 2.0 / head_dim)
    ang = positions[:, None] * freqs[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rope_rotate(x: DiffTensor, cos: np.ndarray, sin: np.ndarray) -> DiffTensor:
    """Rotate dimension pairs of (..., S, d) by per-position angles."""
    d = x.shape[-1]
    pairs = reshape(x, x.shape[:-1] + (d // 2, 2))
    even = narrow(pairs, -1, 0, 1)
    odd = narrow(pairs, -1, 1, 1)
    c = constant(cos[..., None])
    s = constant(sin[..., None])
    rot_even = sub(mul(even, c), mul(odd, s))
    rot_odd = add(mul(even, s), mul(odd, c))
    out = concat([rot_even, rot_odd], axis=-1)
    return reshape(out, x.shape)


def attention(q, k, v, heads: int, rope_base: float = 10000.0,
              positions: Optional[np.ndarray] = None,
              use_rope: bool = True) -> DiffTensor:
    """softmax(QK^T / sqrt(d_h)) V with rotary rotation of q and k.

    q, k, v: (S, D) or (B, S, D). ``positions`` gives each token's rotary
    position index (default 0..S-1); rotation is skipped entirely when
    ``use_rope`` is False.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (reshape(t, (1,) + t.shape) for t in (q, k, v))
    b, s, d = q.shape
    if d % heads:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads
    if positions is None:
        positions = np.arange(s, dtype=np.float64)

    def split_heads(t):
        t = reshape(t, (b, s, heads, dh))
        return transpose(t, (0, 2, 1, 3))        # (B, H, S, dh)

    qh, kh, vh = split_heads(q), split_heads(k), split_heads(v)
    if use_rope:
        cos, sin = rope_tables(np.asarray(positions, dtype=np.float64), dh,
                               rope_base, dtype=q.dtype)
        qh = _rope_rotate(qh, cos, sin)
        kh = _rope_rotate(kh, cos, sin)
    scores = matmul(qh, transpose(kh, (0, 1, 3, 2)))
    scores = mul(scores, constant(np.asarray(1.0 / math.sqrt(dh), dtype=q.dtype)))
    attn = softmax(scores, axis=-1)
    out = matmul(attn, vh)                        # (B, H, S, dh)
    out = reshape(transpose(out, (0, 2, 1, 3)), (b, s, d))
    if squeeze:
        out = reshape(out, (s, d))
    return out


def dropout(a, p: float, rng: np.random.Generator,
            training: bool = True) -> DiffTensor:
    """Inverted dropout; identity when not training or p == 0."""
    a = as_tensor(a)
    if not training or p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return mul(a, constant(keep))


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(loss: DiffTensor) -> None:
    """Populate gradients of everything reachable from a scalar loss."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar, got shape {loss.shape}")
    t = loss.tape
    if t is None:
        if loss._backward is None:
            return  # constant loss: nothing upstream
        raise TapeError("loss is not attached to a tape")
    if t.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    t.consumed = True
    loss.accumulate_grad(np.ones_like(loss.values))
    for node in reversed(t.nodes):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)
        # intermediate grads are dead after their rule has fired
        if node is not loss:
            node.grad = None


def grad_check(f: Callable[[DiffTensor], DiffTensor], x: DiffTensor,
               step: float = 1e-5, max_entries: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar DiffTensor and must be deterministic.
    With ``max_entries`` set, a seeded random subset of coordinates is
    probed (needed for large parameter vectors); otherwise every coordinate
    is checked. Errors are normalized by the overall gradient scale.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    with tape():
        xt = parameter(x.values.copy())
        out = f(xt)
        backward(out)
        analytic = (xt.grad if xt.grad is not None
                    else np.zeros_like(xt.values)).copy()

    flat = x.values.reshape(-1).copy()
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(flat.size, size=max_entries, replace=False)

    fd = np.zeros(idx.size)
    for j, i in enumerate(idx):
        orig = flat[i]
        for sgn, slot in ((+1, 0), (-1, 1)):
            flat[i] = orig + sgn * step
            probe = DiffTensor(flat.reshape(x.shape))
            val = float(f(probe).values)
            if slot == 0:
                hi = val
            else:
                lo = val
        flat[i] = orig
        fd[j] = (hi - lo) / (2.0 * step)

    ana = analytic.reshape(-1)[idx]
    scale = max(np.max(np.abs(ana), initial=0.0),
                np.max(np.abs(fd), initial=0.0), 1e-8)
    return float(np.max(np.abs(ana - fd), initial=0.0) / scale)


def global_grad_norm(params: Sequence[DiffTensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def clip_grad_norm(params: Sequence[DiffTensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm
