"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every primitive applied while it is active::

    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
    grads = backward(tape, loss)

Outside an active tape primitives still compute values but record nothing,
which is how inference and measurement passes run.

Broadcasting is deliberately narrow: a binary op accepts a second operand
whose shape equals the first's or is a trailing suffix of it (bias-style,
repeated over leading axes). Anything else is a shape error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> None:
    # one reduction instead of np.isfinite(arr).all(); an overflowing sum of
    # finite values is also reported, which only happens on divergence anyway
    if arr.size and not math.isfinite(arr.sum()):
        raise NonFiniteError(f"{what}: non-finite values")


class Tensor:
    """A real array plus an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction.
    """

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False
    _open: bool = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed")
        self._open = True
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        self._open = False
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


_TAPES: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class no_grad:
    """Suspend recording on every open tape."""

    def __enter__(self):
        self._saved = list(_TAPES)
        _TAPES.clear()

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)


# ---------------------------------------------------------------------------
# primitive registry

# each primitive: fn(*arrays, **attrs) -> (out_array, backward(g) -> tuple of grads)
PRIMITIVES: dict[str, Callable] = {}


def primitive(name: str, skips_unneeded: bool = False, keeps_finite: bool = False):
    """Register a primitive.

    With ``skips_unneeded`` the function receives a ``needs`` tuple and may
    return None for inputs that need no gradient. ``keeps_finite`` marks ops
    whose output is finite whenever the inputs are (data movement, relu,
    softmax, convex combinations); their outputs are not rescanned.
    """

    def deco(fn):
        fn.skips_unneeded = skips_unneeded
        fn.keeps_finite = keeps_finite
        PRIMITIVES[name] = fn
        return fn

    return deco


def apply_primitive(tape: Tape | None, op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run primitive ``op`` and, if ``tape`` is given and any input needs a
    gradient, append the application to it."""
    fn = PRIMITIVES.get(op)
    if fn is None:
        raise KeyError(f"unknown primitive {op!r}")
    inputs = tuple(x if isinstance(x, Tensor) else Tensor(x) for x in inputs)
    record = tape is not None and any(x.requires_grad for x in inputs)
    if getattr(fn, "skips_unneeded", False):
        attrs["needs"] = tuple(record and x.requires_grad for x in inputs)
    out_arr, bwd = fn(*(x.data for x in inputs), **attrs)
    if not getattr(fn, "keeps_finite", False):
        _check_finite(out_arr, op)
    if record and not tape._open:
        raise TapeError("tape is closed")
    out = Tensor._wrap(out_arr, record)
    if record:
        tape.nodes.append(Node(op, inputs, out, bwd))
    return out


def backward(tape: Tape, root: Tensor, params: Sequence[Tensor] = ()) -> dict[int, np.ndarray]:
    """Reverse sweep over ``tape`` from scalar ``root``.

    Returns a map ``id(leaf) -> gradient`` for every gradient-requiring leaf
    reached, and also stores each gradient on ``leaf.grad``. Tensors in
    ``params`` that were not reached get a zero gradient.
    """
    if tape.consumed:
        raise TapeError("tape already consumed")
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    produced = set()
    for node in tape.nodes:
        produced.add(id(node.output))
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for x, gx in zip(node.inputs, in_grads):
            if gx is None or not x.requires_grad:
                continue
            key = id(x)
            if key not in produced:
                leaves[key] = x
            prev = grads.get(key)
            if prev is None:
                grads[key] = gx
            else:
                grads[key] = prev + gx
    result: dict[int, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=leaf.data.dtype).reshape(leaf.shape)
        leaf.grad = g
        result[key] = g
    if id(root) not in produced and root.requires_grad:
        root.grad = np.ones_like(root.data)
        result[id(root)] = root.grad
    for p in params:
        if id(p) not in result:
            p.grad = np.zeros_like(p.data)
            result[id(p)] = p.grad
    return result


# ---------------------------------------------------------------------------
# shape helpers


def _suffix_ok(a_shape, b_shape) -> bool:
    return len(b_shape) <= len(a_shape) and tuple(a_shape[len(a_shape) - len(b_shape):]) == tuple(b_shape)


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0) if lead else g


def _binary_check(op, a, b):
    if a.shape != b.shape and not _suffix_ok(a.shape, b.shape):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


@primitive("add", skips_unneeded=True)
def _add(a, b, *, needs=(True, True)):
    _binary_check("add", a, b)
    return a + b, lambda g: (g, _reduce_to(g, b.shape) if needs[1] else None)


@primitive("sub")
def _sub(a, b):
    _binary_check("sub", a, b)
    return a - b, lambda g: (g, -_reduce_to(g, b.shape))


@primitive("mul")
def _mul(a, b):
    _binary_check("mul", a, b)
    return a * b, lambda g: (g * b, _reduce_to(g * a, b.shape))


@primitive("div")
def _div(a, b):
    _binary_check("div", a, b)
    out = a / b
    return out, lambda g: (g / b, _reduce_to(-g * out / b, b.shape))


@primitive("scale")
def _scale(a, *, c):
    return a * c, lambda g: (g * c,)


@primitive("add_scalar")
def _add_scalar(a, *, c):
    return a + c, lambda g: (g,)


@primitive("exp")
def _exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


@primitive("log")
def _log(a):
    if np.any(a <= 0):
        raise NonFiniteError("log: non-positive input")
    return np.log(a), lambda g: (g / a,)


@primitive("relu", keeps_finite=True)
def _relu(a):
    pos = a > 0
    return a * pos, lambda g: (g * pos,)


@primitive("expand_last", keeps_finite=True)
def _expand_last(a, *, n):
    """Repeat ``a`` along a new trailing axis of length ``n``."""
    out = np.repeat(a[..., None], n, axis=-1)
    return out, lambda g: (g.sum(axis=-1),)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    return axis % ndim


@primitive("sum")
def _sum(a, *, axis=None):
    if axis is None:
        return np.asarray(a.sum()), lambda g: (np.broadcast_to(g, a.shape).copy(),)
    ax = _norm_axis(axis, a.ndim)
    return a.sum(axis=ax), lambda g: (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),)


@primitive("mean")
def _mean(a, *, axis=None, weights=None):
    """Mean, optionally weighted by a constant array with the shape of ``a``
    up to ``axis`` (weights are normalised along ``axis``)."""
    if axis is None:
        n = a.size
        return np.asarray(a.mean()), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),)
    ax = _norm_axis(axis, a.ndim)
    if weights is None:
        n = a.shape[ax]
        return a.mean(axis=ax), lambda g: (np.broadcast_to(np.expand_dims(g, ax) / n, a.shape).copy(),)
    w = np.asarray(weights, dtype=a.dtype)
    w = w / w.sum(axis=-1, keepdims=True)
    if ax != w.ndim - 1:
        raise ShapeError(f"mean: weights of shape {w.shape} must end at axis {ax} of {a.shape}")
    wb = w.reshape(w.shape + (1,) * (a.ndim - w.ndim))
    out = (a * wb).sum(axis=ax)
    return out, lambda g: (np.expand_dims(g, ax) * wb,)


@primitive("l2norm")
def _l2norm(a, *, axis=-1):
    ax = _norm_axis(axis, a.ndim)
    n = np.sqrt((a * a).sum(axis=ax))
    if np.any(n == 0):
        raise NonFiniteError("l2norm: zero vector has no gradient")
    return n, lambda g: (a * np.expand_dims(g / n, ax),)


@primitive("l2_normalize")
def _l2_normalize(a, *, eps=0.0):
    n = np.sqrt((a * a).sum(axis=-1, keepdims=True) + eps)
    if np.any(n == 0):
        raise NonFiniteError("l2_normalize: zero vector")
    y = a / n

    def bwd(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return y, bwd


@primitive("logsumexp")
def _logsumexp(a, *, axis=-1, where=None):
    ax = _norm_axis(axis, a.ndim)
    if where is not None:
        where = np.broadcast_to(where, a.shape)
        if not np.all(where.any(axis=ax)):
            raise ShapeError("logsumexp: a row has no selected entries")
        masked = np.where(where, a, -np.inf)
    else:
        masked = a
    m = masked.max(axis=ax, keepdims=True)
    e = np.exp(masked - m)
    s = e.sum(axis=ax, keepdims=True)
    out = (np.log(s) + m).squeeze(ax)
    p = e / s

    def bwd(g):
        return (np.expand_dims(g, ax) * p,)

    return out, bwd


@primitive("softmax", keeps_finite=True)
def _softmax(a, *, axis=-1, where=None, scale=1.0):
    """softmax(scale * a) along ``axis``; ``where`` excludes entries (they get 0)."""
    ax = _norm_axis(axis, a.ndim)
    if scale <= 0:
        raise ValueError("softmax scale must be positive")
    if where is None and ax == a.ndim - 1:
        D = a.shape[-1]
        y = kernels.softmax_forward(a.reshape(-1, D), scale).reshape(a.shape)
        return y, lambda g: (kernels.softmax_backward(g.reshape(-1, D), y.reshape(-1, D), scale).reshape(a.shape),)
    if scale != 1.0:
        y, inner = _softmax(a * a.dtype.type(scale), axis=axis, where=where)
        return y, lambda g: (inner(g)[0] * a.dtype.type(scale),)
    if where is not None:
        where = np.broadcast_to(where, a.shape)
        masked = np.where(where, a, -np.inf)
    else:
        masked = a
    m = masked.max(axis=ax, keepdims=True)
    e = np.exp(masked - m)
    y = e / e.sum(axis=ax, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return y, bwd


@primitive("log_softmax")
def _log_softmax(a, *, axis=-1):
    ax = _norm_axis(axis, a.ndim)
    m = a.max(axis=ax, keepdims=True)
    sh = a - m
    lse = np.log(np.exp(sh).sum(axis=ax, keepdims=True))
    out = sh - lse
    p = np.exp(out)

    def bwd(g):
        return (g - p * g.sum(axis=ax, keepdims=True),)

    return out, bwd


@primitive("layer_norm")
def _layer_norm(x, gamma, beta, *, eps=1e-5):
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layer_norm: incompatible shapes {x.shape} and {gamma.shape}")
    x2 = x.reshape(-1, D)
    y, xhat, rstd = kernels.layernorm_forward(x2, gamma, beta, eps)

    def bwd(g):
        dx, dgamma, dbeta = kernels.layernorm_backward(g.reshape(-1, D), xhat, rstd, gamma)
        return dx.reshape(x.shape), dgamma, dbeta

    return y.reshape(x.shape), bwd


# ---------------------------------------------------------------------------
# linear algebra / structure


@primitive("matmul", skips_unneeded=True)
def _matmul(a, b, *, needs=(True, True)):
    if b.ndim == 2 and a.ndim >= 2:
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        # one GEMM over all leading axes instead of a batched loop
        a2 = a.reshape(-1, a.shape[-1])
        out = (a2 @ b).reshape(a.shape[:-1] + (b.shape[1],))

        def bwd(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.T).reshape(a.shape) if needs[0] else None
            gb = a2.T @ g2 if needs[1] else None
            return ga, gb

        return out, bwd
    if a.ndim != b.ndim or a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a @ b

    def bwd(g):
        ga = g @ np.swapaxes(b, -1, -2) if needs[0] else None
        gb = np.swapaxes(a, -1, -2) @ g if needs[1] else None
        return ga, gb

    return out, bwd


@primitive("linear", skips_unneeded=True)
def _linear(x, w, b, *, relu=False, needs=(True, True, True)):
    """x @ w + b over the last axis of x, optionally followed by relu.

    w is (d_in, d_out) and b is (d_out,).
    """
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    x2 = x.reshape(-1, w.shape[0])
    out = x2 @ w
    out += b
    if relu:
        np.maximum(out, 0, out=out)

    def bwd(g):
        g2 = g.reshape(-1, w.shape[1])
        if relu:
            g2 = g2 * (out > 0)
        gx = (g2 @ w.T).reshape(x.shape) if needs[0] else None
        gw = x2.T @ g2 if needs[1] else None
        gb = g2.sum(axis=0) if needs[2] else None
        return gx, gw, gb

    return out.reshape(x.shape[:-1] + (w.shape[1],)), bwd


@primitive("attention")
def _attention(qkv, *, heads, key_mask=None, attn_out=None):
    """Multi-head scaled dot-product attention on packed projections.

    qkv: (B, T, 3h) holding queries, keys and values side by side; key_mask
    (B, T) marks keys that may be attended to. Returns (B, T, h). When
    ``attn_out`` is a list the (B, heads, T, T) weights are appended to it.
    """
    B, T, h3 = qkv.shape
    h = h3 // 3
    if h3 % 3 or h % heads:
        raise ShapeError(f"attention: incompatible shapes {qkv.shape} and heads={heads}")
    d = h // heads
    c = 1.0 / math.sqrt(d)
    parts = qkv.reshape(B, T, 3, heads, d).transpose(2, 0, 3, 1, 4)  # (3, B, H, T, d)
    q, k, v = parts[0], parts[1], parts[2]
    s = np.matmul(q, k.transpose(0, 1, 3, 2))  # (B, H, T, T)
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (B, T):
            raise ShapeError(f"attention: incompatible shapes {qkv.shape} and {key_mask.shape}")
        # excluded keys get a large finite negative score so the compiled
        # softmax (built without IEEE special-value guarantees) never sees inf
        s = np.where(key_mask[:, None, None, :], s, s.dtype.type(-1e9 * math.sqrt(d)))
    attn = kernels.softmax_forward(s.reshape(-1, T), c).reshape(s.shape)
    if attn_out is not None:
        attn_out.append(attn.copy())
    ctx = np.matmul(attn, v)  # (B, H, T, d)
    out = np.ascontiguousarray(ctx.transpose(0, 2, 1, 3)).reshape(B, T, h)

    def bwd(g):
        gctx = g.reshape(B, T, heads, d).transpose(0, 2, 1, 3)
        gattn = np.matmul(gctx, v.transpose(0, 1, 3, 2))
        gs = kernels.softmax_backward(gattn.reshape(-1, T), attn.reshape(-1, T), c).reshape(attn.shape)
        gqkv = np.empty((B, T, 3, heads, d), dtype=qkv.dtype)
        gparts = gqkv.transpose(2, 0, 3, 1, 4)
        np.matmul(gs, k, out=gparts[0])
        np.matmul(gs.transpose(0, 1, 3, 2), q, out=gparts[1])
        np.matmul(attn.transpose(0, 1, 3, 2), gctx, out=gparts[2])
        return (gqkv.reshape(qkv.shape),)

    return out, bwd


@primitive("transpose", keeps_finite=True)
def _transpose(a, *, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    return np.ascontiguousarray(a.transpose(axes)), lambda g: (g.transpose(inv),)


@primitive("reshape", keeps_finite=True)
def _reshape(a, *, shape):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: incompatible shapes {a.shape} and {tuple(shape)}") from None
    return out, lambda g: (g.reshape(a.shape),)


@primitive("concat", keeps_finite=True)
def _concat(*arrs, axis=-1):
    ax = _norm_axis(axis, arrs[0].ndim)
    for x in arrs[1:]:
        if x.ndim != arrs[0].ndim or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(x.shape, arrs[0].shape)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {arrs[0].shape} and {x.shape}")
    out = np.concatenate(arrs, axis=ax)
    bounds = np.cumsum([x.shape[ax] for x in arrs])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=ax))


@primitive("slice", keeps_finite=True)
def _slice(a, *, start, stop, axis=-1):
    ax = _norm_axis(axis, a.ndim)
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def bwd(g):
        out = np.zeros_like(a)
        out[idx] = g
        return (out,)

    return a[idx], bwd


@primitive("gather", keeps_finite=True)
def _gather(a, *, index):
    """Pick ``a[..., index[...]]`` along the last axis; index has a.shape[:-1]."""
    index = np.asarray(index)
    if index.shape != a.shape[:-1]:
        raise ShapeError(f"gather: incompatible shapes {a.shape} and {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[-1]):
        raise IndexError(f"gather: index out of range for size {a.shape[-1]}")
    idx = index[..., None]
    out = np.take_along_axis(a, idx, axis=-1)[..., 0]

    def bwd(g):
        ga = np.zeros_like(a)
        np.put_along_axis(ga, idx, g[..., None], axis=-1)
        return (ga,)

    return out, bwd


@primitive("embedding", keeps_finite=True)
def _embedding(table, *, ids):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = int(np.argmax((ids < 0) | (ids >= table.shape[0])))
        raise IndexError(f"embedding: id at flat index {bad} out of range for vocab {table.shape[0]}")
    out = table[ids]

    def bwd(g):
        gt = np.zeros_like(table)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return out, bwd


@primitive("cosine_similarity")
def _cosine_similarity(a, b):
    """Pairwise cosine similarity: (n, d) x (m, d) -> (n, m); (d,) x (d,) -> ()."""
    vec = a.ndim == 1
    if vec:
        a2, b2 = a[None], b[None]
    else:
        a2, b2 = a, b
    if a2.ndim != 2 or b2.ndim != 2 or a2.shape[1] != b2.shape[1]:
        raise ShapeError(f"cosine_similarity: incompatible shapes {a.shape} and {b.shape}")
    na = np.sqrt((a2 * a2).sum(axis=1, keepdims=True))
    nb = np.sqrt((b2 * b2).sum(axis=1, keepdims=True))
    if np.any(na == 0) or np.any(nb == 0):
        raise NonFiniteError("cosine_similarity: zero vector")
    ua, ub = a2 / na, b2 / nb
    s = ua @ ub.T

    def bwd(g):
        g2 = g.reshape(s.shape)
        ga = (g2 @ ub - ua * (g2 * s).sum(axis=1, keepdims=True)) / na
        gb = (g2.T @ ua - ub * (g2 * s).sum(axis=0)[:, None]) / nb
        if vec:
            return ga[0], gb[0]
        return ga, gb

    return (s[0, 0] if vec else s), bwd


@primitive("conv2d", skips_unneeded=True)
def _conv2d(x, w, b, *, stride=1, padding=0, needs=(True, True, True)):
    """(B, C, H, W) conv (O, C, k, k) + bias (O,) -> (B, O, Ho, Wo)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    Ho = kernels.conv_out_size(H, k, stride, padding)
    Wo = kernels.conv_out_size(W, k, stride, padding)
    cols = kernels.im2col(np.ascontiguousarray(x), k, stride, padding)  # (B, Ckk, L)
    wm = w.reshape(O, -1)
    out = np.matmul(wm, cols) + b[None, :, None]

    def bwd(g):
        g2 = g.reshape(B, O, Ho * Wo)
        gw = gb = gx = None
        if needs[1]:
            gw = np.einsum("bol,bcl->oc", g2, cols).reshape(w.shape)
        if needs[2]:
            gb = g2.sum(axis=(0, 2))
        if needs[0]:
            gx = kernels.col2im(np.matmul(wm.T, g2), x.shape, k, stride, padding)
        return gx, gw, gb

    return out.reshape(B, O, Ho, Wo), bwd


@primitive("conv1x1", skips_unneeded=True)
def _conv1x1(x, w, b, *, needs=(True, True, True)):
    """(B, C, ...) with weight (O, C) and bias (O,) -> (B, O, ...)."""
    if x.ndim < 2 or w.ndim != 2 or w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv1x1: incompatible shapes {x.shape} and {w.shape}")
    B, C = x.shape[:2]
    rest = x.shape[2:]
    x3 = x.reshape(B, C, -1)
    out = np.matmul(w, x3) + b[None, :, None]

    def bwd(g):
        g3 = g.reshape(B, w.shape[0], -1)
        gw = np.einsum("bol,bcl->oc", g3, x3) if needs[1] else None
        gb = g3.sum(axis=(0, 2)) if needs[2] else None
        gx = np.matmul(w.T, g3).reshape(x.shape) if needs[0] else None
        return gx, gw, gb

    return out.reshape((B, w.shape[0]) + rest), bwd


@primitive("upsample2x", keeps_finite=True)
def _upsample2x(x):
    """Nearest-neighbour x2 upsampling of the last two axes."""
    out = x.repeat(2, axis=-2).repeat(2, axis=-1)

    def bwd(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return out, bwd
