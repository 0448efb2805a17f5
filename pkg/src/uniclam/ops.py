"""Functional API over the primitive catalog, recording on the active tape."""

from __future__ import annotations

from .tensor import Tensor, active_tape, apply_primitive


def _ap(op, *inputs, **attrs) -> Tensor:
    return apply_primitive(active_tape(), op, inputs, **attrs)


def add(a, b):
    return _ap("add", a, b)


def sub(a, b):
    return _ap("sub", a, b)


def mul(a, b):
    return _ap("mul", a, b)


def div(a, b):
    return _ap("div", a, b)


def scale(a, c: float):
    return _ap("scale", a, c=float(c))


def add_scalar(a, c: float):
    return _ap("add_scalar", a, c=float(c))


def exp(a):
    return _ap("exp", a)


def log(a):
    return _ap("log", a)


def relu(a):
    return _ap("relu", a)


def expand_last(a, n: int):
    return _ap("expand_last", a, n=int(n))


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    return _ap("sum", a, axis=axis)


def mean(a, axis=None, weights=None):
    return _ap("mean", a, axis=axis, weights=weights)


def l2norm(a, axis=-1):
    return _ap("l2norm", a, axis=axis)


def l2_normalize(a):
    return _ap("l2_normalize", a)


def logsumexp(a, axis=-1, where=None):
    return _ap("logsumexp", a, axis=axis, where=where)


def softmax(a, axis=-1, where=None, scale=1.0):
    return _ap("softmax", a, axis=axis, where=where, scale=float(scale))


def log_softmax(a, axis=-1):
    return _ap("log_softmax", a, axis=axis)


def layer_norm(x, gamma, beta, eps=1e-5):
    return _ap("layer_norm", x, gamma, beta, eps=eps)


def matmul(a, b):
    return _ap("matmul", a, b)


def attention(qkv, heads: int, key_mask=None, attn_out=None):
    return _ap("attention", qkv, heads=int(heads), key_mask=key_mask, attn_out=attn_out)


def transpose(a, axes=None):
    return _ap("transpose", a, axes=tuple(axes) if axes is not None else None)


def reshape(a, shape):
    return _ap("reshape", a, shape=tuple(shape))


def concat(tensors, axis=-1):
    return _ap("concat", *tensors, axis=axis)


def slice(a, start, stop, axis=-1):  # noqa: A001
    return _ap("slice", a, start=start, stop=stop, axis=axis)


def gather(a, index):
    return _ap("gather", a, index=index)


def embedding(table, ids):
    return _ap("embedding", table, ids=ids)


def cosine_similarity(a, b):
    return _ap("cosine_similarity", a, b)


def conv2d(x, w, b, stride=1, padding=0):
    return _ap("conv2d", x, w, b, stride=stride, padding=padding)


def conv1x1(x, w, b):
    return _ap("conv1x1", x, w, b)


def upsample2x(x):
    return _ap("upsample2x", x)


def linear(x, w, b=None, relu: bool = False):
    if b is None:
        y = matmul(x, w)
        return _ap("relu", y) if relu else y
    return _ap("linear", x, w, b, relu=bool(relu))


def sq_norm(a):
    """Squared L2 norm of all entries."""
    return sum(mul(a, a))
