"""Depth-decaying soft parameter sharing between the two encoder stacks."""

from __future__ import annotations

import math

from . import ops
from .encoders import EncoderStack
from .tensor import ShapeError, Tensor


def layer_weight(k: int, K: int) -> float:
    """Coupling strength for 1-based layer ``k`` of ``K``: e^((K-k)/K) - 1.

    Only layers 1..K-1 are coupled; the top layer is left free.
    """
    if not 1 <= k <= K - 1:
        raise ValueError(f"layer index k={k} outside 1..{K - 1}")
    return math.expm1((K - k) / K)


def sharing_weights(K: int) -> list[float]:
    return [layer_weight(k, K) for k in range(1, K)]


def sharing_penalty(ev: EncoderStack, et: EncoderStack) -> Tensor:
    """Sum over layers 1..K-1 of c_k * ||theta_k(ev) - theta_k(et)||^2.

    Embedders, the final norm and the projection heads are not coupled.
    """
    K = ev.cfg.K
    if et.cfg.K != K:
        raise ShapeError(f"sharing_penalty: layer counts differ ({K} vs {et.cfg.K})")
    total = None
    for k in range(1, K):
        pv, pt = ev.layer_parameters(k - 1), et.layer_parameters(k - 1)
        for a, b in zip(pv, pt):
            if a.shape != b.shape:
                raise ShapeError(f"sharing_penalty: layer {k} shapes differ: {a.shape} vs {b.shape}")
        if all(a is b for a, b in zip(pv, pt)):
            continue  # tied layers contribute exactly zero
        sq = None
        for a, b in zip(pv, pt):
            term = ops.sq_norm(ops.sub(a, b))
            sq = term if sq is None else ops.add(sq, term)
        term = ops.scale(sq, layer_weight(k, K))
        total = term if total is None else ops.add(total, term)
    if total is None:
        return Tensor(0.0, dtype=ev.dtype)
    return total
