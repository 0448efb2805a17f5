"""Adversarial mask generators and occlusion.

Each generator ends in a 1x1 convolution with ``N`` output channels followed
by a softmax across those channels, so the ``N`` masks form a partition of
unity at every pixel (vision) or token (text).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .encoders import BLOCK_KEYS, block_forward, init_block
from .tensor import NonFiniteError, ShapeError, Tensor


@dataclass
class MaskSet:
    """N soft masks. ``masks`` is (N, H, W) for images or (N, q) for text."""

    masks: np.ndarray
    modality: str

    @property
    def n(self) -> int:
        return self.masks.shape[0]

    def channel_sums(self) -> np.ndarray:
        return self.masks.sum(axis=0)

    def entropy(self) -> float:
        return mask_entropy(self.masks[None])


def mask_entropy(masks: np.ndarray) -> float:
    """Mean per-location entropy over the channel axis of (B, N, ...) masks."""
    m = np.clip(masks, 1e-12, 1.0)
    return float(-(m * np.log(m)).sum(axis=1).mean())


def _w(rng, shape, fan_in, dtype, name):
    return Tensor(rng.normal(0.0, 1 / math.sqrt(fan_in), size=shape).astype(dtype), requires_grad=True, name=name)


def _z(shape, dtype, name):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


class VisionMasker:
    """Strided-conv encoder, nearest-upsample decoder, 1x1 head to N masks."""

    def __init__(self, n_masks: int = 4, channels: int = 8, seed: int = 0, dtype=np.float64,
                 zero_head: bool = False):
        rng = np.random.default_rng(seed)
        c = channels
        self.n_masks = n_masks
        self.dtype = np.dtype(dtype)
        self.params = {
            "down1.w": _w(rng, (c, 1, 3, 3), 9, dtype, "down1.w"),
            "down1.b": _z((c,), dtype, "down1.b"),
            "down2.w": _w(rng, (c, c, 3, 3), 9 * c, dtype, "down2.w"),
            "down2.b": _z((c,), dtype, "down2.b"),
            "up1.w": _w(rng, (c, c, 3, 3), 9 * c, dtype, "up1.w"),
            "up1.b": _z((c,), dtype, "up1.b"),
            "up2.w": _w(rng, (c, c, 3, 3), 9 * c, dtype, "up2.w"),
            "up2.b": _z((c,), dtype, "up2.b"),
            "head.w": _z((n_masks, c), dtype, "head.w") if zero_head else _w(rng, (n_masks, c), c, dtype, "head.w"),
            "head.b": _z((n_masks,), dtype, "head.b"),
        }

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def logits(self, images: Tensor) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if x.ndim == 2:
            x = ops.reshape(x, (1,) + x.shape)
        B, H, W = x.shape
        if H % 4 or W % 4:
            raise ShapeError(f"VisionMasker: image {H}x{W} not divisible by 4")
        p = self.params
        y = ops.reshape(x, (B, 1, H, W))
        y = ops.relu(ops.conv2d(y, p["down1.w"], p["down1.b"], stride=2, padding=1))
        y = ops.relu(ops.conv2d(y, p["down2.w"], p["down2.b"], stride=2, padding=1))
        y = ops.relu(ops.conv2d(ops.upsample2x(y), p["up1.w"], p["up1.b"], stride=1, padding=1))
        y = ops.relu(ops.conv2d(ops.upsample2x(y), p["up2.w"], p["up2.b"], stride=1, padding=1))
        return ops.conv1x1(y, p["head.w"], p["head.b"])

    def masks(self, images) -> Tensor:
        """(B, H, W) -> (B, N, H, W) masks summing to one over N."""
        try:
            return ops.softmax(self.logits(images), axis=1)
        except NonFiniteError as e:
            raise NonFiniteError(f"mask_image: {e}") from e


class TextMasker:
    """Shallow transformer over embedded tokens, 1x1 head to N masks."""

    def __init__(self, h: int, heads: int, n_masks: int = 2, n_layers: int = 3, mlp_ratio: int = 2,
                 seed: int = 0, dtype=np.float64, zero_head: bool = False):
        rng = np.random.default_rng(seed)
        self.n_masks = n_masks
        self.heads = heads
        self.h = h
        self.dtype = np.dtype(dtype)
        self.blocks = [init_block(rng, h, mlp_ratio, dtype, f"blocks.{i}.") for i in range(n_layers)]
        self.head = {
            "w": _z((n_masks, h), dtype, "head.w") if zero_head else _w(rng, (n_masks, h), h, dtype, "head.w"),
            "b": _z((n_masks,), dtype, "head.b"),
        }

    def named_parameters(self):
        out = []
        for i, blk in enumerate(self.blocks):
            out += [(f"blocks.{i}.{k}", blk[k]) for k in BLOCK_KEYS]
        out += [(f"head.{k}", t) for k, t in self.head.items()]
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def logits(self, embedded: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        x = embedded
        if x.ndim == 2:
            x = ops.reshape(x, (1,) + x.shape)
        if x.shape[-1] != self.h:
            raise ShapeError(f"TextMasker: embedding width {x.shape[-1]} != {self.h}")
        for blk in self.blocks:
            x = block_forward(blk, x, self.heads, key_mask)
        return ops.conv1x1(ops.transpose(x, (0, 2, 1)), self.head["w"], self.head["b"])

    def masks(self, embedded: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        """(B, q, h) -> (B, N, q) masks summing to one over N."""
        try:
            return ops.softmax(self.logits(embedded, key_mask), axis=1)
        except NonFiniteError as e:
            raise NonFiniteError(f"mask_text: {e}") from e


def mask_image(masker: VisionMasker, image) -> MaskSet:
    m = masker.masks(image)
    return MaskSet(m.data[0], "vision")


def mask_text(masker: TextMasker, embedded: Tensor) -> MaskSet:
    m = masker.masks(embedded)
    return MaskSet(m.data[0], "text")


def apply_mask(x, mask, semantics: str = "occlude") -> Tensor:
    """Occlude ``x`` with one mask: x * (1 - m), or x * m when keeping.

    Image masks match ``x`` pixel for pixel; a text mask has one value per
    token and is broadcast across the embedding width.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    mask = mask if isinstance(mask, Tensor) else Tensor(mask)
    if mask.shape == x.shape:
        m = mask
    elif mask.shape == x.shape[:-1]:
        m = ops.expand_last(mask, x.shape[-1])
    else:
        raise ShapeError(f"apply_mask: mask shape {mask.shape} does not match input {x.shape}")
    if semantics == "occlude":
        m = ops.add_scalar(ops.scale(m, -1.0), 1.0)
    elif semantics != "keep":
        raise ValueError(f"unknown mask semantics {semantics!r}")
    return ops.mul(x, m)


def masked_views(x: Tensor, masks: Tensor, semantics: str = "occlude") -> Tensor:
    """All occluded views at once.

    x: (B, H, W) with masks (B, N, H, W), or x: (B, q, h) with masks (B, N, q).
    Returns (N, B, ...) views, mask-major.
    """
    B, N = masks.shape[:2]
    perm = (1, 0) + tuple(range(2, masks.ndim))
    m = ops.transpose(masks, perm)  # (N, B, ...)
    if masks.ndim == x.ndim:  # text: per-token masks
        m = ops.expand_last(m, x.shape[-1])
    if semantics == "occlude":
        m = ops.add_scalar(ops.scale(m, -1.0), 1.0)
    elif semantics != "keep":
        raise ValueError(f"unknown mask semantics {semantics!r}")
    if m.shape[1:] != x.shape:
        raise ShapeError(f"masked_views: mask shape {masks.shape} does not match input {x.shape}")
    return ops.mul(m, x)


def random_masks(rng: np.random.Generator, shape: tuple[int, ...], n: int, dtype=np.float64) -> np.ndarray:
    """One-hot masks: each location picks one of ``n`` channels uniformly.

    ``shape`` is the per-sample spatial shape prefixed by batch, e.g. (B, H, W);
    returns (B, n, ...).
    """
    slot = rng.integers(0, n, size=shape)
    out = (slot[:, None] == np.arange(n).reshape((1, n) + (1,) * (len(shape) - 1))).astype(dtype)
    return out


def random_mask_baseline(seed: int, modality: str, n: int, size: tuple[int, ...]) -> MaskSet:
    """Seeded one-hot partition. ``size`` is (H, W) for vision, (q,) for text."""
    if modality not in ("vision", "text"):
        raise ValueError(f"unknown modality {modality!r}")
    rng = np.random.default_rng(seed)
    return MaskSet(random_masks(rng, (1,) + tuple(size), n)[0], modality)
