"""Tiny dual-stream transformer encoders.

Both stacks share block geometry so that layer ``k`` of the vision stack and
layer ``k`` of the text stack hold identically shaped parameters. Only the
embedders differ: a patch projector for images, a token table for text.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import ops
from .tensor import NonFiniteError, ShapeError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    K: int = 4
    h: int = 32
    heads: int = 4
    patch_size: int = 4
    vocab_size: int = 64
    q_max: int = 12
    proj_dim: int = 16
    mlp_ratio: int = 2
    image_size: int = 32
    use_positional: bool = True

    def __post_init__(self):
        if self.h % self.heads:
            raise ValueError(f"h={self.h} not divisible by heads={self.heads}")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.proj_dim < 2:
            raise ValueError("proj_dim must be >= 2")

    @classmethod
    def from_run(cls, cfg) -> "EncoderConfig":
        return cls(
            K=cfg.K, h=cfg.h, heads=cfg.heads, patch_size=cfg.patch_size,
            vocab_size=cfg.vocab_size, q_max=cfg.q_max, proj_dim=cfg.proj_dim,
            mlp_ratio=cfg.mlp_ratio, image_size=cfg.image_size,
            use_positional=cfg.use_positional,
        )

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


def sinusoidal_positions(T: int, h: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(h // 2)[None, :]
    ang = pos / np.power(10000.0, 2 * i / h)
    pe = np.zeros((T, h))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang[:, : h - h // 2])
    return pe


def _param(rng, shape, std, dtype, name):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True, name=name)


def _const(shape, value, dtype, name):
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True, name=name)


BLOCK_KEYS = (
    "ln1.g", "ln1.b", "attn.wqkv", "attn.bqkv", "attn.wo", "attn.bo",
    "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
)


def init_block(rng, h: int, mlp_ratio: int, dtype, prefix: str = "") -> dict[str, Tensor]:
    m = h * mlp_ratio
    return {
        "ln1.g": _const((h,), 1.0, dtype, prefix + "ln1.g"),
        "ln1.b": _const((h,), 0.0, dtype, prefix + "ln1.b"),
        "attn.wqkv": _param(rng, (h, 3 * h), 1 / math.sqrt(h), dtype, prefix + "attn.wqkv"),
        "attn.bqkv": _const((3 * h,), 0.0, dtype, prefix + "attn.bqkv"),
        "attn.wo": _param(rng, (h, h), 1 / math.sqrt(h), dtype, prefix + "attn.wo"),
        "attn.bo": _const((h,), 0.0, dtype, prefix + "attn.bo"),
        "ln2.g": _const((h,), 1.0, dtype, prefix + "ln2.g"),
        "ln2.b": _const((h,), 0.0, dtype, prefix + "ln2.b"),
        "mlp.w1": _param(rng, (h, m), 1 / math.sqrt(h), dtype, prefix + "mlp.w1"),
        "mlp.b1": _const((m,), 0.0, dtype, prefix + "mlp.b1"),
        "mlp.w2": _param(rng, (m, h), 1 / math.sqrt(m), dtype, prefix + "mlp.w2"),
        "mlp.b2": _const((h,), 0.0, dtype, prefix + "mlp.b2"),
    }


def block_forward(p: dict[str, Tensor], x: Tensor, heads: int, key_mask: np.ndarray | None = None,
                  attn_out: list | None = None) -> Tensor:
    """Pre-norm transformer block on (B, T, h). ``key_mask`` (B, T) marks real tokens."""
    y = ops.layer_norm(x, p["ln1.g"], p["ln1.b"])
    qkv = ops.linear(y, p["attn.wqkv"], p["attn.bqkv"])
    ctx = ops.attention(qkv, heads, key_mask, attn_out)
    x = ops.add(x, ops.linear(ctx, p["attn.wo"], p["attn.bo"]))
    y = ops.layer_norm(x, p["ln2.g"], p["ln2.b"])
    y = ops.linear(ops.linear(y, p["mlp.w1"], p["mlp.b1"], relu=True), p["mlp.w2"], p["mlp.b2"])
    return ops.add(x, y)


class EncoderStack:
    """K transformer blocks plus a modality embedder and a projection head."""

    def __init__(self, cfg: EncoderConfig, modality: str, seed: int = 0, dtype=np.float64):
        if modality not in ("vision", "text"):
            raise ValueError(f"unknown modality {modality!r}")
        self.cfg = cfg
        self.modality = modality
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        h = cfg.h
        if modality == "vision":
            p2 = cfg.patch_size ** 2
            self.embed = {
                "patch.w": _param(rng, (p2, h), 1 / math.sqrt(p2), dtype, "patch.w"),
                "patch.b": _const((h,), 0.0, dtype, "patch.b"),
            }
        else:
            self.embed = {"tok.emb": _param(rng, (cfg.vocab_size, h), 1.0, dtype, "tok.emb")}
        self.layers = [init_block(rng, h, cfg.mlp_ratio, dtype, f"layers.{k}.") for k in range(cfg.K)]
        self.final = {"g": _const((h,), 1.0, dtype, "final.g"), "b": _const((h,), 0.0, dtype, "final.b")}
        self.proj = {
            "w1": _param(rng, (h, h), 1 / math.sqrt(h), dtype, "proj.w1"),
            "b1": _const((h,), 0.0, dtype, "proj.b1"),
            "w2": _param(rng, (h, cfg.proj_dim), 1 / math.sqrt(h), dtype, "proj.w2"),
            "b2": _const((cfg.proj_dim,), 0.0, dtype, "proj.b2"),
        }
        n_pos = cfg.n_patches if modality == "vision" else cfg.q_max
        self._pe = sinusoidal_positions(n_pos, h).astype(dtype)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for k, t in self.embed.items():
            yield f"embed.{k}", t
        for i, layer in enumerate(self.layers):
            for k in BLOCK_KEYS:
                yield f"layers.{i}.{k}", layer[k]
        for k, t in self.final.items():
            yield f"final.{k}", t
        for k, t in self.proj.items():
            yield f"proj.{k}", t

    def parameters(self) -> list[Tensor]:
        seen: set[int] = set()
        out = []
        for _, t in self.named_parameters():
            if id(t) not in seen:
                seen.add(id(t))
                out.append(t)
        return out

    def layer_parameters(self, k: int) -> list[Tensor]:
        """Parameters of transformer block ``k`` (0-based), in fixed order."""
        return [self.layers[k][key] for key in BLOCK_KEYS]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    # -- embedders ------------------------------------------------------------

    def embed_image(self, images) -> Tensor:
        """(B, H, W) or (H, W) -> (B, n_patches, h) token sequence."""
        if self.modality != "vision":
            raise TypeError("embed_image on a text stack")
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if x.ndim == 2:
            x = ops.reshape(x, (1,) + x.shape)
        B, H, W = x.shape
        p = self.cfg.patch_size
        if H % p or W % p:
            raise ShapeError(f"embed_image: image {H}x{W} not divisible by patch size {p}")
        T = (H // p) * (W // p)
        patches = ops.reshape(
            ops.transpose(ops.reshape(x, (B, H // p, p, W // p, p)), (0, 1, 3, 2, 4)),
            (B, T, p * p),
        )
        tok = ops.linear(patches, self.embed["patch.w"], self.embed["patch.b"])
        if self.cfg.use_positional:
            if T > self._pe.shape[0]:
                self._pe = sinusoidal_positions(T, self.cfg.h).astype(self.dtype)
            tok = ops.add(tok, Tensor(self._pe[:T]))
        return tok

    def embed_text(self, ids, positional: bool = True) -> Tensor:
        """(B, q) or (q,) token ids -> (B, q, h). ``positional=False`` returns
        the bare token vectors, to which add_positions can be applied later."""
        if self.modality != "text":
            raise TypeError("embed_text on a vision stack")
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[-1] == 0:
            raise ValueError("embed_text: empty token sequence")
        if ids.shape[-1] > self.cfg.q_max:
            raise ValueError(f"embed_text: {ids.shape[-1]} tokens exceeds q_max={self.cfg.q_max}")
        bad = np.flatnonzero((ids.reshape(-1) < 0) | (ids.reshape(-1) >= self.cfg.vocab_size))
        if bad.size:
            raise IndexError(f"embed_text: token id out of range at index {int(bad[0])}")
        tok = ops.embedding(self.embed["tok.emb"], ids)
        return self.add_positions(tok) if positional else tok

    def add_positions(self, tok: Tensor) -> Tensor:
        if not self.cfg.use_positional:
            return tok
        return ops.add(tok, Tensor(self._pe[: tok.shape[-2]]))

    # -- forward --------------------------------------------------------------

    def trunk(self, tokens: Tensor, key_mask: np.ndarray | None = None,
              attn_out: list | None = None) -> Tensor:
        if tokens.ndim == 2:
            tokens = ops.reshape(tokens, (1,) + tokens.shape)
        if tokens.shape[-1] != self.cfg.h:
            raise ShapeError(f"encode: token width {tokens.shape[-1]} != h={self.cfg.h}")
        x = tokens
        for layer in self.layers:
            x = block_forward(layer, x, self.cfg.heads, key_mask, attn_out)
        return ops.layer_norm(x, self.final["g"], self.final["b"])

    def features(self, tokens: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        """Mean-pooled final-layer output, (B, h). Pre-projection."""
        x = self.trunk(tokens, key_mask)
        return ops.mean(x, axis=1, weights=None if key_mask is None else key_mask.astype(x.dtype))

    def project(self, pooled: Tensor) -> Tensor:
        y = ops.linear(pooled, self.proj["w1"], self.proj["b1"], relu=True)
        y = ops.linear(y, self.proj["w2"], self.proj["b2"])
        return ops.l2_normalize(y)

    def encode(self, tokens: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        """Unit-norm representation(s), (B, proj_dim)."""
        try:
            return self.project(self.features(tokens, key_mask))
        except NonFiniteError as e:
            raise NonFiniteError(f"encode ({self.modality}): {e}") from e

    def extract_attention(self, tokens: Tensor, key_mask: np.ndarray | None = None) -> list[np.ndarray]:
        """Per-layer attention weights, each (B, heads, T, T); rows sum to 1."""
        out: list[np.ndarray] = []
        self.trunk(tokens, key_mask, attn_out=out)
        return out


def tie_layers(src: EncoderStack, dst: EncoderStack) -> None:
    """Make ``dst`` reuse ``src``'s transformer blocks (hard parameter sharing)."""
    if src.cfg.K != dst.cfg.K or src.cfg.h != dst.cfg.h:
        raise ShapeError("tie_layers: stacks have different geometry")
    dst.layers = src.layers
