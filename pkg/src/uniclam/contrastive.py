"""InfoNCE, the masked-anchor contrastive loss, and the combined objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .encoders import EncoderStack
from .masking import TextMasker, VisionMasker, masked_views
from .sharing import sharing_penalty
from .tensor import Tensor


def info_nce(z_anchors: Tensor, z_positives: Tensor, tau: float) -> Tensor:
    """Two-view InfoNCE over the combined batch of 2n representations.

    For anchor i the positive is z_positives[i]; the denominator runs over
    every other entry of the combined batch (2n - 1 terms). Averaged over the
    n anchors.
    """
    n = z_anchors.shape[0]
    if n < 2:
        raise ValueError("info_nce needs n >= 2 (no negatives otherwise)")
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    z = ops.concat([z_anchors, z_positives], axis=0)
    sim = ops.cosine_similarity(ops.slice(z, 0, n, axis=0), z)  # (n, 2n)
    logits = ops.scale(sim, 1.0 / tau)
    not_self = ~np.eye(n, 2 * n, dtype=bool)
    lse = ops.logsumexp(logits, axis=-1, where=not_self)
    pos = ops.gather(logits, np.arange(n) + n)
    return ops.mean(ops.sub(lse, pos))


def clam_from_representations(anchors: Tensor, z: Tensor, tau: float) -> Tensor:
    """Masked-anchor loss given encodings.

    anchors: (N, n, d) encodings of the masked views; z: (n, d) encodings of
    the unmasked inputs. For each view the positive is z[i] and the
    denominator sums over z[k], k != i. Averaged over masks and samples.
    """
    N, n, d = anchors.shape
    if n < 2:
        raise ValueError("clam loss needs batch size n >= 2")
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    sim = ops.cosine_similarity(ops.reshape(anchors, (N * n, d)), z)  # (N*n, n)
    logits = ops.scale(sim, 1.0 / tau)
    own = np.tile(np.arange(n), N)
    not_self = own[:, None] != np.arange(n)[None, :]
    lse = ops.logsumexp(logits, axis=-1, where=not_self)
    pos = ops.gather(logits, own)
    return ops.mean(ops.sub(lse, pos))


def _cached(cache, compute):
    if cache is None:
        return compute()
    if "z" not in cache:
        cache["z"] = compute()
    return cache["z"]


def pad_ids(seqs, pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token sequences; returns (ids (B, L), key_mask (B, L) bool)."""
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, ids != pad


def vision_clam(images: np.ndarray, ev: EncoderStack, mv: VisionMasker | None, tau: float,
                semantics: str = "occlude", masks: np.ndarray | Tensor | None = None,
                cache: dict | None = None) -> tuple[Tensor, Tensor]:
    """Returns (loss, masks (n, N, H, W)). ``masks`` overrides the generator.

    ``cache`` keeps the unmasked encodings under "z" for reuse by a later
    call with unchanged encoder weights.
    """
    x = Tensor(np.asarray(images, dtype=ev.dtype))
    m = mv.masks(x) if masks is None else (masks if isinstance(masks, Tensor) else Tensor(masks, dtype=ev.dtype))
    n, N = m.shape[:2]
    views = masked_views(x, m, semantics)  # (N, n, H, W)
    views = ops.reshape(views, (N * n,) + x.shape[1:])
    anchors = ev.encode(ev.embed_image(views))
    z = _cached(cache, lambda: ev.encode(ev.embed_image(x)))
    return clam_from_representations(ops.reshape(anchors, (N, n, -1)), z, tau), m


def text_clam(ids: np.ndarray, key_mask: np.ndarray, et: EncoderStack, mt: TextMasker | None, tau: float,
              semantics: str = "occlude", masks: np.ndarray | Tensor | None = None,
              cache: dict | None = None) -> tuple[Tensor, Tensor]:
    """Returns (loss, masks (n, N, q)). Masks are generated from the
    embedded tokens, the same embedding the encoder consumes. Masks act on
    token content only; positions are added back to every view, so a fully
    occluded caption still reaches the encoder as a sequence of positions."""
    raw = et.embed_text(ids, positional=False)
    emb = et.add_positions(raw)
    if masks is None:
        m = mt.masks(emb, key_mask)
    else:
        m = masks if isinstance(masks, Tensor) else Tensor(masks, dtype=et.dtype)
    n, N = m.shape[:2]
    views = et.add_positions(ops.reshape(masked_views(raw, m, semantics), (N * n,) + emb.shape[1:]))
    anchors = et.encode(views, np.tile(key_mask, (N, 1)))
    z = _cached(cache, lambda: et.encode(emb, key_mask))
    return clam_from_representations(ops.reshape(anchors, (N, n, -1)), z, tau), m


def clam_loss(batch, encoder: EncoderStack, masker, tau: float, semantics: str = "occlude",
              masks=None) -> Tensor:
    """Masked-anchor loss for one modality.

    ``batch`` is an (n, H, W) image array for a vision stack, or a list of
    token-id sequences for a text stack.
    """
    if encoder.modality == "vision":
        return vision_clam(batch, encoder, masker, tau, semantics, masks)[0]
    ids, key_mask = pad_ids(batch)
    return text_clam(ids, key_mask, encoder, masker, tau, semantics, masks)[0]


@dataclass
class LossBreakdown:
    l_clam_v: Tensor
    l_clam_t: Tensor
    l_gs: Tensor
    total: Tensor
    tau: float
    beta: float
    lam: float
    masks_v: Tensor | None = None
    masks_t: Tensor | None = None

    def values(self) -> dict[str, float]:
        return {
            "l_clam_v": self.l_clam_v.item(),
            "l_clam_t": self.l_clam_t.item(),
            "l_gs": self.l_gs.item(),
            "total": self.total.item(),
        }


def combine(l_v: Tensor, l_t: Tensor, l_gs: Tensor, beta: float, lam: float) -> Tensor:
    total = ops.add(ops.scale(l_v, beta), ops.scale(l_t, 1.0 - beta))
    if lam:
        total = ops.add(total, ops.scale(l_gs, lam))
    return total


def uniclam_loss(images, captions, ev: EncoderStack, et: EncoderStack, mv: VisionMasker | None,
                 mt: TextMasker | None, tau: float, beta: float, lam: float, semantics: str = "occlude",
                 masks_v=None, masks_t=None) -> LossBreakdown:
    """beta * L_v + (1 - beta) * L_t + lam * L_gs on a paired batch."""
    l_v, m_v = vision_clam(images, ev, mv, tau, semantics, masks_v)
    ids, key_mask = pad_ids(captions)
    l_t, m_t = text_clam(ids, key_mask, et, mt, tau, semantics, masks_t)
    l_gs = sharing_penalty(ev, et)
    total = combine(l_v, l_t, l_gs, beta, lam)
    return LossBreakdown(l_v, l_t, l_gs, total, tau, beta, lam, m_v, m_t)
