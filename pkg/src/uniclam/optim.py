"""Adam with decoupled weight decay and the alternating min-max driver.

One ``alternating_step`` runs two phases on the same batch:

(a) the encoders descend on ``beta*L_v + (1-beta)*L_t + lam*L_gs`` with the
    mask generators frozen;
(b) the mask generators ascend on ``L_v + L_t`` with the encoders frozen.

The two parameter groups are disjoint, so no tensor is touched by both phases.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels, ops
from .config import RunConfig
from .contrastive import pad_ids, text_clam, vision_clam
from .encoders import EncoderConfig, EncoderStack, tie_layers
from .masking import TextMasker, VisionMasker, mask_entropy, random_masks
from .sharing import sharing_penalty
from .tensor import NonFiniteError, Tape, Tensor, backward, no_grad


class DivergenceError(RuntimeError):
    """A non-finite loss or gradient. ``phase`` names where it happened."""

    def __init__(self, phase: str, step: int, detail: str = ""):
        self.phase = phase
        self.step = step
        super().__init__(f"divergence in {phase} phase at step {step}" + (f": {detail}" if detail else ""))


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8) -> "OptimizerState":
        return cls(lr, weight_decay, beta1, beta2, eps, 0,
                   [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.lr, self.weight_decay, self.beta1, self.beta2, self.eps, self.t,
                              [a.copy() for a in self.m], [a.copy() for a in self.v])


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: OptimizerState) -> None:
    """In-place Adam update. Rejects the whole step if any gradient is non-finite."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: params, grads and moments differ in length")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape} ({p.name})")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {p.name or 'parameter'}")
    if state.lr == 0.0 and state.weight_decay == 0.0:
        state.t += 1
        return
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        kernels.adam_update(p.data.reshape(-1), np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
                            m.reshape(-1), v.reshape(-1), state.lr, state.beta1, state.beta2, state.eps,
                            state.weight_decay, bc1, bc2)


def _unique(tensors) -> list[Tensor]:
    seen: set[int] = set()
    out = []
    for t in tensors:
        if id(t) not in seen:
            seen.add(id(t))
            out.append(t)
    return out


def _set_trainable(params, flag: bool) -> None:
    for p in params:
        p.requires_grad = flag


@dataclass
class TrainState:
    cfg: RunConfig
    ev: EncoderStack
    et: EncoderStack
    mv: VisionMasker | None
    mt: TextMasker | None
    opt_enc: OptimizerState
    opt_mask: OptimizerState
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @property
    def encoder_params(self) -> list[Tensor]:
        return _unique(self.ev.parameters() + self.et.parameters())

    @property
    def mask_params(self) -> list[Tensor]:
        out: list[Tensor] = []
        if self.mv is not None:
            out += self.mv.parameters()
        if self.mt is not None:
            out += self.mt.parameters()
        return out

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Every parameter under a stable prefixed name (hard-tied layers appear once)."""
        out: dict[str, np.ndarray] = {}
        seen: set[int] = set()
        groups = [("ev", self.ev.named_parameters()), ("et", self.et.named_parameters())]
        if self.mv is not None:
            groups.append(("mv", self.mv.named_parameters()))
        if self.mt is not None:
            groups.append(("mt", self.mt.named_parameters()))
        for prefix, items in groups:
            for name, t in items:
                if id(t) in seen:
                    continue
                seen.add(id(t))
                out[f"{prefix}.{name}"] = t.data
        return out

    def _snapshot(self):
        params = self.encoder_params + self.mask_params
        return [p.data.copy() for p in params], self.opt_enc.copy(), self.opt_mask.copy()

    def _restore(self, snap) -> None:
        datas, oe, om = snap
        for p, d in zip(self.encoder_params + self.mask_params, datas):
            p.data[...] = d
        self.opt_enc, self.opt_mask = oe, om


def build_train_state(cfg: RunConfig) -> TrainState:
    """Seeded initialization; each component draws from its own child seed."""
    dtype = np.dtype(cfg.dtype)
    children = np.random.SeedSequence(cfg.seed).spawn(5)
    seeds = [int(c.generate_state(1)[0]) for c in children[:4]]
    ecfg = EncoderConfig.from_run(cfg)
    ev = EncoderStack(ecfg, "vision", seed=seeds[0], dtype=dtype)
    et = EncoderStack(ecfg, "text", seed=seeds[1], dtype=dtype)
    if cfg.sharing == "hard":
        tie_layers(ev, et)
    mv = mt = None
    if cfg.augmentation == "adversarial":
        mv = VisionMasker(cfg.N_v, cfg.mask_channels, seed=seeds[2], dtype=dtype)
        mt = TextMasker(cfg.h, cfg.heads, cfg.N_t, cfg.text_mask_layers, cfg.mlp_ratio, seed=seeds[3], dtype=dtype)
    state = TrainState(cfg, ev, et, mv, mt,
                       OptimizerState([], 0), OptimizerState([], 0), 0, np.random.default_rng(children[4]))
    kw = dict(weight_decay=cfg.weight_decay, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    state.opt_enc = OptimizerState.for_params(state.encoder_params, cfg.lr, **kw)
    state.opt_mask = OptimizerState.for_params(state.mask_params, cfg.mask_learning_rate, **kw)
    return state


@dataclass
class StepResult:
    step: int
    loss_total: float
    loss_clam_v: float
    loss_clam_t: float
    loss_gs: float
    encoder_post: float
    masking_objective_pre: float
    masking_objective_post: float
    mask_entropy_v: float
    mask_entropy_t: float
    wall_ms: float

    @property
    def encoder_decreased(self) -> bool:
        return self.encoder_post < self.loss_total

    @property
    def masking_increased(self) -> bool:
        return self.masking_objective_post > self.masking_objective_pre


def active_modalities(cfg: RunConfig, step: int) -> tuple[bool, bool]:
    """(vision, text) enabled at ``step``. Sequential runs train vision for
    the first half of the schedule and text for the second."""
    if cfg.unified == "joint":
        return True, True
    first_half = step < (cfg.steps + 1) // 2
    return first_half, not first_half


class _Forward:
    """One evaluation of both per-modality losses under fixed masks or maskers."""

    def __init__(self, state: TrainState, images: np.ndarray, ids: np.ndarray, key_mask: np.ndarray,
                 use_v: bool, use_t: bool, masks_v=None, masks_t=None, cache: dict | None = None):
        cfg = state.cfg
        zero = Tensor(np.zeros((), dtype=state.ev.dtype))
        self.l_v, self.l_t = zero, zero
        self.m_v = self.m_t = None
        if use_v:
            self.l_v, self.m_v = vision_clam(images, state.ev, state.mv, cfg.tau, cfg.mask_semantics, masks_v,
                                             None if cache is None else cache.setdefault("v", {}))
        if use_t:
            self.l_t, self.m_t = text_clam(ids, key_mask, state.et, state.mt, cfg.tau, cfg.mask_semantics, masks_t,
                                           None if cache is None else cache.setdefault("t", {}))

    @property
    def objective(self) -> Tensor:
        return ops.add(self.l_v, self.l_t)


def _weights(cfg: RunConfig, use_v: bool, use_t: bool) -> tuple[float, float]:
    if use_v and use_t:
        return cfg.beta, 1.0 - cfg.beta
    return float(use_v), float(use_t)


def _penalty(state: TrainState) -> Tensor:
    return sharing_penalty(state.ev, state.et)


def _grads(params: list[Tensor], result: dict[int, np.ndarray]) -> list[np.ndarray]:
    return [result[id(p)] for p in params]


def alternating_step(state: TrainState, images: np.ndarray, captions) -> StepResult:
    """One encoder-descent phase followed by one mask-ascent phase on the same batch.

    On divergence the state is restored to its value before the call and a
    DivergenceError naming the phase is raised.
    """
    cfg = state.cfg
    if len(images) < 2 or len(images) != len(captions):
        raise ValueError("alternating_step: need a paired batch of at least 2")
    t0 = time.perf_counter()
    images = np.asarray(images, dtype=state.ev.dtype)
    ids, key_mask = pad_ids(captions)
    use_v, use_t = active_modalities(cfg, state.step)
    w_v, w_t = _weights(cfg, use_v, use_t)
    lam = cfg.lam if cfg.sharing == "gradual" else 0.0
    enc, msk = state.encoder_params, state.mask_params
    snap = state._snapshot()
    phase = "encoder"
    try:
        # masks for the encoder phase are fixed inputs drawn from the frozen generators
        _set_trainable(msk, False)
        _set_trainable(enc, False)
        masks_v = masks_t = None
        if state.mv is None:
            masks_v = random_masks(state.rng, (len(images),) + images.shape[1:], cfg.N_v, state.ev.dtype)
            masks_t = random_masks(state.rng, ids.shape, cfg.N_t, state.ev.dtype)
        else:
            with no_grad():
                masks_v = state.mv.masks(images).data
                masks_t = state.mt.masks(state.et.embed_text(ids), key_mask).data

        # (a) encoders descend
        _set_trainable(enc, True)
        with Tape() as tape:
            fa = _Forward(state, images, ids, key_mask, use_v, use_t, masks_v, masks_t)
            l_gs = _penalty(state)
            total = _total(fa, l_gs, w_v, w_t, lam)
        g = backward(tape, total, enc)
        adam_step(enc, _grads(enc, g), state.opt_enc)
        _set_trainable(enc, False)

        # (b) mask generators ascend; this forward also measures the encoder phase
        phase = "masking"
        learn_masks = state.mv is not None and state.opt_mask.lr != 0.0
        zc: dict = {}  # unmasked encodings; the encoders stay fixed from here on
        if state.mv is None:
            with no_grad():
                fb = _Forward(state, images, ids, key_mask, use_v, use_t, masks_v, masks_t)
        else:
            _set_trainable(msk, learn_masks)
            with Tape() as tape:
                fb = _Forward(state, images, ids, key_mask, use_v, use_t, cache=zc)
                neg = ops.scale(fb.objective, -1.0)
        with no_grad():
            enc_post = _total(fb, _penalty(state), w_v, w_t, lam).item()
        obj_pre = fb.objective.item()
        ent_v = mask_entropy(fb.m_v.data) if fb.m_v is not None else 0.0
        ent_t = _text_entropy(fb.m_t.data, key_mask) if fb.m_t is not None else 0.0
        obj_post = obj_pre
        if learn_masks:
            for k in range(cfg.mask_steps_per_step):
                if k:
                    with Tape() as tape:
                        neg = ops.scale(_Forward(state, images, ids, key_mask, use_v, use_t, cache=zc).objective, -1.0)
                g = backward(tape, neg, msk)
                adam_step(msk, _grads(msk, g), state.opt_mask)
            with no_grad():
                obj_post = _Forward(state, images, ids, key_mask, use_v, use_t, cache=zc).objective.item()
        _set_trainable(msk, True)
        _set_trainable(enc, True)
        vals = (total.item(), fa.l_v.item(), fa.l_t.item(), l_gs.item(), enc_post, obj_pre, obj_post)
        if not all(math.isfinite(x) for x in vals):
            raise NonFiniteError("non-finite loss value")
    except NonFiniteError as e:
        state._restore(snap)
        _set_trainable(msk, True)
        _set_trainable(enc, True)
        raise DivergenceError(phase, state.step + 1, str(e)) from e
    state.step += 1
    wall = (time.perf_counter() - t0) * 1000.0 if cfg.record_wall_time else 0.0
    return StepResult(state.step, *vals, ent_v, ent_t, wall)


def _total(f: _Forward, l_gs: Tensor, w_v: float, w_t: float, lam: float) -> Tensor:
    total = ops.add(ops.scale(f.l_v, w_v), ops.scale(f.l_t, w_t))
    if lam:
        total = ops.add(total, ops.scale(l_gs, lam))
    return total


def _text_entropy(masks: np.ndarray, key_mask: np.ndarray) -> float:
    """Mean channel entropy over real (non-padding) tokens."""
    m = np.clip(masks, 1e-12, 1.0)
    ent = -(m * np.log(m)).sum(axis=1)
    return float(ent[key_mask].mean())
