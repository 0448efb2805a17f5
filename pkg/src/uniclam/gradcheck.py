"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor, backward, no_grad


class NondeterministicBuilder(RuntimeError):
    pass


LossBuilder = Callable[[Mapping[str, Tensor], np.random.Generator], Tensor]


def _evaluate(builder: LossBuilder, values: Mapping[str, np.ndarray], seed: int) -> float:
    with no_grad():
        tensors = {k: Tensor(v) for k, v in values.items()}
        return builder(tensors, np.random.default_rng(seed)).item()


def grad_check(
    builder: LossBuilder,
    params: Mapping[str, np.ndarray],
    seed: int = 0,
    eps: float = 1e-5,
    max_coords: int | None = None,
) -> dict[str, float]:
    """Compare tape gradients of ``builder`` against central differences.

    ``builder(tensors, rng)`` must return a scalar tensor and be a pure
    function of its inputs; ``rng`` is re-seeded with ``seed`` on every call.
    Returns, per parameter, ``max |analytic - numeric| / max(1, |numeric|)``.
    ``max_coords`` subsamples coordinates (seeded) for large parameters.
    """
    values = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    f0 = _evaluate(builder, values, seed)
    if _evaluate(builder, values, seed) != f0:
        raise NondeterministicBuilder("loss builder returned different values for identical inputs")

    tensors = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in values.items()}
    with Tape() as tape:
        loss = builder(tensors, np.random.default_rng(seed))
    backward(tape, loss, params=list(tensors.values()))

    pick = np.random.default_rng(seed + 1)
    report: dict[str, float] = {}
    for name, v in values.items():
        analytic = tensors[name].grad.reshape(-1)
        flat = v.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(pick.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = _evaluate(builder, values, seed)
            flat[i] = orig - eps
            fm = _evaluate(builder, values, seed)
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
        report[name] = worst
    return report


# -- certification suite -------------------------------------------------------

_DICTS = (("embed", "embed."), ("final", "final."), ("proj", "proj."), ("params", ""), ("head", "head."))
_LISTS = ("layers", "blocks")


def _slots(module):
    """(name, container, key) for every parameter slot of a model object."""
    for attr, prefix in _DICTS:
        d = getattr(module, attr, None)
        if isinstance(d, dict):
            for k in d:
                yield prefix + k, d, k
    for attr in _LISTS:
        for i, d in enumerate(getattr(module, attr, None) or []):
            for k in d:
                yield f"{attr}.{i}.{k}", d, k


def module_values(modules: Mapping[str, object]) -> dict[str, np.ndarray]:
    return {f"{m}.{name}": d[k].data.copy() for m, mod in modules.items() for name, d, k in _slots(mod)}


def bind(modules: Mapping[str, object], tensors: Mapping[str, Tensor]) -> None:
    """Point each module's parameter slots at the given tensors."""
    for m, mod in modules.items():
        for name, d, k in _slots(mod):
            d[k] = tensors[f"{m}.{name}"]


def _toy_modules(seed: int):
    from .config import RunConfig
    from .encoders import EncoderConfig, EncoderStack
    from .masking import TextMasker, VisionMasker

    cfg = RunConfig(K=3, h=8, heads=2, proj_dim=4, patch_size=4, image_size=8, vocab_size=12, q_max=5,
                    N_v=2, N_t=2, mask_channels=3, text_mask_layers=1, dtype="float64", seed=seed)
    ecfg = EncoderConfig.from_run(cfg)
    mods = {
        "ev": EncoderStack(ecfg, "vision", seed=seed, dtype=np.float64),
        "et": EncoderStack(ecfg, "text", seed=seed + 1, dtype=np.float64),
        "mv": VisionMasker(cfg.N_v, cfg.mask_channels, seed=seed + 2, dtype=np.float64),
        "mt": TextMasker(cfg.h, cfg.heads, cfg.N_t, cfg.text_mask_layers, cfg.mlp_ratio, seed=seed + 3,
                         dtype=np.float64),
    }
    return cfg, mods


def certification_cases(seed: int = 0) -> dict[str, tuple[LossBuilder, dict[str, np.ndarray]]]:
    """Seeded float64 toy problems for each differentiable objective."""
    from .contrastive import info_nce, uniclam_loss, vision_clam
    from .sharing import sharing_penalty
    from .vqa import VqaHead, VqaItem, answer_logits, nll_loss

    rng = np.random.default_rng(seed)
    cfg, mods = _toy_modules(seed)
    images = rng.uniform(0, 1, size=(3, 8, 8))
    captions = [(2, 3, 4), (5, 6), (7, 8, 9, 10)]
    cases = {}

    enc = {k: mods[k] for k in ("ev", "et")}

    def sharing(t, _rng):
        bind(enc, t)
        return sharing_penalty(mods["ev"], mods["et"])

    # perturb so the coupled layers differ
    vals = module_values(enc)
    vals = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in vals.items()}
    cases["sharing_penalty"] = (sharing, vals)

    cases["info_nce"] = (
        lambda t, _rng: info_nce(t["za"], t["zp"], cfg.tau),
        {"za": rng.normal(size=(4, 5)), "zp": rng.normal(size=(4, 5))},
    )

    vis = {k: mods[k] for k in ("ev", "mv")}

    def clam(t, _rng):
        bind(vis, t)
        return vision_clam(images, mods["ev"], mods["mv"], cfg.tau, cfg.mask_semantics)[0]

    cases["clam_vision"] = (clam, module_values(vis))

    def total(t, _rng):
        bind(mods, t)
        return uniclam_loss(images[:2], captions[:2], mods["ev"], mods["et"], mods["mv"], mods["mt"],
                            cfg.tau, cfg.beta, 0.5).total

    vals = module_values(mods)
    vals = {k: v + (0.05 * rng.normal(size=v.shape) if k.startswith("et.layers") else 0) for k, v in vals.items()}
    cases["uniclam_total"] = (total, vals)

    head = VqaHead(cfg.h, 6, n_answers=5, seed=seed + 4, dtype=np.float64)
    fin = {"ev": mods["ev"], "et": mods["et"], "head": head}
    items = [VqaItem(images[i], captions[i], i % 5, bool(i % 2)) for i in range(3)]

    def answer_nll(t, _rng):
        bind(fin, t)
        return nll_loss(answer_logits(mods["ev"], mods["et"], head, items), np.array([it.answer for it in items]))

    cases["answer_nll"] = (answer_nll, module_values(fin))
    return cases


def certify(seed: int = 0, max_coords: int | None = 12) -> dict[str, float]:
    """Worst relative error per objective over all of its parameters."""
    return {name: max(grad_check(builder, vals, seed=seed, max_coords=max_coords).values())
            for name, (builder, vals) in certification_cases(seed).items()}
