"""End-to-end runs: pretraining, fine-tuning, evaluation, and mask export.

These are the building blocks behind the command line and the sweep
harness. All artifacts are written atomically.
"""

from __future__ import annotations

import csv
import io
import json
import math
import gc
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import CompatibilityError, load_into, read_checkpoint, write_checkpoint
from .config import RunConfig
from .contrastive import pad_ids
from .data import IMAGE_SIZE, SceneSample, atomic_write_bytes, best_iou
from .masking import random_masks
from .optim import DivergenceError, StepResult, TrainState, alternating_step, build_train_state
from .tensor import no_grad
from .vqa import EvalReport, VqaHead, evaluate, finetune_step, make_finetune_state, vqa_items

METRICS_HEADER = (
    "step", "loss_total", "loss_clam_v", "loss_clam_t", "loss_gs",
    "masking_objective_pre", "masking_objective_post",
    "mask_entropy_v", "mask_entropy_t", "wall_ms",
)


def metrics_row(r: StepResult) -> list[str]:
    vals = (r.loss_total, r.loss_clam_v, r.loss_clam_t, r.loss_gs, r.masking_objective_pre,
            r.masking_objective_post, r.mask_entropy_v, r.mask_entropy_t, r.wall_ms)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"non-finite metric at step {r.step}")
    return [str(r.step)] + [repr(float(v)) for v in vals]


def metrics_csv(rows: list[StepResult]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow(metrics_row(r))
    return buf.getvalue().encode()


def batch_schedule(n_samples: int, batch: int, steps: int, seed: int) -> list[np.ndarray]:
    """Index batches for ``steps`` steps: shuffled epochs, incomplete tails dropped."""
    if n_samples < batch:
        raise ValueError(f"dataset of {n_samples} samples is smaller than one batch of {batch}")
    rng = np.random.default_rng([seed, 0xDA7A])
    out: list[np.ndarray] = []
    while len(out) < steps:
        perm = rng.permutation(n_samples)
        for i in range(0, n_samples - batch + 1, batch):
            out.append(perm[i : i + batch])
            if len(out) == steps:
                break
    return out


@dataclass
class PretrainResult:
    state: TrainState
    rows: list[StepResult]
    diverged: DivergenceError | None = None


def pretrain(cfg: RunConfig, samples: list[SceneSample], out_dir: str | Path | None = None,
             progress=None) -> PretrainResult:
    """Run ``cfg.steps`` alternating steps; write model.uclm and metrics.csv to ``out_dir``.

    On divergence the checkpoint holds the last good state and the CSV the
    rows completed before it.
    """
    state = build_train_state(cfg)
    rows: list[StepResult] = []
    diverged = None
    images = np.stack([s.image for s in samples]).astype(cfg.dtype) if samples else None
    for idx in batch_schedule(len(samples), cfg.batch, cfg.steps, cfg.seed) if cfg.steps else []:
        try:
            # overflow is caught by the finiteness checks; keep numpy quiet about it
            with np.errstate(over="ignore", invalid="ignore"):
                r = alternating_step(state, images[idx], [samples[i].caption_ids for i in idx])
        except DivergenceError as e:
            diverged = e
            break
        rows.append(r)
        if progress is not None:
            progress(r)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_checkpoint(out / "model.uclm", state.named_tensors())
        atomic_write_bytes(out / "metrics.csv", metrics_csv(rows))
        atomic_write_bytes(out / "config.json", (json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n").encode())
    return PretrainResult(state, rows, diverged)


def state_from_checkpoint(cfg: RunConfig, tensors: dict[str, np.ndarray], need_maskers: bool = False) -> TrainState:
    """Model skeleton from ``cfg`` with weights copied from a checkpoint."""
    state = build_train_state(cfg)
    for prefix, module in (("ev.", state.ev), ("et.", state.et), ("mv.", state.mv), ("mt.", state.mt)):
        if module is None:
            continue
        if prefix in ("mv.", "mt.") and not any(k.startswith(prefix) for k in tensors):
            if need_maskers:
                raise CompatibilityError(prefix + "*", "checkpoint has no mask generator")
            continue
        seen: set[int] = set()
        targets = {}
        for name, t in module.named_parameters():
            if id(t) not in seen:
                seen.add(id(t))
                targets[name] = t.data
        if prefix == "et." and cfg.sharing == "hard":
            # tied blocks were saved once, under the vision stack
            targets = {k: v for k, v in targets.items() if not k.startswith("layers.")}
        load_into(targets, tensors, prefix)
    return state


def split_items(samples: list[SceneSample], eval_fraction: float):
    n_eval = int(round(len(samples) * eval_fraction))
    n_train = len(samples) - n_eval
    return vqa_items(samples[:n_train]), vqa_items(samples[n_train:])


@dataclass
class FinetuneResult:
    report: EvalReport
    losses: list[float]
    head: VqaHead
    state: TrainState


def finetune_and_evaluate(cfg: RunConfig, state: TrainState, train_items, eval_items) -> FinetuneResult:
    children = np.random.SeedSequence([cfg.seed, 0xF17E]).spawn(2)
    head = VqaHead(cfg.h, cfg.head_hidden, seed=int(children[0].generate_state(1)[0]), dtype=cfg.dtype)
    ft = make_finetune_state(state.ev, state.et, head, cfg.finetune_lr, cfg.weight_decay, cfg.freeze_encoders,
                             cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rng = np.random.default_rng(children[1])
    losses = []
    if cfg.finetune_steps:
        if not train_items:
            raise ValueError("no training questions for fine-tuning")
        bs = min(cfg.finetune_batch, len(train_items))
        order: list[int] = []
        for _ in range(cfg.finetune_steps):
            if len(order) < bs:
                order.extend(rng.permutation(len(train_items)).tolist())
            idx, order = order[:bs], order[bs:]
            losses.append(finetune_step(ft, [train_items[i] for i in idx]))
    report = evaluate(state.ev, state.et, head, eval_items)
    return FinetuneResult(report, losses, head, state)


# -- masks and explanations ----------------------------------------------------


def quantize(m: np.ndarray) -> np.ndarray:
    """round(255 m) with halves rounded up, as 8-bit pixels."""
    return np.floor(255.0 * np.clip(np.asarray(m, dtype=np.float64), 0.0, 1.0) + 0.5).astype(np.uint8)


def pgm_bytes(m: np.ndarray) -> bytes:
    px = quantize(m)
    h, w = px.shape
    return f"P5\n{w} {h}\n255\n".encode() + px.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError("not an 8-bit binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def vision_masks(state: TrainState, images: np.ndarray) -> np.ndarray:
    """(B, N_v, H, W) masks from the trained generator."""
    with no_grad():
        return state.mv.masks(np.asarray(images, dtype=state.ev.dtype)).data


def text_masks(state: TrainState, captions) -> tuple[np.ndarray, np.ndarray]:
    ids, key_mask = pad_ids(captions)
    with no_grad():
        return state.mt.masks(state.et.embed_text(ids), key_mask).data, key_mask


def attention_map(state: TrainState, image: np.ndarray) -> np.ndarray:
    """Last-layer attention received by each patch, averaged over heads and
    queries, upsampled to pixels and scaled so the maximum is 1."""
    ev = state.ev
    with no_grad():
        attn = ev.extract_attention(ev.embed_image(np.asarray(image, dtype=ev.dtype)[None]))[-1][0]
    received = attn.mean(axis=(0, 1))  # (T,)
    g = IMAGE_SIZE // ev.cfg.patch_size
    m = received.reshape(g, g).repeat(ev.cfg.patch_size, 0).repeat(ev.cfg.patch_size, 1)
    return m / m.max()


def random_baseline_masks(cfg: RunConfig, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xBA5E])
    return random_masks(rng, (n, IMAGE_SIZE, IMAGE_SIZE), cfg.N_v)


def per_sample_best_iou(masks: np.ndarray, samples: list[SceneSample], threshold: float) -> np.ndarray:
    return np.array([best_iou(m, s.gt_regions, threshold) for m, s in zip(masks, samples)])


def export_masks(cfg: RunConfig, state: TrainState, samples: list[SceneSample], out_dir: str | Path,
                 count: int | None = None) -> dict:
    """Write mask and attention PGMs for the first ``count`` samples plus iou_report.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    count = min(cfg.export_count if count is None else count, len(samples))
    chosen = samples[:count]
    if state.mv is None:
        raise CompatibilityError("mv.*", "checkpoint has no mask generator to export")
    images = np.stack([s.image for s in chosen])
    mv = vision_masks(state, images)
    mt, key_mask = text_masks(state, [s.caption_ids for s in chosen])
    rand = random_baseline_masks(cfg, count, cfg.seed)
    records = []
    for i, s in enumerate(chosen):
        for k in range(mv.shape[1]):
            atomic_write_bytes(out / f"sample{i:03d}_mask{k}.pgm", pgm_bytes(mv[i, k]))
        attn = attention_map(state, s.image)
        atomic_write_bytes(out / f"sample{i:03d}_attention.pgm", pgm_bytes(attn))
        n_tok = int(key_mask[i].sum())
        lines = [" ".join(f"{v:.6f}" for v in mt[i, k, :n_tok]) for k in range(mt.shape[1])]
        atomic_write_bytes(out / f"sample{i:03d}_text_masks.txt", ("\n".join(lines) + "\n").encode())
        records.append({
            "sample": i,
            "regions": int(len(s.gt_regions)),
            "best_iou_adversarial": best_iou(mv[i], s.gt_regions, cfg.iou_threshold),
            "best_iou_random": best_iou(rand[i], s.gt_regions, cfg.iou_threshold),
            "best_iou_attention": best_iou(attn[None], s.gt_regions, cfg.iou_threshold),
        })
    keys = ("best_iou_adversarial", "best_iou_random", "best_iou_attention")
    report = {
        "threshold": cfg.iou_threshold,
        "n_samples": count,
        "samples": records,
        "mean": {k: float(np.mean([r[k] for r in records])) if records else 0.0 for k in keys},
    }
    atomic_write_bytes(out / "iou_report.json", (json.dumps(report, indent=2, sort_keys=True) + "\n").encode())
    return report


def _time_instances(state: TrainState, samples, n_instances: int, times: dict, warmup: int = 5) -> None:
    ev, et = state.ev, state.et
    with no_grad():
        for i in range(-warmup, n_instances):
            s = samples[i % len(samples)]
            img = np.asarray(s.image, dtype=ev.dtype)[None]
            ids = np.asarray(s.caption_ids, dtype=np.int64)[None]
            t0 = time.perf_counter()
            state.mv.masks(img)
            t1 = time.perf_counter()
            state.mt.masks(et.embed_text(ids))
            t2 = time.perf_counter()
            ev.extract_attention(ev.embed_image(img))
            t3 = time.perf_counter()
            et.extract_attention(et.embed_text(ids))
            t4 = time.perf_counter()
            if i < 0:
                continue
            times["mask_v"].append(t1 - t0)
            times["mask_t"].append(t2 - t1)
            times["attn_v"].append(t3 - t2)
            times["attn_t"].append(t4 - t3)


def bench_explain(state: TrainState, samples: list[SceneSample], n_instances: int) -> list[dict]:
    """Per-instance wall time of mask generation against attention extraction.

    Each instance is timed alone (batch of one), vision and text separately,
    after a few untimed warm-up instances. Garbage collection is paused while
    timing.
    """
    if n_instances < 10:
        raise ValueError("bench-explain needs at least 10 instances")
    if state.mv is None:
        raise CompatibilityError("mv.*", "checkpoint has no mask generator to time")
    times = {k: [] for k in ("mask_v", "mask_t", "attn_v", "attn_t")}
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        _time_instances(state, samples, n_instances, times)
    finally:
        if gc_was_enabled:
            gc.enable()

    def stats(xs):
        a = np.asarray(xs)
        return float(a.mean()), float(a.std(ddof=1))

    rows = []
    for method, kv, kt in (("adversarial_mask", "mask_v", "mask_t"), ("attention_map", "attn_v", "attn_t")):
        vm, vs = stats(times[kv])
        tm, ts = stats(times[kt])
        rows.append({"method": method, "vision_mean_s": vm, "vision_std_s": vs,
                     "text_mean_s": tm, "text_std_s": ts, "n_instances": n_instances})
    return rows


BENCH_HEADER = ("method", "vision_mean_s", "vision_std_s", "text_mean_s", "text_std_s", "n_instances")


def bench_csv(rows: list[dict]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_HEADER)
    for r in rows:
        w.writerow([r[k] for k in BENCH_HEADER])
    return buf.getvalue().encode()


def load_state(cfg: RunConfig, checkpoint: str | Path, need_maskers: bool = False) -> TrainState:
    return state_from_checkpoint(cfg, read_checkpoint(checkpoint), need_maskers)


__all__ = [
    "METRICS_HEADER", "metrics_csv", "pretrain", "PretrainResult", "state_from_checkpoint", "load_state",
    "split_items", "finetune_and_evaluate", "FinetuneResult", "quantize", "pgm_bytes", "read_pgm",
    "export_masks", "bench_explain", "bench_csv", "attention_map", "vision_masks", "text_masks",
    "random_baseline_masks", "per_sample_best_iou", "batch_schedule",
]
