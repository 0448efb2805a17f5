"""Seeded sweeps over one configuration axis, aggregated into comparison tables,
and paired interpretability statistics for mask quality."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .data import SceneSample, atomic_write_bytes, best_iou, generate_dataset
from .optim import TrainState
from .pipeline import (attention_map, finetune_and_evaluate, pretrain, random_baseline_masks, split_items,
                       vision_masks)

AXES = {
    "beta": "beta",
    "lambda": "lam",
    "N_v": "N_v",
    "N_t": "N_t",
    "augmentation": "augmentation",
    "sharing": "sharing",
    "unified": "unified",
}
DEFAULT_SEEDS = (100, 200, 300, 400, 500)
METRICS = ("accuracy_open", "accuracy_closed", "accuracy_overall", "best_iou")


@dataclass
class SweepSpec:
    axis: str
    values: list
    seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    base: RunConfig = field(default_factory=RunConfig)
    data_size: int = 1000
    data_seed: int = 0

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; expected one of {', '.join(AXES)}")
        if not self.values:
            raise ConfigError("sweep value list is empty")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ConfigError("sweep seeds must be nonempty and distinct")
        for v in self.values:
            self.config(v, self.seeds[0])  # validates every variant up front

    def config(self, value, seed: int) -> RunConfig:
        return self.base.replace(**{AXES[self.axis]: value, "seed": seed})

    def to_dict(self) -> dict:
        return {"axis": self.axis, "values": list(self.values), "seeds": list(self.seeds),
                "base": self.base.to_dict(), "data_size": self.data_size, "data_seed": self.data_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        known = {"axis", "values", "seeds", "base", "data_size", "data_seed"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown sweep keys: {', '.join(unknown)}")
        if "axis" not in d or "values" not in d:
            raise ConfigError("sweep spec needs 'axis' and 'values'")
        return cls(d["axis"], list(d["values"]), list(d.get("seeds", DEFAULT_SEEDS)),
                   RunConfig.from_dict(d.get("base", {})), int(d.get("data_size", 1000)),
                   int(d.get("data_seed", 0)))

    @classmethod
    def load(cls, path: str | Path) -> "SweepSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read sweep spec {path}: {e}") from e


@dataclass
class RunOutcome:
    value: object
    seed: int
    metrics: dict | None  # None when the run diverged
    detail: str = ""


def mean_mask_iou(cfg: RunConfig, state: TrainState, samples: list[SceneSample]) -> float | None:
    """Mean best-IoU of the trained vision masks over ``samples``; None without a generator."""
    if state.mv is None or not samples:
        return None
    masks = vision_masks(state, np.stack([s.image for s in samples]))
    return float(np.mean([best_iou(m, s.gt_regions, cfg.iou_threshold) for m, s in zip(masks, samples)]))


def run_one(cfg: RunConfig, samples: list[SceneSample]) -> tuple[dict | None, str]:
    """Pretrain, fine-tune and evaluate one configuration in memory."""
    n_eval = int(round(len(samples) * cfg.eval_fraction))
    result = pretrain(cfg, samples[: len(samples) - n_eval])
    if result.diverged is not None:
        return None, str(result.diverged)
    train_items, eval_items = split_items(samples, cfg.eval_fraction)
    ft = finetune_and_evaluate(cfg, result.state, train_items, eval_items)
    rep = ft.report
    return {
        "accuracy_open": rep.accuracy_open,
        "accuracy_closed": rep.accuracy_closed,
        "accuracy_overall": rep.accuracy_overall,
        "best_iou": mean_mask_iou(cfg, result.state, samples[len(samples) - n_eval :]),
    }, ""


def _run_task(args) -> tuple[dict | None, str]:
    cfg_dict, data_size, data_seed = args
    return run_one(RunConfig.from_dict(cfg_dict), generate_dataset(data_size, data_seed))


def run_sweep(spec: SweepSpec, jobs: int = 1, progress=None, cache: dict | None = None) -> "ComparisonTable":
    """Every (value, seed) run of ``spec``, aggregated per value.

    ``cache`` maps a canonical config key to a finished outcome so that sweeps
    sharing a baseline variant train it once.
    """
    tasks = [(v, s, spec.config(v, s)) for v in spec.values for s in spec.seeds]
    cache = {} if cache is None else cache

    def key(cfg):
        return json.dumps([cfg.to_dict(), spec.data_size, spec.data_seed], sort_keys=True)

    todo = [(v, s, c) for v, s, c in tasks if key(c) not in cache]
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = pool.map(_run_task, [(c.to_dict(), spec.data_size, spec.data_seed) for _, _, c in todo])
            for (v, s, c), res in zip(todo, results):
                cache[key(c)] = res
                if progress is not None:
                    progress(v, s, res)
    else:
        samples = generate_dataset(spec.data_size, spec.data_seed) if todo else []
        for v, s, c in todo:
            cache[key(c)] = run_one(c, samples)
            if progress is not None:
                progress(v, s, cache[key(c)])
    outcomes = [RunOutcome(v, s, *cache[key(c)]) for v, s, c in tasks]
    return ComparisonTable.from_outcomes(spec.axis, spec.values, outcomes)


def _label(value) -> str:
    return json.dumps(value) if not isinstance(value, str) else value


@dataclass
class ComparisonTable:
    axis: str
    rows: dict  # label -> {metric: (mean, stdev, n) or None}
    diverged: dict  # label -> count of excluded runs
    outcomes: list[RunOutcome]

    @classmethod
    def from_outcomes(cls, axis: str, values, outcomes: list[RunOutcome]) -> "ComparisonTable":
        rows, diverged = {}, {}
        for v in values:
            label = _label(v)
            runs = [o for o in outcomes if o.value == v]
            good = sorted((o for o in runs if o.metrics is not None), key=lambda o: o.seed)
            diverged[label] = len(runs) - len(good)
            cells = {}
            for m in METRICS:
                xs = [o.metrics[m] for o in good if o.metrics[m] is not None]
                if not xs:
                    cells[m] = None
                    continue
                sd = statistics.stdev(xs) if len(xs) > 1 else 0.0
                cells[m] = (math.fsum(xs) / len(xs), sd, len(xs))
            rows[label] = cells
        return cls(axis, rows, diverged, list(outcomes))

    def per_seed(self, label: str, metric: str = "accuracy_overall") -> dict[int, float]:
        return {o.seed: o.metrics[metric] for o in self.outcomes
                if _label(o.value) == label and o.metrics is not None}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = [self.axis]
        for m in METRICS:
            header += [f"{m}_mean", f"{m}_std"]
        w.writerow(header + ["n_runs", "n_diverged"])
        for label, cells in self.rows.items():
            row = [label]
            for m in METRICS:
                row += ["", ""] if cells[m] is None else [repr(cells[m][0]), repr(cells[m][1])]
            n = max((c[2] for c in cells.values() if c is not None), default=0)
            w.writerow(row + [n, self.diverged[label]])
        return buf.getvalue()

    def to_markdown(self) -> str:
        titles = {"accuracy_open": "Open", "accuracy_closed": "Closed", "accuracy_overall": "Overall",
                  "best_iou": "Mask IoU"}
        lines = [f"| {self.axis} | " + " | ".join(titles[m] for m in METRICS) + " |",
                 "|---" * (len(METRICS) + 1) + "|"]
        for label, cells in self.rows.items():
            parts = ["n/a" if cells[m] is None else f"{100 * cells[m][0]:.1f} ± {100 * cells[m][1]:.1f}"
                     if m != "best_iou" else f"{cells[m][0]:.3f} ± {cells[m][1]:.3f}" for m in METRICS]
            mark = f" ({self.diverged[label]} diverged)" if self.diverged[label] else ""
            lines.append(f"| {label}{mark} | " + " | ".join(parts) + " |")
        if any(self.diverged.values()):
            lines.append("")
            lines.append(f"Diverged runs are excluded from the means: {sum(self.diverged.values())} in total.")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(out / "comparison.csv", self.to_csv().encode())
        atomic_write_bytes(out / "comparison.md", self.to_markdown().encode())


# -- paired statistics ---------------------------------------------------------


def sign_test(diffs) -> float:
    """Two-sided exact sign test p-value; ties are dropped."""
    d = np.asarray(diffs, dtype=np.float64)
    pos, neg = int((d > 0).sum()), int((d < 0).sum())
    n = pos + neg
    if n == 0:
        return 1.0
    k = min(pos, neg)
    tail = math.fsum(math.comb(n, i) for i in range(k + 1)) / 2.0 ** n
    return min(1.0, 2.0 * tail)


@dataclass
class PairedComparison:
    a: np.ndarray
    b: np.ndarray

    @property
    def diffs(self) -> np.ndarray:
        return self.a - self.b

    @property
    def mean_diff(self) -> float:
        return float(np.mean(self.diffs)) if len(self.a) else 0.0

    @property
    def p_value(self) -> float:
        return sign_test(self.diffs)

    def to_dict(self) -> dict:
        return {"mean_a": float(np.mean(self.a)), "mean_b": float(np.mean(self.b)),
                "mean_diff": self.mean_diff, "wins": int((self.diffs > 0).sum()),
                "losses": int((self.diffs < 0).sum()), "p_value": self.p_value, "n": int(len(self.a))}


def per_sample_iou(masks: np.ndarray, samples: list[SceneSample], threshold: float) -> np.ndarray:
    """(B, N, H, W) candidate masks -> best-IoU per sample."""
    if len(masks) != len(samples):
        raise ValueError(f"{len(masks)} mask sets for {len(samples)} samples")
    return np.array([best_iou(m, s.gt_regions, threshold) for m, s in zip(masks, samples)])


def iou_comparison(masks_a: np.ndarray, masks_b: np.ndarray, samples: list[SceneSample],
                   threshold: float = 0.5) -> PairedComparison:
    """Paired per-sample best-IoU of two mask sources on the same samples."""
    return PairedComparison(per_sample_iou(masks_a, samples, threshold), per_sample_iou(masks_b, samples, threshold))


def interpretability_report(cfg: RunConfig, state: TrainState, samples: list[SceneSample],
                            baseline_seed: int | None = None) -> dict:
    """Trained masks against random one-hot masks and against thresholded attention maps."""
    if state.mv is None:
        raise ValueError("state has no vision mask generator")
    learned = vision_masks(state, np.stack([s.image for s in samples]))
    rand = random_baseline_masks(cfg, len(samples), cfg.seed if baseline_seed is None else baseline_seed)
    attn = np.stack([attention_map(state, s.image)[None] for s in samples])
    return {
        "threshold": cfg.iou_threshold,
        "adversarial_vs_random": iou_comparison(learned, rand, samples, cfg.iou_threshold).to_dict(),
        "adversarial_vs_attention": iou_comparison(learned, attn, samples, cfg.iou_threshold).to_dict(),
    }
