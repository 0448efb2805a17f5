"""Command-line entry point.

Exit codes: 0 success, 2 training diverged (the last good checkpoint is
kept), 3 bad input or a checkpoint that does not fit the configuration.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import runtime
from .checkpoint import CheckpointError, CompatibilityError, load_into, read_checkpoint, write_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import DatasetFormatError, atomic_write_bytes, generate_dataset, read_dataset, write_dataset
from .tensor import NonFiniteError

EXIT_OK, EXIT_DIVERGED, EXIT_INPUT = 0, 2, 3


class InputError(Exception):
    pass


def _config(args) -> RunConfig:
    return load_config(args.config, seed=args.seed)


def _data(args):
    if args.data is None:
        raise InputError("--data is required")
    return read_dataset(args.data)


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_gen_data(args) -> int:
    if args.out is None:
        raise InputError("--out is required")
    samples = generate_dataset(args.n, args.seed or 0)
    write_dataset(samples, args.out)
    _log(f"wrote {len(samples)} scenes to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .pipeline import pretrain

    cfg = _config(args)
    samples = _data(args)
    n_eval = int(round(len(samples) * cfg.eval_fraction))
    out = _out(args, "run")
    t0 = time.perf_counter()

    def progress(r):
        if args.verbose and r.step % 100 == 0:
            _log(f"step {r.step} loss {r.loss_total:.4f} ({time.perf_counter() - t0:.0f}s)")

    res = pretrain(cfg, samples[: len(samples) - n_eval], out, progress)
    if res.diverged is not None:
        _log(f"diverged: {res.diverged}; kept checkpoint after step {res.state.step}")
        return EXIT_DIVERGED
    _log(f"pretrained {len(res.rows)} steps -> {out / 'model.uclm'}")
    return EXIT_OK


def _checkpoint(args):
    if args.checkpoint is None:
        raise InputError("--checkpoint is required")
    return read_checkpoint(args.checkpoint)


def _head_tensors(head) -> dict[str, np.ndarray]:
    return {f"head.{k}": t.data for k, t in head.named_parameters()}


def cmd_finetune(args) -> int:
    from .pipeline import finetune_and_evaluate, split_items, state_from_checkpoint

    cfg = _config(args)
    state = state_from_checkpoint(cfg, _checkpoint(args))
    train_items, eval_items = split_items(_data(args), cfg.eval_fraction)
    res = finetune_and_evaluate(cfg, state, train_items, eval_items)
    res.report.check()
    out = _out(args, "finetune")
    tensors = {k: v for k, v in state.named_tensors().items() if k[:3] in ("ev.", "et.")}
    tensors.update(_head_tensors(res.head))
    write_checkpoint(out / "finetuned.uclm", tensors)
    atomic_write_bytes(out / "report.json", res.report.to_json().encode())
    _log(f"overall accuracy {res.report.accuracy_overall:.4f} on {res.report.n_eval} questions")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .pipeline import split_items, state_from_checkpoint
    from .vqa import VqaHead, evaluate

    cfg = _config(args)
    tensors = _checkpoint(args)
    state = state_from_checkpoint(cfg, tensors)
    head = VqaHead(cfg.h, cfg.head_hidden, dtype=cfg.dtype)
    load_into(dict((k, t.data) for k, t in head.named_parameters()), tensors, "head.")
    _, eval_items = split_items(_data(args), cfg.eval_fraction)
    report = evaluate(state.ev, state.et, head, eval_items)
    report.check()
    if args.out:
        out = _out(args, "")
        atomic_write_bytes(out / "report.json", report.to_json().encode())
    else:
        sys.stdout.write(report.to_json())
    return EXIT_OK


def cmd_export_masks(args) -> int:
    from .pipeline import export_masks, state_from_checkpoint

    cfg = _config(args)
    state = state_from_checkpoint(cfg, _checkpoint(args), need_maskers=True)
    report = export_masks(cfg, state, _data(args), _out(args, "masks"), args.count)
    _log("mean best-IoU " + ", ".join(f"{k} {v:.3f}" for k, v in report["mean"].items()))
    return EXIT_OK


def cmd_bench_explain(args) -> int:
    from .pipeline import bench_csv, bench_explain, state_from_checkpoint

    cfg = _config(args)
    state = state_from_checkpoint(cfg, _checkpoint(args), need_maskers=True)
    if args.n < 10:
        raise InputError("--n must be at least 10")
    rows = bench_explain(state, _data(args), args.n)
    data = bench_csv(rows)
    if args.out:
        atomic_write_bytes(_out(args, "") / "bench_explain.csv", data)
    else:
        sys.stdout.write(data.decode())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import certify

    t0 = time.perf_counter()
    errs = certify(args.seed or 0, None if args.full else 12)
    ok = True
    for name, err in errs.items():
        passed = err < args.tol
        ok &= passed
        print(f"{name:16s} max_rel_err={err:.3e} {'ok' if passed else 'FAIL'}")
    print(f"elapsed {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if ok else 1


def cmd_sweep(args) -> int:
    from .ablation import SweepSpec, run_sweep

    if args.spec is None:
        raise InputError("--spec is required")
    spec = SweepSpec.load(args.spec)
    if args.seed is not None:
        raise InputError("sweep seeds come from the spec file")

    def progress(v, s, res):
        _log(f"{spec.axis}={v} seed={s} " + ("diverged" if res[0] is None else
                                            f"overall={res[0]['accuracy_overall']:.4f}"))

    table = run_sweep(spec, jobs=args.jobs, progress=progress)
    table.write(_out(args, "sweep"))
    sys.stdout.write(table.to_markdown())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--seed", type=int, help="overrides the configured seed")
    common.add_argument("--out", help="output directory (output file for gen-data)")
    common.add_argument("--data", help="dataset file (.ucld)")
    common.add_argument("--checkpoint", help="model checkpoint (.uclm)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="uniclam", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic scene dataset")
    g.add_argument("--n", type=int, default=1000, help="number of scenes")
    g.set_defaults(fn=cmd_gen_data)
    sub.add_parser("pretrain", parents=[common], help="contrastive pretraining").set_defaults(fn=cmd_pretrain)
    sub.add_parser("finetune", parents=[common], help="fine-tune an answer head, then evaluate") \
        .set_defaults(fn=cmd_finetune)
    sub.add_parser("evaluate", parents=[common], help="evaluate a fine-tuned checkpoint") \
        .set_defaults(fn=cmd_evaluate)
    e = sub.add_parser("export-masks", parents=[common], help="write mask images and an IoU report")
    e.add_argument("--count", type=int, help="number of samples (default: config export_count)")
    e.set_defaults(fn=cmd_export_masks)
    b = sub.add_parser("bench-explain", parents=[common], help="time mask generation against attention maps")
    b.add_argument("--n", type=int, default=100, help="number of instances")
    b.set_defaults(fn=cmd_bench_explain)
    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every objective")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--full", action="store_true", help="check every coordinate instead of a sample")
    c.set_defaults(fn=cmd_gradcheck)
    s = sub.add_parser("sweep", parents=[common], help="run a seeded ablation sweep")
    s.add_argument("--spec", help="sweep specification (JSON)")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        runtime.configure()
        return args.fn(args)
    except CompatibilityError as e:
        _log(f"error: incompatible checkpoint tensor {e}")
        return EXIT_INPUT
    except (InputError, ConfigError, CheckpointError, DatasetFormatError, FileNotFoundError, ValueError) as e:
        _log(f"error: {e}")
        return EXIT_INPUT
    except NonFiniteError as e:
        _log(f"diverged: {e}")
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
