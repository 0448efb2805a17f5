"""Compiled vs numpy kernel timings, plus one full training step per backend.

    python benchmarks/bench_kernels.py [--repeat 20] [--steps 5]

Kernel timings call both modules directly. The training-step timing runs in
a subprocess per backend so the import-time selection applies.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from uniclam import _kernels_py

try:
    from uniclam import _kernels_c
except ImportError:
    _kernels_c = None


def cases(rng):
    x = rng.normal(size=(16, 8, 32, 32)).astype(np.float32)
    cols = _kernels_py.im2col(x, 3, 1, 1)
    ln = rng.normal(size=(16 * 64, 32)).astype(np.float32)
    g, b = np.ones(32, np.float32), np.zeros(32, np.float32)
    _, xhat, rstd = _kernels_py.layernorm_forward(ln, g, b, 1e-5)
    sm = (rng.normal(size=(16 * 4 * 64, 64)) * 8).astype(np.float32)
    y = _kernels_py.softmax_forward(sm)
    n = 200_000
    p, gr = rng.normal(size=n).astype(np.float32), rng.normal(size=n).astype(np.float32)
    m, v = np.zeros(n, np.float32), np.zeros(n, np.float32)
    return {
        "im2col 16x8x32x32 k3": lambda k: k.im2col(x, 3, 1, 1),
        "col2im 16x8x32x32 k3": lambda k: k.col2im(cols, x.shape, 3, 1, 1),
        "layernorm fwd 1024x32": lambda k: k.layernorm_forward(ln, g, b, 1e-5),
        "layernorm bwd 1024x32": lambda k: k.layernorm_backward(ln, xhat, rstd, g),
        "softmax fwd 4096x64": lambda k: k.softmax_forward(sm),
        "softmax bwd 4096x64": lambda k: k.softmax_backward(sm, y),
        "adam 200k": lambda k: k.adam_update(p, gr, m, v, 1e-3, 0.9, 0.999, 1e-8, 5e-4, 0.1, 0.001),
    }


STEP = """
import time, numpy as np
from uniclam import kernels
from uniclam.config import RunConfig
from uniclam.data import generate_dataset
from uniclam.optim import alternating_step, build_train_state
s = generate_dataset(16, 0)
st = build_train_state(RunConfig(seed=1))
imgs = np.stack([x.image for x in s]); caps = [x.caption_ids for x in s]
alternating_step(st, imgs, caps)
ts = []
for _ in range({steps}):
    t = time.perf_counter(); alternating_step(st, imgs, caps); ts.append(time.perf_counter() - t)
print(kernels.BACKEND, 1000 * float(np.median(ts)))
"""


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':26s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        tp = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        if _kernels_c is None:
            print(f"{name:26s} {tp:10.3f} {'n/a':>10s}")
            continue
        tc = min(timeit.repeat(lambda: fn(_kernels_c), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:26s} {tp:10.3f} {tc:10.3f} {tp / tc:7.1f}x")
    print()
    for force in ("1", "0"):
        env = dict(os.environ, UNICLAM_PURE_PYTHON=force)
        out = subprocess.run([sys.executable, "-c", STEP.format(steps=args.steps)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"training step ({out[0]} backend): {float(out[1]):.1f} ms median")


if __name__ == "__main__":
    main()
