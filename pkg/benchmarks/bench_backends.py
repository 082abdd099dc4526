"""Benchmarks the compiled kernels against the numpy fallback.

Micro section times the aggregation kernels on realistic shapes (short
sequences, wide features).  Macro section times a full optimization step
per backend in subprocesses, since the backend is fixed at import.

Run:  python3 benchmarks/bench_backends.py [--repeat N] [--steps N]
"""

import argparse
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from expertfuse._kernels import reference

try:
    from expertfuse._kernels import _fastcore
except ImportError:
    _fastcore = None

SHAPES = [
    # (rows, dim, clusters, ghosts)   text-side and video-side workloads
    (12, 300, 28, 1),
    (16, 128, 8, 1),
    (16, 512, 8, 1),
    (16, 2048, 8, 1),
]

TRAIN_SNIPPET = """
import time

import numpy as np

from expertfuse._kernels import backend_name
from expertfuse.config import ExpertConfig, ModelConfig, OptimConfig
from expertfuse.dataio import Record
from expertfuse.training import train

rng = np.random.default_rng(0)
cfg = ModelConfig(
    experts=(
        ExpertConfig("motion", 128, aggregator="netvlad", vlad_clusters=8),
        ExpertConfig("audio", 64),
    ),
    caption_dim=48,
    variant="ce",
    common_dim=64,
    text_vlad_clusters=8,
)
records = []
for i in range(32):
    z = rng.standard_normal(16)
    records.append(Record(
        f"v{i}",
        {"motion": rng.standard_normal((12, 128)),
         "audio": rng.standard_normal((12, 64))},
        (rng.standard_normal((8, 48)),),
    ))
optim = OptimConfig(batch_size=16, max_steps=__STEPS__)
start = time.perf_counter()
train(records, cfg, optim, seed=0)
elapsed = time.perf_counter() - start
print(f"{backend_name():>8}: {elapsed / __STEPS__ * 1e3:8.1f} ms/step")
"""


def time_fn(fn, repeat):
    best = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best.append(time.perf_counter() - start)
    return statistics.median(best)


def bench_kernels(repeat):
    print("aggregation kernel, forward + backward (median of "
          f"{repeat} runs, ms):")
    header = f"{'shape':>22}  {'pure':>10}  {'compiled':>10}  {'speedup':>8}"
    print(header)
    for t, d, k, g in SHAPES:
        rng = np.random.default_rng(42)
        x = rng.standard_normal((t, d))
        clusters = rng.standard_normal((k, d))
        w = rng.standard_normal((d, k + g))
        b = rng.standard_normal(k + g)
        grad = rng.standard_normal(k * d)

        def run(mod):
            out, cache = mod.vlad_forward(x, clusters, w, b, 1e-12)
            mod.vlad_backward(cache, grad)

        t_ref = time_fn(lambda: run(reference), repeat)
        label = f"T={t} d={d} K={k}+{g}"
        if _fastcore is None:
            print(f"{label:>22}  {t_ref * 1e3:10.3f}  {'n/a':>10}  {'n/a':>8}")
            continue
        t_fast = time_fn(lambda: run(_fastcore), repeat)
        print(f"{label:>22}  {t_ref * 1e3:10.3f}  {t_fast * 1e3:10.3f}  "
              f"{t_ref / t_fast:7.1f}x")


def bench_train_step(steps):
    print(f"\nfull optimization step, {steps} steps of a two-expert model:")
    snippet = TRAIN_SNIPPET.replace("__STEPS__", str(steps))
    for pure in ("0", "1"):
        env = dict(os.environ, EXPERTFUSE_PURE=pure)
        proc = subprocess.run(
            [sys.executable, "-c", snippet], env=env,
            capture_output=True, text=True,
        )
        if proc.returncode != 0:
            print(proc.stderr, file=sys.stderr)
            raise SystemExit(2)
        print(proc.stdout, end="")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=200,
                        help="kernel timing repetitions")
    parser.add_argument("--steps", type=int, default=20,
                        help="optimization steps for the macro benchmark")
    args = parser.parse_args()
    bench_kernels(args.repeat)
    bench_train_step(args.steps)


if __name__ == "__main__":
    main()
