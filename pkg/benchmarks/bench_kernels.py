"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--train]

Each kernel is also checked for bit-identical output across backends, so a
speedup never hides a result change. ``--train`` additionally times one
short training run per backend in a subprocess (the backend is fixed at
import time by CLIPREPRO_DISABLE_NUMBA).
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from cliprepro import _kernels

TRAIN_SNIPPET = """
import hashlib
import time
from cliprepro.config import RunConfig
from cliprepro.trainer import train
from cliprepro import _kernels
cfg = RunConfig(epochs=10)
train(RunConfig(epochs=1, warmup_steps=0))  # compile / warm caches
t = time.perf_counter()
r = train(cfg)
print(_kernels.BACKEND, len(r.trajectory), time.perf_counter() - t, hashlib.sha256(r.checkpoint).hexdigest()[:16])
"""


def best_of(fn, repeat: int) -> float:
    fn()  # warm-up (numba compiles here)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng: np.random.Generator):
    a32 = rng.standard_normal((512, 192)).astype(np.float32)
    b32 = rng.standard_normal((192, 128)).astype(np.float32)
    rows = rng.standard_normal((4096, 128)).astype(np.float32)
    vec = rng.standard_normal(100_000)
    state = np.array([1, 2, 3, 4], dtype=np.uint64)
    return {
        "matmul 512x192 @ 192x128 f32": lambda be: _kernels.matmul(a32, b32, backend=be),
        "rowsum 4096x128 f32": lambda be: _kernels.rowsum(rows, backend=be),
        "seqsum 1e5 f64": lambda be: np.asarray(_kernels.seqsum(vec, backend=be)),
        "xoshiro_fill 1e5": lambda be: _kernels.xoshiro_fill(state.copy(), 100_000, backend=be),
        "batch_shuffle 1000x64": lambda be: _kernels.batch_shuffle(state.copy(), 1000, 64, backend=be),
    }


def run_kernels(repeat: int) -> None:
    backends = _kernels.available_backends()
    print(f"backends: {', '.join(backends)}")
    print(f"{'kernel':34s}" + "".join(f"{b:>12s}" for b in backends) + "   speedup  identical")
    for name, fn in cases(np.random.default_rng(0)).items():
        outs = {b: fn(b) for b in backends}
        times = {b: best_of(lambda b=b: fn(b), repeat) for b in backends}
        same = all(np.array_equal(outs[backends[0]], outs[b]) for b in backends)
        speed = times["numpy"] / times["numba"] if "numba" in times else float("nan")
        row = "".join(f"{times[b] * 1e3:10.2f}ms" for b in backends)
        print(f"{name:34s}{row}   {speed:6.1f}x  {same}")


def run_training() -> None:
    for disable in ("0", "1"):
        env = dict(os.environ, CLIPREPRO_DISABLE_NUMBA=disable)
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, capture_output=True, text=True, check=True)
        backend, steps, secs, tail = out.stdout.split()
        print(f"train {steps} steps  backend={backend:6s} {float(secs):7.2f}s  checkpoint sha256 {tail}")


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--train", action="store_true", help="also time a short training run per backend")
    args = ap.parse_args()
    run_kernels(args.repeat)
    if args.train:
        run_training()


if __name__ == "__main__":
    main()
