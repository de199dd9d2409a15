"""Time the numba and numpy kernel backends on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 50]

Also times one full training epoch on the synthetic fixture per backend.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from prag import _kernels
from prag.retriever import TrainConfig, train
from prag.synth import generate_synthetic_fixture


def _inputs(rng, B=64, L=40, d=32, H=4):
    x = rng.normal(size=(B * L, d))
    mask = np.ones((B, L), dtype=bool)
    mask[:, L // 2:] = rng.random((B, L - L // 2)) < 0.5
    return {
        "layer_norm_fwd": (x, np.ones(d), np.zeros(d)),
        "masked_softmax_fwd": (rng.normal(size=(B, H, L, L)), mask),
        "relu_pool_fwd": (rng.normal(size=(B, L)), mask),
        "cosine_scores": (rng.normal(size=(5000, d)).astype(np.float32), rng.normal(size=d)),
    }


def _time(fn, args, repeat):
    fn(*args)   # warm-up (and JIT compile)
    t = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t) / repeat


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args(argv)
    inputs = _inputs(np.random.default_rng(0))
    backends = ["numpy"] + (["numba"] if _kernels.HAS_NUMBA else [])
    rows = []
    for name, a in inputs.items():
        times = {}
        for b in backends:
            _kernels.set_backend(b)
            times[b] = _time(getattr(_kernels, name), a, args.repeat)
        rows.append((name, times))
    fx = generate_synthetic_fixture(40, 20, 4, 0.1, 0)
    epoch = {}
    for b in backends:
        _kernels.set_backend(b)
        train(fx.corpus, fx.store, TrainConfig(epochs=1))   # warm-up
        t = time.perf_counter()
        train(fx.corpus, fx.store, TrainConfig(epochs=2))
        epoch[b] = (time.perf_counter() - t) / 2
    rows.append(("train epoch (40x20 fixture)", epoch))
    print(f"{'kernel':32s}" + "".join(f"{b:>14s}" for b in backends) + "     speedup")
    for name, times in rows:
        line = f"{name:32s}" + "".join(f"{times[b] * 1e3:12.3f}ms" for b in backends)
        if "numba" in times:
            line += f"  {times['numpy'] / times['numba']:9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
