"""Compare the compiled and numpy attack kernels.

    python3 benchmarks/bench_kernels.py            # three preset shapes
    python3 benchmarks/bench_kernels.py --samples 512 --d 32 --p 128 --classes 10

Prints wall time per backend for PGD on a random ReLU model and the largest
disagreement in the returned losses. The compiled kernel wins on single
samples and small batches; on large batches the numpy fallback's batched
matrix products catch up.
"""

import argparse
import time

import numpy as np

from rfi import kernels
from rfi.attacks import AttackConfig, pgd_batch, predict_labels
from rfi.models import FeatureMap, GamModel


# (samples, input dim, feature dim, classes)
PRESETS = [(1, 100, 100, 1), (64, 8, 16, 3), (512, 32, 128, 10)]


def run(samples, d, p, C, repeat):
    fm = FeatureMap.create("random-affine-relu", d, p, seed=0)
    model = GamModel(fm, np.random.default_rng(0).standard_normal((p, C)) / np.sqrt(p))
    X = np.random.default_rng(1).standard_normal((samples, d))
    labels = predict_labels(model, X)
    results = {}
    for norm in ("linf", "l2"):
        cfg = AttackConfig(norm, 0.5 if norm == "l2" else 8 / 255)
        for name in sorted(kernels.BACKENDS):
            best_t = np.inf
            for _ in range(repeat):
                t0 = time.perf_counter()
                out = pgd_batch(model, X, labels, cfg, backend=name)
                best_t = min(best_t, time.perf_counter() - t0)
            results[norm, name] = (best_t, out[1])
        row = [f"{norm:5s}"]
        for name in sorted(kernels.BACKENDS):
            row.append(f"{name}={results[norm, name][0] * 1e3:9.2f} ms")
        if len(kernels.BACKENDS) == 2:
            gap = np.max(np.abs(results[norm, "cython"][1] - results[norm, "python"][1]))
            speed = results[norm, "python"][0] / results[norm, "cython"][0]
            row.append(f"speedup={speed:6.1f}x  max|loss gap|={gap:.2e}")
        print("  ".join(row))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--samples", type=int)
    ap.add_argument("--d", type=int, default=32)
    ap.add_argument("--p", type=int, default=128)
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=3)
    a = ap.parse_args()
    print(f"backends: {sorted(kernels.BACKENDS)}; default {kernels.BACKEND}; threads {kernels.n_threads()}")
    shapes = [(a.samples, a.d, a.p, a.classes)] if a.samples else PRESETS
    for m, d, p, C in shapes:
        print(f"m={m} d={d} p={p} C={C}")
        run(m, d, p, C, a.repeat)


if __name__ == "__main__":
    main()
