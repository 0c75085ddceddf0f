"""Benchmark the MaxSim kernels: compiled extension vs. numpy fallback.

Runs the row-aligned pairs op (the training hot path, forward and
backward) and the all-pairs matrix op (the reranking hot path) over a
sweep of shapes, on every available backend, and prints a table with the
speedup of the compiled backend where both exist. Agreement between
backends is checked on every shape so the benchmark doubles as a parity
smoke test.

Usage: python benchmarks/bench_maxsim.py [--repeats N]
"""

import argparse
import time

import numpy as np

from miniclir import kernels

PAIR_SHAPES = [  # (spans, length, dim) for the row-aligned training op
    (8, 48, 64),
    (32, 48, 64),
    (32, 180, 128),
]
MATRIX_SHAPES = [  # (queries, docs, length, dim) for the reranking op
    (8, 64, 48, 64),
    (16, 128, 48, 64),
]


def spans(rng, count, length, dim):
    """Unit-normalized token blocks with a random (never empty) mask."""
    tokens = rng.standard_normal((count, length, dim))
    tokens /= np.linalg.norm(tokens, axis=-1, keepdims=True)
    mask = (rng.random((count, length)) < 0.9).astype(np.int64)
    mask[:, 0] = 1
    return tokens, mask


def best_of(repeats, fn):
    timings = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        timings.append(time.perf_counter() - start)
    return min(timings)


def sweep(repeats):
    rng = np.random.default_rng(0)
    cases = []
    for count, length, dim in PAIR_SHAPES:
        x, xm = spans(rng, count, length, dim)
        y, ym = spans(rng, count, length, dim)
        _, argmax = kernels.maxsim_pairs(x, xm, y, ym)
        grad = np.ones(count)
        cases.append((f"pairs fwd {count}x{length}x{dim}",
                      lambda x=x, xm=xm, y=y, ym=ym: kernels.maxsim_pairs(x, xm, y, ym)[0]))
        cases.append((f"pairs bwd {count}x{length}x{dim}",
                      lambda grad=grad, argmax=argmax, x=x, y=y:
                      kernels.maxsim_pairs_backward(grad, argmax, x, y)[0]))
    for queries, docs, length, dim in MATRIX_SHAPES:
        x, xm = spans(rng, queries, length, dim)
        y, ym = spans(rng, docs, length, dim)
        _, argmax = kernels.maxsim_matrix(x, xm, y, ym)
        grad = np.ones((queries, docs))
        cases.append((f"matrix fwd {queries}x{docs} len {length} dim {dim}",
                      lambda x=x, xm=xm, y=y, ym=ym: kernels.maxsim_matrix(x, xm, y, ym)[0]))
        cases.append((f"matrix bwd {queries}x{docs} len {length} dim {dim}",
                      lambda grad=grad, argmax=argmax, x=x, y=y:
                      kernels.maxsim_matrix_backward(grad, argmax, x, y)[0]))

    backends = kernels.available_backends()
    results = {}
    values = {}
    for backend in backends:
        previous = kernels.set_backend(backend)
        try:
            for label, fn in cases:
                fn()  # warmup (and the value used for the parity check)
                values[(backend, label)] = np.asarray(fn())
                results[(backend, label)] = best_of(repeats, fn)
        finally:
            kernels.set_backend(previous)
    return cases, backends, results, values


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5,
                        help="timing repetitions per case (best is reported)")
    args = parser.parse_args()

    cases, backends, results, values = sweep(args.repeats)
    has_both = set(backends) >= {"numpy", "cython"}
    print(f"available backends: {', '.join(backends)} (active: {kernels.backend_name()})")
    header = f"{'case':<34}" + "".join(f"{b + ' (ms)':>14}" for b in backends)
    if has_both:
        header += f"{'speedup':>10}{'max |diff|':>12}"
    print(header)
    print("-" * len(header))
    worst_gap = 0.0
    for label, _ in cases:
        line = f"{label:<34}"
        for backend in backends:
            line += f"{results[(backend, label)] * 1e3:>14.3f}"
        if has_both:
            ratio = results[("numpy", label)] / results[("cython", label)]
            gap = float(np.max(np.abs(values[("numpy", label)].astype(np.float64)
                                      - values[("cython", label)].astype(np.float64))))
            worst_gap = max(worst_gap, gap)
            line += f"{ratio:>9.1f}x{gap:>12.2e}"
        print(line)
    if has_both and worst_gap > 1e-9:
        print(f"warning: backends disagree by {worst_gap:.3e}")
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
