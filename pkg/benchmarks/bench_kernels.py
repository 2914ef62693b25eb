"""Compare the compiled kernels with the pure NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is timed on inputs shaped like the training and evaluation
workload: detection columns of 300 proposals by 10 classes for a batch of 8
images, and ranked detection lists matched against a handful of boxes.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from weakmil import _kernels_py

try:
    from weakmil import _kernels as compiled
except ImportError:
    compiled = None


def workloads(rng):
    z = rng.normal(size=(80, 300))  # 8 images x 10 class columns, 300 proposals each
    p = _kernels_py.sparsemax_rows(z)
    u = rng.normal(size=z.shape)
    ious = np.where(rng.random((300, 4)) < 0.1, rng.uniform(0.3, 1.0, (300, 4)), 0.0)
    thresholds = np.array([round(0.5 + 0.05 * i, 2) for i in range(10)])
    small = rng.normal(size=(1, 8))
    return {
        "sparsemax_rows 80x300": ("sparsemax_rows", (z,)),
        "sparsemax_rows 1x8": ("sparsemax_rows", (small,)),
        "sparsemax_rows_vjp 80x300": ("sparsemax_rows_vjp", (p, u)),
        "greedy_match 300 dets x 4 gt x 10 thresholds": ("greedy_match", (ious, thresholds)),
    }


def time_call(fn, args, repeat):
    number = 1
    while timeit.timeit(lambda: fn(*args), number=number) < 0.05:
        number *= 2
    best = min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat))
    return best / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", help="write results to this file")
    args = parser.parse_args(argv)
    if compiled is None:
        print("compiled extension not available; only the fallback is timed", file=sys.stderr)

    rng = np.random.default_rng(0)
    rows = []
    for label, (name, inputs) in workloads(rng).items():
        py = time_call(getattr(_kernels_py, name), inputs, args.repeat)
        row = {"kernel": label, "python_us": py * 1e6}
        if compiled is not None:
            out_c = getattr(compiled, name)(*inputs)
            out_py = getattr(_kernels_py, name)(*inputs)
            if not np.array_equal(out_c, out_py):
                raise SystemExit(f"{label}: backends disagree")
            c = time_call(getattr(compiled, name), inputs, args.repeat)
            row.update(cython_us=c * 1e6, speedup=py / c)
        rows.append(row)

    width = max(len(r["kernel"]) for r in rows)
    print(f"{'kernel':<{width}}  {'python':>12}  {'cython':>12}  {'speedup':>8}")
    for r in rows:
        c = f"{r['cython_us']:10.1f}us" if "cython_us" in r else f"{'n/a':>12}"
        s = f"{r['speedup']:7.1f}x" if "speedup" in r else f"{'':>8}"
        print(f"{r['kernel']:<{width}}  {r['python_us']:10.1f}us  {c}  {s}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
