"""Time the numba and numpy kernel paths and end-to-end compression.

    python benchmarks/bench_kernels.py [--n 8192] [--slots 32] [--dim 64]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np


def kernel_times(n, k, d, repeat):
    from tcssa import _kernels
    from tcssa.numerics import RngState, softmax_rows

    gen = RngState(0).generator
    probs = softmax_rows(gen.normal(size=(n, k)))
    x = gen.normal(size=(n, d))
    item = np.zeros(n, dtype=np.int64)
    idx, w = _kernels.topk_numpy(probs, 2)
    c = gen.normal(size=(1, k, d))
    s = np.ones((1, k))
    rows = []
    paths = [("numpy", _kernels.topk_numpy, _kernels.scatter_slots_numpy, _kernels.gather_pooling_grad_numpy)]
    if _kernels.numba is not None:
        # compile outside the timed region
        _kernels.topk_numba(probs[:4], 2)
        _kernels.scatter_slots_numba(x[:4], idx[:4], w[:4], item[:4], 1, k)
        _kernels.gather_pooling_grad_numba(x[:4], idx[:4], item[:4], c, c, s)
        paths.append(("numba", _kernels.topk_numba, _kernels.scatter_slots_numba, _kernels.gather_pooling_grad_numba))
    for name, topk, scatter, gather in paths:
        t1 = min(timeit.repeat(lambda: topk(probs, 2), number=1, repeat=repeat))
        t2 = min(timeit.repeat(lambda: scatter(x, idx, w, item, 1, k), number=1, repeat=repeat))
        t3 = min(timeit.repeat(lambda: gather(x, idx, item, c, c, s), number=1, repeat=repeat))
        rows.append((name, t1, t2, t3))
    return rows


def compress_time(n, k, d, repeat):
    from tcssa.aggregator import compress
    from tcssa.numerics import RngState, gaussian_sample
    from tcssa.params import init_params

    rng = RngState(1)
    params = init_params(rng, d, k, 2)
    x = gaussian_sample(rng, (n, d))
    compress([x[:8]], params)
    return float(np.median(timeit.repeat(lambda: compress([x], params), number=1, repeat=repeat)))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=8192)
    ap.add_argument("--slots", type=int, default=32)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args.child:
        for n in (args.n // 8, args.n):
            print(f"{n} {compress_time(n, args.slots, args.dim, args.repeat):.6f}")
        return

    print(f"kernels  N={args.n} K={args.slots} D={args.dim}  (best of {args.repeat}, ms)")
    print(f"{'path':6s} {'topk':>9s} {'scatter':>9s} {'gather':>9s}")
    for name, t1, t2, t3 in kernel_times(args.n, args.slots, args.dim, args.repeat):
        print(f"{name:6s} {t1 * 1e3:9.3f} {t2 * 1e3:9.3f} {t3 * 1e3:9.3f}")

    print("\ncompress end to end (median, ms)")
    for flag in ("0", "1"):
        env = dict(os.environ, TCSSA_DISABLE_NUMBA=flag)
        out = subprocess.run(
            [sys.executable, __file__, "--child", "--n", str(args.n), "--slots", str(args.slots),
             "--dim", str(args.dim), "--repeat", str(args.repeat)],
            env=env, capture_output=True, text=True, check=True,
        ).stdout.split()
        label = "numpy" if flag == "1" else "numba"
        (n1, t1), (n2, t2) = (out[0], float(out[1])), (out[2], float(out[3]))
        print(f"{label:6s} N={n1}: {t1 * 1e3:8.3f}  N={n2}: {t2 * 1e3:8.3f}  ratio {t2 / t1:5.2f}")


if __name__ == "__main__":
    main()
