"""Compare the numba kernels against their numpy fallbacks.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Times conv2d and interval_matmul directly, then one full analysis of the
conv corpus graph in a subprocess per backend (NUMGUARD_NO_JIT selects the
fallback there).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from numguard.tensor import kernels

CONV_SIZES = [(1, 3, 16, 16, 8, 3), (4, 8, 32, 32, 16, 3)]
MATMUL_SIZES = [(16, 16, 16), (64, 64, 64), (128, 256, 64)]

E2E = """
import time
from importlib import resources
from numguard.analysis import ValidRanges, analyze
from numguard.graph import load_graph
from numguard.tensor.kernels import backend
root = resources.files("numguard") / "corpus"
g = load_graph(root / "conv_exp.json")
analyze(g)
t0 = time.perf_counter()
for _ in range(20):
    analyze(g)
print(backend(), (time.perf_counter() - t0) / 20)
"""


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_conv(repeat):
    rng = np.random.default_rng(0)
    for n, c, h, w, m, k in CONV_SIZES:
        x = rng.normal(size=(n, c, h, w))
        wt = rng.normal(size=(m, c, k, k))
        pads = (1, 1, 1, 1)
        a = kernels.conv2d_numba(x, wt, pads=pads)
        b = kernels.conv2d_numpy(x, wt, pads=pads)
        assert np.allclose(a, b)
        tj = best(lambda: kernels.conv2d_numba(x, wt, pads=pads), repeat)
        tn = best(lambda: kernels.conv2d_numpy(x, wt, pads=pads), repeat)
        print(f"conv2d {x.shape} * {wt.shape}: numba {tj * 1e3:8.3f} ms  numpy {tn * 1e3:8.3f} ms"
              f"  ratio {tn / tj:6.2f}")


def bench_matmul(repeat):
    rng = np.random.default_rng(1)
    for n, k, m in MATMUL_SIZES:
        c1, c2 = rng.normal(size=(n, k)), rng.normal(size=(k, m))
        la, ua = c1 - 1, c1 + 1
        lb, ub = c2 - 1, c2 + 1
        v = np.ones(k)
        a = kernels.interval_matmul_numba(la, ua, lb, ub, v)
        b = kernels.interval_matmul_numpy(la, ua, lb, ub, v)
        assert np.allclose(a[0], b[0]) and np.allclose(a[1], b[1])
        tj = best(lambda: kernels.interval_matmul_numba(la, ua, lb, ub, v), repeat)
        tn = best(lambda: kernels.interval_matmul_numpy(la, ua, lb, ub, v), repeat)
        print(f"interval_matmul {n}x{k}x{m}: numba {tj * 1e3:8.3f} ms  numpy {tn * 1e3:8.3f} ms"
              f"  ratio {tn / tj:6.2f}")


def bench_end_to_end():
    for flag in ("0", "1"):
        env = dict(os.environ, NUMGUARD_NO_JIT=flag)
        out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
        name, secs = out.stdout.split()
        print(f"analyze(conv_exp) with {name:<5}: {float(secs) * 1e3:8.3f} ms")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    if not kernels.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    bench_conv(args.repeat)
    bench_matmul(args.repeat)
    bench_end_to_end()


if __name__ == "__main__":
    main()
