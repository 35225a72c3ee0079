"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from cloudeye.kernels import backends


def cases(rng):
    grid = rng.normal(size=(60, 80, 32))
    desc, inv_var = rng.normal(size=32), rng.uniform(0.5, 2.0, 32)
    codes = rng.integers(0, 16, size=(10_000, 8), dtype=np.uint8)
    table = rng.uniform(size=(8, 16))
    a, b = rng.integers(0, 256, size=(2, 640 * 480 * 3), dtype=np.uint8)
    return {
        "region_distances 9x9": lambda k: k.region_distances(grid, desc, inv_var, 20, 29, 30, 39),
        "region_distances 60x80": lambda k: k.region_distances(grid, desc, inv_var, 0, 60, 0, 80),
        "adc_scan 10k x 8": lambda k: k.adc_scan(codes, table),
        "abs_diff_sum 640x480": lambda k: k.abs_diff_sum(a, b),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = backends()
    names = list(impls)
    print(f"{'kernel':<24}" + "".join(f"{n:>14}" for n in names) + ("      speedup" if len(names) > 1 else ""))
    for label, fn in cases(np.random.default_rng(0)).items():
        best = {}
        for name, mod in impls.items():
            timer = timeit.Timer(lambda: fn(mod))
            number, _ = timer.autorange()
            best[name] = min(timer.repeat(args.repeat, number)) / number
        row = f"{label:<24}" + "".join(f"{best[n] * 1e6:>11.1f} us" for n in names)
        if "cython" in best:
            row += f"{best['python'] / best['cython']:>12.1f}x"
        print(row)
    if "cython" not in impls:
        print("compiled extension not built; only the numpy backend was timed")


if __name__ == "__main__":
    main()
