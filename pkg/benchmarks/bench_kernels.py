"""Compare compiled and numpy kernel backends on training-sized arrays.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from cptlab import kernels


def cases(rng):
    act = rng.standard_normal((64, 16, 16, 16)).astype(np.float32)
    flat = act.reshape(-1)
    u = rng.random(flat.shape, dtype=np.float32)
    peak = float(np.abs(flat).max())
    cols_shape = kernels.get_backend("numpy")["im2col"](act, 3, 3, 1, 1).shape
    cols = rng.standard_normal(cols_shape).astype(np.float32)
    out = np.empty_like(flat)
    return {
        "quantize_nearest": lambda k: k["quantize_nearest"](flat, out, peak / 127, peak, -127, 127),
        "quantize_stochastic": lambda k: k["quantize_stochastic"](flat, u, out, peak / 127, peak, 127, 1e-5),
        "im2col": lambda k: k["im2col"](act, 3, 3, 1, 1),
        "col2im": lambda k: k["col2im"](cols, 64, 16, 16, 16, 3, 3, 1, 1),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = {"numpy": kernels.get_backend("numpy")}
    try:
        backends["cython"] = kernels.get_backend("cython")
    except RuntimeError:
        print("compiled kernels unavailable; numpy only")
    print(f"{'kernel':<22}" + "".join(f"{b:>12}" for b in backends) + "     speedup")
    for name, fn in cases(rng).items():
        times = {b: min(timeit.repeat(lambda: fn(k), number=1, repeat=args.repeat)) * 1e3
                 for b, k in backends.items()}
        row = f"{name:<22}" + "".join(f"{t:>10.3f}ms" for t in times.values())
        if "cython" in times:
            row += f"  {times['numpy'] / times['cython']:>8.2f}x"
        print(row)


if __name__ == "__main__":
    main()
