"""Time the numba kernels against their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--reps 20] [--json out.json]

Each pair is checked for equal output before timing. With HIERCAP_NO_NUMBA=1
both columns run the numpy path.
"""
import argparse
import json
import statistics
import time

import numpy as np

from hiercap import kernels


def _median_ms(fn, reps):
    fn()  # warm-up, includes jit compilation
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times) * 1e3


def cases(rng):
    x = rng.standard_normal((16, 16, 32, 32))
    cols = kernels.im2col_numpy(x, 3, 3, 2, 1)
    img = rng.random((3, 64, 64))
    a = rng.integers(0, 8, 400)
    b = rng.integers(0, 8, 400)
    return {
        "im2col (16x16x32x32, k3 s2)": (
            lambda: kernels.im2col_numpy(x, 3, 3, 2, 1),
            lambda: kernels.im2col(x, 3, 3, 2, 1),
        ),
        "col2im (16x16x32x32, k3 s2)": (
            lambda: kernels.col2im_numpy(cols, x.shape, 3, 3, 2, 1),
            lambda: kernels.col2im(cols, x.shape, 3, 3, 2, 1),
        ),
        "bilinear 64->96": (
            lambda: kernels.bilinear_resize_numpy(img, 96, 96),
            lambda: kernels.bilinear_resize(img, 96, 96),
        ),
        "lcs 400x400": (
            lambda: kernels.lcs_length_numpy(a, b),
            lambda: kernels.lcs_length(a, b),
        ),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()

    rows = []
    print(f"backend: {kernels.backend()}")
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, (ref, fast) in cases(np.random.default_rng(args.seed)).items():
        if not np.allclose(ref(), fast(), rtol=0, atol=1e-12):
            raise SystemExit(f"{name}: numba and numpy outputs differ")
        t_np = _median_ms(ref, args.reps)
        t_nb = _median_ms(fast, args.reps)
        rows.append({"kernel": name, "numpy_ms": t_np, "numba_ms": t_nb, "speedup": t_np / t_nb})
        print(f"{name:32s} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:8.2f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"backend": kernels.backend(), "reps": args.reps, "results": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
