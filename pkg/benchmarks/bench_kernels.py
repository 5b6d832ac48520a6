"""Benchmark the numba-compiled MLP kernels against the pure-numpy fallback.

Times the per-sample hot path (forward, value-only forward, input VJP,
parameter VJP) on representative layer widths and reports the speedup plus the
maximum deviation between the two paths.

Run:  python benchmarks/bench_kernels.py [--iters N]
"""

import argparse
import time

import numpy as np

from msflow import kernels


def time_call(fn, args, iters):
    fn(*args)  # warm up (and trigger JIT compilation)
    t0 = time.perf_counter()
    for _ in range(iters):
        fn(*args)
    return (time.perf_counter() - t0) / iters


def bench_widths(widths, iters):
    widths_arr = np.asarray(widths, dtype=np.int64)
    n = kernels.param_count(widths)
    rng = np.random.default_rng(0)
    params = rng.normal(size=n) * 0.3
    xin = rng.normal(size=widths[0])
    w = rng.normal(size=widths[-1])
    acts = np.zeros(sum(widths))
    pres = np.zeros(sum(widths[1:]))

    kernels.forward_numpy(params, widths_arr, xin, acts, pres)
    rows = []
    pairs = [
        ("forward", kernels.forward_numpy, (params, widths_arr, xin, acts, pres)),
        ("value", kernels.value_numpy, (params, widths_arr, xin)),
        ("vjp_input", kernels.vjp_input_numpy, (params, widths_arr, acts, w)),
        ("vjp_params", kernels.vjp_params_numpy, (params, widths_arr, acts, w)),
    ]
    for name, np_fn, args in pairs:
        t_np = time_call(np_fn, args, iters)
        if kernels.USE_NUMBA:
            nb_fn = getattr(kernels, name + "_numba")
            t_nb = time_call(nb_fn, args, iters)
            if name in ("value", "vjp_input", "vjp_params"):
                dev = float(np.abs(np_fn(*args) - nb_fn(*args)).max())
            else:
                acts_b = np.zeros_like(acts)
                pres_b = np.zeros_like(pres)
                nb_fn(params, widths_arr, xin, acts_b, pres_b)
                dev = float(np.abs(acts - acts_b).max())
            rows.append((name, t_np * 1e6, t_nb * 1e6, t_np / t_nb, dev))
        else:
            rows.append((name, t_np * 1e6, float("nan"), float("nan"), 0.0))
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iters", type=int, default=20000)
    args = ap.parse_args()

    print(f"backend selected by MSFLOW_NUMBA: {kernels.BACKEND}")
    if not kernels.USE_NUMBA:
        print("numba path unavailable or disabled; timing numpy only")
    for widths in ([3, 64, 64, 64, 2], [65, 64, 64, 64, 64], [3, 32, 32, 2]):
        print(f"\nwidths {widths}")
        print(f"  {'kernel':<12}{'numpy us':>10}{'numba us':>10}{'speedup':>9}{'max dev':>12}")
        for name, t_np, t_nb, speedup, dev in bench_widths(widths, args.iters):
            print(f"  {name:<12}{t_np:>10.2f}{t_nb:>10.2f}{speedup:>9.2f}{dev:>12.2e}")


if __name__ == "__main__":
    main()
