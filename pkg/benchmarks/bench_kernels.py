"""Compare the numba-compiled and numpy forms of the hot kernels.

    python benchmarks/bench_kernels.py [--repeat 5]

Both forms run in one process; the env flag only picks the default path.
Shapes match a desk-scale training batch (T~80 frames, U~24 labels, 64 units).
"""
import argparse
import timeit

import numpy as np

from avsel import kernels


def cases(rng):
    T, U, B, H = 80, 24, 4, 64
    lb = np.log(rng.uniform(0.05, 1.0, (T, U + 1)))
    ll = np.log(rng.uniform(0.05, 1.0, (T, U)))
    gx = rng.normal(size=(T, B, 4 * H))
    whh = rng.normal(size=(H, 4 * H)) * 0.1
    hs, cs, acts = kernels.lstm_forward_numpy(gx, whh)[:3]
    dhs = rng.normal(size=hs.shape)
    a, b = rng.integers(0, 50, 20), rng.integers(0, 50, 22)
    out_shape, kernel, stride, C = (4, 40, 8, 8), (3, 3, 3), (1, 1, 1), 8
    dcols = rng.normal(size=(int(np.prod(out_shape)), 27 * C))
    pad = (4, 42, 10, 10, C)
    return {
        "rnnt_dp": ((lb, ll), kernels.rnnt_dp_numba, kernels.rnnt_dp_numpy),
        "lstm_forward": ((gx, whh), kernels.lstm_forward_numba, kernels.lstm_forward_numpy),
        "lstm_backward": ((dhs, hs, cs, acts, whh), kernels.lstm_backward_numba, kernels.lstm_backward_numpy),
        "edit_distance": ((a, b), kernels.edit_distance_numba, kernels.edit_distance_numpy),
        "col2im3d": ((dcols, out_shape, kernel, stride, pad), kernels.col2im3d_numba, kernels.col2im3d_numpy),
    }


def _call(fn, args, name):
    if name == "col2im3d":
        args = args[:4] + (np.zeros(args[4]),)
    return fn(*args)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=10)
    opts = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<15}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, (args, fast, slow) in cases(rng).items():
        if fast is None:
            print(f"{name:<15}{'n/a':>10}")
            continue
        _call(fast, args, name)  # compile outside the timed region
        t = {}
        for label, fn in (("numba", fast), ("numpy", slow)):
            runs = timeit.repeat(lambda: _call(fn, args, name), repeat=opts.repeat, number=opts.number)
            t[label] = 1000 * min(runs) / opts.number
        print(f"{name:<15}{t['numba']:>10.3f}{t['numpy']:>10.3f}{t['numpy'] / t['numba']:>8.1f}x")


if __name__ == "__main__":
    main()
