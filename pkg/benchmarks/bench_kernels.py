"""Time the numba and pure-numpy convolution / pooling kernels side by side.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--batch 64]

Also checks that both paths agree to 1e-12 before timing.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from bssdistill import _kernels as K


def _time(fn, args, repeat):
    fn(*args)  # warm-up (and JIT compile for numba)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(batch):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch, 4, 10, 10))
    w = rng.standard_normal((8, 4, 3, 3))
    g = rng.standard_normal((batch, 8, 8, 8))
    pooled, idx = K.maxpool2d_forward_np(x, 2)
    gp = rng.standard_normal(pooled.shape)
    return [
        ("conv2d_forward", (x, w)),
        ("conv2d_backward_input", (g, w, 10, 10)),
        ("conv2d_backward_weight", (x, g, 3, 3)),
        ("maxpool2d_forward", (x, 2)),
        ("maxpool2d_backward", (gp, idx, 2, 10, 10)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=64)
    args = ap.parse_args(argv)
    if not K._HAVE_NUMBA:
        print("numba is not installed; only the numpy path is available")
        return 1

    print(f"{'kernel':<24}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, a in cases(args.batch):
        f_np, f_nb = getattr(K, name + "_np"), getattr(K, name + "_nb")
        out_np, out_nb = f_np(*a), f_nb(*a)
        for u, v in zip(np.atleast_1d(out_np) if not isinstance(out_np, tuple) else out_np,
                        np.atleast_1d(out_nb) if not isinstance(out_nb, tuple) else out_nb):
            assert np.allclose(u, v, rtol=0, atol=1e-12), f"{name}: backends disagree"
        t_np = _time(f_np, a, args.repeat)
        t_nb = _time(f_nb, a, args.repeat)
        print(f"{name:<24}{1e3 * t_np:>10.3f}{1e3 * t_nb:>10.3f}{t_np / t_nb:>8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
