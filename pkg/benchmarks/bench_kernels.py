"""Compare the compiled convolution kernels against the reference backend.

Run:  python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from lesionxai.kernels import available_backends, reference

try:
    from lesionxai.kernels import _convcore
except ImportError:
    _convcore = None


def timeit(fn, *args, repeat=5):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    print("available backends:", ", ".join(available_backends()))
    rng = np.random.default_rng(0)
    cases = [
        ("single 2->8 32^3", 1, 2, 8, 32),
        ("single 8->8 32^3", 1, 8, 8, 32),
        ("batched 8->8 16^3 (B=32)", 32, 8, 8, 16),
    ]
    for name, b, ci, co, e in cases:
        x = rng.standard_normal((b, ci, e, e, e)).astype(np.float32)
        w = rng.standard_normal((co, ci, 3, 3, 3)).astype(np.float32)
        t_ref = timeit(reference.conv3d_forward, x, w)
        line = f"{name:28s} reference {t_ref * 1e3:8.2f} ms"
        if _convcore is not None:
            out_ref = reference.conv3d_forward(x, w)
            out_c = _convcore.conv3d_forward(x, w)
            err = float(np.abs(out_ref - out_c).max())
            t_c = timeit(_convcore.conv3d_forward, x, w)
            line += f"   compiled {t_c * 1e3:8.2f} ms   speedup {t_ref / t_c:5.2f}x   max|diff| {err:.2e}"
        print(line)


if __name__ == "__main__":
    main()
