"""Time the numba and numpy kernel backends on desk-scale shapes.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Shapes follow the desk-2d model: attention rows are (windows*heads*tokens,
tokens) and layer-norm rows are (batch*tokens, channels).
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from dtsw import _kernels as K

SHAPES = {
    "softmax": (4 * 16 * 3 * 16, 16),
    "layernorm": (4 * 256, 24),
    "gelu": (4 * 256, 96),
}


def cases(rng):
    x = rng.normal(size=SHAPES["softmax"])
    y = K.softmax_fwd_np(x)
    g = rng.normal(size=x.shape)
    yield "softmax_fwd", lambda: K.softmax_fwd(x)
    yield "softmax_bwd", lambda: K.softmax_bwd(y, g)

    h = rng.normal(size=SHAPES["layernorm"])
    gamma, beta = rng.normal(size=h.shape[1]), rng.normal(size=h.shape[1])
    _, xhat, rstd = K.layernorm_fwd_np(h, gamma, beta, 1e-5)
    gh = rng.normal(size=h.shape)
    yield "layernorm_fwd", lambda: K.layernorm_fwd(h, gamma, beta, 1e-5)
    yield "layernorm_bwd", lambda: K.layernorm_bwd(gh, xhat, rstd, gamma)

    u = rng.normal(size=SHAPES["gelu"])
    _, cdf = K.gelu_fwd_np(u)
    gu = rng.normal(size=u.shape)
    yield "gelu_fwd", lambda: K.gelu_fwd(u)
    yield "gelu_bwd", lambda: K.gelu_bwd(u, cdf, gu)


def bench(repeat: int) -> dict:
    out = {}
    for backend in ("numpy", "numba"):
        if backend == "numba" and not K.HAS_NUMBA:
            continue
        K.use_backend(backend)
        for name, fn in cases(np.random.default_rng(0)):
            fn()  # compile / warm caches
            best = min(timeit.repeat(fn, number=20, repeat=repeat)) / 20
            out[(name, backend)] = best
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    previous = K.backend
    try:
        res = bench(args.repeat)
    finally:
        K.use_backend(previous)
    print(f"{'kernel':<15}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, _ in cases(np.random.default_rng(0)):
        a = res[(name, "numpy")] * 1e6
        b = res.get((name, "numba"))
        if b is None:
            print(f"{name:<15}{a:>12.1f}{'n/a':>12}")
        else:
            print(f"{name:<15}{a:>12.1f}{b * 1e6:>12.1f}{a / (b * 1e6):>9.2f}x")


if __name__ == "__main__":
    main()
