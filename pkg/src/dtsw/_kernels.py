"""Row-wise and element-wise hot kernels.

Each kernel has a pure-numpy implementation and a numba ``@njit`` twin.
The backend is picked once at import from ``DTSW_KERNELS`` (``numba`` or
``numpy``; default ``numba`` when it imports) and can be switched at runtime
with :func:`use_backend`. All kernels take 2-D C-contiguous arrays whose last
axis is the reduced axis and accumulate reductions in float64.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf as _erf

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------- numpy path


def softmax_fwd_np(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True, dtype=np.float64)
    return (e / s).astype(x.dtype, copy=False)


def softmax_bwd_np(y, g):
    dot = (g * y).sum(axis=1, keepdims=True, dtype=np.float64)
    return (y * (g - dot)).astype(y.dtype, copy=False)


def layernorm_fwd_np(x, gamma, beta, eps):
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = ((x64 - mu) * rstd).astype(x.dtype)
    y = xhat * gamma + beta
    return y.astype(x.dtype, copy=False), xhat, rstd[:, 0].astype(x.dtype)


def layernorm_bwd_np(g, xhat, rstd, gamma):
    gx_hat = (g * gamma).astype(np.float64)
    xh = xhat.astype(np.float64)
    m1 = gx_hat.mean(axis=1, keepdims=True)
    m2 = (gx_hat * xh).mean(axis=1, keepdims=True)
    gx = (gx_hat - m1 - xh * m2) * rstd[:, None]
    ggamma = (g * xhat).sum(axis=0, dtype=np.float64)
    gbeta = g.sum(axis=0, dtype=np.float64)
    return gx.astype(g.dtype), ggamma.astype(g.dtype), gbeta.astype(g.dtype)


def gelu_fwd_np(x):
    cdf = (0.5 * (1.0 + _erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)
    return x * cdf, cdf


def gelu_bwd_np(x, cdf, g):
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return (g * (cdf + x * pdf)).astype(g.dtype, copy=False)


# ---------------------------------------------------------------- numba path

if HAS_NUMBA:

    @njit(cache=True)
    def softmax_fwd_nb(x):
        out = np.empty_like(x)
        n, k = x.shape
        for r in range(n):
            m = x[r, 0]
            for j in range(1, k):
                if x[r, j] > m:
                    m = x[r, j]
            s = 0.0
            for j in range(k):
                e = math.exp(x[r, j] - m)
                out[r, j] = e
                s += e
            inv = 1.0 / s
            for j in range(k):
                out[r, j] = out[r, j] * inv
        return out

    @njit(cache=True)
    def softmax_bwd_nb(y, g):
        out = np.empty_like(y)
        n, k = y.shape
        for r in range(n):
            dot = 0.0
            for j in range(k):
                dot += g[r, j] * y[r, j]
            for j in range(k):
                out[r, j] = y[r, j] * (g[r, j] - dot)
        return out

    @njit(cache=True)
    def layernorm_fwd_nb(x, gamma, beta, eps):
        n, k = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n, dtype=x.dtype)
        for r in range(n):
            mu = 0.0
            for j in range(k):
                mu += x[r, j]
            mu /= k
            var = 0.0
            for j in range(k):
                d = x[r, j] - mu
                var += d * d
            var /= k
            rs = 1.0 / math.sqrt(var + eps)
            rstd[r] = rs
            for j in range(k):
                h = (x[r, j] - mu) * rs
                xhat[r, j] = h
                y[r, j] = xhat[r, j] * gamma[j] + beta[j]
        return y, xhat, rstd

    @njit(cache=True)
    def layernorm_bwd_nb(g, xhat, rstd, gamma):
        n, k = g.shape
        gx = np.empty_like(g)
        ggamma = np.zeros(k, dtype=np.float64)
        gbeta = np.zeros(k, dtype=np.float64)
        for r in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(k):
                gh = g[r, j] * gamma[j]
                m1 += gh
                m2 += gh * xhat[r, j]
                ggamma[j] += g[r, j] * xhat[r, j]
                gbeta[j] += g[r, j]
            m1 /= k
            m2 /= k
            for j in range(k):
                gx[r, j] = (g[r, j] * gamma[j] - m1 - xhat[r, j] * m2) * rstd[r]
        return gx, ggamma.astype(g.dtype), gbeta.astype(g.dtype)

    @njit(cache=True)
    def gelu_fwd_nb(x):
        out = np.empty_like(x)
        cdf = np.empty_like(x)
        flat = x.ravel()
        o = out.ravel()
        c = cdf.ravel()
        for i in range(flat.size):
            v = flat[i]
            c[i] = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
            o[i] = v * c[i]
        return out, cdf

    @njit(cache=True)
    def gelu_bwd_nb(x, cdf, g):
        out = np.empty_like(g)
        fx = x.ravel()
        fc = cdf.ravel()
        fg = g.ravel()
        o = out.ravel()
        for i in range(fx.size):
            v = fx[i]
            o[i] = fg[i] * (fc[i] + v * math.exp(-0.5 * v * v) * _INV_SQRT2PI)
        return out


# ---------------------------------------------------------------- dispatch

_NUMPY = {
    "softmax_fwd": softmax_fwd_np,
    "softmax_bwd": softmax_bwd_np,
    "layernorm_fwd": layernorm_fwd_np,
    "layernorm_bwd": layernorm_bwd_np,
    "gelu_fwd": gelu_fwd_np,
    "gelu_bwd": gelu_bwd_np,
}
_NUMBA = (
    {
        "softmax_fwd": softmax_fwd_nb,
        "softmax_bwd": softmax_bwd_nb,
        "layernorm_fwd": layernorm_fwd_nb,
        "layernorm_bwd": layernorm_bwd_nb,
        "gelu_fwd": gelu_fwd_nb,
        "gelu_bwd": gelu_bwd_nb,
    }
    if HAS_NUMBA
    else {}
)

backend = ""
softmax_fwd = softmax_bwd = layernorm_fwd = layernorm_bwd = gelu_fwd = gelu_bwd = None


def use_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"`` kernels; returns the previous backend."""
    global backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    table = _NUMBA if name == "numba" else _NUMPY
    globals().update(table)
    previous, backend = backend, name
    return previous


def _default_backend() -> str:
    requested = os.environ.get("DTSW_KERNELS", "").strip().lower()
    if requested:
        return requested
    return "numba" if HAS_NUMBA else "numpy"


use_backend(_default_backend())
