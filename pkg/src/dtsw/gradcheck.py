"""Central finite-difference gradient oracle."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor


def numeric_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3, coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` for the flat ``coords``.

    Perturbations are applied to a float64 copy of ``x`` so the step itself
    is not rounded to float32; numpy promotion carries float64 downstream.
    """
    if not h > 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    coords = np.arange(x.size) if coords is None else np.asarray(coords)
    orig = x.data
    base = orig.astype(np.float64)
    out = np.zeros(len(coords))
    try:
        for n, i in enumerate(coords):
            xp = base.copy()
            xp.flat[i] += h
            x.data = xp
            fp = float(f(x).data)
            xp.flat[i] -= 2 * h
            fm = float(f(x).data)
            out[n] = (fp - fm) / (2 * h)
    finally:
        x.data = orig
    return out


def analytic_grad(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            loss = f(x)
        tape.backward(loss)
        return tape.grad(x).astype(np.float64)
    finally:
        x.requires_grad = was


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    """Max-norm relative error ``|a - n|_inf / max(|a|_inf, |n|_inf, floor)``.

    ``floor`` keeps gradients that are exactly zero in theory (rounding
    residue on both sides) from reporting a relative error of one.
    """
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return float(diff / scale)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3, coords=None,
                      floor: float = 0.0) -> float:
    """Max relative error between backward() and central differences.

    ``coords`` restricts the comparison to a sample of flat indices.
    """
    if not h > 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    a = analytic_grad(f, x).ravel()
    if coords is not None:
        a = a[np.asarray(coords)]
    n = numeric_grad(f, x, h, coords)
    return relative_error(a, n, floor)
