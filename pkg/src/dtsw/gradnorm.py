"""Dynamic task weighting that balances gradient magnitudes against training rates."""

from __future__ import annotations

import logging
import math

import numpy as np

from .model import TaskWeights

log = logging.getLogger(__name__)

NUM_TASKS = 2


def gradnorm_update(weights: TaskWeights, g_gen: float, g_cls: float, loss_gen: float, loss_cls: float,
                    alpha: float = 1.5, lr: float = 0.025, min_weight: float = 1e-2) -> TaskWeights:
    """One weight step on sum_i |G_i - mean(G) * r_i**alpha|, then renormalise.

    ``g_*`` are norms of the *weighted* task gradients on the last shared
    layer, so dG_i/dw_i = G_i / w_i. ``r_i`` is the task's loss ratio
    L_i / L_i(0) relative to the mean ratio; the target term is held
    constant. The first call records the initial losses. Weights are rescaled
    to sum to 2, then clamped to ``[min_weight, 2 - min_weight]`` (the clamp
    comes last so a saturated weight sits exactly on the floor).
    """
    initial_gen = weights.initial_gen if weights.initial_gen is not None else loss_gen
    initial_cls = weights.initial_cls if weights.initial_cls is not None else loss_cls
    out = TaskWeights(weights.w_gen, weights.w_cls, initial_gen, initial_cls)
    if initial_gen <= 0 or initial_cls <= 0:
        log.warning("gradnorm: non-positive initial loss (%g, %g); weights left unchanged", initial_gen, initial_cls)
        return out
    if not all(math.isfinite(v) for v in (g_gen, g_cls, loss_gen, loss_cls)):
        log.warning("gradnorm: non-finite inputs; weights left unchanged")
        return out

    w = np.array([weights.w_gen, weights.w_cls], dtype=np.float64)
    g = np.array([g_gen, g_cls], dtype=np.float64)
    ratio = np.array([loss_gen / initial_gen, loss_cls / initial_cls])
    rel = ratio / ratio.mean()
    target = g.mean() * rel**alpha
    grad_w = np.sign(g - target) * g / w
    w = np.maximum(w - lr * grad_w, min_weight)
    w_gen = float(w[0] * NUM_TASKS / w.sum())
    w_gen = min(max(w_gen, min_weight), NUM_TASKS - min_weight)
    out.w_gen = w_gen
    out.w_cls = NUM_TASKS - w_gen
    return out
