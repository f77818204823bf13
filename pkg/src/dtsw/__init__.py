"""Dual-task windowed-transformer framework for follow-up scan generation
and prognostic classification, on a from-scratch numpy autodiff engine."""

import os

if os.environ.get("DTSW_DETERMINISTIC") == "1":
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
