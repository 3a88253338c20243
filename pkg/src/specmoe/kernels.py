"""Kernel backend selection.

The compiled extension is preferred; set ``SPECMOE_PURE_PYTHON=1`` to force
the fallback (useful for debugging and for the benchmark).
"""
import os

BACKEND = "python"

if os.environ.get("SPECMOE_PURE_PYTHON", "") not in ("", "0"):
    from specmoe._kernels_py import mean_routed_active
else:
    try:
        from specmoe._kernels import mean_routed_active

        BACKEND = "cython"
    except ImportError:
        from specmoe._kernels_py import mean_routed_active

__all__ = ["BACKEND", "mean_routed_active"]
