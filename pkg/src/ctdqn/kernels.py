"""Backend selection for the Bellman kernels.

The compiled extension is used when importable; set ``CTDQN_PURE_PYTHON=1`` to
force the NumPy fallback.
"""
import os

from . import _kernels_py

if os.environ.get("CTDQN_PURE_PYTHON"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "python" if _impl is _kernels_py else "cython"

greedy_values = _impl.greedy_values
expectation_sweep = _impl.expectation_sweep
bellman_sweep = _impl.bellman_sweep
value_iteration = _impl.value_iteration
backward_induction = _impl.backward_induction
