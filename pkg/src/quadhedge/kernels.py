"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``QUADHEDGE_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from . import _fallback

BACKEND = "python"
if os.environ.get("QUADHEDGE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
else:
    _impl = _fallback

hamiltonian_capped = _impl.hamiltonian_capped
hjb_sweep = _impl.hjb_sweep
block_positions = _impl.block_positions
