"""Kernel backend selection.

The compiled module is used when it imports; otherwise the pure-Python
reference is used.  Setting ``CHAOSLAB_PURE_PYTHON=1`` forces the fallback.
"""
import os

BACKEND = "python"
if os.environ.get("CHAOSLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl
        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = None
else:
    _impl = None

if _impl is None:
    from . import _kernels_py as _impl

transport_simplex = _impl.transport_simplex
hungarian = _impl.hungarian
lex_refine = _impl.lex_refine
