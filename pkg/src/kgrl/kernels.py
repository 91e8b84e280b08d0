"""Backend selection for the dense-layer kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``KGRL_PURE_PYTHON=1`` to force the fallback (useful for comparisons).
Both backends are deterministic, but they sum in different orders, so results
agree to rounding rather than bitwise.
"""
import os

from . import _kernels_py

ACT_LINEAR = _kernels_py.ACT_LINEAR
ACT_RELU = _kernels_py.ACT_RELU
ACT_TANH = _kernels_py.ACT_TANH

_compiled = None
if os.environ.get("KGRL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

if _compiled is not None:
    BACKEND = "cython"
    dense_forward = _compiled.dense_forward
    dense_backward = _compiled.dense_backward
else:
    BACKEND = "numpy"
    dense_forward = _kernels_py.dense_forward
    dense_backward = _kernels_py.dense_backward


def get_backend(name):
    """Return ``(dense_forward, dense_backward)`` for ``"cython"`` or ``"numpy"``."""
    if name == "numpy":
        return _kernels_py.dense_forward, _kernels_py.dense_backward
    if name == "cython":
        if _compiled is None:
            from . import _kernels as mod  # raises ImportError when not built
        else:
            mod = _compiled
        return mod.dense_forward, mod.dense_backward
    raise ValueError(f"unknown kernel backend {name!r}")
