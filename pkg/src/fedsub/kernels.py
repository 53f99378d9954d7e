"""Backend selection for the gradient kernels.

The compiled extension is used when it imports; set ``FEDSUB_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("FEDSUB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

logistic_grad = _impl.logistic_grad
logistic_loss = _impl.logistic_loss


def backends():
    """Available backends by name, compiled first when present."""
    out = {}
    try:
        from . import _kernels

        out["cython"] = _kernels
    except ImportError:
        pass
    out["python"] = _kernels_py
    return out
