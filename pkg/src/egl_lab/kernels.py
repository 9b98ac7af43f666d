"""Backend selection for the batched solver kernels.

The compiled extension is used when it imports cleanly; otherwise the numpy
fallback is loaded. Set ``EGL_LAB_PURE_PYTHON=1`` to force the fallback.
"""

import logging
import os

logger = logging.getLogger(__name__)

if os.environ.get("EGL_LAB_PURE_PYTHON", "") not in ("", "0"):
    from . import _kernels_py as _impl
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        logger.debug("compiled kernels unavailable, using numpy fallback")
        from . import _kernels_py as _impl

BACKEND = _impl.BACKEND

topk_indices = _impl.topk_indices
topk_values = _impl.topk_values
webadv_best_subsets = _impl.webadv_best_subsets
webadv_subset_values = _impl.webadv_subset_values
frank_wolfe = _impl.frank_wolfe
frank_wolfe_batch = _impl.frank_wolfe_batch


def load_backend(name):
    """Return the kernel module for ``"cython"`` or ``"python"`` explicitly."""
    if name == "python":
        from . import _kernels_py
        return _kernels_py
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")
