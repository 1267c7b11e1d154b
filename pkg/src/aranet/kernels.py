"""Backend selection for the hot kernels.

The compiled extension is used when it imports; ``ARANET_BACKEND=python``
forces the numpy fallback and ``ARANET_BACKEND=cython`` makes a missing
extension an error.
"""

import logging
import os

from . import _kernels_py

logger = logging.getLogger(__name__)

_requested = os.environ.get("ARANET_BACKEND", "auto").lower()
if _requested not in ("auto", "cython", "python"):
    raise ImportError(f"ARANET_BACKEND must be auto, cython or python, got {_requested!r}")

_impl = _kernels_py
BACKEND = "python"
if _requested != "python":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
        logger.debug("compiled kernels unavailable, using numpy fallback")

im2col = _impl.im2col
col2im = _impl.col2im
edt_sq = _impl.edt_sq

__all__ = ["BACKEND", "im2col", "col2im", "edt_sq"]
