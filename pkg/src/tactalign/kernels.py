"""Hot kernels with a compiled core and a numpy fallback, selected at import.

Set ``TACTALIGN_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("TACTALIGN_PURE_PYTHON"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels_c as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "cython" if _impl is not _kernels_py else "python"

info_nce_loss = _impl.info_nce_loss
topk_hits = _impl.topk_hits

__all__ = ["BACKEND", "info_nce_loss", "topk_hits"]
