"""Kernel backend selection.

The compiled extension is used when importable; ``MEMDEX_PURE_PYTHON=1``
forces the numpy fallback.
"""

import logging
import os

logger = logging.getLogger(__name__)


def _load():
    if os.environ.get("MEMDEX_PURE_PYTHON", "") not in ("", "0"):
        from memdex import _pykernels
        return _pykernels
    try:
        from memdex import _ckernels
        return _ckernels
    except ImportError:  # no compiled extension in this install
        logger.info("compiled kernels unavailable; using pure-Python fallback")
        from memdex import _pykernels
        return _pykernels


kernels = _load()
BACKEND = kernels.BACKEND
