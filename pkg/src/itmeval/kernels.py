"""Select the n-gram kernel backend at import time.

The compiled extension is used when it was built; otherwise (or when
``ITMEVAL_PURE_PYTHON=1``) the pure-Python version is used. Both return
identical integers.
"""
from __future__ import annotations

import os

from itmeval import _kernels_py

if os.environ.get("ITMEVAL_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from itmeval import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

ngram_stats = _impl.ngram_stats
ngram_cosine_terms = _impl.ngram_cosine_terms

__all__ = ["BACKEND", "ngram_stats", "ngram_cosine_terms"]
