"""Selects the compiled kernels when available, else the numpy fallback.

Set ``CONTRAIL_PURE_PYTHON=1`` to force the fallback. ``BACKEND`` names the
implementation in use.
"""
from __future__ import annotations

import os

from contrail import _kernels_py as python_backend

compiled_backend = None
if os.environ.get("CONTRAIL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from contrail import _kernels as compiled_backend
    except ImportError:
        compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "compiled" if compiled_backend is not None else "python"

zbuffer_winners = _impl.zbuffer_winners
lattice_scores = _impl.lattice_scores
