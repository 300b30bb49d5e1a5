"""Hot-kernel backend selection.

The compiled extension is used when importable; set ``REGNAV_PURE_PYTHON=1``
to force the pure-Python fallback.
"""
from __future__ import annotations

import os

from regnav import _pykernels

if os.environ.get("REGNAV_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from regnav import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

bfs_field = _impl.bfs_field
cast_rays = _impl.cast_rays
move_nodes = _impl.move_nodes

__all__ = ["BACKEND", "bfs_field", "cast_rays", "move_nodes"]
