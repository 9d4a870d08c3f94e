"""Hot-kernel backend selection.

The numba implementations are used when numba imports cleanly.  Setting the
environment variable ``DICEKIT_PURE_NUMPY=1`` (checked at import time) forces
the pure-numpy fallbacks; the same fallback engages automatically when numba
is missing or fails to initialize.  ``BACKEND`` names the active choice.
"""

from __future__ import annotations

import os

from . import numpy_impl

_FORCE_NUMPY = os.environ.get("DICEKIT_PURE_NUMPY", "").strip().lower() in {"1", "true", "yes"}

if _FORCE_NUMPY:
    _impl = numpy_impl
    BACKEND = "numpy"
else:
    try:
        from . import numba_impl as _impl

        BACKEND = "numba"
    except ImportError:
        _impl = numpy_impl
        BACKEND = "numpy"

sat_gap = _impl.sat_gap
route_pose = _impl.route_pose
drive = _impl.drive
lloyd = _impl.lloyd
draw_clustered = _impl.draw_clustered

__all__ = ["BACKEND", "sat_gap", "route_pose", "drive", "lloyd", "draw_clustered"]
