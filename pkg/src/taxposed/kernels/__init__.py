"""Hot-kernel backend selection.

Prefers the compiled Cython extension; falls back to numpy if it is not
built. Set TAXPOSED_PURE_PYTHON=1 to force the fallback.
"""

import os

from . import _fallback

if os.environ.get("TAXPOSED_PURE_PYTHON") == "1":
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _native as _impl

        BACKEND = "native"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

distance_field = _impl.distance_field
farthest_point_indices = _impl.farthest_point_indices

__all__ = ["BACKEND", "distance_field", "farthest_point_indices"]
