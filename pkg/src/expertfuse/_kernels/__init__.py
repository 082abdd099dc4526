"""Kernel backend selection.

The hot aggregation kernel ships as a compiled Cython extension with a
pure numpy fallback.  Import-time selection prefers the extension; setting
``EXPERTFUSE_PURE=1`` forces the fallback regardless.
"""

import os

from . import reference

if os.environ.get("EXPERTFUSE_PURE", "0") not in ("", "0"):
    _impl = reference
    BACKEND = "pure"
else:
    try:
        from . import _fastcore as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = reference
        BACKEND = "pure"

vlad_forward = _impl.vlad_forward
vlad_backward = _impl.vlad_backward


def backend_name() -> str:
    """Returns the kernel implementation picked at import: compiled or pure."""
    return BACKEND
