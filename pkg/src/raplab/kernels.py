"""Back-end selection for the hot loops.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``RAPLAB_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("RAPLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

scan_scores = _impl.scan_scores
gray_scott_run = _impl.gray_scott_run
advection_diffusion_run = _impl.advection_diffusion_run
im2col = _impl.im2col
col2im = _impl.col2im


def implementations():
    """Return ``{name: module}`` for every back end importable in this process."""
    found = {"python": _fallback}
    try:
        from . import _kernels as compiled
    except ImportError:
        pass
    else:
        found["cython"] = compiled
    return found
