"""Row kernels for the Lorentz maps and CSR neighbor sampling.

The compiled ``_core`` extension is used when it was built; otherwise the
numpy ``_fallback`` module provides the same functions.  Setting the
environment variable ``LKGR_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("LKGR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core as _impl  # noqa: F811

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _fallback

minkowski_rows = _impl.minkowski_rows
expmap_rows = _impl.expmap_rows
logmap_rows = _impl.logmap_rows
expmap0_rows = _impl.expmap0_rows
logmap0_rows = _impl.logmap0_rows
dist_rows = _impl.dist_rows
sample_rows = _impl.sample_rows

ARCOSH_FLOOR = _fallback.ARCOSH_FLOOR
ZERO_NORM = _fallback.ZERO_NORM
NEAR = _fallback.NEAR


def available_backends():
    """Names of the kernel modules importable in this environment."""
    names = {"python": _fallback}
    try:
        from . import _core

        names["compiled"] = _core
    except ImportError:
        pass
    return names
