"""Hot kernels for the embedding network, with backend selection.

The compiled Cython extension is used when present; otherwise the pure
NumPy implementation takes over. Both produce bit-identical results.
Set STEPMETRIC_KERNELS=numpy or =compiled to force a backend (forcing
`compiled` raises if the extension is missing).
"""

from __future__ import annotations

import os

from . import _numpy

_FORCE = os.environ.get("STEPMETRIC_KERNELS", "").strip().lower()

try:
    from . import _core

    HAVE_COMPILED = True
except ImportError:
    _core = None
    HAVE_COMPILED = False

if _FORCE == "numpy":
    _impl = _numpy
elif _FORCE == "compiled":
    if not HAVE_COMPILED:
        raise ImportError("STEPMETRIC_KERNELS=compiled but stepmetric.kernels._core is not built")
    _impl = _core
else:
    _impl = _core if HAVE_COMPILED else _numpy

BACKEND = "compiled" if _impl is _core else "numpy"

im2col3x3 = _impl.im2col3x3
col2im3x3 = _impl.col2im3x3
maxpool2x2 = _impl.maxpool2x2
maxpool2x2_backward = _impl.maxpool2x2_backward

numpy_backend = _numpy
compiled_backend = _core
