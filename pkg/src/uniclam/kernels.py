"""Kernel backend selection.

The compiled ``_kernels_c`` extension is used when it imports; otherwise the
numpy fallback in ``_kernels_py`` is used. Set ``UNICLAM_PURE_PYTHON=1`` to
force the fallback.
"""

import os

from . import _kernels_py

_force_py = os.environ.get("UNICLAM_PURE_PYTHON", "") not in ("", "0")

if _force_py:
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels_c as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
layernorm_forward = _impl.layernorm_forward
layernorm_backward = _impl.layernorm_backward
adam_update = _impl.adam_update
softmax_forward = _impl.softmax_forward
softmax_backward = _impl.softmax_backward
conv_out_size = _kernels_py.conv_out_size

__all__ = [
    "BACKEND",
    "im2col",
    "col2im",
    "layernorm_forward",
    "layernorm_backward",
    "adam_update",
    "softmax_forward",
    "softmax_backward",
    "conv_out_size",
]
