"""Kernel backend selection.

The compiled extension is preferred; the numpy implementation is the
fallback. Set ROUTEKIT_KERNELS=python (or =cython) to force a backend —
the benchmark harness uses this to compare the two.
"""

import os

_forced = os.environ.get("ROUTEKIT_KERNELS", "").strip().lower()

if _forced == "python":
    from routekit._kernels import _pykernels as _impl
elif _forced == "cython":
    from routekit._kernels import _ckernels as _impl  # type: ignore[no-redef]
else:
    try:
        from routekit._kernels import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        from routekit._kernels import _pykernels as _impl  # type: ignore[no-redef]

BACKEND = _impl.BACKEND
softmax = _impl.softmax
mlp_forward = _impl.mlp_forward
mlp_backward = _impl.mlp_backward
head_forward = _impl.head_forward
head_backward = _impl.head_backward
adam_update = _impl.adam_update
argmax_cosine = _impl.argmax_cosine

__all__ = [
    "BACKEND",
    "softmax",
    "mlp_forward",
    "mlp_backward",
    "head_forward",
    "head_backward",
    "adam_update",
    "argmax_cosine",
]
