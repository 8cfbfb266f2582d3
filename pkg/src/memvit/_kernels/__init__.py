"""Hot-kernel dispatch: compiled extension when available, numpy fallback
otherwise.

``MEMVIT_FORCE_PYTHON=1`` forces the fallback; ``MEMVIT_DETERMINISTIC``
(default ``1``) pins the shared tap accumulation order, making the two
backends bit-identical.  Setting it to ``0`` is reserved for backends with
relaxed reduction order; both current backends stay deterministic.
"""

import os

from . import _pykernels

_impl = _pykernels
if os.environ.get("MEMVIT_FORCE_PYTHON", "0") != "1":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        pass

DETERMINISTIC = os.environ.get("MEMVIT_DETERMINISTIC", "1") != "0"

backend_name = _impl.BACKEND
depthwise_conv3d_fwd = _impl.depthwise_conv3d_fwd
depthwise_conv3d_bwd = _impl.depthwise_conv3d_bwd


def get_backend(name: str):
    """Explicit backend handle for benchmarks: 'python' or 'compiled'."""
    if name == "python":
        return _pykernels
    if name in ("compiled", "cython"):
        if _impl is _pykernels:
            raise RuntimeError("compiled kernels are not available")
        return _impl
    raise ValueError(f"unknown backend {name!r}")
