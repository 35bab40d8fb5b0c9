"""Backend selection for the convolution hot kernels.

A backend contributes the patch-gather (im2col_t) and the integer-code
convolution; the float GEMMs around them are shared BLAS calls. The compiled
extension (qsr._kernels) is preferred when importable; the NumPy
implementation is the fallback. Set QSR_BACKEND=python or QSR_BACKEND=native
to force a choice (forcing native raises if the extension is missing).

Both backends agree within float32 rounding; a training run is
bit-reproducible only under a single backend.
"""

import os

from . import _common
from . import python as _python


def _load(choice):
    if choice == "python":
        return _python
    try:
        from .. import _kernels

        return _kernels
    except ImportError:
        if choice == "native":
            raise ImportError(
                "QSR_BACKEND=native but the compiled extension is not built; "
                "run 'pip install -e . --no-build-isolation'"
            )
        return _python


_choice = os.environ.get("QSR_BACKEND", "auto").lower()
if _choice not in ("auto", "native", "python"):
    raise ValueError(f"unknown QSR_BACKEND value: {_choice!r}")
_impl = _load(_choice)

NAME = _impl.NAME
im2col_t = _impl.im2col_t
int_conv2d_fwd = _impl.int_conv2d_fwd
(conv2d_fwd, conv2d_fwd_ctx, conv2d_bwd_input,
 conv2d_bwd_weight, conv2d_bwd_weight_ctx) = _common.make_ops(im2col_t)


def available_backends():
    names = ["python"]
    try:
        from .. import _kernels  # noqa: F401

        names.insert(0, "native")
    except ImportError:
        pass
    return names


def ops_for(name):
    """All kernel entry points for an explicit backend (used by benchmarks
    and cross-backend tests)."""
    impl = {"python": _python}.get(name)
    if impl is None:
        from .. import _kernels as impl  # raises if not built
    fwd, fwd_ctx, bwd_in, bwd_w, bwd_w_ctx = _common.make_ops(impl.im2col_t)
    return {
        "name": impl.NAME,
        "im2col_t": impl.im2col_t,
        "conv2d_fwd": fwd,
        "conv2d_fwd_ctx": fwd_ctx,
        "conv2d_bwd_input": bwd_in,
        "conv2d_bwd_weight": bwd_w,
        "conv2d_bwd_weight_ctx": bwd_w_ctx,
        "int_conv2d_fwd": impl.int_conv2d_fwd,
    }
