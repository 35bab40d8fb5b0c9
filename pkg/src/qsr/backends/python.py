"""NumPy implementation of the hot kernels (stride-trick gathers).

All functions assume pre-validated inputs: float32 activations in NCHW
layout, float32 weights in OIKK layout with odd square kernels, and
same-size zero padding. Shape checking lives in the callers.
"""

import numpy as np

from . import _common

NAME = "python"


def _zero_pad(x, p, dtype=None):
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype or x.dtype)
    xp[:, :, p : p + h, p : p + w] = x
    return xp


def im2col_t(x, k):
    """(N,C,H,W) -> (N, C*k*k, H*W) patch columns under zero 'same' padding."""
    n, c, h, w = x.shape
    xp = _zero_pad(x, k // 2)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # win: (N, C, H, W, k, k) -> (N, C, k, k, H, W) -> merged columns
    return np.ascontiguousarray(
        win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, h * w)
    )


(conv2d_fwd, conv2d_fwd_ctx, conv2d_bwd_input,
 conv2d_bwd_weight, conv2d_bwd_weight_ctx) = _common.make_ops(im2col_t)


def int_conv2d_fwd(act_codes, w_codes):
    """Integer correlation with 64-bit accumulation.

    act_codes: int32 (N,C,H,W); w_codes: int8 (O,I,k,k). Returns int64 NOHW.
    """
    n, c, h, wd = act_codes.shape
    o = w_codes.shape[0]
    k = w_codes.shape[2]
    xp = _zero_pad(act_codes, k // 2, dtype=np.int64)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, h * wd)
    out = np.matmul(w_codes.reshape(o, -1).astype(np.int64)[None], cols)
    return np.ascontiguousarray(out.reshape(n, o, h, wd))
