"""Convolution orchestration shared by both backends.

A backend supplies the patch-gather hot kernel im2col_t (x, k) -> columns of
shape (N, C*k*k, H*W); everything else is BLAS matmul, identical in both.
The forward's column matrix doubles as the context for the weight-gradient
GEMM, so training backwards never rebuild it.
"""

import numpy as np


def make_ops(im2col_t):
    def conv2d_fwd_ctx(x, w):
        n, _, h, wd = x.shape
        o = w.shape[0]
        cols = im2col_t(x, w.shape[2])
        y = np.matmul(w.reshape(o, -1)[None], cols)
        return np.ascontiguousarray(y.reshape(n, o, h, wd)), cols

    def conv2d_fwd(x, w):
        return conv2d_fwd_ctx(x, w)[0]

    def conv2d_bwd_input(grad_out, w):
        # gradient of a 'same' zero-padded stride-1 correlation: correlate
        # grad_out with the spatially flipped, in/out-transposed kernel
        w_flip = np.ascontiguousarray(np.flip(w, axis=(2, 3)).swapaxes(0, 1))
        return conv2d_fwd(grad_out, w_flip)

    def conv2d_bwd_weight_ctx(grad_out, cols, k):
        n, o, h, wd = grad_out.shape
        c = cols.shape[1] // (k * k)
        go = grad_out.reshape(n, o, h * wd)
        gw = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0)
        return np.ascontiguousarray(gw.reshape(o, c, k, k))

    def conv2d_bwd_weight(grad_out, x, k):
        return conv2d_bwd_weight_ctx(grad_out, im2col_t(x, k), k)

    return (conv2d_fwd, conv2d_fwd_ctx, conv2d_bwd_input,
            conv2d_bwd_weight, conv2d_bwd_weight_ctx)
