"""Numpy kernels for the convolution family.

The three functions here are mutually adjoint bilinear maps, which is what lets
the tape express the backward pass of ``conv2d`` in terms of itself.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _patches(x, kh, kw, stride, padding):
    # (C, H, W) -> (C, Ho, Wo, kh, kw) view over the zero-padded input
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlate ``x`` (C, H, W) with ``w`` (O, C, kh, kw)."""
    kh, kw = w.shape[2:]
    p = _patches(x, kh, kw, stride, padding)
    return np.tensordot(w, p, axes=([1, 2, 3], [0, 3, 4]))


def conv2d_input_grad(gy, w, input_hw, stride=1, padding=0):
    """Adjoint of ``conv2d`` in its input argument."""
    o, c, kh, kw = w.shape
    h, wd = input_hw
    ho, wo = gy.shape[1:]
    out = np.zeros((c, h + 2 * padding, wd + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            # (c, ho, wo) contribution of kernel tap (i, j)
            tap = np.tensordot(w[:, :, i, j], gy, axes=([0], [0]))
            out[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += tap
    if padding:
        out = out[:, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(out)


def conv2d_weight_grad(x, gy, kernel_hw, stride=1, padding=0):
    """Adjoint of ``conv2d`` in its kernel argument."""
    kh, kw = kernel_hw
    p = _patches(x, kh, kw, stride, padding)
    return np.tensordot(gy, p, axes=([1, 2], [1, 2]))
