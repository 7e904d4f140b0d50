"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_kernels.pyx`` must agree with them
to rounding error.
"""
import numpy as np


def patch_moments(plane, size):
    """Per-patch mean and population variance over a floor grid.

    Returns two ``(rows, cols)`` arrays.
    """
    plane = np.asarray(plane, dtype=np.float64)
    rows, cols = plane.shape[0] // size, plane.shape[1] // size
    blocks = plane[: rows * size, : cols * size].reshape(rows, size, cols, size)
    means = blocks.mean(axis=(1, 3))
    dev = blocks - means[:, None, :, None]
    variances = (dev * dev).mean(axis=(1, 3))
    return means, variances


def depthwise3x3(x, w):
    """Depthwise 3x3 cross-correlation with zero padding 1.

    x: (B, C, H, W), w: (C, 3, 3). Output has the shape of x.
    """
    _, _, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(x)
    for i in range(3):
        for j in range(3):
            out += xp[:, :, i:i + h, j:j + wd] * w[None, :, i, j, None, None]
    return out


def depthwise3x3_backward(gout, x, w):
    """Gradients of :func:`depthwise3x3` w.r.t. input and kernel."""
    _, _, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for i in range(3):
        for j in range(3):
            gw[:, i, j] = np.einsum("bchw,bchw->c", gout, xp[:, :, i:i + h, j:j + wd])
            gxp[:, :, i:i + h, j:j + wd] += gout * w[None, :, i, j, None, None]
    return gxp[:, :, 1:-1, 1:-1].copy(), gw
