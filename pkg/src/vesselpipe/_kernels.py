"""Numba hot loops for the 3D network layers.

Only three loop nests exist: the 3x3x3 convolution forward (which also
serves the input-gradient pass, run with transposed and spatially flipped
weights), its weight-gradient reduction, and the 2x2x2 transposed
convolution / max pooling pair. Every kernel is gather-only or reduces
within a single thread's ownership region, so results are bitwise
reproducible run to run regardless of worker count. Kernels are
dtype-generic (numba specializes per signature); training runs float32,
gradient checking float64.

These kernels win on large spatial extents; the layer wrappers in
``net`` route small feature maps to BLAS instead.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, fastmath=True, cache=True)
def conv3d_fwd(xp, w, bias, y):
    """Same-padding 3x3x3 cross-correlation.

    xp is the input pre-padded by 1 on each spatial side:
    (B, C, D+2, H+2, W+2); w is (O, C, 3, 3, 3); y is (B, O, D, H, W).
    """
    B, O, D, H, W = y.shape
    C = xp.shape[1]
    for b in prange(B):
        for d in range(D):
            for h in range(H):
                for o in range(O):
                    row = y[b, o, d, h]
                    for wi in range(W):
                        row[wi] = bias[o]
                for c in range(C):
                    for a in range(3):
                        for bb in range(3):
                            xrow = xp[b, c, d + a, h + bb]
                            for o in range(O):
                                row = y[b, o, d, h]
                                for cc in range(3):
                                    k = w[o, c, a, bb, cc]
                                    for wi in range(W):
                                        row[wi] += k * xrow[wi + cc]


@njit(parallel=True, fastmath=True, cache=True)
def conv3d_bwd_w(xp, dy, dw):
    """Weight gradient. One thread owns one output channel; the 27 taps
    accumulate in a local block during a single sweep over the data."""
    B, O, D, H, W = dy.shape
    C = xp.shape[1]
    zero = xp[0, 0, 0, 0, 0] - xp[0, 0, 0, 0, 0]
    for o in prange(O):
        for c in range(C):
            acc = np.zeros((3, 3, 3), dtype=xp.dtype)
            for b in range(B):
                for d in range(D):
                    for h in range(H):
                        yrow = dy[b, o, d, h]
                        for a in range(3):
                            for bb in range(3):
                                xrow = xp[b, c, d + a, h + bb]
                                a0 = zero
                                a1 = zero
                                a2 = zero
                                for wi in range(W):
                                    yv = yrow[wi]
                                    a0 += yv * xrow[wi]
                                    a1 += yv * xrow[wi + 1]
                                    a2 += yv * xrow[wi + 2]
                                acc[a, bb, 0] += a0
                                acc[a, bb, 1] += a1
                                acc[a, bb, 2] += a2
            for a in range(3):
                for bb in range(3):
                    for cc in range(3):
                        dw[o, c, a, bb, cc] = acc[a, bb, cc]


@njit(parallel=True, fastmath=True, cache=True)
def upconv3d_fwd(x, w, bias, y):
    """Transposed convolution, kernel 2, stride 2: doubles spatial dims.

    x is (B, C, D, H, W); w is (C, O, 2, 2, 2); y is (B, O, 2D, 2H, 2W).
    Each output voxel receives exactly one input voxel per channel pair.
    """
    B, O, D2, H2, W2 = y.shape
    C = x.shape[1]
    for b in prange(B):
        for o in range(O):
            for m1 in range(D2):
                for m2 in range(H2):
                    row = y[b, o, m1, m2]
                    for m3 in range(W2):
                        row[m3] = bias[o]
        for c in range(C):
            for o in range(O):
                for m1 in range(D2):
                    d, i = m1 // 2, m1 % 2
                    for m2 in range(H2):
                        h, j = m2 // 2, m2 % 2
                        xrow = x[b, c, d, h]
                        row = y[b, o, m1, m2]
                        w0 = w[c, o, i, j, 0]
                        w1 = w[c, o, i, j, 1]
                        for wq in range(W2 // 2):
                            row[2 * wq] += w0 * xrow[wq]
                            row[2 * wq + 1] += w1 * xrow[wq]


@njit(parallel=True, fastmath=True, cache=True)
def upconv3d_bwd_x(dy, w, dx):
    """Adjoint of upconv3d_fwd with respect to the input: a stride-2
    correlation."""
    B, C, D, H, W = dx.shape
    O = dy.shape[1]
    for b in prange(B):
        for c in range(C):
            for d in range(D):
                for h in range(H):
                    row = dx[b, c, d, h]
                    for wq in range(W):
                        acc = row[0] - row[0]
                        for o in range(O):
                            for i in range(2):
                                for j in range(2):
                                    yrow = dy[b, o, 2 * d + i, 2 * h + j]
                                    for k in range(2):
                                        acc += yrow[2 * wq + k] * w[c, o, i, j, k]
                        row[wq] = acc


@njit(parallel=True, fastmath=True, cache=True)
def upconv3d_bwd_w(x, dy, dw):
    B, O = dy.shape[0], dy.shape[1]
    C, D, H, W = x.shape[1], x.shape[2], x.shape[3], x.shape[4]
    zero = x[0, 0, 0, 0, 0] - x[0, 0, 0, 0, 0]
    for c in prange(C):
        for o in range(O):
            for i in range(2):
                for j in range(2):
                    for k in range(2):
                        acc = zero
                        for b in range(B):
                            for d in range(D):
                                for h in range(H):
                                    xrow = x[b, c, d, h]
                                    yrow = dy[b, o, 2 * d + i, 2 * h + j]
                                    for wq in range(W):
                                        acc += xrow[wq] * yrow[2 * wq + k]
                        dw[c, o, i, j, k] = acc


@njit(parallel=True, fastmath=True, cache=True)
def maxpool_fwd(x, y, arg):
    """2x2x2 max pooling, stride 2. arg stores the winning in-window
    offset 0..7 in (dx, dy, dz) lexicographic order; ties keep the first."""
    B, C, D2, H2, W2 = y.shape
    for b in prange(B):
        for c in range(C):
            for dq in range(D2):
                for hq in range(H2):
                    for wq in range(W2):
                        best = x[b, c, 2 * dq, 2 * hq, 2 * wq]
                        besti = 0
                        idx = 0
                        for i in range(2):
                            for j in range(2):
                                for k in range(2):
                                    v = x[b, c, 2 * dq + i, 2 * hq + j, 2 * wq + k]
                                    if v > best:
                                        best = v
                                        besti = idx
                                    idx += 1
                        y[b, c, dq, hq, wq] = best
                        arg[b, c, dq, hq, wq] = besti


@njit(parallel=True, fastmath=True, cache=True)
def maxpool_bwd(dy, arg, dx):
    """Routes each window gradient to its stored argmax voxel."""
    B, C, D, H, W = dx.shape
    for b in prange(B):
        for c in range(C):
            for d in range(D):
                i = d % 2
                for h in range(H):
                    j = h % 2
                    for wi in range(W):
                        k = wi % 2
                        off = 4 * i + 2 * j + k
                        if arg[b, c, d // 2, h // 2, wi // 2] == off:
                            dx[b, c, d, h, wi] = dy[b, c, d // 2, h // 2, wi // 2]
                        else:
                            dx[b, c, d, h, wi] = 0.0
