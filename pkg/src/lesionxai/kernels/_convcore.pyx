# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled 3D convolution kernels (hot path of forward and backward passes)."""

import numpy as np

cimport cython
from cython cimport floating


NAME = "compiled"


def conv3d_forward(x, w, b=None):
    """x: (B, Ci, Z, Y, X); w: (Co, Ci, kz, ky, kx), odd kernel, same zero pad."""
    B, Ci, Z, Y, X = x.shape
    Co = w.shape[0]
    if w.shape[1] != Ci:
        raise ValueError(f"input has {Ci} channels, weight expects {w.shape[1]}")
    kz, ky, kx = w.shape[2], w.shape[3], w.shape[4]
    rz, ry, rx = kz // 2, ky // 2, kx // 2
    xp = np.pad(x, ((0, 0), (0, 0), (rz, rz), (ry, ry), (rx, rx)))
    xp = np.ascontiguousarray(xp)
    w = np.ascontiguousarray(w)
    out = np.zeros((B, Co, Z, Y, X), dtype=x.dtype)
    if x.dtype == np.float32:
        _conv3d_f[float](xp, w, out)
    elif x.dtype == np.float64:
        _conv3d_f[double](xp, w, out)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    if b is not None:
        out += b.reshape(1, Co, 1, 1, 1)
    return out


def conv3d_grad_weight(x, gy, kernel):
    B, Ci, Z, Y, X = x.shape
    Co = gy.shape[1]
    kz, ky, kx = kernel
    rz, ry, rx = kz // 2, ky // 2, kx // 2
    xp = np.ascontiguousarray(np.pad(x, ((0, 0), (0, 0), (rz, rz), (ry, ry), (rx, rx))))
    gy = np.ascontiguousarray(gy)
    gw = np.zeros((Co, Ci, kz, ky, kx), dtype=x.dtype)
    if x.dtype == np.float32:
        _conv3d_gw_f[float](xp, gy, gw)
    elif x.dtype == np.float64:
        _conv3d_gw_f[double](xp, gy, gw)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    gb = gy.reshape(B, Co, -1).sum(axis=(0, 2))
    return gw, gb


cdef void _conv3d_f(floating[:, :, :, :, ::1] xp,
                    floating[:, :, :, :, ::1] w,
                    floating[:, :, :, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t B = out.shape[0], Co = out.shape[1]
    cdef Py_ssize_t Z = out.shape[2], Y = out.shape[3], X = out.shape[4]
    cdef Py_ssize_t Ci = w.shape[1], kz = w.shape[2], ky = w.shape[3], kx = w.shape[4]
    cdef Py_ssize_t b, co, ci, dz, dy, dx, z, y, x
    cdef floating wv
    for b in range(B):
        for co in range(Co):
            for ci in range(Ci):
                for dz in range(kz):
                    for dy in range(ky):
                        for dx in range(kx):
                            wv = w[co, ci, dz, dy, dx]
                            if wv == 0:
                                continue
                            for z in range(Z):
                                for y in range(Y):
                                    for x in range(X):
                                        out[b, co, z, y, x] += wv * xp[b, ci, z + dz, y + dy, x + dx]


cdef void _conv3d_gw_f(floating[:, :, :, :, ::1] xp,
                       floating[:, :, :, :, ::1] gy,
                       floating[:, :, :, :, ::1] gw) noexcept nogil:
    cdef Py_ssize_t B = gy.shape[0], Co = gy.shape[1]
    cdef Py_ssize_t Z = gy.shape[2], Y = gy.shape[3], X = gy.shape[4]
    cdef Py_ssize_t Ci = gw.shape[1], kz = gw.shape[2], ky = gw.shape[3], kx = gw.shape[4]
    cdef Py_ssize_t b, co, ci, dz, dy, dx, z, y, x
    cdef floating acc
    for co in range(Co):
        for ci in range(Ci):
            for dz in range(kz):
                for dy in range(ky):
                    for dx in range(kx):
                        acc = 0
                        for b in range(B):
                            for z in range(Z):
                                for y in range(Y):
                                    for x in range(X):
                                        acc += gy[b, co, z, y, x] * xp[b, ci, z + dz, y + dy, x + dx]
                        gw[co, ci, dz, dy, dx] = acc
