"""Pure-numpy convolution kernels (fallback backend).

All arrays are channel-first with a leading batch axis: x is (B, Ci, Z, Y, X),
weights are (Co, Ci, kz, ky, kx) with odd kernel extents, stride 1 and "same"
zero padding. The per-offset matmul formulation keeps peak memory at one
padded copy of the input.
"""

from __future__ import annotations

import numpy as np

NAME = "reference"


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    B, Ci, Z, Y, X = x.shape
    Co, Ci_w, kz, ky, kx = w.shape
    if Ci != Ci_w:
        raise ValueError(f"input has {Ci} channels, weight expects {Ci_w}")
    rz, ry, rx = kz // 2, ky // 2, kx // 2
    xp = np.pad(x, ((0, 0), (0, 0), (rz, rz), (ry, ry), (rx, rx)))
    out = np.zeros((B, Co, Z * Y * X), dtype=x.dtype)
    for dz in range(kz):
        for dy in range(ky):
            for dx in range(kx):
                xs = xp[:, :, dz : dz + Z, dy : dy + Y, dx : dx + X]
                wk = np.ascontiguousarray(w[:, :, dz, dy, dx])
                out += wk @ xs.reshape(B, Ci, -1)
    out = out.reshape(B, Co, Z, Y, X)
    if b is not None:
        out += b.reshape(1, Co, 1, 1, 1)
    return out


def conv3d_grad_weight(x: np.ndarray, gy: np.ndarray, kernel: tuple[int, int, int]):
    """Gradient of the seed-weighted output sum w.r.t. weight and bias."""
    B, Ci, Z, Y, X = x.shape
    Co = gy.shape[1]
    kz, ky, kx = kernel
    rz, ry, rx = kz // 2, ky // 2, kx // 2
    xp = np.pad(x, ((0, 0), (0, 0), (rz, rz), (ry, ry), (rx, rx)))
    gyf = gy.reshape(B, Co, -1)
    gw = np.zeros((Co, Ci, kz, ky, kx), dtype=x.dtype)
    for dz in range(kz):
        for dy in range(ky):
            for dx in range(kx):
                xs = xp[:, :, dz : dz + Z, dy : dy + Y, dx : dx + X].reshape(B, Ci, -1)
                gw[:, :, dz, dy, dx] = np.einsum("bov,bcv->oc", gyf, xs, optimize=True)
    gb = gyf.sum(axis=(0, 2))
    return gw, gb
