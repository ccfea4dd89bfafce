"""Pure NumPy kernels, bit-compatible with the compiled extension.

Accumulation orders are kept identical to the Cython loops (offset-major
for col2im, first-maximum wins for pooling) so both backends produce the
same floats, not just close ones.
"""

from __future__ import annotations

import numpy as np

# 3x3 neighborhood offsets in row-major order; index k = 3*di + dj.
_OFFSETS = [(di, dj) for di in range(3) for dj in range(3)]


def im2col3x3(x: np.ndarray) -> np.ndarray:
    """(B,H,W,C) -> (B,H,W,9,C) patches of the zero-padded 3x3 window."""
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((b, h, w, 9, c), dtype=x.dtype)
    for k, (di, dj) in enumerate(_OFFSETS):
        cols[:, :, :, k, :] = xp[:, di : di + h, dj : dj + w, :]
    return cols


def col2im3x3(cols: np.ndarray) -> np.ndarray:
    """Adjoint of im2col3x3: scatter-add patches back to (B,H,W,C)."""
    b, h, w, _nine, c = cols.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=cols.dtype)
    for k, (di, dj) in enumerate(_OFFSETS):
        xp[:, di : di + h, dj : dj + w, :] += cols[:, :, :, k, :]
    return np.ascontiguousarray(xp[:, 1:-1, 1:-1, :])


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling. Returns (pooled, argmax) with argmax in 0..3
    (window positions in row-major order, first maximum wins)."""
    b, h, w, c = x.shape
    win = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    win = np.ascontiguousarray(win).reshape(b, h // 2, w // 2, 4, c)
    idx = np.argmax(win, axis=3).astype(np.uint8)
    pooled = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return np.ascontiguousarray(pooled), idx


def maxpool2x2_backward(grad: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Route pooled gradients back to the argmax positions."""
    b, h2, w2, c = grad.shape
    win = np.zeros((b, h2, w2, 4, c), dtype=grad.dtype)
    np.put_along_axis(win, idx[:, :, :, None, :].astype(np.intp), grad[:, :, :, None, :], axis=3)
    win = win.reshape(b, h2, w2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(win).reshape(b, h2 * 2, w2 * 2, c)
