"""Dense spatial primitives on numpy arrays.

Arrays are plain C-contiguous ``numpy.ndarray`` objects; float32 is the
training dtype and float64 is used for gradient checks. Every primitive
accepts a single sample ``(C, H, W)`` or a batch ``(B, C, H, W)``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got shape {x.shape}")


def _check_kernels(x: np.ndarray, kernels: np.ndarray, padding: int) -> int:
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise ShapeError(f"kernels must be (C_out,C_in,k,k), got {kernels.shape}")
    k = kernels.shape[-1]
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if kernels.shape[1] != x.shape[1]:
        raise ShapeError(
            f"kernel expects {kernels.shape[1]} input channels, input has {x.shape[1]}"
        )
    if padding < 0:
        raise ValueError("padding must be non-negative")
    return k


def conv2d(x: np.ndarray, kernels: np.ndarray, padding: int | None = None) -> np.ndarray:
    """Zero-padded 2-D cross-correlation.

    ``out[o, y, x] = sum_{c,i,j} in[c, y+i-p, x+j-p] * k[o, c, i, j]``.
    ``padding`` defaults to ``(k - 1) // 2`` (same-size output).
    """
    xb, single = _as_batch(x)
    k = _check_kernels(xb, kernels, padding or 0)
    p = (k - 1) // 2 if padding is None else padding
    B, C, H, W = xb.shape
    O = kernels.shape[0]
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p))) if p else xb
    Ho, Wo = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("kernel larger than padded input")
    # im2col: (B, Ho, Wo, C, k, k) -> (B*Ho*Wo, C*k*k)
    cols = sliding_window_view(xp, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    cols = cols.reshape(B * Ho * Wo, C * k * k)
    out = cols @ kernels.reshape(O, C * k * k).T.astype(cols.dtype, copy=False)
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))
    return out[0] if single else out


def conv2d_reference(x: np.ndarray, kernels: np.ndarray, padding: int) -> np.ndarray:
    """Nested-loop oracle for :func:`conv2d` (single sample, slow)."""
    C, H, W = x.shape
    O, Ck, k, _ = kernels.shape
    if Ck != C:
        raise ShapeError("channel mismatch")
    Ho, Wo = H + 2 * padding - k + 1, W + 2 * padding - k + 1
    out = np.zeros((O, Ho, Wo), dtype=np.float64)
    for o in range(O):
        for y in range(Ho):
            for xx in range(Wo):
                s = 0.0
                for c in range(C):
                    for i in range(k):
                        for j in range(k):
                            yy, xc = y + i - padding, xx + j - padding
                            if 0 <= yy < H and 0 <= xc < W:
                                s += float(x[c, yy, xc]) * float(kernels[o, c, i, j])
                out[o, y, xx] = s
    return out


def conv2d_backward(
    x: np.ndarray, kernels: np.ndarray, grad_output: np.ndarray, padding: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_output * conv2d(x, kernels))`` w.r.t. ``x`` and ``kernels``."""
    xb, single = _as_batch(x)
    gb, _ = _as_batch(grad_output)
    k = _check_kernels(xb, kernels, padding or 0)
    p = (k - 1) // 2 if padding is None else padding
    B, C, H, W = xb.shape
    O = kernels.shape[0]
    Ho, Wo = H + 2 * p - k + 1, W + 2 * p - k + 1
    if gb.shape != (B, O, Ho, Wo):
        raise ShapeError(f"grad_output shape {gb.shape} != conv output {(B, O, Ho, Wo)}")

    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p))) if p else xb
    cols = sliding_window_view(xp, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    cols = cols.reshape(B * Ho * Wo, C * k * k)
    g2 = gb.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
    grad_k = (g2.T @ cols).reshape(O, C, k, k)

    # input gradient is a full correlation with the 180-degree-rotated, transposed bank
    flipped = np.ascontiguousarray(kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_x = conv2d(gb, flipped, padding=k - 1 - p)
    if single:
        grad_x = grad_x[0]
    return grad_x.astype(xb.dtype, copy=False), grad_k.astype(kernels.dtype, copy=False)


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping 2x2 max pool over the last two axes.

    Returns the pooled array and the in-window argmax (0..3, row-major; the
    first maximum wins on ties) needed by :func:`maxpool2_backward`.
    """
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {H}x{W}")
    lead = x.shape[:-2]
    win = x.reshape(*lead, H // 2, 2, W // 2, 2)
    win = np.moveaxis(win, -3, -2).reshape(*lead, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int8)


def maxpool2_backward(grad_output: np.ndarray, indices: np.ndarray) -> np.ndarray:
    lead = grad_output.shape[:-2]
    h, w = grad_output.shape[-2:]
    g = np.zeros((*lead, h, w, 4), dtype=grad_output.dtype)
    np.put_along_axis(g, indices[..., None].astype(np.intp), grad_output[..., None], axis=-1)
    g = g.reshape(*lead, h, w, 2, 2)
    return np.ascontiguousarray(np.moveaxis(g, -2, -3).reshape(*lead, 2 * h, 2 * w))


def upsample_nearest2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=-2).repeat(2, axis=-1)


def upsample_nearest2_backward(grad_output: np.ndarray) -> np.ndarray:
    H, W = grad_output.shape[-2:]
    lead = grad_output.shape[:-2]
    return grad_output.reshape(*lead, H // 2, 2, W // 2, 2).sum(axis=(-3, -1))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_output: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0, grad_output, 0).astype(grad_output.dtype, copy=False)


def rot90(x: np.ndarray, quarter_turns: int = 1) -> np.ndarray:
    """Rotate the last two axes so that pixel ``(i, j)`` moves to ``(j, n-1-i)``."""
    if x.shape[-1] != x.shape[-2]:
        raise ValueError(f"rot90 needs square spatial dims, got {x.shape[-2:]}")
    return np.ascontiguousarray(np.rot90(x, -(quarter_turns % 4), axes=(-2, -1)))


def flip_h(x: np.ndarray) -> np.ndarray:
    """Mirror the last axis: pixel ``(i, j)`` moves to ``(i, n-1-j)``."""
    return np.ascontiguousarray(x[..., ::-1])
