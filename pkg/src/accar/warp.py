"""Differentiable image warping and Jacobian-based deformation analysis.

Displacements are in pixels with the origin at the top-left pixel centre.
Component 0 moves along x (columns), component 1 along y (rows), and the
warped image samples the source at ``x + u(x)``.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor


def _sample_setup(u: np.ndarray):
    _, h, w = u.shape
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = gx + u[0]
    sy = gy + u[1]
    # border replicate: clamp, and remember where the clamp is active
    cx = np.clip(sx, 0, w - 1)
    cy = np.clip(sy, 0, h - 1)
    inside_x = (sx >= 0) & (sx <= w - 1)
    inside_y = (sy >= 0) & (sy <= h - 1)
    x0 = np.minimum(np.floor(cx).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(cy).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = cx - x0
    wy = cy - y0
    return x0, x1, y0, y1, wx, wy, inside_x, inside_y


def apply_displacement(image, u) -> Tensor:
    """Bilinear resampling of ``image`` (H×W or C×H×W) at ``x + u(x)``."""
    image, u = as_tensor(image), as_tensor(u)
    squeeze = image.ndim == 2
    img = image.data[None] if squeeze else image.data
    if u.ndim != 3 or u.shape[0] != 2 or u.shape[1:] != img.shape[1:]:
        raise ShapeError(f"displacement {u.shape} does not match image {image.shape}")
    c, h, w = img.shape
    x0, x1, y0, y1, wx, wy, inx, iny = _sample_setup(u.data)
    i00, i01, i10, i11 = img[:, y0, x0], img[:, y0, x1], img[:, y1, x0], img[:, y1, x1]
    top = i00 * (1 - wx) + i01 * wx
    bot = i10 * (1 - wx) + i11 * wx
    out = top * (1 - wy) + bot * wy

    def bw(g):
        g = g[None] if squeeze else g
        gimg = None
        if image.requires_grad:
            flat = np.zeros((c, h * w))
            for idx, wgt in (((y0, x0), (1 - wx) * (1 - wy)), ((y0, x1), wx * (1 - wy)),
                             ((y1, x0), (1 - wx) * wy), ((y1, x1), wx * wy)):
                lin = (idx[0] * w + idx[1]).ravel()
                for ch in range(c):
                    flat[ch] += np.bincount(lin, weights=(g[ch] * wgt).ravel(), minlength=h * w)
            gimg = flat.reshape(c, h, w)
            if squeeze:
                gimg = gimg[0]
        gu = None
        if u.requires_grad:
            dx = ((i01 - i00) * (1 - wy) + (i11 - i10) * wy) * inx
            dy = (bot - top) * iny
            gu = np.stack([(g * dx).sum(axis=0), (g * dy).sum(axis=0)])
        return gimg, gu

    return Tensor._op(out[0] if squeeze else out, (image, u), bw)


def warp_array(image: np.ndarray, u: np.ndarray, order: int = 1) -> np.ndarray:
    """Non-differentiable warp of a plain array; ``order=0`` is nearest neighbour (for labels)."""
    image = np.asarray(image)
    u = np.asarray(u, dtype=np.float64)
    if order == 1:
        return apply_displacement(image.astype(np.float64), u).data
    _, h, w = u.shape
    gy, gx = np.mgrid[0:h, 0:w]
    sx = np.clip(np.floor(gx + u[0] + 0.5).astype(np.int64), 0, w - 1)
    sy = np.clip(np.floor(gy + u[1] + 0.5).astype(np.int64), 0, h - 1)
    return image[..., sy, sx]


def _forward_diff(a: np.ndarray, axis: int) -> np.ndarray:
    d = np.diff(a, axis=axis)
    last = [slice(None)] * a.ndim
    last[axis] = slice(-1, None)
    return np.concatenate([d, d[tuple(last)]], axis=axis)


def jacobian_det_map(u) -> np.ndarray:
    """det(I + ∇u) per pixel with forward differences (last row/column replicated)."""
    u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=np.float64)
    dux_dx = _forward_diff(u[0], 1)
    dux_dy = _forward_diff(u[0], 0)
    duy_dx = _forward_diff(u[1], 1)
    duy_dy = _forward_diff(u[1], 0)
    return (1 + dux_dx) * (1 + duy_dy) - dux_dy * duy_dx


def folding_ratio(u) -> float:
    """Percentage of pixels with a negative Jacobian determinant."""
    det = jacobian_det_map(u)
    return 100.0 * float(np.mean(det < 0))


def grad_jacobian_mag(u) -> float:
    """Mean Euclidean norm of the forward-difference gradient of the Jacobian determinant."""
    det = jacobian_det_map(u)
    gx = _forward_diff(det, 1)
    gy = _forward_diff(det, 0)
    return float(np.mean(np.sqrt(gx ** 2 + gy ** 2)))


def end_point_error(u, v, mask: np.ndarray | None = None) -> float:
    u = np.asarray(u.data if isinstance(u, Tensor) else u)
    v = np.asarray(v.data if isinstance(v, Tensor) else v)
    err = np.sqrt(((u - v) ** 2).sum(axis=0))
    return float(err[mask].mean() if mask is not None else err.mean())
