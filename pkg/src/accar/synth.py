"""Synthetic phantoms and cubic B-spline free-form deformations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .warp import warp_array


@dataclass
class Phantom:
    image: np.ndarray
    seg: np.ndarray
    seed: int


@dataclass
class FFDSpec:
    mesh_spacing: int = 16
    amplitude: float = 4.0
    seed: int = 0
    mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mesh_spacing < 4:
            raise ValueError("mesh_spacing must be >= 4")
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")


def _ellipse(shape, cy, cx, ry, rx, angle, wobble):
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = y - cy, x - cx
    ca, sa = np.cos(angle), np.sin(angle)
    ty = -sa * dx + ca * dy
    tx = ca * dx + sa * dy
    theta = np.arctan2(ty, tx)
    r = np.hypot(tx / rx, ty / ry)
    bump = 1 + sum(a * np.cos(k * theta + p) for k, a, p in wobble)
    return r <= bump


def gen_phantom(seed: int, size: int = 64, n_structures: int = 3, texture_amplitude: float = 0.05) -> Phantom:
    """Nested, smoothly perturbed ellipses with distinct intensities and matching labels.

    Label 1 is the outer body; each further label sits inside the previous one.
    """
    if size % 16:
        raise ValueError("size must be divisible by 16")
    if n_structures < 1:
        raise ValueError("n_structures must be >= 1")
    rng = np.random.default_rng(seed)
    seg = np.zeros((size, size), dtype=np.int64)
    cy = size / 2 + rng.uniform(-0.05, 0.05) * size
    cx = size / 2 + rng.uniform(-0.05, 0.05) * size
    ry = size * rng.uniform(0.34, 0.42)
    rx = size * rng.uniform(0.34, 0.42)
    for label in range(1, n_structures + 1):
        wobble = [(k, rng.uniform(0, 0.08), rng.uniform(0, 2 * np.pi)) for k in (2, 3, 5)]
        inside = _ellipse(seg.shape, cy, cx, ry, rx, rng.uniform(0, np.pi), wobble)
        seg[inside & (seg == label - 1)] = label
        # next structure: smaller and shifted, still inside this one
        shrink = rng.uniform(0.45, 0.65)
        cy += rng.uniform(-0.35, 0.35) * ry * (1 - shrink)
        cx += rng.uniform(-0.35, 0.35) * rx * (1 - shrink)
        ry *= shrink
        rx *= shrink * rng.uniform(0.8, 1.2)
    levels = np.linspace(0.3, 0.9, n_structures)
    intensities = np.concatenate([[0.05], rng.permutation(levels)])
    image = intensities[seg] + texture_amplitude * _smooth_texture(rng, seg.shape)
    return Phantom(image=np.clip(image, 0.0, 1.0), seg=seg, seed=seed)


def _smooth_texture(rng: np.random.Generator, shape, sigma: float = 2.0) -> np.ndarray:
    """Zero-mean smooth noise scaled to [-1, 1]."""
    t = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return t / np.abs(t).max()


def cubic_bspline(t: np.ndarray) -> np.ndarray:
    """Centred uniform cubic B-spline basis."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(t)
    near = t < 1
    far = (t >= 1) & (t < 2)
    out[near] = 2 / 3 - t[near] ** 2 + t[near] ** 3 / 2
    out[far] = (2 - t[far]) ** 3 / 6
    return out


def n_control_points(size: int, spacing: int) -> int:
    return (size - 1) // spacing + 4


def bspline_matrix(size: int, spacing: int) -> np.ndarray:
    """(size × n_ctrl) basis; control point k sits at pixel (k - 1) * spacing."""
    k = np.arange(n_control_points(size, spacing))
    x = np.arange(size)
    return cubic_bspline(x[:, None] / spacing - (k[None, :] - 1))


def dense_field(control: np.ndarray, size: int, spacing: int) -> np.ndarray:
    """Evaluate a (2 × n × n) control grid on the size × size pixel grid."""
    b = bspline_matrix(size, spacing)
    return np.stack([b @ c @ b.T for c in control])


def feather_mask(mask: np.ndarray, width: float = 4.0) -> np.ndarray:
    """1 inside ``mask``, linear fall-off to 0 at ``width`` pixels outside."""
    dist = ndimage.distance_transform_edt(~mask.astype(bool))
    return np.clip(1 - dist / width, 0, 1)


def gen_ffd_field(spec: FFDSpec, size: int, control: np.ndarray | None = None) -> np.ndarray:
    """Dense displacement from random control displacements in ±amplitude."""
    if spec.mesh_spacing > size - 1:
        raise ValueError(f"mesh spacing {spec.mesh_spacing} too large for size {size}")
    n = n_control_points(size, spec.mesh_spacing)
    if control is None:
        rng = np.random.default_rng(spec.seed)
        control = rng.uniform(-spec.amplitude, spec.amplitude, size=(2, n, n))
    u = dense_field(control, size, spec.mesh_spacing)
    if spec.mask is not None:
        u = u * feather_mask(spec.mask)[None]
    return u


def invert_field(v: np.ndarray, iterations: int = 50) -> np.ndarray:
    """u with x + u(x) + v(x + u(x)) = x, by fixed-point iteration."""
    u = -v.copy()
    for _ in range(iterations):
        u = -np.stack([warp_array(v[0], u), warp_array(v[1], u)])
    return u


def gen_pair(phantom: Phantom, spec: FFDSpec):
    """Deform the phantom; returns (moving, fixed, moving_seg, fixed_seg, true_field).

    ``true_field`` is in the registration convention: warping ``moving`` by it
    reproduces ``fixed``.
    """
    size = phantom.image.shape[0]
    v = gen_ffd_field(spec, size)
    moving = warp_array(phantom.image, v)
    moving_seg = warp_array(phantom.seg, v, order=0)
    true_field = invert_field(v)
    return moving, phantom.image.copy(), moving_seg, phantom.seg.copy(), true_field
