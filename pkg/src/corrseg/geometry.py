"""Invertible affine transforms implemented with sampling grids.

Coordinates are normalized to [-1, 1] with pixel centers at (2j+1)/W - 1
(align-corners-false convention). A transform's 2x3 matrix maps *output* view
coordinates to *source* coordinates, so warping an image samples the source at
m @ (x, y, 1). Grid coordinates are constants: gradients flow through image
values only, which is all the losses need.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

_DET_EPS = 1e-9


class SingularTransformError(ValueError):
    pass


@dataclass(frozen=True)
class AffineTransform:
    """2x3 affine map from normalized output coords to normalized input coords."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"affine matrix must be 2x3, got {m.shape}")
        object.__setattr__(self, "m", m)

    @property
    def det(self):
        m = self.m
        return float(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])


def identity_transform():
    return AffineTransform(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))


def _hom(t):
    return np.vstack([t.m, [0.0, 0.0, 1.0]])


def compose(a, b):
    """Transform equivalent to warping by b first, then by a."""
    return AffineTransform((_hom(b) @ _hom(a))[:2])


def invert(t):
    """Inverse transform; compose(t, invert(t)) is the identity."""
    d = t.det
    if abs(d) < _DET_EPS:
        raise SingularTransformError(f"affine transform is near singular (det={d:g})")
    (a, b, tx), (c, e, ty) = t.m
    a_inv = np.array([[e, -b], [-c, a]]) / d
    shift = -(a_inv @ np.array([tx, ty]))
    return AffineTransform(np.hstack([a_inv, shift[:, None]]))


@dataclass(frozen=True)
class SampleGrid:
    """Per-pixel normalized source coordinates plus an in-bounds mask."""

    coords: np.ndarray  # (H, W, 2), last axis = (x, y)
    valid: np.ndarray   # (H, W) bool


def pixel_centers(h, w):
    """Normalized coordinates of pixel centers, shapes (w,) and (h,)."""
    xs = (2.0 * np.arange(w) + 1.0) / w - 1.0
    ys = (2.0 * np.arange(h) + 1.0) / h - 1.0
    return xs, ys


def make_grid(t, h, w):
    """Sampling grid that evaluates t at every output pixel center. O(H*W)."""
    if h < 2 or w < 2:
        raise ValueError("grid needs h, w >= 2")
    xs, ys = pixel_centers(h, w)
    gx, gy = np.meshgrid(xs, ys)
    src_x = t.m[0, 0] * gx + t.m[0, 1] * gy + t.m[0, 2]
    src_y = t.m[1, 0] * gx + t.m[1, 1] * gy + t.m[1, 2]
    coords = np.stack([src_x, src_y], axis=-1)
    valid = (np.abs(src_x) <= 1.0) & (np.abs(src_y) <= 1.0)
    return SampleGrid(coords, valid)


def _bilinear_weights(grid, h, w):
    """Corner indices and weights for sampling an (H,W) image at grid coords.

    Out-of-bounds corners get zero weight (zero padding).
    """
    px = (grid.coords[..., 0] + 1.0) * w / 2.0 - 0.5
    py = (grid.coords[..., 1] + 1.0) * h / 2.0 - 0.5
    # Snap float residue so pixel-aligned grids (identity, flips) are exact.
    px = np.where(np.abs(px - np.round(px)) < 1e-9, np.round(px), px)
    py = np.where(np.abs(py - np.round(py)) < 1e-9, np.round(py), py)
    x0 = np.floor(px).astype(np.intp)
    y0 = np.floor(py).astype(np.intp)
    fx = px - x0
    fy = py - y0
    idx, wgt = [], []
    for dy, dx, ww in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                       (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0 + dx
        yi = y0 + dy
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        xi = np.clip(xi, 0, w - 1)
        yi = np.clip(yi, 0, h - 1)
        idx.append(yi * w + xi)
        wgt.append(ww * inside)
    return np.stack(idx), np.stack(wgt)  # (4, H, W) each


def grid_sample_bilinear(img, grid):
    """Bilinear resampling of a (C,H,W) image at the grid's source coordinates.

    Accepts a Tensor (differentiable w.r.t. image values) or a plain ndarray.
    Returns (output, valid) where valid is the grid's in-bounds mask.
    """
    data = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    c, h, w = data.shape
    gh, gw = grid.coords.shape[:2]
    idx, wgt = _bilinear_weights(grid, h, w)
    flat = data.reshape(c, h * w)
    out = np.zeros((c, gh, gw))
    for k in range(4):
        out += flat[:, idx[k]] * wgt[k]

    if not isinstance(img, Tensor):
        return out, grid.valid.copy()

    def backward(g):
        gc = g.reshape(c, gh * gw)
        idx_all = idx.reshape(4, -1).ravel()
        w_all = wgt.reshape(4, -1)
        dflat = np.empty((c, h * w))
        for ch in range(c):
            dflat[ch] = np.bincount(idx_all, weights=(gc[ch] * w_all).ravel(),
                                    minlength=h * w)
        return (dflat.reshape(c, h, w),)

    return Tensor._from_op(out, (img,), backward, "grid_sample"), grid.valid.copy()


def warp(img, t, h=None, w=None):
    """Apply transform t to an image: output(p) = img(t(p))."""
    shape = img.data.shape if isinstance(img, Tensor) else img.shape
    h = h if h is not None else shape[1]
    w = w if w is not None else shape[2]
    return grid_sample_bilinear(img, make_grid(t, h, w))


def align_to_canonical(featmap, t):
    """Undo the view transform t, returning a canonically aligned map and its
    coverage mask (pixels of the canonical frame observed by this view)."""
    shape = featmap.data.shape if isinstance(featmap, Tensor) else featmap.shape
    return grid_sample_bilinear(featmap, make_grid(invert(t), shape[1], shape[2]))


@dataclass(frozen=True)
class ViewTransformConfig:
    scale_range: tuple = (0.9, 1.1)
    translate_max: float = 0.1   # fraction of image size, per axis
    flip_prob: float = 0.5

    def validate(self):
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi):
            raise ValueError(f"bad scale range {self.scale_range}")
        if self.translate_max < 0 or not (0.0 <= self.flip_prob <= 1.0):
            raise ValueError("bad translate/flip config")


def random_view_transform(rng, cfg=ViewTransformConfig()):
    """Random uniform scale, per-axis translation, and horizontal flip.

    A translation of f image sizes is 2f in normalized units.
    """
    cfg.validate()
    s = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
    tx = rng.uniform(0.0, cfg.translate_max) * 2.0 * (1 if rng.random() < 0.5 else -1)
    ty = rng.uniform(0.0, cfg.translate_max) * 2.0 * (1 if rng.random() < 0.5 else -1)
    flip = rng.random() < cfg.flip_prob
    sx = -s if flip else s
    return AffineTransform(np.array([[sx, 0.0, tx], [0.0, s, ty]]))
