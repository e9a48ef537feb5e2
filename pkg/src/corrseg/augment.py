"""Two-view augmentation and view-coherent region mixing.

Images here are plain float64 arrays (C,H,W) in [0,1]; nothing in this module
needs gradients. Geometric warps happen first, photometric jitter last, so
pixel-pixel correspondence between views is purely geometric.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import geometry
from .geometry import AffineTransform, compose, invert, make_grid, grid_sample_bilinear


@dataclass(frozen=True)
class ColorJitterConfig:
    brightness: float = 0.2        # additive, uniform in [-b, b]
    contrast_range: tuple = (0.8, 1.25)


@dataclass(frozen=True)
class CutMixConfig:
    prob: float = 1.0
    area_range: tuple = (0.2, 0.5)
    aspect_range: tuple = (0.5, 2.0)


@dataclass(frozen=True)
class AugmentConfig:
    view: geometry.ViewTransformConfig = geometry.ViewTransformConfig()
    jitter: Optional[ColorJitterConfig] = ColorJitterConfig()
    cutmix: CutMixConfig = CutMixConfig()


@dataclass(frozen=True)
class Box:
    """Rectangle in canonical pixel coordinates, half-open [y0, y1) x [x0, x1)."""

    y0: int
    x0: int
    y1: int
    x1: int

    @property
    def empty(self):
        return self.y1 <= self.y0 or self.x1 <= self.x0

    def mask(self, h, w):
        m = np.zeros((h, w), dtype=bool)
        m[self.y0:self.y1, self.x0:self.x1] = True
        return m


@dataclass(frozen=True)
class CutMixRecord:
    box: Box
    donor_index: int


@dataclass(frozen=True)
class ViewPair:
    x: np.ndarray              # view 1 image (C,H,W)
    x_prime: np.ndarray        # view 2 image
    t: AffineTransform
    t_prime: AffineTransform
    valid: np.ndarray          # canonical-frame bool mask, both views cover it
    cutmix: Optional[CutMixRecord] = None


def color_jitter(img, rng, cfg):
    """Random brightness and contrast, clamped to [0,1]."""
    if cfg is None:
        return img
    b = rng.uniform(-cfg.brightness, cfg.brightness)
    c = rng.uniform(cfg.contrast_range[0], cfg.contrast_range[1])
    out = (img - 0.5) * c + 0.5 + b
    return np.clip(out, 0.0, 1.0)


def make_view_pair(img, rng, cfg):
    """Build two geometrically and photometrically augmented views of one image."""
    c, h, w = img.shape
    t = geometry.random_view_transform(rng, cfg.view)
    t_prime = geometry.random_view_transform(rng, cfg.view)
    x, _ = geometry.warp(img, t)
    x_prime, _ = geometry.warp(img, t_prime)
    x = color_jitter(x, rng, cfg.jitter)
    x_prime = color_jitter(x_prime, rng, cfg.jitter)
    _, cov = geometry.align_to_canonical(np.zeros((1, h, w)), t)
    _, cov_prime = geometry.align_to_canonical(np.zeros((1, h, w)), t_prime)
    return ViewPair(x, x_prime, t, t_prime, cov & cov_prime)


def sample_cutmix_box(rng, h, w, cfg):
    """Random in-bounds rectangle with area fraction and aspect drawn from cfg."""
    if h < 8 or w < 8:
        raise ValueError("cutmix needs h, w >= 8")
    frac = rng.uniform(cfg.area_range[0], cfg.area_range[1])
    if frac <= 0.0:
        return Box(0, 0, 0, 0)
    aspect = rng.uniform(cfg.aspect_range[0], cfg.aspect_range[1])
    area = frac * h * w
    bh = int(round(min(h, max(1.0, np.sqrt(area * aspect)))))
    bw = int(round(min(w, max(1.0, area / max(1, bh)))))
    bw = min(bw, w)
    y0 = int(rng.integers(0, h - bh + 1))
    x0 = int(rng.integers(0, w - bw + 1))
    return Box(y0, x0, y0 + bh, x0 + bw)


def _paste_in_view(view_img, donor_view_img, t_view, t_donor, box):
    """Replace the warped box region of view_img with donor content resampled
    into this view's frame (one bilinear pass, untouched pixels kept exact)."""
    c, h, w = view_img.shape
    if box.empty:
        return view_img.copy()
    # donor content as seen through this view's transform
    donor_in_frame, _ = grid_sample_bilinear(
        donor_view_img, make_grid(compose(t_view, invert(t_donor)), h, w))
    box_in_frame, _ = grid_sample_bilinear(
        box.mask(h, w)[None].astype(np.float64), make_grid(t_view, h, w))
    m = box_in_frame[0] > 0.5
    out = view_img.copy()
    out[:, m] = donor_in_frame[:, m]
    return out


def paste_canonical(a, b, box):
    """Canonical-frame paste: b's content inside the box, a's outside."""
    if box.empty:
        return a.copy()
    out = a.copy()
    m = box.mask(a.shape[-2], a.shape[-1])
    out[..., m] = b[..., m]
    return out


def view_coherent_cutmix(pair_a, pair_b, box, donor_index=0):
    """Paste pair_b's content into pair_a inside one shared canonical box.

    Both views receive the same canonical region from the same donor, so
    canonical alignments of the two mixed views still agree inside the box.
    The caller mixes pseudo-label maps with the recorded box via paste_canonical.
    """
    if pair_a.x.shape != pair_b.x.shape:
        raise ValueError("cutmix pairs must share image shape")
    if box.empty:
        return replace(pair_a, cutmix=CutMixRecord(box, donor_index))
    x = _paste_in_view(pair_a.x, pair_b.x, pair_a.t, pair_b.t, box)
    x_prime = _paste_in_view(pair_a.x_prime, pair_b.x_prime,
                             pair_a.t_prime, pair_b.t_prime, box)
    m = box.mask(pair_a.valid.shape[0], pair_a.valid.shape[1])
    valid = np.where(m, pair_b.valid, pair_a.valid)
    return ViewPair(x, x_prime, pair_a.t, pair_a.t_prime, valid,
                    CutMixRecord(box, donor_index))


def incoherent_cutmix(pair, donor, rng, cfg, donor_index=0):
    """Ablation: independent boxes pasted directly in each view's own frame,
    deliberately breaking cross-view correspondence."""
    if rng.random() >= cfg.prob:
        return pair
    c, h, w = pair.x.shape
    box1 = sample_cutmix_box(rng, h, w, cfg)
    box2 = sample_cutmix_box(rng, h, w, cfg)
    x = paste_canonical(pair.x, donor.x, box1)
    x_prime = paste_canonical(pair.x_prime, donor.x_prime, box2)
    return ViewPair(x, x_prime, pair.t, pair.t_prime, pair.valid,
                    CutMixRecord(box1, donor_index))
