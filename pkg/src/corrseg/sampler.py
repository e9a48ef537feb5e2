"""Category-normalized pixel sampling for the correlation loss.

Pixels are drawn with probability inversely proportional to the empirical
frequency of their (hard) pseudo class, so rare classes are not drowned out by
the long-tailed pixel distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SampleSpec:
    n: int
    weights: np.ndarray   # flat per-pixel probability, zero outside eligible
    eligible: np.ndarray  # flat bool mask


def class_distribution(hard_pseudo, eligible, num_classes):
    """Empirical class frequencies over eligible pixels."""
    hard_pseudo = np.asarray(hard_pseudo).ravel()
    eligible = np.asarray(eligible, dtype=bool).ravel()
    total = int(eligible.sum())
    if total == 0:
        raise ValueError("class_distribution: no eligible pixels")
    counts = np.bincount(hard_pseudo[eligible], minlength=num_classes)
    return counts / total


def sampling_weights(hard_pseudo, p, eligible):
    """Per-pixel weights proportional to 1/p_c of the pixel's class, normalized.

    Classes with p_c == 0 have no eligible pixels, so their (infinite) inverse
    frequency is vacuous; they are simply never drawn.
    """
    hard_pseudo = np.asarray(hard_pseudo).ravel()
    eligible = np.asarray(eligible, dtype=bool).ravel()
    p = np.asarray(p, dtype=np.float64)
    inv = np.zeros_like(p)
    present = p > 0
    inv[present] = 1.0 / p[present]
    w = np.where(eligible, inv[hard_pseudo], 0.0)
    return w / w.sum()


def make_spec(n, hard_pseudo, eligible, num_classes):
    p = class_distribution(hard_pseudo, eligible, num_classes)
    return SampleSpec(n, sampling_weights(hard_pseudo, p, eligible),
                      np.asarray(eligible, dtype=bool).ravel())


def sample_pixels(spec, rng):
    """Draw spec.n flat indices i.i.d. with replacement via the CDF method."""
    cdf = np.cumsum(spec.weights)
    cdf[-1] = 1.0
    u = rng.random(spec.n)
    return np.searchsorted(cdf, u, side="right")
