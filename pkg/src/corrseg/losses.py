"""Training objectives: supervised CE, cross-view consistency, self-correlation
consistency, and the InfoNCE baseline variant.

All losses take and return engine Tensors; targets (pseudo labels) are plain
arrays and never receive gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

IGNORE_LABEL = 255


@dataclass(frozen=True)
class CorrelationBatch:
    """N sampled feature rows per view plus their constant target rows."""

    f: Tensor            # (N, D) view-1 student features
    f_prime: Tensor      # (N, D) view-2 student features
    target: np.ndarray   # (N, D) pseudo-label rows, constant
    indices: np.ndarray  # the N sampled canonical pixel locations

    def __post_init__(self):
        if not (self.f.shape == self.f_prime.shape == self.target.shape):
            raise ValueError("correlation batch matrices must share (N, D)")


def smoothed_targets(labels, num_classes, smoothing):
    """One-hot rows with label smoothing: 1-eps on the true class, eps/(C-1) off."""
    labels = np.asarray(labels)
    out = np.full((labels.size, num_classes), smoothing / max(1, num_classes - 1))
    out[np.arange(labels.size), labels.ravel()] = 1.0 - smoothing
    return out


def supervised_ce_rows(logit_rows, flat_label, smoothing=0.1):
    """Mean cross-entropy over non-ignored rows of (P, C) logits."""
    c = logit_rows.shape[1]
    flat_label = np.asarray(flat_label).ravel()
    keep = np.flatnonzero(flat_label != IGNORE_LABEL)
    if keep.size == 0:
        raise ValueError("supervised_ce: all pixels ignored")
    logp = T.log_softmax_rows(T.take_rows(logit_rows, keep))
    targets = smoothed_targets(flat_label[keep], c, smoothing)
    return T.scale(T.tsum(T.mul(Tensor(targets), logp)), -1.0 / keep.size)


def supervised_ce(logits, label, smoothing=0.1):
    """Mean cross-entropy over non-ignored pixels against smoothed targets.

    logits: Tensor (C,H,W); label: int array (H,W) with IGNORE_LABEL allowed.
    """
    c, h, w = logits.shape
    rows = T.transpose(T.reshape(logits, (c, h * w)))
    return supervised_ce_rows(rows, label, smoothing)


def consistency_loss(p_rows, p_prime_rows, pseudo_rows, valid_idx):
    """Mean over valid pixels of squared L2 distance of both views to the pseudo label.

    p_rows, p_prime_rows: Tensors (H*W, C) canonically aligned probability rows.
    pseudo_rows: constant array (H*W, C). valid_idx: flat indices of valid pixels.
    """
    valid_idx = np.asarray(valid_idx, dtype=np.intp)
    if valid_idx.size == 0:
        raise ValueError("consistency_loss: empty valid mask")
    tgt = Tensor(np.asarray(pseudo_rows)[valid_idx])
    d1 = T.sub(T.take_rows(p_rows, valid_idx), tgt)
    d2 = T.sub(T.take_rows(p_prime_rows, valid_idx), tgt)
    total = T.add(T.frobenius_sq(d1), T.frobenius_sq(d2))
    return T.scale(total, 1.0 / valid_idx.size)


def correlation_matrix(f):
    """Pairwise dot-product similarities F @ F^T of N stacked feature rows."""
    if f.shape[0] < 2:
        raise ValueError("correlation matrix needs N >= 2")
    return T.matmul(f, T.transpose(f))


def _normalized_correlation(f):
    return T.l2_normalize_rows(correlation_matrix(f))


def correlation_consistency(batch):
    """Row-normalized self-correlation matrices of both views pulled toward the
    pseudo-label target's, (1/N) * (||A1 - At||_F^2 + ||A2 - At||_F^2)."""
    n = batch.f.shape[0]
    a1 = _normalized_correlation(batch.f)
    a2 = _normalized_correlation(batch.f_prime)
    at = _normalized_correlation(Tensor(batch.target)).data  # constant
    loss = T.add(T.frobenius_sq(T.sub(a1, Tensor(at))),
                 T.frobenius_sq(T.sub(a2, Tensor(at))))
    return T.scale(loss, 1.0 / n)


def info_nce(f, pseudo_class, tau=0.1):
    """Contrastive loss over sampled rows with pseudo-class positives/negatives.

    For each anchor and each positive (same class, different index) the term is
    -log( exp(s+/tau) / (exp(s+/tau) + sum over negatives exp(s-/tau)) );
    the result is the mean over all (anchor, positive) pairs. Anchors without a
    positive are skipped; if every anchor is skipped this raises.
    """
    n = f.shape[0]
    if n < 2:
        raise ValueError("info_nce needs N >= 2")
    cls = np.asarray(pseudo_class)
    same = cls[:, None] == cls[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    n_pairs = int(pos_mask.sum())
    if n_pairs == 0:
        raise ValueError("info_nce: no positive pair exists")
    s = T.scale(T.matmul(f, T.transpose(f)), 1.0 / tau)
    e = T.exp(s)
    neg_sum = T.matmul(T.mul(e, Tensor(neg_mask.astype(np.float64))),
                       Tensor(np.ones((n, 1))))          # (N,1)
    neg_tiled = T.matmul(neg_sum, Tensor(np.ones((1, n))))  # broadcast across columns
    log_denom = T.log(T.add(e, neg_tiled))
    terms = T.mul(Tensor(pos_mask.astype(np.float64)), T.sub(log_denom, s))
    return T.scale(T.tsum(terms), 1.0 / n_pairs)


def total_loss(l_sup, l_unsup, l_cc, w_unsup=0.1, w_cc=0.1):
    """Weighted sum of the three objectives."""
    return T.add(l_sup, T.add(T.scale(l_unsup, w_unsup), T.scale(l_cc, w_cc)))
