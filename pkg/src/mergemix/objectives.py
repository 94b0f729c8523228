"""Training objectives for mixed classification and preference alignment.

Classification mixes the two source labels with the re-scaled weight and
keeps a plain cross-entropy term on the un-mixed batch.  Preference
training scores a caption by its length-normalised log-likelihood and
pushes the winner (real image) above the loser (mixed image) by a margin
of ``1 - lambda_hat``: the more the mixed image kept of the winner, the
smaller the separation demanded.

All losses return scalar tape tensors; ``-log sigmoid(z)`` is computed as
``softplus(-z)`` so large margins cannot overflow.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the labelled class."""
    return ad.mean_all(ad.gather_nll(logits, labels))


def _as_weights(lam_hat, n: int) -> np.ndarray:
    w = np.asarray(lam_hat, dtype=np.float64)
    if w.ndim == 0:
        w = np.full(n, float(w))
    return w


def mce_loss(logits: Tensor, y_i: np.ndarray, y_j: np.ndarray,
             lam_hat) -> Tensor:
    """Label-mixed cross-entropy.

    lam_hat may be a scalar or a per-sample vector; each sample's loss is
    lam_hat * CE(y_i) + (1 - lam_hat) * CE(y_j), averaged over the batch.
    """
    n = logits.data.shape[0]
    w = _as_weights(lam_hat, n)
    nll_i = ad.gather_nll(logits, y_i)
    nll_j = ad.gather_nll(logits, y_j)
    return ad.add(ad.dot_const(nll_i, w / n),
                  ad.dot_const(nll_j, (1.0 - w) / n))


def total_cls_loss(mixed_logits: Tensor, raw_logits: Tensor,
                   y_i: np.ndarray, y_j: np.ndarray, lam_hat) -> Tensor:
    """Mixed-batch term plus cross-entropy on the raw batch."""
    return ad.add(mce_loss(mixed_logits, y_i, y_j, lam_hat),
                  cross_entropy(raw_logits, y_i))


def sequence_logprob(flat_logits: Tensor, target_ids: np.ndarray,
                     length_mask: np.ndarray) -> Tensor:
    """Per-sequence sum of target-token log-probabilities.

    flat_logits is (B*T, V) teacher-forced next-token logits, target_ids
    (B, T) the tokens they should predict, length_mask (B, T) 1 where the
    position is inside the sequence.  Returns (B,).
    """
    b, t = target_ids.shape
    nll = ad.gather_nll(flat_logits, target_ids.reshape(-1))
    nll = ad.reshape(nll, (b, t))
    masked = ad.mul_const(nll, length_mask.astype(np.float64))
    return ad.scale(ad.sum_last(masked), -1.0)


def sft_loss(logprob_sum: Tensor) -> Tensor:
    """Negative total target log-probability, averaged over the batch."""
    return ad.scale(ad.mean_all(logprob_sum), -1.0)


def avg_logprob_score(logprob_sum: Tensor, lengths: np.ndarray,
                      beta: float = 2.0) -> Tensor:
    """beta / |y| times the summed log-probability, per sample."""
    lengths = np.asarray(lengths, dtype=np.float64)
    return ad.mul_const(logprob_sum, beta / lengths)


def mixed_simpo_loss(s_w: Tensor, s_l: Tensor, margins) -> Tensor:
    """-log sigmoid(s_w - s_l - margin) with margin = 1 - lambda_hat."""
    margins = np.asarray(margins, dtype=np.float64)
    z = ad.add_const(ad.sub(s_w, s_l), -margins)
    return ad.mean_all(ad.softplus(ad.scale(z, -1.0)))


def dpo_loss(logp_w: Tensor, logp_l: Tensor, ref_w: np.ndarray,
             ref_l: np.ndarray, beta: float) -> Tensor:
    """-log sigmoid(beta * ((logp_w - ref_w) - (logp_l - ref_l)))."""
    ref_gap = np.asarray(ref_w, dtype=np.float64) - np.asarray(
        ref_l, dtype=np.float64)
    z = ad.scale(ad.add_const(ad.sub(logp_w, logp_l), -ref_gap), beta)
    return ad.mean_all(ad.softplus(ad.scale(z, -1.0)))


def total_mllm_loss(sft: Tensor, simpo: Tensor) -> Tensor:
    """Supervised term plus the mixed-preference term."""
    return ad.add(sft, simpo)
