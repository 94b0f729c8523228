"""Saliency-guided image mixing with a re-scaled mixing ratio.

One mixing step: draw lambda from Beta(alpha, alpha), score the source
image's patches by recovered merged attention, keep its top
``floor(lambda * L0)`` patches and fill the rest from a partner image.
The label weight is then re-drawn around the merge statistics: a Gaussian
batch centred on the merged-token ratio with spread set by how confident
the kept patches are, min-max normalised into [0, 1].

Per-sample randomness comes from streams seeded ``base_seed + index`` so
results do not depend on batch composition or iteration order; the
batched path reproduces the scalar path lane for lane.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import rng as rnglib
from .errors import ConfigError
from .masks import PatchMask, build_mask, mask_to_pixels


@dataclass
class MixConfig:
    """Knobs for the mixing policy.

    ``merge_schedule`` applies to the saliency encoder pass only (None
    uses the encoder's own schedule); an all-zero schedule degrades the
    policy to plain top-k over raw attention.  ``use_rescale=False``
    keeps the drawn lambda as the label weight.
    """

    alpha: float = 1.0
    tau: float = 1e-5
    rescale_batch: int = 64
    merge_schedule: list[int] | None = None
    use_rescale: bool = True
    recovery: str = "broadcast"
    enabled: bool = True

    def validate(self) -> None:
        if self.alpha <= 0:
            raise ConfigError(f"mix.alpha must be positive, got {self.alpha}")
        if self.tau <= 0:
            raise ConfigError(f"mix.tau must be positive, got {self.tau}")
        if self.rescale_batch < 1:
            raise ConfigError("mix.rescale_batch must be >= 1")
        if self.recovery not in ("broadcast", "size_normalized"):
            raise ConfigError(f"unknown mix.recovery {self.recovery!r}")


@dataclass
class MixPlan:
    """Everything produced for one mixed pair."""

    mixed: np.ndarray       # (H, W, C) float64
    mask: PatchMask
    pixel_mask: np.ndarray  # (H, W) float64 0/1
    lam: float
    lam_hat: float
    p: int
    k: int
    l0: int


def sample_lambda(rng: rnglib.Rng, alpha: float) -> float:
    return rng.beta(alpha, alpha)


def minmax_normalize(values: np.ndarray, tau: float) -> np.ndarray:
    """(v - min) / (max - min + tau), clipped to [0, 1].

    The tau in the denominator keeps a degenerate batch (all values
    equal) finite; such a batch normalises to all zeros.
    """
    values = np.asarray(values, dtype=np.float64)
    lo = values.min()
    hi = values.max()
    return np.clip((values - lo) / (hi - lo + tau), 0.0, 1.0)


def rescale_lambda(k: int, l0: int, p: int, soft_sum: float,
                   cfg: MixConfig, rng: rnglib.Rng) -> float:
    """Label weight from merge statistics.

    Gaussian batch with mean k / l0 (merged-token ratio) and spread
    p / soft_sum (kept count over kept soft saliency, >= 1 when p > 0);
    the first normalised draw is the weight.  An empty mask (p == 0)
    has zero spread, so the degenerate batch normalises to 0.
    """
    mu = k / l0
    sigma = p / soft_sum if p > 0 else 0.0
    draws = mu + sigma * rng.gaussians(cfg.rescale_batch)
    return float(minmax_normalize(draws, cfg.tau)[0])


def mix_images(x_i: np.ndarray, x_j: np.ndarray,
               pixel_mask: np.ndarray) -> np.ndarray:
    """mask * x_i + (1 - mask) * x_j over pixels; exact at the extremes."""
    m = pixel_mask[..., None]
    return m * x_i + (1.0 - m) * x_j


SaliencyFn = Callable[[np.ndarray], tuple[np.ndarray, int]]
"""Maps one image (H, W, C) to (per-patch saliency over L0, group count K)."""


def mix_policy(x_i: np.ndarray, x_j: np.ndarray, lam: float,
               saliency: SaliencyFn, cfg: MixConfig,
               rng: rnglib.Rng, patch_hw: tuple[int, int]) -> MixPlan:
    """Build one mixed sample guarding the salient regions of ``x_i``."""
    a_hat, k = saliency(x_i)
    mask = build_mask(a_hat, lam)
    l0 = len(a_hat)
    h, w = x_i.shape[0], x_i.shape[1]
    grid = (h // patch_hw[0], w // patch_hw[1])
    pixel_mask = mask_to_pixels(mask.binary, grid, patch_hw)
    mixed = mix_images(x_i, x_j, pixel_mask)
    if cfg.use_rescale:
        lam_hat = rescale_lambda(k, l0, mask.p, mask.soft_sum, cfg, rng)
    else:
        lam_hat = lam
    return MixPlan(mixed=mixed, mask=mask, pixel_mask=pixel_mask,
                   lam=float(lam), lam_hat=lam_hat, p=mask.p, k=k, l0=l0)


@dataclass
class BatchMix:
    """Vectorised mixing results for one training batch."""

    mixed: np.ndarray     # (B, H, W, C)
    lam: np.ndarray       # (B,)
    lam_hat: np.ndarray   # (B,)
    p: np.ndarray         # (B,) int
    binary: np.ndarray    # (B, L0) uint8


def mix_batch(images_i: np.ndarray, images_j: np.ndarray,
              a_hat: np.ndarray, k: int, cfg: MixConfig,
              base_seed: int, sample_indices: np.ndarray,
              patch_hw: tuple[int, int]) -> BatchMix:
    """Batched mix_policy over per-sample streams ``base_seed + index``.

    Each lane draws its lambda first, then its rescale batch, exactly as
    the scalar path does, so lane b matches
    ``mix_policy(..., rng=Rng(derive_seed(base_seed, sample_indices[b])))``.
    """
    b, l0 = a_hat.shape
    lam = np.empty(b, dtype=np.float64)
    states = np.empty((b, 4), dtype=np.uint64)
    for i in range(b):
        r = rnglib.Rng(rnglib.derive_seed(base_seed, int(sample_indices[i])))
        lam[i] = sample_lambda(r, cfg.alpha)
        states[i] = (r.s0, r.s1, r.s2, r.s3)

    p = np.floor(lam * l0).astype(np.int64)
    order = np.argsort(-a_hat, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(l0), (b, l0)),
                      axis=1)
    binary = (ranks < p[:, None]).astype(np.uint8)

    peak = a_hat.max(axis=1)
    safe_peak = np.where(peak > 0.0, peak, 1.0)
    soft_sum = np.where(peak > 0.0,
                        (a_hat * binary).sum(axis=1) / safe_peak,
                        p.astype(np.float64))

    if cfg.use_rescale:
        mu = k / l0
        sigma = np.where(p > 0, p / np.where(soft_sum > 0, soft_sum, 1.0), 0.0)
        z = rnglib.block_gaussians(states, cfg.rescale_batch)
        draws = mu + sigma[:, None] * z
        lo = draws.min(axis=1, keepdims=True)
        hi = draws.max(axis=1, keepdims=True)
        lam_hat = np.clip((draws[:, :1] - lo) / (hi - lo + cfg.tau),
                          0.0, 1.0)[:, 0]
    else:
        lam_hat = lam.copy()

    gh = images_i.shape[1] // patch_hw[0]
    gw = images_i.shape[2] // patch_hw[1]
    pix = np.kron(binary.reshape(b, gh, gw).astype(np.float64),
                  np.ones((1, patch_hw[0], patch_hw[1])))
    mixed = pix[..., None] * images_i + (1.0 - pix[..., None]) * images_j
    return BatchMix(mixed=mixed, lam=lam, lam_hat=lam_hat, p=p, binary=binary)
