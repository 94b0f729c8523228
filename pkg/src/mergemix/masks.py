"""Patch saliency recovery and binary mask construction.

A merged attention summary lives on K groups; recovery broadcasts each
group's score back to its member patches, giving every original patch the
saliency of the region it merged into.  Scores are not divided by group
size by default: members of a large salient region should all rank high.
The mask keeps the top ``p = floor(lambda * L0)`` patches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tome import SourceMatrix


@dataclass
class PatchMask:
    """Binary patch selection plus the soft scores behind it.

    ``soft`` holds the recovered saliency at the selected patches after
    dividing by the map's maximum, so each value is in (0, 1] and the sum
    feeds the mixing-ratio rescaler.
    """

    binary: np.ndarray   # (L0,) uint8, 1 = keep source image patch
    indices: np.ndarray  # (p,) selected patches in descending saliency
    soft: np.ndarray     # (p,) max-normalised scores at selected patches
    p: int
    lam: float

    @property
    def soft_sum(self) -> float:
        return float(self.soft.sum())


def recover_attention(a_k: np.ndarray, source: SourceMatrix,
                      mode: str = "broadcast") -> np.ndarray:
    """Per-patch saliency from per-group scores.

    ``broadcast`` assigns each patch its group's score unchanged;
    ``size_normalized`` divides by the group's member count first.
    """
    a_k = np.asarray(a_k, dtype=np.float64)
    if len(a_k) != source.k:
        raise ValueError(
            f"summary length {len(a_k)} does not match {source.k} groups")
    if mode == "broadcast":
        return a_k[source.groups]
    if mode == "size_normalized":
        counts = source.group_sizes().astype(np.float64)
        return (a_k / np.maximum(counts, 1))[source.groups]
    raise ValueError(f"unknown recovery mode {mode!r}")


def top_p_indices(a_hat: np.ndarray, p: int) -> np.ndarray:
    """Indices of the p largest scores, ties toward the lower index."""
    order = np.argsort(-np.asarray(a_hat, dtype=np.float64), kind="stable")
    return order[:p]


def build_mask(a_hat: np.ndarray, lam: float) -> PatchMask:
    """Keep the top floor(lambda * L0) patches of a saliency map.

    For a fixed map, masks are nested in lambda: a larger lambda keeps a
    superset of the patches kept by a smaller one.
    """
    a_hat = np.asarray(a_hat, dtype=np.float64)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    l0 = len(a_hat)
    p = int(np.floor(lam * l0))
    indices = top_p_indices(a_hat, p)
    binary = np.zeros(l0, dtype=np.uint8)
    binary[indices] = 1
    peak = float(a_hat.max()) if l0 else 0.0
    if peak > 0.0:
        soft = a_hat[indices] / peak
    else:
        soft = np.ones(p, dtype=np.float64)
    return PatchMask(binary=binary, indices=indices, soft=soft, p=p,
                     lam=float(lam))


def mask_to_pixels(binary: np.ndarray, grid_hw: tuple[int, int],
                   patch_hw: tuple[int, int]) -> np.ndarray:
    """Upsample a patch mask to pixel resolution (nearest, float 0/1)."""
    gh, gw = grid_hw
    ph, pw = patch_hw
    grid = np.asarray(binary, dtype=np.float64).reshape(gh, gw)
    return np.kron(grid, np.ones((ph, pw), dtype=np.float64))
