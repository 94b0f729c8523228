"""Token merging by bipartite soft matching, with lineage tracking.

Tokens at any depth carry an integer size (how many original patches each
represents) and a source map assigning every original patch to its current
merged group.  Matching partitions the current sequence into A (even
current positions) and B (odd); each A token proposes its most
cosine-similar B partner over the layer's attention keys, and the r
highest-similarity proposals merge, A into B, by size-weighted mean.

Determinism: proposal ties resolve toward the lower B index, ranking ties
toward the lower A index.  The batched and single-sequence entry points
share one implementation, so a batch row equals the scalar result for the
same metric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class MergePlan:
    """r selected merges over a length-``length`` sequence.

    ``left[i]`` (an A position) merges into ``right[i]`` (a B position);
    entries are ordered by selection rank.  Positions are indices into the
    current sequence, not original patch indices.
    """

    left: np.ndarray
    right: np.ndarray
    length: int

    @property
    def r(self) -> int:
        return len(self.left)


@dataclass
class TokenState:
    """A current token sequence with per-token sizes."""

    tokens: np.ndarray  # (L, D)
    sizes: np.ndarray   # (L,) int64

    @classmethod
    def fresh(cls, tokens: np.ndarray) -> "TokenState":
        tokens = np.asarray(tokens, dtype=np.float64)
        return cls(tokens, np.ones(tokens.shape[0], dtype=np.int64))


class SourceMatrix:
    """Assignment of original indices to current groups.

    Stored compactly as ``groups[l0] = current group of original l0``; the
    equivalent dense form is a (k, L0) 0/1 matrix whose columns each sum
    to exactly one.
    """

    __slots__ = ("groups", "k")

    def __init__(self, groups: np.ndarray, k: int):
        self.groups = np.asarray(groups, dtype=np.int64)
        self.k = int(k)

    @classmethod
    def identity(cls, n: int) -> "SourceMatrix":
        return cls(np.arange(n, dtype=np.int64), n)

    def dense(self) -> np.ndarray:
        m = np.zeros((self.k, len(self.groups)), dtype=np.float64)
        m[self.groups, np.arange(len(self.groups))] = 1.0
        return m

    def members(self, group: int) -> np.ndarray:
        return np.where(self.groups == group)[0]

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.groups, minlength=self.k).astype(np.int64)


def compose_source(source: SourceMatrix, layer_groups: np.ndarray,
                   new_k: int) -> SourceMatrix:
    """Push originals through one more merge: group -> this layer's group."""
    return SourceMatrix(np.asarray(layer_groups)[source.groups], new_k)


def _check_r(r: int, length: int) -> None:
    if r < 0 or r > length // 2:
        raise ConfigError(
            f"merge count r={r} out of range for {length} tokens "
            f"(max {length // 2})")


def batch_bipartite_soft_matching(metric: np.ndarray, r: int,
                                  protect: int = 0
                                  ) -> tuple[np.ndarray, np.ndarray]:
    """Select r merges per batch row; returns (left, right), each (B, r).

    ``metric`` is (B, L, D); similarity is cosine over the last axis.
    Zero rows are treated as similarity zero rather than undefined.  The
    first ``protect`` positions (a class token) never participate; the
    even/odd split applies to the remaining positions.
    """
    b, length, _ = metric.shape
    _check_r(r, length - protect)
    if r == 0:
        empty = np.zeros((b, 0), dtype=np.int64)
        return empty, empty
    norm = np.linalg.norm(metric, axis=-1, keepdims=True)
    unit = metric / np.maximum(norm, 1e-12)
    a = unit[:, protect + 0::2, :]
    bb = unit[:, protect + 1::2, :]
    scores = np.matmul(a, bb.transpose(0, 2, 1))          # (B, |A|, |B|)
    best = scores.argmax(axis=-1)                          # ties: lower B
    best_sim = np.take_along_axis(scores, best[..., None], -1)[..., 0]
    order = np.argsort(-best_sim, axis=-1, kind="stable")  # ties: lower A
    chosen = order[:, :r]
    left = protect + 2 * chosen
    right = protect + 2 * np.take_along_axis(best, chosen, axis=-1) + 1
    return left.astype(np.int64), right.astype(np.int64)


def bipartite_soft_matching(metric: np.ndarray, r: int) -> MergePlan:
    """Single-sequence matching; see the batched variant for the rules."""
    metric = np.asarray(metric, dtype=np.float64)
    left, right = batch_bipartite_soft_matching(metric[None], r)
    return MergePlan(left[0], right[0], metric.shape[0])


def batch_plan_groups(left: np.ndarray, right: np.ndarray,
                      length: int) -> np.ndarray:
    """Map each current position to its post-merge index, per batch row.

    Survivors keep their relative order; each merged A position joins the
    group of its B target.
    """
    b = left.shape[0]
    keep = np.ones((b, length), dtype=bool)
    if left.size:
        np.put_along_axis(keep, left, False, axis=1)
    new_index = np.cumsum(keep, axis=1) - 1
    groups = new_index.copy()
    if left.size:
        rows = np.arange(b)[:, None]
        groups[rows, left] = new_index[rows, right]
    return groups


def plan_groups(plan: MergePlan) -> np.ndarray:
    return batch_plan_groups(plan.left[None], plan.right[None], plan.length)[0]


def merge_weights(groups: np.ndarray, sizes: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Size-weighted averaging matrices for a batch of merges.

    Returns (W, new_sizes) with W of shape (B, K, L) such that
    ``merged = W @ tokens`` averages each group's members weighted by
    size, and new_sizes (B, K) the summed member sizes.
    """
    b, length = groups.shape
    k = int(groups.max()) + 1 if length else 0
    u = np.zeros((b, k, length), dtype=np.float64)
    rows = np.repeat(np.arange(b), length)
    cols = np.tile(np.arange(length), b)
    u[rows, groups.ravel(), cols] = sizes.astype(np.float64).ravel()
    new_sizes = u.sum(axis=-1)
    w = u / new_sizes[:, :, None]
    return w, new_sizes.astype(np.int64)


def combine_group_scores(groups: np.ndarray, scores: np.ndarray,
                         k: int) -> np.ndarray:
    """Sum a per-token score into per-group totals, batched.

    Used for the attention summary: the score a merged token would have
    received is the total received by its members, matching how
    size-proportional attention already scales with group size.
    """
    b = groups.shape[0]
    out = np.zeros((b, k), dtype=np.float64)
    rows = np.repeat(np.arange(b), groups.shape[1])
    np.add.at(out, (rows, groups.ravel()), scores.ravel())
    return out


def apply_merge(state: TokenState, plan: MergePlan) -> TokenState:
    """Merge one sequence by size-weighted mean; sizes add."""
    groups = plan_groups(plan)[None]
    w, new_sizes = merge_weights(groups, state.sizes[None])
    merged = w[0] @ state.tokens
    return TokenState(merged, new_sizes[0])
