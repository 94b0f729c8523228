"""Model quality metrics: accuracy, calibration, occlusion, compute cost.

The expected calibration error uses 15 equal-width confidence bins and is
reported in percentage points: sum over bins of (bin count / N) times
|accuracy - confidence| times 100.  Occlusion robustness zeroes a growing
random fraction of patches; the patches dropped at a smaller ratio are a
subset of those dropped at a larger one (a single per-sample permutation
prefix), so each sample's information only ever shrinks along the curve.
Compute cost is an analytic multiply-accumulate count (FLOPs = 2 MACs)
over attention and MLP blocks at the post-merge token counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .models import TinyViT, ViTConfig
from .rng import Rng, derive_seed


def predict_logits(model: TinyViT, images: np.ndarray,
                   batch: int = 256) -> np.ndarray:
    """Forward in evaluation mode; returns (N, classes) float64."""
    outs = []
    with ad.no_grad():
        for lo in range(0, len(images), batch):
            logits, _ = model.forward_cls(images[lo:lo + batch])
            outs.append(logits.data)
    return np.concatenate(outs, axis=0)


def top1_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction correct; tied logits resolve to the lower class index."""
    pred = logits.argmax(axis=1)
    return float((pred == labels).mean())


def softmax_np(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class CalibrationReport:
    value: float                 # ECE in percentage points
    bin_edges: np.ndarray        # (bins + 1,)
    bin_confidence: np.ndarray   # (bins,) mean confidence, 0 where empty
    bin_accuracy: np.ndarray     # (bins,)
    bin_counts: np.ndarray       # (bins,)

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "bin_edges": self.bin_edges.tolist(),
            "bin_confidence": self.bin_confidence.tolist(),
            "bin_accuracy": self.bin_accuracy.tolist(),
            "bin_counts": self.bin_counts.tolist(),
        }


def ece(confidences: np.ndarray, correct: np.ndarray,
        bins: int = 15) -> CalibrationReport:
    """Expected calibration error over equal-width bins.

    Bins are [edge, next_edge), except the last which includes 1.0.
    """
    confidences = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.minimum((confidences * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    conf_sum = np.bincount(idx, weights=confidences, minlength=bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=bins)
    with np.errstate(invalid="ignore"):
        conf = np.where(counts > 0, conf_sum / np.maximum(counts, 1), 0.0)
        acc = np.where(counts > 0, acc_sum / np.maximum(counts, 1), 0.0)
    n = max(len(confidences), 1)
    value = float(np.sum(counts / n * np.abs(acc - conf)) * 100.0)
    return CalibrationReport(value=value, bin_edges=edges,
                             bin_confidence=conf, bin_accuracy=acc,
                             bin_counts=counts.astype(np.int64))


def calibration_from_logits(logits: np.ndarray, labels: np.ndarray,
                            bins: int = 15) -> CalibrationReport:
    probs = softmax_np(logits)
    conf = probs.max(axis=1)
    correct = (logits.argmax(axis=1) == labels)
    return ece(conf, correct, bins)


@dataclass
class OcclusionCurve:
    ratios: list[float]
    accuracy: list[float]

    def to_dict(self) -> dict:
        return {"ratios": self.ratios, "accuracy": self.accuracy}


def occlude_patches(images: np.ndarray, patch: int, ratio: float,
                    seed: int) -> np.ndarray:
    """Zero floor(ratio * L0) patches per image, chosen per-sample.

    Sample i uses permutation stream seed + i; a larger ratio zeroes a
    superset of the patches a smaller ratio does.
    """
    n, h, w, _ = images.shape
    gh, gw = h // patch, w // patch
    l0 = gh * gw
    drop = int(np.floor(ratio * l0))
    if drop == 0:
        return images.copy()
    out = images.copy()
    for i in range(n):
        perm = Rng(derive_seed(seed, i)).permutation(l0)
        for p in perm[:drop]:
            r, c = divmod(int(p), gw)
            out[i, r * patch:(r + 1) * patch, c * patch:(c + 1) * patch] = 0.0
    return out


def occlusion_eval(model: TinyViT, images: np.ndarray, labels: np.ndarray,
                   ratios: list[float], seed: int) -> OcclusionCurve:
    accs = []
    for ratio in ratios:
        occluded = occlude_patches(images, model.cfg.patch, ratio, seed)
        logits = predict_logits(model, occluded)
        accs.append(top1_accuracy(logits, labels))
    return OcclusionCurve(ratios=[float(r) for r in ratios], accuracy=accs)


# ---------------------------------------------------------------------------
# Analytic compute cost
# ---------------------------------------------------------------------------

@dataclass
class ArchSpec:
    """What the cost model needs to know about a ViT."""

    tokens: int          # input sequence length including any class token
    dim: int
    depth: int
    mlp_ratio: float = 4.0

    @classmethod
    def from_vit(cls, cfg: ViTConfig) -> "ArchSpec":
        return cls(tokens=cfg.l0 + (1 if cfg.use_cls else 0), dim=cfg.dim,
                   depth=cfg.depth, mlp_ratio=cfg.mlp_ratio)


@dataclass
class CostEstimate:
    flops: float
    macs: float
    tokens_per_layer: list[int]
    per_layer: list[dict]

    def to_dict(self) -> dict:
        return {"flops": self.flops, "macs": self.macs,
                "tokens_per_layer": self.tokens_per_layer,
                "per_layer": self.per_layer}


def flops_estimate(spec: ArchSpec,
                   schedule: list[int] | None = None) -> CostEstimate:
    """Attention + MLP multiply-accumulates per forward, times two.

    Attention at layer i runs on that layer's input tokens; the MLP runs
    after the layer's merge, on r_i fewer.  Matching and merging
    themselves are excluded (a few comparisons and adds per token).
    """
    sched = list(schedule) if schedule else [0] * spec.depth
    if len(sched) != spec.depth:
        raise ConfigError(
            f"schedule length {len(sched)} != depth {spec.depth}")
    d = spec.dim
    hidden = int(spec.dim * spec.mlp_ratio)
    tokens = spec.tokens
    per_layer = []
    tokens_per_layer = []
    total = 0.0
    for r in sched:
        if r < 0 or r > tokens // 2:
            raise ConfigError(
                f"merge count {r} out of range for {tokens} tokens")
        tokens_per_layer.append(tokens)
        attn = 4.0 * tokens * d * d + 2.0 * tokens * tokens * d
        after = tokens - r
        mlp = 2.0 * after * d * hidden
        per_layer.append({"tokens_in": tokens, "tokens_out": after,
                          "attention_macs": attn, "mlp_macs": mlp})
        total += attn + mlp
        tokens = after
    return CostEstimate(flops=2.0 * total, macs=total,
                        tokens_per_layer=tokens_per_layer,
                        per_layer=per_layer)
