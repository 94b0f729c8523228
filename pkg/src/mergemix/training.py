"""Training loops for mixed classification and preference alignment.

Classification: each step pairs every sample with a derangement partner,
builds mixed images guarding the source samples' salient patches, and
optimises the label-mixed loss on the mixed batch plus plain
cross-entropy on the raw batch.  The saliency encoder is the training
model itself, run without gradients.

Preference: the winner is the real image with its caption, the loser the
mixed image with the same caption; the decoder is trained with the
supervised term on the winner plus the margin loss separating the two
length-normalised scores by 1 - lambda_hat.  Saliency comes from a frozen
copy of the vision trunk, refreshed at the start of every epoch.

Runs are bit-deterministic for a fixed config: data order, pairing, and
per-sample mixing all come from named xoshiro streams, and a serialised
run state (parameters, optimiser moments, stream positions) resumes the
identical trajectory.  A run directory holds config.json, metrics.jsonl
(one JSON object per step), checkpoints/epoch_k.mmxc, and a final
report.json with evaluation metrics.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from .autodiff import Tensor
from .data import CaptionDataset, ImageDataset
from .errors import ConfigError
from .evaluation import (ArchSpec, calibration_from_logits, flops_estimate,
                         occlusion_eval, predict_logits, top1_accuracy)
from .mixer import BatchMix, MixConfig, mix_batch
from .models import (TextConfig, TinyViT, ToyCaptioner, ViTConfig,
                     save_checkpoint)
from .rng import Rng, derive_seed

# Stream tags: distinct sub-seeds carved out of the run seed.
_SHUFFLE, _PAIR, _MIX_BASE, _EVAL, _OCCLUSION = 101, 102, 103, 104, 105

DEFAULT_OCCLUSION_RATIOS = [round(0.1 * i, 1) for i in range(10)]


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_frac: float = 0.03

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("optim.lr must be positive")
        if not 0 <= self.weight_decay < 1:
            raise ConfigError("optim.weight_decay must be in [0, 1)")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ConfigError(f"optim.{name} must be in [0, 1)")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError("optim.warmup_frac must be in [0, 1)")


@dataclass
class TrainConfig:
    mode: str = "cls"            # "cls" or "pref"
    epochs: int = 10
    batch_size: int = 100
    seed: int = 0
    score_beta: float = 2.0      # length-normalised score scale
    checkpoint_every: int = 0    # 0 keeps only the final epoch
    model: ViTConfig = field(default_factory=ViTConfig)
    text: TextConfig = field(default_factory=TextConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def validate(self) -> None:
        if self.mode not in ("cls", "pref"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.score_beta <= 0:
            raise ConfigError("score_beta must be positive")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        self.model.validate()
        if self.mode == "pref":
            self.text.validate()
        self.mix.validate()
        self.optim.validate()
        if self.mix.merge_schedule is not None:
            sched = list(self.mix.merge_schedule)
            if len(sched) != self.model.depth:
                raise ConfigError(
                    "mix.merge_schedule length must equal model depth")
            self.model.check_schedule(sched)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        def build(dc_cls, payload):
            known = {f.name: f for f in fields(dc_cls)}
            kwargs = {}
            for key, val in payload.items():
                if key not in known:
                    raise ConfigError(f"unknown config key {key!r} "
                                      f"for {dc_cls.__name__}")
                kwargs[key] = val
            return dc_cls(**kwargs)

        d = dict(d)
        nested = {"model": ViTConfig, "text": TextConfig, "mix": MixConfig,
                  "optim": OptimConfig}
        for key, sub_cls in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = build(sub_cls, d[key])
        return build(cls, d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.path=value`` overrides to a config dict.

    Values parse as JSON when possible, else stay strings.
    """
    out = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        path, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = path.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config path {path!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config path {path!r}")
        node[parts[-1]] = value
    return out


def lr_at(step: int, total_steps: int, cfg: OptimConfig) -> float:
    """Linear warmup into cosine decay to zero."""
    warmup = max(1, int(round(cfg.warmup_frac * total_steps)))
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = (step - warmup) / span
    return 0.5 * (1.0 + math.cos(math.pi * progress)) * cfg.lr


class AdamW:
    """Adam with decoupled weight decay over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            p.data -= lr * (update + c.weight_decay * p.data)


def _batch_slices(n: int, batch: int) -> list[slice]:
    return [slice(lo, min(lo + batch, n)) for lo in range(0, n, batch)]


def _round6(x: float) -> float:
    return float(f"{x:.6g}")


class ClassifierRun:
    """Stepwise driver for one classification training run."""

    def __init__(self, cfg: TrainConfig, train_ds: ImageDataset):
        cfg.validate()
        if cfg.model.classes != train_ds.num_classes:
            raise ConfigError(
                f"model classes {cfg.model.classes} != dataset "
                f"{train_ds.num_classes}")
        self.cfg = cfg
        self.ds = train_ds
        self.images = train_ds.to_float()
        self.labels = train_ds.labels
        self.model = TinyViT(cfg.model, seed=cfg.seed)
        self.opt = AdamW(self.model.params, cfg.optim)
        self.shuffle_rng = Rng(derive_seed(cfg.seed, _SHUFFLE))
        self.pair_rng = Rng(derive_seed(cfg.seed, _PAIR))
        self.mix_base = derive_seed(cfg.seed, _MIX_BASE)
        self.sample_counter = 0
        self.step = 0
        self.epoch = 0
        per_epoch = math.ceil(len(train_ds) / cfg.batch_size)
        self.total_steps = cfg.epochs * per_epoch

    def _mix(self, x: np.ndarray, partner: np.ndarray) -> BatchMix:
        cfg = self.cfg
        a_hat, k = self.model.saliency(x, schedule=cfg.mix.merge_schedule,
                                       recovery=cfg.mix.recovery)
        idx = self.sample_counter + np.arange(len(x))
        self.sample_counter += len(x)
        return mix_batch(x, partner, a_hat, k, cfg.mix, self.mix_base, idx,
                         (cfg.model.patch, cfg.model.patch))

    def run_epoch(self) -> list[dict]:
        cfg = self.cfg
        n = len(self.ds)
        perm = self.shuffle_rng.permutation(n)
        rows = []
        for sl in _batch_slices(n, cfg.batch_size):
            bidx = perm[sl]
            x = self.images[bidx]
            y = self.labels[bidx]
            lr = lr_at(self.step, self.total_steps, cfg.optim)
            ad.zero_grads(self.model.param_list())
            if cfg.mix.enabled:
                d = self.pair_rng.derangement(len(bidx))
                bm = self._mix(x, x[d])
                mixed_logits, _ = self.model.forward_cls(bm.mixed)
                raw_logits, _ = self.model.forward_cls(x)
                mce = obj.mce_loss(mixed_logits, y, y[d], bm.lam_hat)
                ce = obj.cross_entropy(raw_logits, y)
                total = ad.add(mce, ce)
                lam_hat = float(bm.lam_hat.mean())
                mce_val = mce.item()
            else:
                logits, _ = self.model.forward_cls(x)
                ce = obj.cross_entropy(logits, y)
                total = ce
                lam_hat = None
                mce_val = None
            ad.backward(total)
            self.opt.step(lr)
            rows.append({
                "step": self.step,
                "epoch": self.epoch,
                "ce": _round6(ce.item()),
                "mce": None if mce_val is None else _round6(mce_val),
                "sft": None,
                "simpo": None,
                "total": _round6(total.item()),
                "lambda_hat": None if lam_hat is None else _round6(lam_hat),
                "lr": _round6(lr),
            })
            self.step += 1
        self.epoch += 1
        return rows

    # -- state snapshot for resume ------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, p in self.model.params.items():
            out["p/" + k] = p.data.copy()
            out["m/" + k] = self.opt.m[k].copy()
            out["v/" + k] = self.opt.v[k].copy()
        out["meta"] = np.array([self.step, self.epoch, self.sample_counter,
                                self.opt.t], dtype=np.int64)
        out["shuffle"] = np.array(self.shuffle_rng.get_state(),
                                  dtype=np.uint64)
        out["pair"] = np.array(self.pair_rng.get_state(), dtype=np.uint64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.model.params.items():
            p.data = arrays["p/" + k].copy()
            self.opt.m[k] = arrays["m/" + k].copy()
            self.opt.v[k] = arrays["v/" + k].copy()
        step, epoch, counter, t = (int(v) for v in arrays["meta"])
        self.step, self.epoch, self.sample_counter, self.opt.t = \
            step, epoch, counter, t
        self.shuffle_rng.set_state(tuple(int(v) for v in arrays["shuffle"]))
        self.pair_rng.set_state(tuple(int(v) for v in arrays["pair"]))


class PreferenceRun:
    """Stepwise driver for one preference-alignment run."""

    def __init__(self, cfg: TrainConfig, train_ds: CaptionDataset):
        cfg.validate()
        if cfg.mode != "pref":
            raise ConfigError("PreferenceRun requires mode 'pref'")
        if cfg.text.vocab < len(train_ds.vocab):
            raise ConfigError(
                f"text vocab {cfg.text.vocab} smaller than dataset "
                f"vocabulary {len(train_ds.vocab)}")
        self.cfg = cfg
        self.ds = train_ds
        self.images = train_ds.base.to_float()
        self.prompts = np.broadcast_to(
            train_ds.prompt_ids, (len(train_ds), len(train_ds.prompt_ids)))
        self.targets = train_ds.target_ids
        self.lengths = train_ds.lengths
        self.model = ToyCaptioner(cfg.model, cfg.text, seed=cfg.seed)
        self.opt = AdamW(self.model.params, cfg.optim)
        self.shuffle_rng = Rng(derive_seed(cfg.seed, _SHUFFLE))
        self.pair_rng = Rng(derive_seed(cfg.seed, _PAIR))
        self.mix_base = derive_seed(cfg.seed, _MIX_BASE)
        self.sample_counter = 0
        self.step = 0
        self.epoch = 0
        self.frozen: TinyViT | None = None
        per_epoch = math.ceil(len(train_ds) / cfg.batch_size)
        self.total_steps = cfg.epochs * per_epoch

    def _refresh_frozen(self) -> None:
        self.frozen = TinyViT(self.cfg.model, seed=self.cfg.seed, head=False)
        self.frozen.load_arrays(self.model.trunk.export_arrays())

    def run_epoch(self) -> list[dict]:
        cfg = self.cfg
        self._refresh_frozen()
        n = len(self.ds)
        perm = self.shuffle_rng.permutation(n)
        rows = []
        for sl in _batch_slices(n, cfg.batch_size):
            bidx = perm[sl]
            x = self.images[bidx]
            prompts = self.prompts[bidx]
            targets = self.targets[bidx]
            lengths = self.lengths[bidx]
            d = self.pair_rng.derangement(len(bidx))
            a_hat, k = self.frozen.saliency(
                x, schedule=cfg.mix.merge_schedule, recovery=cfg.mix.recovery)
            idx = self.sample_counter + np.arange(len(x))
            self.sample_counter += len(x)
            bm = mix_batch(x, x[d], a_hat, k, cfg.mix, self.mix_base, idx,
                           (cfg.model.patch, cfg.model.patch))
            lr = lr_at(self.step, self.total_steps, cfg.optim)
            ad.zero_grads(self.model.param_list())
            logp_w = self.model.caption_logprob_sum(x, prompts, targets,
                                                    lengths)
            logp_l = self.model.caption_logprob_sum(bm.mixed, prompts,
                                                    targets, lengths)
            s_w = obj.avg_logprob_score(logp_w, lengths, cfg.score_beta)
            s_l = obj.avg_logprob_score(logp_l, lengths, cfg.score_beta)
            margins = 1.0 - bm.lam_hat
            sft = obj.sft_loss(logp_w)
            simpo = obj.mixed_simpo_loss(s_w, s_l, margins)
            total = obj.total_mllm_loss(sft, simpo)
            ad.backward(total)
            self.opt.step(lr)
            rows.append({
                "step": self.step,
                "epoch": self.epoch,
                "ce": None,
                "mce": None,
                "sft": _round6(sft.item()),
                "simpo": _round6(simpo.item()),
                "total": _round6(total.item()),
                "lambda_hat": _round6(float(bm.lam_hat.mean())),
                "lr": _round6(lr),
                "gap": _round6(float((s_w.data - s_l.data).mean())),
            })
            self.step += 1
        self.epoch += 1
        return rows


def preference_gap(model: ToyCaptioner, ds: CaptionDataset,
                   mix_cfg: MixConfig, base_seed: int,
                   score_beta: float) -> dict:
    """Held-out winner-minus-loser score gap under fresh mixes."""
    images = ds.base.to_float()
    n = len(ds)
    prompts = np.broadcast_to(ds.prompt_ids, (n, len(ds.prompt_ids)))
    targets = ds.target_ids
    lengths = ds.lengths
    pair = Rng(derive_seed(base_seed, _PAIR)).derangement(n)
    a_hat, k = model.saliency(images, schedule=mix_cfg.merge_schedule,
                              recovery=mix_cfg.recovery)
    bm = mix_batch(images, images[pair], a_hat, k, mix_cfg, base_seed,
                   np.arange(n), (model.trunk.cfg.patch,
                                  model.trunk.cfg.patch))
    with ad.no_grad():
        gaps = []
        for sl in _batch_slices(n, 256):
            w = model.caption_logprob_sum(images[sl], prompts[sl],
                                          targets[sl], lengths[sl])
            l = model.caption_logprob_sum(bm.mixed[sl], prompts[sl],
                                          targets[sl], lengths[sl])
            s_w = score_beta / lengths[sl] * w.data
            s_l = score_beta / lengths[sl] * l.data
            gaps.append(s_w - s_l)
    gaps = np.concatenate(gaps)
    return {"mean_gap": float(gaps.mean()),
            "frac_positive": float((gaps > 0).mean()),
            "n": int(n)}


# ---------------------------------------------------------------------------
# Run-directory orchestration
# ---------------------------------------------------------------------------

def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _append_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "a") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True,
                               separators=(",", ":")) + "\n")


def _maybe_checkpoint(run_dir: Path | None, cfg: TrainConfig, epoch: int,
                      arrays: dict[str, np.ndarray]) -> None:
    if run_dir is None:
        return
    final = epoch == cfg.epochs
    if cfg.checkpoint_every == 0 and not final:
        return
    if cfg.checkpoint_every and epoch % cfg.checkpoint_every and not final:
        return
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt_dir / f"epoch_{epoch}.mmxc", arrays)


def classification_report(model: TinyViT, ds: ImageDataset, cfg: TrainConfig,
                          split: str) -> dict:
    images = ds.to_float()
    logits = predict_logits(model, images)
    calib = calibration_from_logits(logits, ds.labels)
    occl = occlusion_eval(model, images, ds.labels,
                          DEFAULT_OCCLUSION_RATIOS,
                          seed=derive_seed(cfg.seed, _OCCLUSION))
    cost = flops_estimate(ArchSpec.from_vit(model.cfg),
                          model.cfg.schedule())
    bins = [{"lo": float(calib.bin_edges[i]),
             "hi": float(calib.bin_edges[i + 1]),
             "count": int(calib.bin_counts[i]),
             "confidence": float(calib.bin_confidence[i]),
             "accuracy": float(calib.bin_accuracy[i])}
            for i in range(len(calib.bin_counts))]
    return {
        "mode": "cls",
        "split": split,
        "accuracy": top1_accuracy(logits, ds.labels),
        "ece": {"value": calib.value, "bins": bins},
        "occlusion": {"ratios": occl.ratios, "acc": occl.accuracy},
        "flops": cost.flops,
        "flops_detail": cost.to_dict(),
        "config_hash": cfg.config_hash(),
    }


def train_classifier(cfg: TrainConfig, train_ds: ImageDataset,
                     eval_ds: ImageDataset | None = None,
                     out_dir: str | Path | None = None) -> dict:
    run_dir = Path(out_dir) if out_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_json(run_dir / "config.json", cfg.to_dict())
        (run_dir / "metrics.jsonl").write_text("")
    run = ClassifierRun(cfg, train_ds)
    for _ in range(cfg.epochs):
        rows = run.run_epoch()
        if run_dir is not None:
            _append_rows(run_dir / "metrics.jsonl", rows)
        _maybe_checkpoint(run_dir, cfg, run.epoch,
                          run.model.export_arrays())
    report_ds = eval_ds if eval_ds is not None else train_ds
    split = "eval" if eval_ds is not None else "train"
    report = classification_report(run.model, report_ds, cfg, split)
    if run_dir is not None:
        _write_json(run_dir / "report.json", report)
    report["out_dir"] = str(run_dir) if run_dir is not None else None
    report["model"] = run.model
    return report


def train_preference(cfg: TrainConfig, train_ds: CaptionDataset,
                     eval_ds: CaptionDataset | None = None,
                     out_dir: str | Path | None = None) -> dict:
    run_dir = Path(out_dir) if out_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_json(run_dir / "config.json", cfg.to_dict())
        (run_dir / "metrics.jsonl").write_text("")
    run = PreferenceRun(cfg, train_ds)
    for _ in range(cfg.epochs):
        rows = run.run_epoch()
        if run_dir is not None:
            _append_rows(run_dir / "metrics.jsonl", rows)
        _maybe_checkpoint(run_dir, cfg, run.epoch,
                          run.model.export_arrays())
    report: dict = {"mode": "pref", "config_hash": cfg.config_hash()}
    if eval_ds is not None:
        report["holdout"] = preference_gap(
            run.model, eval_ds, cfg.mix,
            base_seed=derive_seed(cfg.seed, _EVAL),
            score_beta=cfg.score_beta)
    if run_dir is not None:
        _write_json(run_dir / "report.json", report)
    report["out_dir"] = str(run_dir) if run_dir is not None else None
    report["model"] = run.model
    return report
