"""Desk-scale vision transformer and caption decoder.

TinyViT is a pre-norm ViT whose blocks can merge tokens on the way up:
attention runs with a +log(size) bias on key logits so merged tokens count
proportionally, then the block's keys drive bipartite matching and the
residual stream is merged by size-weighted mean.  The final block's
received-attention vector, pushed back through the merge lineage, is the
patch saliency map the mixer consumes.

ToyCaptioner reuses the trunk and decodes short captions with a two-block
causal decoder cross-attending to the (merged) vision tokens.

Parameters are float64 tape tensors initialised from truncated normals;
checkpoints use a little-endian record format (magic ``MMXC``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import tome
from .autodiff import Tensor
from .errors import ConfigError, DataFormatError
from .rng import Rng, derive_seed

_NEG_INF = -1e9  # finite stand-in so masked logits stay checkable


@dataclass
class ViTConfig:
    image: int = 32
    channels: int = 3
    patch: int = 4
    dim: int = 64
    depth: int = 4
    heads: int = 2
    mlp_ratio: float = 4.0
    classes: int = 10
    merge_schedule: list[int] = field(default_factory=list)
    use_cls: bool = False
    pool: str = "mean"          # "mean" (size-weighted) or "cls"
    attn_stat: str = "received"  # "received" or "cls_row"

    @property
    def grid(self) -> int:
        return self.image // self.patch

    @property
    def l0(self) -> int:
        return self.grid * self.grid

    def schedule(self) -> list[int]:
        if not self.merge_schedule:
            return [0] * self.depth
        return list(self.merge_schedule)

    def validate(self) -> None:
        if self.image <= 0 or self.patch <= 0 or self.image % self.patch:
            raise ConfigError(
                f"patch {self.patch} must divide image size {self.image}")
        if self.dim <= 0 or self.dim % self.heads:
            raise ConfigError(
                f"heads {self.heads} must divide dim {self.dim}")
        if self.depth <= 0 or self.classes <= 0:
            raise ConfigError("depth and classes must be positive")
        sched = self.schedule()
        if len(sched) != self.depth:
            raise ConfigError(
                f"merge schedule length {len(sched)} != depth {self.depth}")
        self.check_schedule(sched)
        if self.pool not in ("mean", "cls"):
            raise ConfigError(f"unknown pool {self.pool!r}")
        if self.attn_stat not in ("received", "cls_row"):
            raise ConfigError(f"unknown attn_stat {self.attn_stat!r}")
        if (self.pool == "cls" or self.attn_stat == "cls_row") \
                and not self.use_cls:
            raise ConfigError("cls pooling/attention requires use_cls")

    def check_schedule(self, sched: list[int]) -> None:
        protect = 1 if self.use_cls else 0
        tokens = self.l0 + protect
        for i, r in enumerate(sched):
            if r < 0 or r > (tokens - protect) // 2:
                raise ConfigError(
                    f"layer {i}: merge count {r} exceeds "
                    f"{(tokens - protect) // 2} for {tokens} tokens")
            tokens -= r


@dataclass
class EncodeResult:
    """Merged token stack plus the lineage needed for saliency."""

    tokens: Tensor            # (B, K_tok, D)
    sizes: np.ndarray         # (B, K_tok) int
    a_k: np.ndarray | None    # (B, K_tok) final-block attention summary
    patch_groups: np.ndarray  # (B, L0) patch -> token group
    k_tok: int
    k_patches: int
    l0: int


def _trunc_normal(rng: Rng, shape: tuple[int, ...], std: float) -> np.ndarray:
    """Normal(0, std) redrawn until every value is within two sigmas."""
    n = int(np.prod(shape))
    vals = rng.gaussians(n)
    bad = np.where(np.abs(vals) > 2.0)[0]
    while len(bad):
        vals[bad] = rng.gaussians(len(bad))
        bad = bad[np.abs(vals[bad]) > 2.0]
    return (std * vals).reshape(shape)


class ParamStore:
    """Ordered name -> Tensor mapping shared by both models."""

    def __init__(self, rng: Rng):
        self._rng = rng
        self.params: dict[str, Tensor] = {}

    def weight(self, name: str, shape: tuple[int, ...],
               std: float = 0.02) -> Tensor:
        t = Tensor(_trunc_normal(self._rng, shape, std), requires_grad=True)
        self.params[name] = t
        return t

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        t = Tensor(np.zeros(shape), requires_grad=True)
        self.params[name] = t
        return t

    def ones(self, name: str, shape: tuple[int, ...]) -> Tensor:
        t = Tensor(np.ones(shape), requires_grad=True)
        self.params[name] = t
        return t


def _affine(t: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """(B, L, D) @ (D, E) + (E,) via a flattened 2-D matmul."""
    bsz, length, d = t.shape
    flat = ad.reshape(t, (bsz * length, d))
    out = ad.add(ad.matmul(flat, w), b)
    return ad.reshape(out, (bsz, length, w.shape[1]))


def _attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
               key_bias: np.ndarray | None,
               causal: bool) -> tuple[Tensor, list[Tensor]]:
    """Multi-head attention; returns (output, per-head softmax maps)."""
    d = q.shape[-1]
    dh = d // heads
    outs = []
    maps = []
    causal_mask = None
    if causal:
        s_q, s_k = q.shape[1], k.shape[1]
        causal_mask = np.triu(np.full((s_q, s_k), _NEG_INF), k=1)
    for h in range(heads):
        qh = ad.slice_last(q, h * dh, (h + 1) * dh)
        kh = ad.slice_last(k, h * dh, (h + 1) * dh)
        vh = ad.slice_last(v, h * dh, (h + 1) * dh)
        logits = ad.scale(ad.bmm(qh, ad.swap_last(kh)), 1.0 / np.sqrt(dh))
        if key_bias is not None:
            logits = ad.add_const(logits, key_bias)
        if causal_mask is not None:
            logits = ad.add_const(logits, causal_mask)
        attn = ad.softmax_last(logits)
        maps.append(attn)
        outs.append(ad.bmm(attn, vh))
    return ad.concat_last(outs), maps


class TinyViT:
    """Pre-norm ViT classifier with optional in-block token merging."""

    def __init__(self, cfg: ViTConfig, seed: int, head: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.has_head = head
        store = ParamStore(Rng(derive_seed(seed, 0)))
        c = cfg
        in_dim = c.patch * c.patch * c.channels
        tokens = c.l0 + (1 if c.use_cls else 0)
        store.weight("embed.w", (in_dim, c.dim))
        store.zeros("embed.b", (c.dim,))
        store.weight("pos", (tokens, c.dim))
        if c.use_cls:
            store.weight("cls", (1, 1, c.dim))
        for i in range(c.depth):
            p = f"blocks.{i}."
            store.ones(p + "ln1.g", (c.dim,))
            store.zeros(p + "ln1.b", (c.dim,))
            for nm in ("wq", "wk", "wv", "wo"):
                store.weight(p + nm, (c.dim, c.dim))
                store.zeros(p + nm.replace("w", "b"), (c.dim,))
            store.ones(p + "ln2.g", (c.dim,))
            store.zeros(p + "ln2.b", (c.dim,))
            hidden = int(c.dim * c.mlp_ratio)
            store.weight(p + "mlp.w1", (c.dim, hidden))
            store.zeros(p + "mlp.b1", (hidden,))
            store.weight(p + "mlp.w2", (hidden, c.dim))
            store.zeros(p + "mlp.b2", (c.dim,))
        store.ones("ln_f.g", (c.dim,))
        store.zeros("ln_f.b", (c.dim,))
        if head:
            store.weight("head.w", (c.dim, c.classes))
            store.zeros("head.b", (c.classes,))
        self.params = store.params

    # -- parameter plumbing -------------------------------------------------

    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint missing parameter {name!r}")
            if arrays[name].shape != p.data.shape:
                raise ConfigError(
                    f"checkpoint parameter {name!r} has shape "
                    f"{arrays[name].shape}, expected {p.data.shape}")
            p.data = arrays[name].astype(np.float64)

    def export_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    # -- forward ------------------------------------------------------------

    def _patches(self, images: np.ndarray) -> np.ndarray:
        c = self.cfg
        b = images.shape[0]
        g, p = c.grid, c.patch
        x = images.reshape(b, g, p, g, p, c.channels)
        return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, c.l0, -1)

    def encode(self, images: np.ndarray,
               schedule: list[int] | None = None) -> EncodeResult:
        c = self.cfg
        sched = c.schedule() if schedule is None else list(schedule)
        if len(sched) != c.depth:
            raise ConfigError(
                f"schedule length {len(sched)} != depth {c.depth}")
        c.check_schedule(sched)
        protect = 1 if c.use_cls else 0
        pr = self.params
        patches = self._patches(images)
        b, l0, _ = patches.shape
        flat = Tensor(patches.reshape(b * l0, -1))
        x = ad.reshape(ad.add(ad.matmul(flat, pr["embed.w"]), pr["embed.b"]),
                       (b, l0, c.dim))
        if c.use_cls:
            cls_rows = ad.add(Tensor(np.zeros((b, 1, c.dim))), pr["cls"])
            x = ad.concat_mid([cls_rows, x])
        x = ad.add(x, pr["pos"])
        tokens = l0 + protect
        sizes = np.ones((b, tokens), dtype=np.int64)
        patch_groups = np.broadcast_to(
            np.arange(protect, tokens, dtype=np.int64), (b, l0)).copy()
        a_k = None
        for i, r in enumerate(sched):
            last = i == c.depth - 1
            x, sizes, a_recv, layer_groups = self._block(
                x, sizes, i, r, protect, collect=last)
            if layer_groups is not None:
                patch_groups = np.take_along_axis(
                    layer_groups, patch_groups, axis=1)
            if last:
                a_k = a_recv
        k_tok = x.shape[1]
        return EncodeResult(tokens=x, sizes=sizes, a_k=a_k,
                            patch_groups=patch_groups, k_tok=k_tok,
                            k_patches=k_tok - protect, l0=l0)

    def _block(self, x: Tensor, sizes: np.ndarray, i: int, r: int,
               protect: int, collect: bool):
        c = self.cfg
        pr = self.params
        p = f"blocks.{i}."
        z = ad.layernorm_rows(x, pr[p + "ln1.g"], pr[p + "ln1.b"])
        q = _affine(z, pr[p + "wq"], pr[p + "bq"])
        k = _affine(z, pr[p + "wk"], pr[p + "bk"])
        v = _affine(z, pr[p + "wv"], pr[p + "bv"])
        key_bias = np.log(sizes.astype(np.float64))[:, None, :]
        attn_out, maps = _attention(q, k, v, c.heads, key_bias, causal=False)
        x = ad.add(x, _affine(attn_out, pr[p + "wo"], pr[p + "bo"]))

        a_recv = None
        if collect:
            if c.attn_stat == "cls_row":
                stacked = np.stack([m.data[:, 0, :] for m in maps])
            else:
                stacked = np.stack([m.data.mean(axis=1) for m in maps])
            a_recv = stacked.mean(axis=0)

        layer_groups = None
        if r > 0:
            left, right = tome.batch_bipartite_soft_matching(
                k.data, r, protect=protect)
            layer_groups = tome.batch_plan_groups(left, right, x.shape[1])
            w, sizes = tome.merge_weights(layer_groups, sizes)
            x = ad.bmm_const(w, x)
            if a_recv is not None:
                a_recv = tome.combine_group_scores(
                    layer_groups, a_recv, x.shape[1])

        z = ad.layernorm_rows(x, pr[p + "ln2.g"], pr[p + "ln2.b"])
        h = ad.gelu(_affine(z, pr[p + "mlp.w1"], pr[p + "mlp.b1"]))
        x = ad.add(x, _affine(h, pr[p + "mlp.w2"], pr[p + "mlp.b2"]))
        return x, sizes, a_recv, layer_groups

    def forward_cls(self, images: np.ndarray,
                    schedule: list[int] | None = None
                    ) -> tuple[Tensor, EncodeResult]:
        if not self.has_head:
            raise ConfigError("model was built without a classifier head")
        c = self.cfg
        enc = self.encode(images, schedule)
        h = ad.layernorm_rows(enc.tokens, self.params["ln_f.g"],
                              self.params["ln_f.b"])
        b, k_tok, _ = h.shape
        if c.pool == "cls":
            sel = np.zeros((b, 1, k_tok))
            sel[:, 0, 0] = 1.0
        else:
            weights = enc.sizes.astype(np.float64)
            sel = (weights / weights.sum(axis=1, keepdims=True))[:, None, :]
        pooled = ad.reshape(ad.bmm_const(sel, h), (b, c.dim))
        logits = ad.add(ad.matmul(pooled, self.params["head.w"]),
                        self.params["head.b"])
        return logits, enc

    def saliency(self, images: np.ndarray,
                 schedule: list[int] | None = None,
                 recovery: str = "broadcast") -> tuple[np.ndarray, int]:
        """Per-patch saliency maps (B, L0) and the patch group count."""
        with ad.no_grad():
            enc = self.encode(images, schedule)
        a_k = enc.a_k
        if recovery == "size_normalized":
            ones = np.ones_like(enc.patch_groups, dtype=np.float64)
            counts = tome.combine_group_scores(enc.patch_groups, ones,
                                               enc.k_tok)
            a_k = a_k / np.maximum(counts, 1.0)
        elif recovery != "broadcast":
            raise ConfigError(f"unknown recovery mode {recovery!r}")
        a_hat = np.take_along_axis(a_k, enc.patch_groups, axis=1)
        return a_hat, enc.k_patches


@dataclass
class TextConfig:
    vocab: int = 16
    dim: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: float = 2.0
    prompt_len: int = 4
    target_len: int = 3

    @property
    def seq_len(self) -> int:
        return self.prompt_len + self.target_len - 1

    def validate(self) -> None:
        if self.vocab < 2 or self.vocab > 64:
            raise ConfigError(f"vocab must be in [2, 64], got {self.vocab}")
        if self.dim <= 0 or self.dim % self.heads:
            raise ConfigError("text heads must divide text dim")
        if self.prompt_len < 1 or self.target_len < 1:
            raise ConfigError("prompt and target lengths must be >= 1")


class ToyCaptioner:
    """TinyViT trunk plus a causal decoder with cross-attention."""

    def __init__(self, vit_cfg: ViTConfig, text_cfg: TextConfig, seed: int):
        text_cfg.validate()
        self.trunk = TinyViT(vit_cfg, seed=seed, head=False)
        self.text_cfg = text_cfg
        store = ParamStore(Rng(derive_seed(seed, 1)))
        t = text_cfg
        store.weight("tok", (t.vocab, t.dim))
        store.weight("pos_t", (t.seq_len, t.dim))
        store.weight("vis.w", (vit_cfg.dim, t.dim))
        store.zeros("vis.b", (t.dim,))
        for i in range(t.depth):
            p = f"dec.{i}."
            store.ones(p + "ln1.g", (t.dim,))
            store.zeros(p + "ln1.b", (t.dim,))
            for nm in ("wq", "wk", "wv", "wo"):
                store.weight(p + "sa." + nm, (t.dim, t.dim))
                store.zeros(p + "sa." + nm.replace("w", "b"), (t.dim,))
            store.ones(p + "ln2.g", (t.dim,))
            store.zeros(p + "ln2.b", (t.dim,))
            for nm in ("wq", "wk", "wv", "wo"):
                store.weight(p + "ca." + nm, (t.dim, t.dim))
                store.zeros(p + "ca." + nm.replace("w", "b"), (t.dim,))
            store.ones(p + "ln3.g", (t.dim,))
            store.zeros(p + "ln3.b", (t.dim,))
            hidden = int(t.dim * t.mlp_ratio)
            store.weight(p + "mlp.w1", (t.dim, hidden))
            store.zeros(p + "mlp.b1", (hidden,))
            store.weight(p + "mlp.w2", (hidden, t.dim))
            store.zeros(p + "mlp.b2", (t.dim,))
        store.ones("ln_f.g", (t.dim,))
        store.zeros("ln_f.b", (t.dim,))
        store.weight("out.w", (t.dim, t.vocab))
        store.zeros("out.b", (t.vocab,))
        self.text_params = store.params

    @property
    def params(self) -> dict[str, Tensor]:
        merged = {"trunk." + k: v for k, v in self.trunk.params.items()}
        merged.update({"text." + k: v for k, v in self.text_params.items()})
        return merged

    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.params
        for name, p in own.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint missing parameter {name!r}")
            if arrays[name].shape != p.data.shape:
                raise ConfigError(f"checkpoint parameter {name!r} has shape "
                                  f"{arrays[name].shape}, expected "
                                  f"{p.data.shape}")
            p.data = arrays[name].astype(np.float64)

    def export_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def caption_logprob_sum(self, images: np.ndarray, prompt_ids: np.ndarray,
                            target_ids: np.ndarray,
                            lengths: np.ndarray) -> Tensor:
        """Sum of teacher-forced target log-probs per sample, (B,)."""
        from .objectives import sequence_logprob

        t = self.text_cfg
        pr = self.text_params
        b, p_len = prompt_ids.shape
        t_len = target_ids.shape[1]
        if p_len != t.prompt_len or t_len != t.target_len:
            raise ConfigError("prompt/target lengths do not match config")
        enc = self.trunk.encode(images)
        vis = _affine(enc.tokens, pr["vis.w"], pr["vis.b"])
        vis_bias = np.log(enc.sizes.astype(np.float64))[:, None, :]

        ids = np.concatenate([prompt_ids, target_ids[:, :-1]], axis=1)
        s = ids.shape[1]
        x = ad.reshape(ad.take_rows(pr["tok"], ids.reshape(-1)),
                       (b, s, t.dim))
        x = ad.add(x, pr["pos_t"])
        for i in range(t.depth):
            p = f"dec.{i}."
            z = ad.layernorm_rows(x, pr[p + "ln1.g"], pr[p + "ln1.b"])
            q = _affine(z, pr[p + "sa.wq"], pr[p + "sa.bq"])
            k = _affine(z, pr[p + "sa.wk"], pr[p + "sa.bk"])
            v = _affine(z, pr[p + "sa.wv"], pr[p + "sa.bv"])
            sa, _ = _attention(q, k, v, t.heads, None, causal=True)
            x = ad.add(x, _affine(sa, pr[p + "sa.wo"], pr[p + "sa.bo"]))

            z = ad.layernorm_rows(x, pr[p + "ln2.g"], pr[p + "ln2.b"])
            q = _affine(z, pr[p + "ca.wq"], pr[p + "ca.bq"])
            kc = _affine(vis, pr[p + "ca.wk"], pr[p + "ca.bk"])
            vc = _affine(vis, pr[p + "ca.wv"], pr[p + "ca.bv"])
            ca, _ = _attention(q, kc, vc, t.heads, vis_bias, causal=False)
            x = ad.add(x, _affine(ca, pr[p + "ca.wo"], pr[p + "ca.bo"]))

            z = ad.layernorm_rows(x, pr[p + "ln3.g"], pr[p + "ln3.b"])
            h = ad.gelu(_affine(z, pr[p + "mlp.w1"], pr[p + "mlp.b1"]))
            x = ad.add(x, _affine(h, pr[p + "mlp.w2"], pr[p + "mlp.b2"]))

        h = ad.layernorm_rows(x, pr["ln_f.g"], pr["ln_f.b"])
        h = ad.slice_mid(h, p_len - 1, s)
        flat = ad.reshape(h, (b * t_len, t.dim))
        logits = ad.add(ad.matmul(flat, pr["out.w"]), pr["out.b"])
        mask = (np.arange(t_len)[None, :] < lengths[:, None])
        return sequence_logprob(logits, target_ids, mask)

    def saliency(self, images: np.ndarray,
                 schedule: list[int] | None = None,
                 recovery: str = "broadcast") -> tuple[np.ndarray, int]:
        return self.trunk.saliency(images, schedule, recovery)


# ---------------------------------------------------------------------------
# Checkpoints: magic "MMXC", u32 version, then (name, dims, float64 payload)
# records, all little-endian.
# ---------------------------------------------------------------------------

_MAGIC = b"MMXC"
_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        for name, arr in arrays.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise DataFormatError("bad magic: not a checkpoint file")
    if len(blob) < 8:
        raise DataFormatError("truncated checkpoint header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    off = 8
    while off < len(blob):
        try:
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + nlen].decode("utf-8")
            if len(blob[off:off + nlen]) != nlen:
                raise DataFormatError("truncated checkpoint record")
            off += nlen
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
        except struct.error as exc:
            raise DataFormatError("truncated checkpoint record") from exc
        count = int(np.prod(dims)) if ndim else 1
        nbytes = 8 * count
        payload = blob[off:off + nbytes]
        if len(payload) != nbytes:
            raise DataFormatError("truncated checkpoint payload")
        off += nbytes
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return out
