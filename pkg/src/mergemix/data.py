"""Datasets: a binary image container and a synthetic shapes task.

The container ("MMX1") stores uint8 pixels row-major with a little-endian
header of N, H, W, C and class count.  A JSON manifest alongside
(``<file>.json``) records the generator seed, the class table, and the
caption vocabulary when captions were requested.

The shapes task renders one colored geometric figure per image on a
textured gray background.  A class is a (shape, color) pair, and colors
repeat across classes so color alone does not identify the class.  Labels
are assigned round-robin, so class counts are balanced to within one.
Rendering draws from per-sample streams: regenerating any index alone
reproduces its image bit for bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError
from .rng import Rng, block_states, block_uniforms, derive_seed

_MAGIC = b"MMX1"

SHAPE_NAMES = ["circle", "square", "triangle", "diamond", "cross", "ring"]
COLOR_TABLE = {
    "red": (0.85, 0.20, 0.20),
    "green": (0.20, 0.78, 0.28),
    "blue": (0.25, 0.38, 0.90),
    "yellow": (0.88, 0.84, 0.22),
    "magenta": (0.82, 0.25, 0.80),
    "cyan": (0.25, 0.78, 0.84),
}

_SPECIALS = ["<pad>", "<bos>", "<eos>", "<q0>", "<q1>", "<q2>"]
EOS_ID = 2


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, H, W, C) uint8
    labels: np.ndarray  # (N,) int64
    num_classes: int
    manifest: dict | None = None
    _float_cache: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def hw(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def to_float(self) -> np.ndarray:
        """Pixels as float64 in [0, 1]; cached."""
        if self._float_cache is None:
            self._float_cache = self.images.astype(np.float64) / 255.0
        return self._float_cache

    def subset(self, idx: np.ndarray) -> "ImageDataset":
        return ImageDataset(self.images[idx], self.labels[idx],
                            self.num_classes, self.manifest)


@dataclass
class CaptionDataset:
    """Images plus fixed-length caption targets derived from labels."""

    base: ImageDataset
    vocab: list[str]
    prompt_ids: np.ndarray        # (P,)
    class_target_ids: np.ndarray  # (classes, T)
    lengths_by_class: np.ndarray  # (classes,)

    def __len__(self) -> int:
        return len(self.base)

    @property
    def target_ids(self) -> np.ndarray:
        return self.class_target_ids[self.base.labels]

    @property
    def lengths(self) -> np.ndarray:
        return self.lengths_by_class[self.base.labels]

    @classmethod
    def from_manifest(cls, ds: ImageDataset) -> "CaptionDataset":
        man = ds.manifest or {}
        if "caption_vocab" not in man:
            raise ConfigError(
                "captions required: dataset manifest has no caption vocab "
                "(regenerate with captions enabled)")
        return cls(base=ds,
                   vocab=list(man["caption_vocab"]),
                   prompt_ids=np.asarray(man["prompt_ids"], dtype=np.int64),
                   class_target_ids=np.asarray(man["class_target_ids"],
                                               dtype=np.int64),
                   lengths_by_class=np.asarray(man["target_lengths"],
                                               dtype=np.int64))


# ---------------------------------------------------------------------------
# Container I/O
# ---------------------------------------------------------------------------

def save_dataset(path, ds: ImageDataset) -> None:
    path = Path(path)
    n, h, w, c = ds.images.shape
    if ds.num_classes > 255:
        raise DataFormatError("dim overflow: more than 255 classes")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<5I", n, h, w, c, ds.num_classes))
        f.write(np.ascontiguousarray(ds.images, dtype=np.uint8).tobytes())
        f.write(ds.labels.astype(np.uint8).tobytes())
    if ds.manifest is not None:
        with open(str(path) + ".json", "w") as f:
            json.dump(ds.manifest, f, indent=2, sort_keys=True)
            f.write("\n")


_MAX_PIXEL_BYTES = 1 << 33


def load_dataset(path) -> ImageDataset:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != _MAGIC:
        raise DataFormatError("bad magic: not a dataset file")
    if len(blob) < 24:
        raise DataFormatError("truncated payload: header incomplete")
    n, h, w, c, classes = struct.unpack_from("<5I", blob, 4)
    if min(n, h, w, c, classes) == 0:
        raise DataFormatError("dim overflow: zero-sized dimension")
    pixel_bytes = n * h * w * c
    if pixel_bytes > _MAX_PIXEL_BYTES:
        raise DataFormatError("dim overflow: header dims exceed sane bounds")
    need = 24 + pixel_bytes + n
    if len(blob) < need:
        raise DataFormatError("truncated payload")
    if len(blob) > need:
        raise DataFormatError("trailing bytes after payload")
    images = np.frombuffer(blob, dtype=np.uint8, count=pixel_bytes,
                           offset=24).reshape(n, h, w, c).copy()
    labels = np.frombuffer(blob, dtype=np.uint8, count=n,
                           offset=24 + pixel_bytes).astype(np.int64)
    if labels.size and labels.max() >= classes:
        raise DataFormatError(
            f"label {labels.max()} out of range for {classes} classes")
    manifest = None
    side = Path(str(path) + ".json")
    if side.exists():
        manifest = json.loads(side.read_text())
    return ImageDataset(images, labels, classes, manifest)


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------

def class_table(classes: int) -> list[dict]:
    """(shape, color) pairs cycling through fewer colors than classes."""
    if classes < 2:
        raise ConfigError("need at least 2 classes")
    n_colors = max(2, min(len(COLOR_TABLE), (classes + 1) // 2))
    color_names = list(COLOR_TABLE)[:n_colors]
    table = []
    for i in range(classes):
        shape = SHAPE_NAMES[i % len(SHAPE_NAMES)]
        color = color_names[i % n_colors]
        table.append({"name": f"{shape} {color}", "shape": shape,
                      "color": color})
    if len({(t["shape"], t["color"]) for t in table}) != classes:
        raise ConfigError(
            f"cannot build {classes} distinct shape/color classes")
    return table


def _shape_mask(shape: str, xx: np.ndarray, yy: np.ndarray,
                cx: float, cy: float, rad: float) -> np.ndarray:
    dx = xx - cx
    dy = yy - cy
    if shape == "circle":
        return dx * dx + dy * dy <= rad * rad
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= rad * 0.88
    if shape == "triangle":
        h = 2.0 * rad
        top = cy - rad
        return (yy >= top) & (yy <= cy + rad) \
            & (np.abs(dx) <= 0.95 * rad * (yy - top) / h)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= rad * 1.2
    if shape == "cross":
        arm = 0.4 * rad
        within = np.maximum(np.abs(dx), np.abs(dy)) <= rad
        return within & ((np.abs(dx) <= arm) | (np.abs(dy) <= arm))
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= rad * rad) & (d2 >= (0.55 * rad) ** 2)
    raise ConfigError(f"unknown shape {shape!r}")


_NOISE_OFFSET = 1 << 32
_NOISE_STRIDE = 1 << 21


def _render(index: int, label: int, table: list[dict], size: int,
            seed: int) -> np.ndarray:
    rng = Rng(derive_seed(seed, index))
    spec = table[label]
    # Background: gray base, coarse texture grid, per-pixel noise.
    base = 0.25 + 0.30 * rng.uniform()
    tint = 0.12 * (rng.uniforms(3) - 0.5)
    coarse = 4
    tex = 0.22 * (rng.uniforms(coarse * coarse) - 0.5).reshape(coarse, coarse)
    tex_up = np.kron(tex, np.ones((size // coarse, size // coarse)))
    states = block_states(derive_seed(seed, _NOISE_OFFSET + index
                                      * _NOISE_STRIDE),
                          np.arange(size * size * 3))
    noise = 0.10 * (block_uniforms(states, 1)[:, 0].reshape(size, size, 3)
                    - 0.5)
    img = base + tex_up[:, :, None] + tint[None, None, :] + noise

    # Figure: jittered center and radius, hard mask, brightness jitter.
    cx = 0.38 + 0.24 * rng.uniform()
    cy = 0.38 + 0.24 * rng.uniform()
    rad = 0.20 + 0.13 * rng.uniform()
    bright = 0.82 + 0.22 * rng.uniform()
    coords = (np.arange(size, dtype=np.float64) + 0.5) / size
    xx, yy = np.meshgrid(coords, coords)
    mask = _shape_mask(spec["shape"], xx, yy, cx, cy, rad)
    color = np.clip(np.array(COLOR_TABLE[spec["color"]]) * bright, 0.0, 1.0)
    img[mask] = color + noise[mask] * 0.5
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def caption_vocab(table: list[dict]) -> tuple[list[str], np.ndarray,
                                              np.ndarray, np.ndarray]:
    """Vocabulary, prompt ids, per-class target ids, per-class lengths."""
    shapes = sorted({t["shape"] for t in table})
    colors = sorted({t["color"] for t in table})
    vocab = _SPECIALS + shapes + colors
    tok = {w: i for i, w in enumerate(vocab)}
    prompt = np.array([tok["<bos>"], tok["<q0>"], tok["<q1>"], tok["<q2>"]],
                      dtype=np.int64)
    targets = np.array([[tok[t["shape"]], tok[t["color"]], EOS_ID]
                        for t in table], dtype=np.int64)
    lengths = np.full(len(table), 3, dtype=np.int64)
    return vocab, prompt, targets, lengths


def generate_shapes(n: int, classes: int, size: int, seed: int,
                    captions: bool = True) -> ImageDataset:
    """Render n labelled shape images; labels round-robin (balanced +-1)."""
    if size < 8 or size % 4:
        raise ConfigError("image size must be a multiple of 4, at least 8")
    table = class_table(classes)
    labels = (np.arange(n) % classes).astype(np.int64)
    images = np.empty((n, size, size, 3), dtype=np.uint8)
    for i in range(n):
        images[i] = _render(i, int(labels[i]), table, size, seed)
    manifest = {
        "seed": seed,
        "classes": table,
        "counts": np.bincount(labels, minlength=classes).tolist(),
        "image_size": size,
    }
    if captions:
        vocab, prompt, targets, lengths = caption_vocab(table)
        manifest["caption_vocab"] = vocab
        manifest["prompt_ids"] = prompt.tolist()
        manifest["class_target_ids"] = targets.tolist()
        manifest["target_lengths"] = lengths.tolist()
    return ImageDataset(images, labels, classes, manifest)
