"""Image codecs and the on-disk dataset layout.

Layout::

    root/images/<id>.png      8-bit RGB (or grayscale, replicated to RGB)
    root/masks/<id>.png       8-bit, values {0, 255} or {0, 1}
    root/splits/train.txt     one id per line
    root/splits/test.txt

PGM (P2/P5) and PPM (P3/P6) files are accepted wherever PNG is.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import DTYPE

IMAGE_EXTS = (".png", ".ppm", ".pgm", ".pnm")
SPLITS = ("train", "test")


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""


class UnsupportedImageError(DataError):
    """Image bit depth or mode outside 8-bit gray / RGB."""


# -- codecs ------------------------------------------------------------------------

def read_image_u8(path) -> np.ndarray:
    """Raw 8-bit pixels: (H, W) for grayscale, (H, W, 3) for colour."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I", "F") or im.info.get("bits", 8) > 8:
                raise UnsupportedImageError(f"{path}: unsupported bit depth (mode {mode}); only 8-bit is supported")
            if mode == "1":
                im = im.convert("L")
            elif mode == "P":
                im = im.convert("RGB")
            elif mode == "LA":
                im = im.convert("L")
            elif mode == "RGBA":
                im = im.convert("RGB")
            elif mode not in ("L", "RGB"):
                raise UnsupportedImageError(f"{path}: unsupported image mode {mode}")
            return np.array(im, dtype=np.uint8)
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as e:
        if isinstance(e, DataError):
            raise
        raise DataError(f"{path}: malformed image ({e})") from None


def read_image(path) -> np.ndarray:
    """Pixels as float32 in [0, 1]; (H, W) or (H, W, 3)."""
    return read_image_u8(path).astype(DTYPE) / DTYPE(255)


def to_u8(arr) -> np.ndarray:
    a = np.asarray(arr)
    if a.dtype == np.uint8:
        return a
    return np.clip(np.rint(a.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, arr):
    """Write (H, W) or (H, W, 3) pixels; floats are read as [0, 1] and rounded to 8 bits.

    The format follows the suffix: .png, .pgm (P5), .ppm (P6).
    """
    a = to_u8(arr)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim not in (2, 3) or (a.ndim == 3 and a.shape[2] != 3):
        raise DataError(f"cannot write array of shape {a.shape} as an image")
    suffix = Path(path).suffix.lower()
    fmt = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM", ".pnm": "PPM"}.get(suffix)
    if fmt is None:
        raise DataError(f"{path}: unsupported image extension {suffix!r}")
    if suffix == ".pgm" and a.ndim == 3:
        raise DataError(f"{path}: PGM holds grayscale only")
    Image.fromarray(a).save(path, format=fmt)


# -- dataset -----------------------------------------------------------------------

@dataclass
class Sample:
    id: str
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray   # (H, W) uint8 in {0, 1}

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


def image_to_chw(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=DTYPE)


def binarize_mask(raw: np.ndarray, name: str = "mask") -> np.ndarray:
    if raw.ndim == 3:
        if not (raw == raw[:, :, :1]).all():
            raise DataError(f"{name}: colour mask with unequal channels")
        raw = raw[:, :, 0]
    values = np.unique(raw)
    if set(values.tolist()) <= {0, 255}:
        return (raw == 255).astype(np.uint8)
    if set(values.tolist()) <= {0, 1}:
        return raw.astype(np.uint8)
    bad = [int(v) for v in values if v not in (0, 1, 255)][:5]
    raise DataError(f"{name}: mask is not binary (found values such as {bad or values[:5].tolist()})")


def _find(folder: Path, sid: str) -> Path:
    for ext in IMAGE_EXTS:
        p = folder / f"{sid}{ext}"
        if p.exists():
            return p
    raise DataError(f"{sid}: no file in {folder} (tried {', '.join(IMAGE_EXTS)})")


def read_split(path) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"{path}: split file not found") from None
    ids = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate ids")
    return sorted(ids)


@dataclass
class Dataset:
    root: Path
    splits: dict[str, list[str]]
    _cache: dict[str, Sample] = field(default_factory=dict, repr=False)

    def ids(self, split: str) -> list[str]:
        if split not in self.splits:
            raise DataError(f"unknown split {split!r}; available: {sorted(self.splits)}")
        return self.splits[split]

    def load(self, sid: str) -> Sample:
        s = self._cache.get(sid)
        if s is None:
            s = load_sample(self.root, sid)
            self._cache[sid] = s
        return s

    def samples(self, split: str) -> list[Sample]:
        return [self.load(i) for i in self.ids(split)]

    def __len__(self):
        return sum(len(v) for v in self.splits.values())


def load_sample(root, sid: str) -> Sample:
    root = Path(root)
    ip = _find(root / "images", sid)
    mp = _find(root / "masks", sid)
    img = image_to_chw(read_image(ip))
    mask = binarize_mask(read_image_u8(mp), str(mp))
    if mask.shape != img.shape[1:]:
        raise DataError(f"{sid}: image size {img.shape[1:]} != mask size {mask.shape}")
    return Sample(sid, img, mask)


def load_dataset(root, splits=SPLITS) -> Dataset:
    """Load and validate every sample named in ``root/splits/<split>.txt``.

    Ids are sorted lexically; each problem is reported with the offending id.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: dataset directory not found")
    for sub in ("images", "masks", "splits"):
        if not (root / sub).is_dir():
            raise DataError(f"{root}: missing '{sub}/' directory")
    if isinstance(splits, str):
        splits = (splits,)
    ds = Dataset(root, {s: read_split(root / "splits" / f"{s}.txt") for s in splits})
    for s in splits:
        for sid in ds.ids(s):
            ds.load(sid)
    return ds


def stack_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    """Images (N, 3, H, W) and masks (N, 1, H, W), both float32."""
    if not samples:
        return np.zeros((0, 3, 0, 0), DTYPE), np.zeros((0, 1, 0, 0), DTYPE)
    sizes = {s.size for s in samples}
    if len(sizes) > 1:
        raise DataError(f"samples have differing sizes: {sorted(sizes)}")
    x = np.stack([s.image for s in samples])
    y = np.stack([s.mask for s in samples])[:, None].astype(DTYPE)
    return x, y


def resize_sample(s: Sample, size) -> Sample:
    """Bilinear for the image, nearest for the mask; ``size`` is (H, W)."""
    h, w = size
    if s.size == (h, w):
        return s
    img = Image.fromarray(to_u8(s.image.transpose(1, 2, 0))).resize((w, h), Image.BILINEAR)
    mask = Image.fromarray(s.mask * 255).resize((w, h), Image.NEAREST)
    return Sample(s.id, image_to_chw(np.asarray(img, dtype=DTYPE) / DTYPE(255)),
                  (np.asarray(mask) > 127).astype(np.uint8))


def write_split(root, name: str, ids):
    p = Path(root) / "splits"
    os.makedirs(p, exist_ok=True)
    (p / f"{name}.txt").write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")
