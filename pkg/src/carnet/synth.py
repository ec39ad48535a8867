"""Procedural pavement-crack images with exact masks.

Each image is a multi-octave value-noise texture with a colour tint and pixel
grain.  Cracks are smooth random polylines rasterized as capsules (every pixel
within ``width / 2`` of a segment) and darkened by a random contrast.  Optional
gaps break a crack's continuity; soft shadow polygons and darker wet patches
add the interference that makes thresholding alone fail.

Every image draws from its own jumped generator stream, so image ``i`` does
not depend on how many images are generated.
"""
from __future__ import annotations

import math
import os
import shutil
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from .data import DataError, Dataset, load_dataset, write_image, write_split
from .tensor import Rng


@dataclass
class SynthParams:
    count: int = 80
    size: tuple[int, int] = (192, 192)  # (H, W)
    cracks: tuple[int, int] = (1, 3)
    control_points: tuple[int, int] = (3, 6)
    width: tuple[float, float] = (1.5, 4.5)
    contrast: tuple[float, float] = (0.25, 0.55)
    texture_scale: float = 32.0
    shadow_prob: float = 0.35
    wet_prob: float = 0.3
    break_prob: float = 0.3
    seed: int = 7
    train_frac: float = 0.8

    def validate(self):
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        h, w = self.size
        if h < 8 or w < 8:
            raise ValueError(f"image size {self.size} is too small")
        if not 1 <= self.cracks[0] <= self.cracks[1]:
            raise ValueError(f"cracks range {self.cracks} invalid")
        if not 2 <= self.control_points[0] <= self.control_points[1]:
            raise ValueError(f"control_points range {self.control_points} invalid")
        if not 1.0 <= self.width[0] <= self.width[1]:
            raise ValueError(f"width range {self.width} must satisfy 1 <= lo <= hi")
        if not 0.0 < self.contrast[0] <= self.contrast[1] < 1.0:
            raise ValueError(f"contrast range {self.contrast} must lie in (0, 1)")
        if self.texture_scale <= 0:
            raise ValueError("texture_scale must be positive")
        if not 0.0 <= self.train_frac <= 1.0:
            raise ValueError(f"train_frac {self.train_frac} outside [0, 1]")

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"{f.name}={v}")
        return "\n".join(out) + "\n"


# -- background ----------------------------------------------------------------------

def _smooth_interp(grid: np.ndarray, h: int, w: int, cell: float) -> np.ndarray:
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    ty = ys - y0
    tx = xs - x0
    ty = ty * ty * (3 - 2 * ty)
    tx = tx * tx * (3 - 2 * tx)
    g00 = grid[np.ix_(y0, x0)]
    g01 = grid[np.ix_(y0, x0 + 1)]
    g10 = grid[np.ix_(y0 + 1, x0)]
    g11 = grid[np.ix_(y0 + 1, x0 + 1)]
    top = g00 + (g01 - g00) * tx
    bot = g10 + (g11 - g10) * tx
    return top + (bot - top) * ty[:, None]


def value_noise(h: int, w: int, scale: float, rng: Rng, octaves: int = 4) -> np.ndarray:
    """Sum of smoothly interpolated random lattices, roughly in [-1, 1]."""
    out = np.zeros((h, w))
    amp, total = 1.0, 0.0
    cell = scale
    for _ in range(octaves):
        gh = int(math.ceil(h / cell)) + 2
        gw = int(math.ceil(w / cell)) + 2
        grid = rng.uniform(gh * gw).reshape(gh, gw) * 2 - 1
        out += amp * _smooth_interp(grid, h, w, cell)
        total += amp
        amp *= 0.5
        cell = max(cell / 2, 1.0)
    return out / total


# -- cracks --------------------------------------------------------------------------

def _chaikin(pts: np.ndarray, iters: int = 2) -> np.ndarray:
    for _ in range(iters):
        q = 0.75 * pts[:-1] + 0.25 * pts[1:]
        r = 0.25 * pts[:-1] + 0.75 * pts[1:]
        mid = np.empty((2 * len(q), 2))
        mid[0::2] = q
        mid[1::2] = r
        pts = np.vstack([pts[:1], mid, pts[-1:]])
    return pts


def random_polyline(rng: Rng, h: int, w: int, n_ctrl: int) -> np.ndarray:
    """Smooth random walk of (y, x) points, mostly inside the image."""
    length = rng.uniform_range(0.4, 0.9) * min(h, w)
    step = length / (n_ctrl - 1)
    y, x = rng.uniform_range(0.1, 0.9) * h, rng.uniform_range(0.1, 0.9) * w
    theta = rng.uniform_range(0.0, 2 * math.pi)
    pts = [(y, x)]
    for _ in range(n_ctrl - 1):
        theta += rng.uniform_range(-0.6, 0.6)
        y += step * math.sin(theta)
        x += step * math.cos(theta)
        pts.append((y, x))
    return _chaikin(np.asarray(pts))


def segment_distance(h: int, w: int, a, b, box=None):
    """Distance from pixel centres to segment ab, restricted to ``box``.

    Returns ``(dist, (y0, y1, x0, x1))``; ``dist`` covers only the box.
    """
    y0, y1, x0, x1 = box if box is not None else (0, h, 0, w)
    yy = np.arange(y0, y1)[:, None] + 0.0
    xx = np.arange(x0, x1)[None, :] + 0.0
    ay, ax = a
    by, bx = b
    dy, dx = by - ay, bx - ax
    den = dy * dy + dx * dx
    if den == 0:
        t = np.zeros_like(yy * xx)
    else:
        t = np.clip(((yy - ay) * dy + (xx - ax) * dx) / den, 0.0, 1.0)
    d = np.hypot(yy - (ay + t * dy), xx - (ax + t * dx))
    return d, (y0, y1, x0, x1)


def rasterize_polyline(pts: np.ndarray, width: float, h: int, w: int, keep=None):
    """Capsule rasterization.

    Returns ``(mask, soft)``: ``mask`` marks pixels within ``width / 2`` of a kept
    segment; ``soft`` is a 0..1 coverage ramp one pixel wider, used for shading.
    """
    r = width / 2.0
    mask = np.zeros((h, w), dtype=bool)
    soft = np.zeros((h, w))
    pad = r + 2
    for i in range(len(pts) - 1):
        if keep is not None and not keep[i]:
            continue
        a, b = pts[i], pts[i + 1]
        y0 = max(int(math.floor(min(a[0], b[0]) - pad)), 0)
        y1 = min(int(math.ceil(max(a[0], b[0]) + pad)) + 1, h)
        x0 = max(int(math.floor(min(a[1], b[1]) - pad)), 0)
        x1 = min(int(math.ceil(max(a[1], b[1]) + pad)) + 1, w)
        if y0 >= y1 or x0 >= x1:
            continue
        d, _ = segment_distance(h, w, a, b, (y0, y1, x0, x1))
        mask[y0:y1, x0:x1] |= d <= r
        np.maximum(soft[y0:y1, x0:x1], np.clip(r + 0.5 - d, 0.0, 1.0), out=soft[y0:y1, x0:x1])
    soft[mask] = 1.0
    return mask, soft


def _gaps(rng: Rng, pts: np.ndarray, prob: float) -> np.ndarray:
    """Per-segment keep flags; a broken crack loses one or two stretches of 8-15% of its length."""
    seg = np.hypot(*np.diff(pts, axis=0).T)
    keep = np.ones(len(seg), dtype=bool)
    if not rng.bernoulli(prob):
        return keep
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    mid = 0.5 * (arc[:-1] + arc[1:])
    total = arc[-1]
    for _ in range(rng.integer(1, 2)):
        g = rng.uniform_range(0.08, 0.15) * total
        start = rng.uniform_range(0.15, 0.7) * total
        keep &= ~((mid >= start) & (mid < start + g))
    return keep


# -- interference --------------------------------------------------------------------

def _soft_shape(h, w, draw_fn, blur) -> np.ndarray:
    im = Image.new("L", (w, h), 0)
    draw_fn(ImageDraw.Draw(im))
    im = im.filter(ImageFilter.GaussianBlur(blur))
    return np.asarray(im, dtype=np.float64) / 255.0


def shadow_map(rng: Rng, h: int, w: int) -> np.ndarray:
    cy, cx = rng.uniform_range(0, h), rng.uniform_range(0, w)
    rad = rng.uniform_range(0.3, 0.7) * max(h, w)
    k = rng.integer(5, 8)
    ang = np.sort(rng.uniform(k)) * 2 * math.pi
    radii = rad * (0.6 + 0.4 * rng.uniform(k))
    poly = [(float(cx + r * math.cos(a)), float(cy + r * math.sin(a))) for a, r in zip(ang, radii)]
    return _soft_shape(h, w, lambda d: d.polygon(poly, fill=255), blur=max(h, w) / 40)


def wet_map(rng: Rng, h: int, w: int) -> np.ndarray:
    boxes = []
    for _ in range(rng.integer(1, 3)):
        cy, cx = rng.uniform_range(0, h), rng.uniform_range(0, w)
        ry, rx = rng.uniform_range(0.08, 0.25) * h, rng.uniform_range(0.08, 0.25) * w
        boxes.append((cx - rx, cy - ry, cx + rx, cy + ry))

    def draw(d):
        for b in boxes:
            d.ellipse(b, fill=255)

    return _soft_shape(h, w, draw, blur=max(h, w) / 60)


# -- one image -----------------------------------------------------------------------

def synth_image(p: SynthParams, rng: Rng) -> tuple[np.ndarray, np.ndarray, list]:
    """Returns ``(rgb float (H, W, 3) in [0, 1], mask bool (H, W), crack records)``."""
    h, w = p.size
    base = rng.uniform_range(0.4, 0.65)
    tex = value_noise(h, w, p.texture_scale, rng)
    lum = base + 0.12 * tex + 0.025 * rng.normal(h * w).reshape(h, w)
    mask = np.zeros((h, w), dtype=bool)
    shade = np.ones((h, w))
    records = []
    for _ in range(rng.integer(*p.cracks)):
        pts = random_polyline(rng, h, w, rng.integer(*p.control_points))
        width = rng.uniform_range(*p.width)
        contrast = rng.uniform_range(*p.contrast)
        keep = _gaps(rng, pts, p.break_prob)
        m, soft = rasterize_polyline(pts, width, h, w, keep)
        mask |= m
        np.minimum(shade, 1.0 - contrast * soft, out=shade)
        records.append({"points": pts, "width": width, "keep": keep})
    lum = lum * shade
    if rng.bernoulli(p.shadow_prob):
        lum *= 1.0 - rng.uniform_range(0.25, 0.45) * shadow_map(rng, h, w)
    if rng.bernoulli(p.wet_prob):
        lum *= 1.0 - rng.uniform_range(0.12, 0.25) * wet_map(rng, h, w)
    tint = 1.0 + rng.uniform_range(-0.06, 0.06, 3)
    rgb = np.clip(lum[:, :, None] * tint[None, None, :], 0.0, 1.0)
    return rgb, mask, records


def sample_ids(count: int) -> list[str]:
    return [f"synth_{i:04d}" for i in range(count)]


def split_ids(p: SynthParams) -> tuple[list[str], list[str]]:
    ids = sample_ids(p.count)
    perm = Rng(p.seed).permutation(p.count)
    n_train = int(math.floor(p.count * p.train_frac))
    train = sorted(ids[i] for i in perm[:n_train])
    test = sorted(ids[i] for i in perm[n_train:])
    return train, test


def gen_synthetic(p: SynthParams, out, force: bool = False) -> Dataset:
    """Write the dataset to ``out`` in the standard layout and load it back."""
    p.validate()
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise DataError(f"{out}: exists and is not a directory")
    if out.is_dir() and any(out.iterdir()):
        if not force:
            raise DataError(f"{out}: directory is not empty (use force to overwrite)")
        for sub in ("images", "masks", "splits"):
            shutil.rmtree(out / sub, ignore_errors=True)
        (out / "synth_manifest.txt").unlink(missing_ok=True)
    os.makedirs(out / "images", exist_ok=True)
    os.makedirs(out / "masks", exist_ok=True)
    base = Rng(p.seed)
    for i, sid in enumerate(sample_ids(p.count)):
        rgb, mask, _ = synth_image(p, base.stream(i + 1))
        write_image(out / "images" / f"{sid}.png", rgb)
        write_image(out / "masks" / f"{sid}.png", mask.astype(np.uint8) * 255)
    train, test = split_ids(p)
    write_split(out, "train", train)
    write_split(out, "test", test)
    (out / "synth_manifest.txt").write_text(p.to_text(), encoding="utf-8")
    return load_dataset(out)
