"""Synthetic word scenes and the on-disk dataset layout.

A scene is a textured background with a few non-overlapping oriented word
boxes. Each word is a filled plate carrying bar-shaped glyph strokes, and
the text mask marks exactly the pixels whose centres fall inside a box.

Dataset directories hold ``NNNN.ppm`` (P6 image), ``NNNN.boxes.txt`` (one
``cx cy w h theta`` line per word) and ``NNNN.mask.pgm`` (P5, 255 = text).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import OrientedBox, format_box, iou_rotated, read_boxes

__all__ = [
    "SceneSample",
    "SceneConfig",
    "generate_scene",
    "generate_scenes",
    "render_mask",
    "write_ppm",
    "read_ppm",
    "write_pgm",
    "read_pgm",
    "write_dataset",
    "read_dataset",
    "dataset_stems",
]


@dataclass
class SceneSample:
    image: np.ndarray  # (3, S, S) in [0, 1]
    boxes: list[OrientedBox]
    mask: np.ndarray  # (S, S) uint8, 1 = text
    name: str = ""

    @property
    def size(self) -> int:
        return self.image.shape[1]

    def box_array(self) -> np.ndarray:
        return np.array([b.as_array() for b in self.boxes]).reshape(-1, 5)


@dataclass
class SceneConfig:
    size: int = 128
    words: tuple[int, int] = (1, 4)
    height: tuple[float, float] = (7.0, 16.0)
    aspect: tuple[float, float] = (2.0, 6.0)
    rotation: float = 0.15  # max |theta| in radians
    noise: float = 0.04
    max_trials: int = 100
    margin: float = 2.0
    extra: dict = field(default_factory=dict)


def _inside(px, py, box: OrientedBox, grow: float = 0.0):
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx, dy = px - box.cx, py - box.cy
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (np.abs(u) < box.w / 2 + grow) & (np.abs(v) < box.h / 2 + grow), u, v


def render_mask(boxes, size: int) -> np.ndarray:
    """Binary map of pixels whose centres lie inside any box."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    mask = np.zeros((size, size), dtype=np.uint8)
    for b in boxes:
        inside, _, _ = _inside(xs, ys, b)
        mask |= inside.astype(np.uint8)
    return mask


def _background(rng, size: int, noise: float) -> np.ndarray:
    base = rng.uniform(0.25, 0.75, size=(3, 1, 1))
    coarse = rng.normal(0.0, 0.12, size=(3, 6, 6))
    # bilinear upsample of the coarse field
    grid = np.linspace(0, 5, size)
    i0 = np.minimum(np.floor(grid).astype(int), 4)
    f = grid - i0
    rows = coarse[:, i0, :] * (1 - f)[None, :, None] + coarse[:, i0 + 1, :] * f[None, :, None]
    smooth = rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i0 + 1] * f[None, None, :]
    img = base + smooth + rng.normal(0.0, noise, size=(3, size, size))
    return np.clip(img, 0.0, 1.0)


def _draw_word(img: np.ndarray, box: OrientedBox, rng) -> None:
    size = img.shape[1]
    ext = box.enclosing_rect()
    x0 = max(int(math.floor(ext.cx - ext.w / 2)) - 1, 0)
    x1 = min(int(math.ceil(ext.cx + ext.w / 2)) + 1, size)
    y0 = max(int(math.floor(ext.cy - ext.h / 2)) - 1, 0)
    y1 = min(int(math.ceil(ext.cy + ext.h / 2)) + 1, size)
    local = img[:, y0:y1, x0:x1].mean(axis=(1, 2))
    plate = np.where(local.mean() > 0.5, rng.uniform(0.0, 0.15, 3), rng.uniform(0.85, 1.0, 3))
    ink = 1.0 - plate
    n_chars = max(1, int(round(box.w / (0.65 * box.h))))
    cell = box.w / n_chars
    bands = rng.integers(0, 3, size=n_chars)
    doubles = rng.random(n_chars) < 0.5
    # 2x2 supersampling for anti-aliased edges
    acc_plate = np.zeros((y1 - y0, x1 - x0))
    acc_ink = np.zeros_like(acc_plate)
    for oy in (0.25, 0.75):
        for ox in (0.25, 0.75):
            ys, xs = np.mgrid[y0:y1, x0:x1]
            inside, u, v = _inside(xs + ox, ys + oy, box)
            fu = (u + box.w / 2) / cell
            k = np.clip(np.floor(fu).astype(int), 0, n_chars - 1)
            f = fu - k
            vn = (v + box.h / 2) / box.h
            vert = (f > 0.15) & (f < 0.35) & (vn > 0.15) & (vn < 0.85)
            vert |= doubles[k] & (f > 0.6) & (f < 0.8) & (vn > 0.15) & (vn < 0.85)
            centre = 0.25 + 0.25 * bands[k]
            horiz = (np.abs(vn - centre) < 0.09) & (f > 0.15) & (f < 0.8)
            acc_plate += inside
            acc_ink += inside & (vert | horiz)
    acc_plate /= 4.0
    acc_ink /= 4.0
    region = img[:, y0:y1, x0:x1]
    region *= 1.0 - acc_plate
    region += plate[:, None, None] * (acc_plate - acc_ink) + ink[:, None, None] * acc_ink


def generate_scene(seed: int, cfg: SceneConfig | None = None) -> SceneSample:
    """Deterministic scene for ``seed``; placement failures yield fewer words, never an error."""
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(seed)
    size = cfg.size
    img = _background(rng, size, cfg.noise)
    n_words = int(rng.integers(cfg.words[0], cfg.words[1] + 1))
    boxes: list[OrientedBox] = []
    for _ in range(n_words):
        for _ in range(cfg.max_trials):
            h = rng.uniform(*cfg.height)
            w = h * rng.uniform(*cfg.aspect)
            theta = rng.uniform(-cfg.rotation, cfg.rotation) if cfg.rotation > 0 else 0.0
            c, s = abs(math.cos(theta)), abs(math.sin(theta))
            ex = (w * c + h * s) / 2 + cfg.margin
            ey = (w * s + h * c) / 2 + cfg.margin
            if 2 * ex >= size or 2 * ey >= size:
                continue
            box = OrientedBox(rng.uniform(ex, size - ex), rng.uniform(ey, size - ey), w, h, theta)
            grown = OrientedBox(box.cx, box.cy, w + 2 * cfg.margin, h + 2 * cfg.margin, theta)
            if all(iou_rotated(grown, OrientedBox(o.cx, o.cy, o.w + 2 * cfg.margin, o.h + 2 * cfg.margin, o.theta)) == 0.0
                   for o in boxes):
                boxes.append(box)
                break
    for b in boxes:
        _draw_word(img, b, rng)
    return SceneSample(img.astype(np.float32), boxes, render_mask(boxes, size), name=f"seed{seed}")


def generate_scenes(seeds, cfg: SceneConfig | None = None) -> list[SceneSample]:
    return [generate_scene(int(s), cfg) for s in seeds]


# -- portable any-map I/O ---------------------------------------------------

_HEADER = re.compile(rb"^(P[56])\s+(?:#.*\s+)*(\d+)\s+(\d+)\s+(\d+)\s")


def _write_pnm(path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _HEADER.match(raw)
    if not m or m.group(1) != magic:
        raise ValueError(f"{path}: not a binary {magic.decode()} file")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit maps are supported")
    body = raw[m.end():]
    need = w * h * channels
    if len(body) < need:
        raise ValueError(f"{path}: truncated pixel data ({len(body)} of {need} bytes)")
    arr = np.frombuffer(body[:need], dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def write_ppm(path, image: np.ndarray) -> None:
    """``image`` is ``(3, H, W)`` in [0, 1]."""
    rgb = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255), 0, 255)
    _write_pnm(path, b"P6", rgb)


def read_ppm(path) -> np.ndarray:
    return (_read_pnm(path, b"P6", 3).transpose(2, 0, 1) / 255.0).astype(np.float32)


def write_pgm(path, gray: np.ndarray) -> None:
    """8-bit grayscale; values already in 0..255."""
    _write_pnm(path, b"P5", np.clip(np.rint(gray), 0, 255))


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def write_dataset(directory, samples) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stems = []
    for i, s in enumerate(samples):
        stem = directory / f"{i:04d}"
        write_ppm(stem.with_suffix(".ppm"), s.image)
        with open(f"{stem}.boxes.txt", "w") as fh:
            for b in s.boxes:
                fh.write(format_box(b) + "\n")
        write_pgm(f"{stem}.mask.pgm", s.mask.astype(np.float64) * 255)
        stems.append(stem)
    return stems


def dataset_stems(directory) -> list[str]:
    return sorted(p.name[:-4] for p in Path(directory).glob("*.ppm"))


def read_dataset(directory) -> list[SceneSample]:
    directory = Path(directory)
    stems = dataset_stems(directory)
    if not stems:
        raise FileNotFoundError(f"no .ppm images in {directory}")
    out = []
    for stem in stems:
        image = read_ppm(directory / f"{stem}.ppm")
        boxes = [b for b, _ in read_boxes(directory / f"{stem}.boxes.txt")]
        mask_path = directory / f"{stem}.mask.pgm"
        mask = (read_pgm(mask_path) > 127).astype(np.uint8) if mask_path.exists() else render_mask(boxes, image.shape[1])
        out.append(SceneSample(image, boxes, mask, name=stem))
    return out
