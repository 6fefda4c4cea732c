"""Oriented word boxes: overlap, suppression and anchor-relative offsets.

Boxes are ``(cx, cy, w, h, theta)`` in image pixels with y pointing down.
``theta`` rotates the box about its centre and is kept in (-pi/2, pi/2]
because a word rectangle is unchanged by a half turn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "OrientedBox",
    "Detection",
    "BoxOffsets",
    "DegenerateBoxError",
    "normalize_angle",
    "iou_axis_aligned",
    "iou_rotated",
    "polygon_area",
    "clip_polygon",
    "nms",
    "encode_offsets",
    "decode_offsets",
    "encode_array",
    "decode_array",
    "enclosing_rects",
    "iou_matrix_aligned",
    "format_box",
    "parse_box_line",
    "read_boxes",
    "write_boxes",
    "icdar_corners",
]

HALF_PI = math.pi / 2


class DegenerateBoxError(ValueError):
    pass


def normalize_angle(theta: float) -> float:
    """Shift by multiples of pi into (-pi/2, pi/2]."""
    return theta - math.pi * math.ceil((theta - HALF_PI) / math.pi)


@dataclass(frozen=True)
class OrientedBox:
    cx: float
    cy: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.w, self.h, self.theta)):
            raise ValueError("box parameters must be finite")
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h, self.theta])

    @classmethod
    def from_array(cls, a) -> "OrientedBox":
        return cls(*(float(v) for v in a[:5]))

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> np.ndarray:
        """Four corners, top-left first, clockwise on screen (y down)."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        u = np.array([-1, 1, 1, -1]) * self.w / 2
        v = np.array([-1, -1, 1, 1]) * self.h / 2
        return np.stack([self.cx + u * c - v * s, self.cy + u * s + v * c], axis=1)

    def enclosing_rect(self) -> "OrientedBox":
        c, s = abs(math.cos(self.theta)), abs(math.sin(self.theta))
        return OrientedBox(self.cx, self.cy, self.w * c + self.h * s, self.w * s + self.h * c, 0.0)

    def scaled(self, s: float) -> "OrientedBox":
        return OrientedBox(self.cx * s, self.cy * s, self.w * s, self.h * s, self.theta)


@dataclass(frozen=True)
class Detection:
    box: OrientedBox
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class BoxOffsets:
    tx: float
    ty: float
    tw: float
    th: float
    ttheta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th, self.ttheta])


def iou_axis_aligned(a: OrientedBox, b: OrientedBox) -> float:
    if a.theta != 0.0 or b.theta != 0.0:
        raise ValueError("iou_axis_aligned needs theta == 0 on both boxes; use iou_rotated")
    iw = min(a.cx + a.w / 2, b.cx + b.w / 2) - max(a.cx - a.w / 2, b.cx - b.w / 2)
    ih = min(a.cy + a.h / 2, b.cy + b.h / 2) - max(a.cy - a.h / 2, b.cy - b.h / 2)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return min(1.0, inter / (a.area + b.area - inter))


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` by the convex, counter-clockwise (x right, y up) ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for k in range(n):
        if not out:
            break
        ax, ay = clip[k]
        bx, by = clip[(k + 1) % n]
        ex, ey = bx - ax, by - ay
        pts, out = out, []
        side = [ex * (py - ay) - ey * (px - ax) for px, py in pts]
        for i in range(len(pts)):
            p, q = pts[i], pts[(i + 1) % len(pts)]
            sp, sq = side[i], side[(i + 1) % len(pts)]
            if sp >= 0:
                out.append(p)
            if (sp >= 0) != (sq >= 0):
                t = sp / (sp - sq)
                out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return np.array(out, dtype=float).reshape(-1, 2)


def iou_rotated(a: OrientedBox, b: OrientedBox) -> float:
    """Exact IoU of two rotated rectangles via convex polygon clipping."""
    for box in (a, b):
        if box.area < 1e-12:
            raise DegenerateBoxError(f"near-zero area box: {box}")
    if a.theta == 0.0 and b.theta == 0.0:
        return iou_axis_aligned(a, b)
    # cheap reject on centre distance versus half diagonals
    ra = 0.5 * math.hypot(a.w, a.h)
    rb = 0.5 * math.hypot(b.w, b.h)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) >= ra + rb:
        return 0.0
    inter = polygon_area(clip_polygon(a.corners(), b.corners()))
    union = a.area + b.area - inter
    return min(1.0, max(0.0, inter / union))


def nms(dets: Sequence[Detection], iou_threshold: float, rotated: bool = True) -> list[Detection]:
    """Greedy suppression in descending score order (ties keep input order)."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    if rotated:
        overlap = iou_rotated
    else:
        def overlap(p, q):
            return iou_axis_aligned(p.enclosing_rect(), q.enclosing_rect())
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if all(overlap(d.box, k.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def encode_array(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Rows ``(cx, cy, w, h, theta)`` against axis-aligned anchors ``(cx, cy, w, h)``."""
    gt = np.asarray(gt, dtype=float)
    a = np.asarray(anchors, dtype=float)
    if (gt[:, 2:4] <= 0).any() or (a[:, 2:4] <= 0).any():
        raise ValueError("box sizes must be positive")
    return np.stack(
        [
            (gt[:, 0] - a[:, 0]) / a[:, 2],
            (gt[:, 1] - a[:, 1]) / a[:, 3],
            np.log(gt[:, 2] / a[:, 2]),
            np.log(gt[:, 3] / a[:, 3]),
            gt[:, 4],
        ],
        axis=1,
    )


def decode_array(offsets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    t = np.asarray(offsets, dtype=float)
    a = np.asarray(anchors, dtype=float)
    theta = t[:, 4] - np.pi * np.ceil((t[:, 4] - HALF_PI) / np.pi)
    return np.stack(
        [
            a[:, 0] + t[:, 0] * a[:, 2],
            a[:, 1] + t[:, 1] * a[:, 3],
            a[:, 2] * np.exp(t[:, 2]),
            a[:, 3] * np.exp(t[:, 3]),
            theta,
        ],
        axis=1,
    )


def encode_offsets(gt: OrientedBox, anchor: OrientedBox) -> BoxOffsets:
    if anchor.theta != 0.0:
        raise ValueError("anchors must be axis-aligned")
    row = encode_array(gt.as_array()[None], anchor.as_array()[None, :4])[0]
    return BoxOffsets(*(float(v) for v in row))


def decode_offsets(offsets: BoxOffsets, anchor: OrientedBox) -> OrientedBox:
    row = decode_array(offsets.as_array()[None], anchor.as_array()[None, :4])[0]
    return OrientedBox.from_array(row)


def enclosing_rects(boxes: np.ndarray) -> np.ndarray:
    """Axis-aligned ``(cx, cy, w, h)`` hulls of ``(M, 5)`` rotated boxes."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 5)
    c, s = np.abs(np.cos(boxes[:, 4])), np.abs(np.sin(boxes[:, 4]))
    w = boxes[:, 2] * c + boxes[:, 3] * s
    h = boxes[:, 2] * s + boxes[:, 3] * c
    return np.stack([boxes[:, 0], boxes[:, 1], w, h], axis=1)


def iou_matrix_aligned(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of axis-aligned ``(cx, cy, w, h)`` rows, shape ``(len(a), len(b))``."""
    a = np.asarray(a, dtype=float)[:, None, :]
    b = np.asarray(b, dtype=float)[None, :, :]
    iw = np.minimum(a[..., 0] + a[..., 2] / 2, b[..., 0] + b[..., 2] / 2) - np.maximum(
        a[..., 0] - a[..., 2] / 2, b[..., 0] - b[..., 2] / 2
    )
    ih = np.minimum(a[..., 1] + a[..., 3] / 2, b[..., 1] + b[..., 3] / 2) - np.maximum(
        a[..., 1] - a[..., 3] / 2, b[..., 1] - b[..., 3] / 2
    )
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return np.minimum(inter / union, 1.0)


def format_box(box: OrientedBox, score: float | None = None) -> str:
    vals = [box.cx, box.cy, box.w, box.h, box.theta]
    if score is not None:
        vals.append(score)
    return " ".join(f"{v:.10g}" for v in vals)


def parse_box_line(line: str) -> tuple[OrientedBox, float | None]:
    parts = line.split()
    if len(parts) not in (5, 6):
        raise ValueError(f"expected 'cx cy w h theta [score]', got {line!r}")
    vals = [float(p) for p in parts]
    return OrientedBox(*vals[:5]), (vals[5] if len(vals) == 6 else None)


def read_boxes(path) -> list[tuple[OrientedBox, float | None]]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                rows.append(parse_box_line(line))
    return rows


def write_boxes(path, boxes: Iterable[OrientedBox | Detection]) -> None:
    with open(path, "w") as fh:
        for b in boxes:
            if isinstance(b, Detection):
                fh.write(format_box(b.box, b.score) + "\n")
            else:
                fh.write(format_box(b) + "\n")


def icdar_corners(box: OrientedBox) -> str:
    """``x1,y1,...,x4,y4`` clockwise from the top-left corner."""
    return ",".join(f"{v:.2f}" for v in box.corners().reshape(-1))
