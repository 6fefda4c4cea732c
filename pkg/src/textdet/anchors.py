"""Default word boxes per prediction layer, ground-truth matching and targets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import OrientedBox, encode_array, enclosing_rects, iou_matrix_aligned, iou_rotated

__all__ = [
    "ASPECT_RATIOS",
    "TABLE1_SCALES",
    "LayerAnchorSpec",
    "AnchorSet",
    "Assignment",
    "TargetBundle",
    "per_location_shapes",
    "generate_default_boxes",
    "match_anchors",
    "build_targets",
    "format_anchor_dump",
]

ASPECT_RATIOS = (0.5, 1.0, 2.0, 3.0, 5.0, 7.0, 9.0, 11.0)

# default-box scales in pixels of a 704x704 input, three per layer
TABLE1_SCALES = {
    "AIF-1": (7.7, 17.9, 28.2),
    "AIF-2": (38.4, 48.6, 58.9),
    "AIF-3": (69.1, 79.4, 89.6),
    "Inc-4": (102.4, 133.1, 163.8),
    "Inc-5": (194.6, 225.3, 256.0),
    "Inc-6": (286.7, 317.4, 348.2),
    "Inc-7": (378.9, 409.6, 440.3),
}


@dataclass(frozen=True)
class LayerAnchorSpec:
    layer_name: str
    stride: int
    scales: tuple[float, ...]
    aspect_ratios: tuple[float, ...] = ASPECT_RATIOS
    orientations: tuple[str, ...] = ("height", "width")

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "aspect_ratios", tuple(float(r) for r in self.aspect_ratios))
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError(f"{self.layer_name}: scales must be strictly increasing")
        if any(r <= 0 for r in self.aspect_ratios):
            raise ValueError(f"{self.layer_name}: aspect ratios must be positive")
        if self.stride < 1:
            raise ValueError(f"{self.layer_name}: stride must be >= 1")
        for o in self.orientations:
            if o not in ("height", "width"):
                raise ValueError(f"unknown orientation {o!r}")

    @property
    def boxes_per_location(self) -> int:
        return len(per_location_shapes(self))


def per_location_shapes(spec: LayerAnchorSpec) -> np.ndarray:
    """``(K, 2)`` widths and heights at one location.

    A scale is used either as the box height (width = scale * ratio) or as the
    box width (height = scale * ratio). At ratio 1 both give the same square,
    which is kept once.
    """
    shapes = []
    for s in spec.scales:
        for r in spec.aspect_ratios:
            for orient in spec.orientations:
                wh = (s * r, s) if orient == "height" else (s, s * r)
                if orient != spec.orientations[0] and r == 1.0:
                    continue
                shapes.append(wh)
    return np.array(shapes, dtype=float)


@dataclass
class AnchorSet:
    boxes: np.ndarray  # (A, 4) cx, cy, w, h
    layer_offsets: dict[str, tuple[int, int]]
    grids: dict[str, tuple[int, int]]
    per_location: dict[str, int]
    image_size: int

    def __len__(self) -> int:
        return len(self.boxes)

    def box(self, i: int) -> OrientedBox:
        cx, cy, w, h = self.boxes[i]
        return OrientedBox(cx, cy, w, h, 0.0)


def generate_default_boxes(specs: Sequence[LayerAnchorSpec], image_size: int) -> AnchorSet:
    """Anchors ordered layer, row, column, shape; centres at ``(i + 0.5) * stride``."""
    chunks, offsets, grids, per_loc = [], {}, {}, {}
    start = 0
    for spec in specs:
        if image_size % spec.stride:
            raise ValueError(f"{spec.layer_name}: image size {image_size} not divisible by stride {spec.stride}")
        g = image_size // spec.stride
        shapes = per_location_shapes(spec)
        k = len(shapes)
        centres = (np.arange(g) + 0.5) * spec.stride
        cy, cx = np.meshgrid(centres, centres, indexing="ij")
        boxes = np.empty((g, g, k, 4))
        boxes[..., 0] = cx[..., None]
        boxes[..., 1] = cy[..., None]
        boxes[..., 2] = shapes[:, 0]
        boxes[..., 3] = shapes[:, 1]
        boxes = boxes.reshape(-1, 4)
        chunks.append(boxes)
        offsets[spec.layer_name] = (start, start + len(boxes))
        grids[spec.layer_name] = (g, g)
        per_loc[spec.layer_name] = k
        start += len(boxes)
    return AnchorSet(np.concatenate(chunks), offsets, grids, per_loc, image_size)


@dataclass
class Assignment:
    gt_index: np.ndarray  # (A,) matched ground truth, -1 for negatives
    overlap: np.ndarray  # (A,) IoU with the matched (or best) ground truth

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.gt_index >= 0)


@dataclass
class TargetBundle:
    labels: np.ndarray  # (A,) 1 text, 0 background, -1 ignored
    offsets: np.ndarray  # (A, 5), zero except at positives
    positive_count: int
    extra: dict = field(default_factory=dict)


def _overlaps(anchors: AnchorSet, gts: np.ndarray, rotated: bool) -> np.ndarray:
    if not rotated:
        return iou_matrix_aligned(anchors.boxes, enclosing_rects(gts))
    out = np.zeros((len(anchors), len(gts)))
    rects = enclosing_rects(gts)
    coarse = iou_matrix_aligned(anchors.boxes, rects)
    for j, g in enumerate(gts):
        gb = OrientedBox.from_array(g)
        for i in np.flatnonzero(coarse[:, j] > 0):
            out[i, j] = iou_rotated(anchors.box(i), gb)
    return out


def match_anchors(anchors: AnchorSet, gts, pos_threshold: float = 0.5, rotated: bool = False) -> Assignment:
    """Positive anchors: each ground truth's best anchor, plus any anchor with IoU >= threshold.

    Overlap is taken against the ground truth's axis-aligned hull unless
    ``rotated``. Ties prefer the lower anchor index, then the lower
    ground-truth index. Ground truths claim their best anchor in index order,
    each skipping anchors already claimed, so every ground truth keeps at
    least one positive as long as there are at least as many anchors as
    ground truths; surplus ground truths claim nothing.
    """
    if len(anchors) == 0:
        raise ValueError("empty anchor set")
    if not 0.0 < pos_threshold < 1.0:
        raise ValueError(f"pos_threshold must be in (0, 1), got {pos_threshold}")
    gts = _gt_array(gts)
    a = len(anchors)
    if len(gts) == 0:
        return Assignment(np.full(a, -1), np.zeros(a))
    iou = _overlaps(anchors, gts, rotated)
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(a), best_gt]
    gt_index = np.where(best_iou >= pos_threshold, best_gt, -1)
    overlap = best_iou.copy()
    claimed = np.zeros(a, dtype=bool)
    for j in range(min(len(gts), a)):
        col = np.where(claimed, -1.0, iou[:, j])
        i = int(col.argmax())
        claimed[i] = True
        gt_index[i] = j
        overlap[i] = iou[i, j]
    return Assignment(gt_index, overlap)


def _gt_array(gts) -> np.ndarray:
    if isinstance(gts, np.ndarray):
        return gts.reshape(-1, 5).astype(float)
    return np.array([g.as_array() for g in gts], dtype=float).reshape(-1, 5)


def build_targets(assignment: Assignment, anchors: AnchorSet, gts, neg_pos_ratio: float = 3.0,
                  negative_losses: np.ndarray | None = None, min_negatives: int = 32) -> TargetBundle:
    """Classification labels and regression targets with hard-negative mining.

    Negatives are ranked by ``negative_losses`` (descending, ties by index)
    and the top ``neg_pos_ratio * positives`` are kept, or ``min_negatives``
    when there are no positives. The remainder is labelled -1 (ignored).
    """
    gts = _gt_array(gts)
    a = len(anchors)
    if len(assignment.gt_index) != a:
        raise ValueError("assignment does not match the anchor set")
    pos = assignment.gt_index >= 0
    n_pos = int(pos.sum())
    labels = np.full(a, -1, dtype=np.int64)
    labels[pos] = 1
    offsets = np.zeros((a, 5))
    if n_pos:
        offsets[pos] = encode_array(gts[assignment.gt_index[pos]], anchors.boxes[pos])
    quota = int(neg_pos_ratio * n_pos) if n_pos else int(min_negatives)
    neg_idx = np.flatnonzero(~pos)
    if negative_losses is None:
        ranked = neg_idx
    else:
        losses = np.asarray(negative_losses, dtype=float)[neg_idx]
        ranked = neg_idx[np.argsort(-losses, kind="stable")]
    labels[ranked[:quota]] = 0
    return TargetBundle(labels, offsets, n_pos)


def format_anchor_dump(anchors: AnchorSet, specs: Sequence[LayerAnchorSpec], summary: bool = False) -> str:
    """Text dump: one header per layer, then ``layer row col cx cy w h`` per box."""
    lines = [f"# image_size {anchors.image_size} total {len(anchors)}"]
    for spec in specs:
        start, stop = anchors.layer_offsets[spec.layer_name]
        gh, gw = anchors.grids[spec.layer_name]
        k = anchors.per_location[spec.layer_name]
        scales = " ".join(f"{s:g}" for s in spec.scales)
        lines.append(
            f"# layer {spec.layer_name} stride {spec.stride} grid {gh}x{gw} "
            f"scales {scales} per_location {k} count {stop - start}"
        )
        if summary:
            continue
        boxes = anchors.boxes[start:stop]
        loc = np.arange(len(boxes)) // k
        rows, cols = loc // gw, loc % gw
        fmt = spec.layer_name.replace("%", "%%") + " %d %d %.4f %.4f %.4f %.4f"
        lines.extend(fmt % row for row in zip(rows.tolist(), cols.tolist(), *boxes.T.tolist()))
    return "\n".join(lines) + "\n"
