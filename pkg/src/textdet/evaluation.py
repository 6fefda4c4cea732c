"""Word-level precision / recall / F-measure with greedy one-to-one IoU matching."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

from .geometry import Detection, OrientedBox, iou_axis_aligned, iou_rotated

__all__ = ["ImageMatch", "EvalReport", "box_iou", "match_image", "evaluate_detections", "write_report"]


def box_iou(a: OrientedBox, b: OrientedBox, rotated: bool) -> float:
    if rotated:
        return iou_rotated(a, b)
    return iou_axis_aligned(a.enclosing_rect(), b.enclosing_rect())


@dataclass
class ImageMatch:
    pairs: list[tuple[int, int, float]]  # (detection index, gt index, iou)
    n_det: int
    n_gt: int


@dataclass
class EvalReport:
    recall: float
    precision: float
    f_measure: float
    matches: int
    n_det: int
    n_gt: int
    per_image: list[ImageMatch] = field(default_factory=list)

    def line(self) -> str:
        return f"{self.precision:.4f} {self.recall:.4f} {self.f_measure:.4f}"


def match_image(dets: Sequence[Detection], gts: Sequence[OrientedBox], iou_threshold: float = 0.5,
                rotated: bool = False) -> ImageMatch:
    """Detections in descending score order each take the best unmatched ground truth."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = [False] * len(gts)
    pairs = []
    for i in order:
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = box_iou(dets[i].box, g, rotated)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_threshold:
            taken[best_j] = True
            pairs.append((i, best_j, best))
    return ImageMatch(pairs, len(dets), len(gts))


def evaluate_detections(dets_per_image: Sequence[Sequence[Detection]], gts_per_image: Sequence[Sequence[OrientedBox]],
                        iou_threshold: float = 0.5, rotated: bool = False) -> EvalReport:
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detection and ground-truth lists cover different numbers of images")
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    per_image = [match_image(d, g, iou_threshold, rotated) for d, g in zip(dets_per_image, gts_per_image)]
    m = sum(len(p.pairs) for p in per_image)
    nd = sum(p.n_det for p in per_image)
    ng = sum(p.n_gt for p in per_image)
    recall = m / ng if ng else 0.0
    precision = m / nd if nd else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return EvalReport(recall, precision, f, m, nd, ng, per_image)


def write_report(path, report: EvalReport, names: Sequence[str] | None = None) -> None:
    """Per-image CSV: name, detections, ground truths, matches, precision, recall."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "detections", "ground_truths", "matches", "precision", "recall"])
        for k, im in enumerate(report.per_image):
            name = names[k] if names else str(k)
            p = len(im.pairs) / im.n_det if im.n_det else 0.0
            r = len(im.pairs) / im.n_gt if im.n_gt else 0.0
            w.writerow([name, im.n_det, im.n_gt, len(im.pairs), f"{p:.4f}", f"{r:.4f}"])
        w.writerow(["ALL", report.n_det, report.n_gt, report.matches, f"{report.precision:.4f}", f"{report.recall:.4f}"])
