"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import itertools
import math

import numpy as np

from textdet.geometry import OrientedBox, iou_axis_aligned, iou_rotated


def random_box(rng, theta: bool = True, span: float = 20.0) -> OrientedBox:
    return OrientedBox(
        rng.uniform(-span, span), rng.uniform(-span, span),
        rng.uniform(1, 15), rng.uniform(1, 15),
        rng.uniform(-math.pi / 2, math.pi / 2) if theta else 0.0,
    )


def inside(box: OrientedBox, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    dx, dy = px - box.cx, py - box.cy
    c, s = math.cos(box.theta), math.sin(box.theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (np.abs(u) <= box.w / 2) & (np.abs(v) <= box.h / 2)


def monte_carlo_iou(a: OrientedBox, b: OrientedBox, n: int, rng) -> float:
    """Uniform point sampling over the joint bounding square."""
    pts = np.vstack([a.corners(), b.corners()])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    px = rng.uniform(lo[0], hi[0], n)
    py = rng.uniform(lo[1], hi[1], n)
    ia, ib = inside(a, px, py), inside(b, px, py)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def brute_force_nms(dets, thr: float, rotated: bool = True):
    """Repeatedly keep the best remaining detection and drop whatever it overlaps."""
    def overlap(p, q):
        if rotated:
            return iou_rotated(p, q)
        return iou_axis_aligned(p.enclosing_rect(), q.enclosing_rect())

    remaining = list(range(len(dets)))
    kept = []
    while remaining:
        best = remaining[0]
        for i in remaining[1:]:
            if dets[i].score > dets[best].score:
                best = i
        kept.append(dets[best])
        remaining = [i for i in remaining if i != best and overlap(dets[i].box, dets[best].box) <= thr]
    return kept


def exhaustive_match(iou: np.ndarray, pos_threshold: float):
    """Reference anchor matcher written as explicit loops.

    ``iou`` is ``(anchors, gts)``. Returns the ground-truth index per anchor
    (-1 for none).
    """
    a, g = iou.shape
    out = [-1] * a
    for i in range(a):
        best_j, best_v = -1, -1.0
        for j in range(g):
            if iou[i, j] > best_v:
                best_j, best_v = j, iou[i, j]
        if g and best_v >= pos_threshold:
            out[i] = best_j
    taken = set()
    for j in range(g):
        best_i, best_v = -1, -2.0
        for i in range(a):
            if i in taken:
                continue
            if iou[i, j] > best_v:
                best_i, best_v = i, iou[i, j]
        if best_i < 0:
            continue  # more ground truths than anchors
        taken.add(best_i)
        out[best_i] = j
    return out


def optimal_match_count(iou: np.ndarray, thr: float) -> int:
    """Maximum one-to-one matching size over pairs with IoU >= thr (exhaustive)."""
    nd, ng = iou.shape
    best = 0
    for perm in itertools.permutations(range(max(nd, ng)), nd) if nd <= ng else []:
        best = max(best, sum(1 for d, g in enumerate(perm) if g < ng and iou[d, g] >= thr))
    if nd > ng:
        for perm in itertools.permutations(range(nd), ng):
            best = max(best, sum(1 for g, d in enumerate(perm) if iou[d, g] >= thr))
    return best
