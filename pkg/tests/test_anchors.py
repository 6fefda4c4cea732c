import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textdet.anchors import (
    ASPECT_RATIOS,
    TABLE1_SCALES,
    AnchorSet,
    LayerAnchorSpec,
    build_targets,
    format_anchor_dump,
    generate_default_boxes,
    match_anchors,
    per_location_shapes,
)
from textdet.config import builtin_config
from textdet.geometry import enclosing_rects, iou_matrix_aligned
from textdet.tensor import Tensor, softmax_cross_entropy

from .oracles import exhaustive_match


def small_anchor_set(rng, n):
    boxes = np.column_stack([rng.uniform(0, 30, n), rng.uniform(0, 30, n), rng.uniform(2, 12, n), rng.uniform(2, 12, n)])
    return AnchorSet(boxes, {"x": (0, n)}, {"x": (1, n)}, {"x": 1}, 32)


def random_gts(rng, m):
    return np.column_stack([rng.uniform(0, 30, m), rng.uniform(0, 30, m), rng.uniform(2, 12, m),
                            rng.uniform(2, 12, m), rng.uniform(-0.6, 0.6, m)])


class TestDefaultBoxes:
    def test_45_per_location(self):
        spec = LayerAnchorSpec("AIF-1", 8, TABLE1_SCALES["AIF-1"])
        assert spec.boxes_per_location == 45
        assert len(per_location_shapes(spec)) == 3 * 8 * 2 - 3

    def test_ratio_one_duplicate_removed(self):
        shapes = per_location_shapes(LayerAnchorSpec("x", 8, (5.0,)))
        squares = [tuple(s) for s in shapes if s[0] == s[1]]
        assert squares == [(5.0, 5.0)]
        assert len({tuple(s) for s in shapes}) == len(shapes)

    def test_scale_as_height_and_width(self):
        shapes = {tuple(s) for s in per_location_shapes(LayerAnchorSpec("x", 8, (4.0,), (3.0,)))}
        assert shapes == {(12.0, 4.0), (4.0, 12.0)}

    def test_table_values(self):
        assert TABLE1_SCALES["AIF-1"] == (7.7, 17.9, 28.2)
        assert TABLE1_SCALES["Inc-7"] == (378.9, 409.6, 440.3)
        assert ASPECT_RATIOS == (0.5, 1, 2, 3, 5, 7, 9, 11)

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            LayerAnchorSpec("x", 8, (3.0, 2.0))
        with pytest.raises(ValueError):
            LayerAnchorSpec("x", 8, (1.0,), (0.0,))

    def test_centres_and_order(self):
        spec = LayerAnchorSpec("a", 4, (1.0, 2.0, 3.0))
        aset = generate_default_boxes([spec], 8)
        k = 45
        assert len(aset) == 2 * 2 * k
        # row-major locations, shapes innermost
        assert aset.boxes[0, :2].tolist() == [2.0, 2.0]
        assert aset.boxes[k, :2].tolist() == [6.0, 2.0]
        assert aset.boxes[2 * k, :2].tolist() == [2.0, 6.0]
        np.testing.assert_array_equal(aset.boxes[:k, 2:], per_location_shapes(spec))

    @pytest.mark.parametrize("name", ["desk", "full", "tiny"])
    def test_count_closed_form(self, name):
        cfg = builtin_config(name)
        aset = generate_default_boxes(cfg.anchor_specs(), cfg.input_size)
        expected = sum((cfg.input_size // p.stride) ** 2 * 45 for p in cfg.prediction_layers)
        assert len(aset) == expected

    def test_desk_total(self):
        cfg = builtin_config("desk")
        assert [(cfg.input_size // p.stride) for p in cfg.prediction_layers] == [16, 8, 4]
        assert len(generate_default_boxes(cfg.anchor_specs(), 128)) == 15120

    def test_full_grid(self):
        cfg = builtin_config("full")
        aset = generate_default_boxes(cfg.anchor_specs(), cfg.input_size)
        assert aset.grids["AIF-1"] == (64, 64) and aset.per_location["AIF-1"] == 45

    def test_dump_format(self):
        spec = LayerAnchorSpec("L", 4, (1.0, 2.0, 3.0))
        aset = generate_default_boxes([spec], 8)
        text = format_anchor_dump(aset, [spec])
        lines = text.splitlines()
        assert lines[1] == "# layer L stride 4 grid 2x2 scales 1 2 3 per_location 45 count 180"
        assert len(lines) == 2 + 180
        assert lines[2].split()[:3] == ["L", "0", "0"]
        assert len(format_anchor_dump(aset, [spec], summary=True).splitlines()) == 2


class TestMatching:
    def test_exact_anchor(self):
        spec = LayerAnchorSpec("a", 8, (4.0, 6.0, 8.0))
        aset = generate_default_boxes([spec], 32)
        i = 7 * 45 + 3
        gt = np.array([[*aset.boxes[i], 0.0]])
        asg = match_anchors(aset, gt)
        assert asg.gt_index[i] == 0 and asg.overlap[i] == 1.0

    def test_low_overlap_still_one_positive(self):
        aset = AnchorSet(np.array([[0, 0, 2, 2], [10, 10, 2, 2]], float), {}, {}, {}, 16)
        asg = match_anchors(aset, np.array([[0.8, 0.8, 6, 6, 0]]))
        assert asg.positives.tolist() == [0]

    def test_empty_anchor_set(self):
        with pytest.raises(ValueError):
            match_anchors(AnchorSet(np.zeros((0, 4)), {}, {}, {}, 8), np.zeros((1, 5)))

    def test_no_gts(self):
        rng = np.random.default_rng(0)
        asg = match_anchors(small_anchor_set(rng, 5), np.zeros((0, 5)))
        assert (asg.gt_index == -1).all()

    def test_tie_prefers_lower_index(self):
        aset = AnchorSet(np.array([[0, 0, 2, 2], [0, 0, 2, 2]], float), {}, {}, {}, 8)
        asg = match_anchors(aset, np.array([[5, 5, 1, 1, 0]]))
        assert asg.positives.tolist() == [0]

    def test_against_exhaustive_reference(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            aset = small_anchor_set(rng, int(rng.integers(3, 21)))
            gts = random_gts(rng, int(rng.integers(1, 4)))
            asg = match_anchors(aset, gts, 0.5)
            iou = iou_matrix_aligned(aset.boxes, enclosing_rects(gts))
            assert asg.gt_index.tolist() == exhaustive_match(iou, 0.5)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 6))
    def test_every_gt_has_a_positive(self, seed, m):
        rng = np.random.default_rng(seed)
        aset = small_anchor_set(rng, 12)
        gts = random_gts(rng, m)
        asg = match_anchors(aset, gts)
        assert set(asg.gt_index[asg.gt_index >= 0].tolist()) == set(range(min(m, 12)))

    def test_rotated_flag_uses_polygon_iou(self):
        aset = AnchorSet(np.array([[0, 0, 10, 2]], float), {}, {}, {}, 16)
        gt = np.array([[0, 0, 10, 2, 0.5]])
        hull = match_anchors(aset, gt).overlap[0]
        poly = match_anchors(aset, gt, rotated=True).overlap[0]
        assert poly != pytest.approx(hull)


class TestTargets:
    def setup_method(self):
        rng = np.random.default_rng(2)
        self.aset = small_anchor_set(rng, 60)
        self.gts = random_gts(rng, 3)

    def test_quota(self):
        asg = match_anchors(self.aset, self.gts, 0.99)
        n_pos = len(asg.positives)
        losses = np.random.default_rng(3).random(60)
        tb = build_targets(asg, self.aset, self.gts, 3, losses)
        assert tb.positive_count == n_pos == 3
        assert (tb.labels == 0).sum() == 9
        kept = np.flatnonzero(tb.labels == 0)
        dropped = np.flatnonzero(tb.labels == -1)
        assert losses[kept].min() >= losses[dropped].max()

    def test_four_positives_at_most_twelve(self):
        asg = match_anchors(self.aset, self.gts, 0.99)
        asg.gt_index[np.flatnonzero(asg.gt_index < 0)[:1]] = 0
        tb = build_targets(asg, self.aset, self.gts, 3)
        assert tb.positive_count == 4 and (tb.labels == 0).sum() <= 12

    def test_no_gts_keeps_floor(self):
        asg = match_anchors(self.aset, np.zeros((0, 5)))
        tb = build_targets(asg, self.aset, np.zeros((0, 5)))
        assert tb.positive_count == 0 and (tb.labels == 0).sum() == 32

    def test_offsets_only_on_positives(self):
        asg = match_anchors(self.aset, self.gts)
        tb = build_targets(asg, self.aset, self.gts)
        assert not tb.offsets[tb.labels != 1].any()

    def test_ignored_logits_do_not_change_loss(self):
        asg = match_anchors(self.aset, self.gts)
        tb = build_targets(asg, self.aset, self.gts, 1)
        rng = np.random.default_rng(4)
        logits = rng.standard_normal((1, 2, 60))
        z = Tensor(logits.copy(), requires_grad=True)
        loss = softmax_cross_entropy(z, tb.labels[None])
        loss.backward()
        ignored = tb.labels == -1
        assert ignored.any()
        assert not z.grad[0][:, ignored].any()
        logits[0][:, ignored] += 100 * rng.standard_normal((2, int(ignored.sum())))
        assert softmax_cross_entropy(Tensor(logits), tb.labels[None]).item() == loss.item()

    def test_mismatched_assignment(self):
        asg = match_anchors(self.aset, self.gts)
        with pytest.raises(ValueError):
            build_targets(asg, small_anchor_set(np.random.default_rng(5), 10), self.gts)


class TestSurplusGroundTruths:
    def test_more_gts_than_anchors(self):
        aset = AnchorSet(np.array([[0, 0, 4, 4], [10, 0, 4, 4]], float), {}, {}, {}, 16)
        gts = np.array([[0, 0, 4, 4, 0], [10, 0, 4, 4, 0], [30, 30, 4, 4, 0]])
        asg = match_anchors(aset, gts)
        assert asg.gt_index.tolist() == [0, 1]
