import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textdet.detector import init_params, ModelParams
from textdet.config import builtin_config
from textdet.evaluation import evaluate_detections, match_image, write_report
from textdet.geometry import Detection, OrientedBox, iou_rotated
from textdet.scene import (
    SceneConfig,
    generate_scene,
    read_dataset,
    read_pgm,
    read_ppm,
    render_mask,
    write_dataset,
    write_pgm,
    write_ppm,
)
from textdet.weights import (
    UnsupportedVersionError,
    WeightFileError,
    decode_weights,
    encode_weights,
    load_weights,
    save_weights,
)

from .oracles import optimal_match_count

GOLDEN = Path(__file__).parent / "data" / "golden_v1.sstd"


class TestScene:
    def test_deterministic(self):
        a, b = generate_scene(11), generate_scene(11)
        assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
        assert a.box_array().tobytes() == b.box_array().tobytes()

    def test_seeds_differ(self):
        assert not np.array_equal(generate_scene(1).image, generate_scene(2).image)

    def test_zero_rotation(self):
        for seed in range(10):
            assert all(b.theta == 0.0 for b in generate_scene(seed, SceneConfig(rotation=0.0)).boxes)

    def test_image_range_and_types(self):
        s = generate_scene(0)
        assert s.image.shape == (3, 128, 128) and s.image.dtype == np.float32
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert set(np.unique(s.mask)) <= {0, 1}

    def test_mask_area(self):
        for seed in range(20):
            s = generate_scene(seed, SceneConfig(height=(12, 20)))
            area = sum(b.w * b.h for b in s.boxes)
            assert abs(int(s.mask.sum()) - area) <= 0.02 * area

    def test_mask_area_pooled_default_sizes(self):
        scenes = [generate_scene(seed) for seed in range(50)]
        area = sum(b.w * b.h for s in scenes for b in s.boxes)
        assert abs(sum(int(s.mask.sum()) for s in scenes) - area) <= 0.02 * area

    def test_words_disjoint(self):
        for seed in range(20):
            boxes = generate_scene(seed).boxes
            for i in range(len(boxes)):
                for j in range(i + 1, len(boxes)):
                    assert iou_rotated(boxes[i], boxes[j]) <= 0.1

    def test_infeasible_gives_fewer_words(self):
        s = generate_scene(0, SceneConfig(size=32, height=(20, 24), aspect=(3, 4), words=(3, 3), max_trials=5))
        assert len(s.boxes) < 3

    def test_render_mask_axis_aligned(self):
        m = render_mask([OrientedBox(8, 8, 4, 2)], 16)
        assert m.sum() == 8 and m[7:9, 6:10].all()


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        samples = [generate_scene(s) for s in range(3)]
        write_dataset(tmp_path, samples)
        back = read_dataset(tmp_path)
        assert [b.name for b in back] == ["0000", "0001", "0002"]
        for a, b in zip(samples, back):
            np.testing.assert_allclose(b.box_array(), a.box_array(), atol=1e-6, rtol=0)
            assert np.array_equal(a.mask, b.mask)
            assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6

    def test_ppm_exact_on_quantised(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (3, 5, 7)) / 255.0
        write_ppm(tmp_path / "x.ppm", img)
        np.testing.assert_allclose(read_ppm(tmp_path / "x.ppm"), img, atol=1e-7)

    def test_pgm_round_trip(self, tmp_path):
        g = np.random.default_rng(1).integers(0, 256, (4, 6))
        write_pgm(tmp_path / "g.pgm", g)
        assert np.array_equal(read_pgm(tmp_path / "g.pgm"), g)

    def test_bad_image(self, tmp_path):
        (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0")
        with pytest.raises(ValueError):
            read_ppm(tmp_path / "bad.ppm")
        (tmp_path / "short.ppm").write_bytes(b"P6\n4 4\n255\n\x00\x00")
        with pytest.raises(ValueError):
            read_ppm(tmp_path / "short.ppm")

    def test_empty_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_dataset(tmp_path)


def det(cx, cy, w=10, h=4, theta=0.0, score=0.9):
    return Detection(OrientedBox(cx, cy, w, h, theta), score)


class TestEvaluation:
    gts = [OrientedBox(10, 10, 10, 4), OrientedBox(40, 10, 10, 4), OrientedBox(10, 40, 10, 4), OrientedBox(40, 40, 10, 4)]

    def test_perfect(self):
        r = evaluate_detections([[Detection(g, 0.9) for g in self.gts]], [self.gts])
        assert (r.precision, r.recall, r.f_measure) == (1.0, 1.0, 1.0)

    def test_half_detected(self):
        r = evaluate_detections([[Detection(g, 0.9) for g in self.gts[:2]]], [self.gts])
        assert r.recall == 0.5 and r.precision == 1.0 and r.f_measure == pytest.approx(2 / 3)
        assert r.line() == "1.0000 0.5000 0.6667"

    def test_empty(self):
        r = evaluate_detections([[]], [[]])
        assert (r.precision, r.recall, r.f_measure) == (0.0, 0.0, 0.0)
        r = evaluate_detections([[det(100, 100)]], [[]])
        assert r.precision == 0.0 and r.f_measure == 0.0

    def test_one_to_one(self):
        m = match_image([det(10, 10, score=0.9), det(10, 10, score=0.8)], [self.gts[0]])
        assert [(i, j) for i, j, _ in m.pairs] == [(0, 0)]

    def test_rotated_mode(self):
        g = OrientedBox(20, 20, 20, 4, 0.5)
        d = Detection(OrientedBox(20, 20, 20, 4, -0.5), 0.9)
        assert evaluate_detections([[d]], [[g]], rotated=False).recall == 1.0
        assert evaluate_detections([[d]], [[g]], rotated=True).recall == 0.0

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            evaluate_detections([[]], [[], []])
        with pytest.raises(ValueError):
            evaluate_detections([[]], [[]], iou_threshold=1.0)

    def test_against_optimal_assignment(self):
        from scipy.optimize import linear_sum_assignment

        rng = np.random.default_rng(0)
        gaps = 0
        for _ in range(100):
            ng, nd = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            gts = [OrientedBox(rng.uniform(0, 20), rng.uniform(0, 20), rng.uniform(4, 12), rng.uniform(2, 6)) for _ in range(ng)]
            dets = [det(rng.uniform(0, 20), rng.uniform(0, 20), rng.uniform(4, 12), rng.uniform(2, 6), score=float(rng.random()))
                    for _ in range(nd)]
            iou = np.array([[iou_rotated(d.box, g) for g in gts] for d in dets])
            hit = (iou >= 0.5).astype(float)
            rows, cols = linear_sum_assignment(-hit)
            optimal = int(hit[rows, cols].sum())
            assert optimal == optimal_match_count(iou, 0.5)
            greedy = evaluate_detections([dets], [gts]).matches
            assert optimal - 1 <= greedy <= optimal
            if (hit.sum(axis=0) <= 1).all() and (hit.sum(axis=1) <= 1).all():
                assert greedy == optimal  # no conflicts
            gaps += optimal - greedy
        assert gaps <= 10

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 60), st.floats(0, 60)), min_size=1, max_size=5), st.integers(0, 3))
    def test_monotonicity(self, centres, k):
        gts = [OrientedBox(x, y, 8, 3) for x, y in centres]
        dets = [Detection(g, 0.5) for g in gts[:k]]
        base = evaluate_detections([dets], [gts])
        if k < len(gts):
            more = evaluate_detections([dets + [Detection(gts[k], 0.5)]], [gts])
            assert more.recall >= base.recall
        fp = evaluate_detections([dets + [det(500, 500, score=0.99)]], [gts])
        assert fp.precision <= base.precision

    def test_report_csv(self, tmp_path):
        r = evaluate_detections([[Detection(self.gts[0], 0.9)], []], [self.gts[:1], self.gts[1:2]])
        write_report(tmp_path / "r.csv", r, ["a", "b"])
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0].startswith("image,") and lines[1] == "a,1,1,1,1.0000,1.0000"
        assert lines[-1] == "ALL,1,2,1,1.0000,0.5000"


class TestWeights:
    def test_round_trip_bit_exact(self, tmp_path):
        params = init_params(builtin_config("tiny"), 3)
        save_weights(params, tmp_path / "w.bin")
        back = load_weights(tmp_path / "w.bin", template=params)
        assert list(back) == list(params)
        for k in params:
            assert back[k].data.dtype == np.float32
            assert back[k].data.tobytes() == params[k].data.tobytes()

    def test_golden_file(self):
        expected = {
            "conv.w": np.array([1.5, -0.25], np.float32).reshape(2, 1, 1, 1),
            "conv.b": np.array([0.0, 3.0e-8], np.float32).reshape(1, 2, 1, 1),
            "scale": np.array([1.0, 2.0, -1024.5], np.float32).reshape(3, 1, 1, 1),
        }
        buf = GOLDEN.read_bytes()
        got = decode_weights(buf)
        assert list(got) == list(expected)
        for k in expected:
            assert got[k].tobytes() == expected[k].tobytes()
        assert encode_weights(expected) == buf

    def test_fixed_width_little_endian(self):
        buf = encode_weights({"a": np.array([1.0], np.float32)})
        assert buf[:4] == b"SSTD"
        assert struct.unpack("<II", buf[4:12]) == (1, 1)
        assert buf[-4:] == struct.pack("<f", 1.0)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "w").write_bytes(b"XXXX" + GOLDEN.read_bytes()[4:])
        with pytest.raises(WeightFileError) as info:
            load_weights(tmp_path / "w")
        assert info.value.offset == 0

    def test_version_mismatch(self):
        buf = bytearray(GOLDEN.read_bytes())
        buf[4:8] = struct.pack("<I", 2)
        with pytest.raises(UnsupportedVersionError) as info:
            decode_weights(bytes(buf))
        assert info.value.offset == 4

    @pytest.mark.parametrize("cut", [2, 10, 20, 40, 116])
    def test_truncation(self, cut):
        with pytest.raises(WeightFileError) as info:
            decode_weights(GOLDEN.read_bytes()[:cut])
        assert 0 <= info.value.offset <= cut

    def test_trailing_bytes(self):
        with pytest.raises(WeightFileError):
            decode_weights(GOLDEN.read_bytes() + b"\x00")

    def test_template_mismatch(self, tmp_path):
        save_weights({"a": np.zeros((2, 2), np.float32)}, tmp_path / "w")
        with pytest.raises(KeyError):
            load_weights(tmp_path / "w", template={"b": np.zeros(1)})
        with pytest.raises(ValueError):
            load_weights(tmp_path / "w", template={"a": np.zeros((3, 1))})
        assert load_weights(tmp_path / "w", template={"a": np.zeros((2, 2))})["a"].shape == (2, 2)

    def test_returns_model_params(self):
        assert isinstance(load_weights(GOLDEN), ModelParams)
