import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textdet.inception import BRANCHES, aggregate_aif, branch_slices, inception_block, init_aif, init_inception
from textdet.tensor import ShapeError, Tensor, gradcheck


def tensors(raw):
    return {k: Tensor(v) for k, v in raw.items()}


class TestInceptionBlock:
    def test_full_scale_width(self):
        rng = np.random.default_rng(0)
        params = tensors(init_inception(rng, 8, 512))
        out = inception_block(Tensor(rng.standard_normal((1, 8, 6, 6)).astype(np.float32)), params)
        assert out.shape == (1, 512, 6, 6)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(8, 20), st.integers(8, 20))
    def test_spatial_size_preserved(self, h, w):
        rng = np.random.default_rng(h * 31 + w)
        params = tensors(init_inception(rng, 3, 8))
        assert inception_block(Tensor(rng.standard_normal((1, 3, h, w))), params).shape == (1, 8, h, w)

    def test_channel_mismatch(self):
        params = tensors(init_inception(np.random.default_rng(1), 3, 8))
        with pytest.raises(ShapeError):
            inception_block(Tensor(np.zeros((1, 4, 8, 8))), params)

    def test_width_divisible_by_four(self):
        with pytest.raises(ValueError):
            init_inception(np.random.default_rng(2), 3, 10)

    def test_decomposed_branch_impulse_support(self):
        # 1x5 then 5x1, both dilated by 2: taps span (5-1)*2+1 = 9 in each direction
        raw = init_inception(np.random.default_rng(3), 1, 4, np.float64)
        raw["b5a.w"] = np.ones_like(raw["b5a.w"])
        raw["b5b.w"] = np.ones_like(raw["b5b.w"])
        x = np.zeros((1, 1, 21, 21))
        x[0, 0, 10, 10] = 1.0
        out = inception_block(Tensor(x), tensors(raw)).data[0, branch_slices(4)["b5"]]
        rows, cols = np.nonzero(out[0])
        assert rows.min() == 6 and rows.max() == 14
        assert cols.min() == 6 and cols.max() == 14
        assert len(rows) == 25  # every other pixel in the 9x9 window

    def test_branch_independence(self):
        rng = np.random.default_rng(4)
        raw = init_inception(rng, 3, 8, np.float64)
        x = Tensor(rng.standard_normal((1, 3, 8, 8)))
        full = inception_block(x, tensors(raw)).data
        slices = branch_slices(8)
        for branch, last in (("b1", "b1"), ("b3", "b3"), ("pool", "pool"), ("b5", "b5b")):
            zeroed = dict(raw)
            zeroed[f"{last}.w"] = np.zeros_like(raw[f"{last}.w"])
            out = inception_block(x, tensors(zeroed)).data
            assert not out[:, slices[branch]].any()
            others = [slices[b] for b in BRANCHES if b != branch]
            for s in others:
                np.testing.assert_array_equal(out[:, s], full[:, s])

    def test_gradcheck(self):
        rng = np.random.default_rng(5)
        raw = init_inception(rng, 2, 4, np.float64)
        names = sorted(raw)
        x = Tensor(rng.standard_normal((1, 2, 6, 6)))

        def fn(inp, *ws):
            return inception_block(inp, dict(zip(names, ws)))

        assert gradcheck(fn, [x] + [Tensor(raw[k]) for k in names]) < 1e-5


class TestAggregate:
    def test_shapes_and_width(self):
        rng = np.random.default_rng(6)
        params = tensors(init_aif(rng, 3 * 8, 16, np.float64))
        lo, cur, hi = (Tensor(rng.standard_normal((2, 8, s, s))) for s in (16, 8, 4))
        assert aggregate_aif(lo, cur, hi, params).shape == (2, 16, 8, 8)

    def test_full_scale_width(self):
        rng = np.random.default_rng(7)
        params = tensors(init_aif(rng, 3 * 512, 512))
        lo, cur, hi = (Tensor(np.zeros((1, 512, s, s), np.float32)) for s in (8, 4, 2))
        assert aggregate_aif(lo, cur, hi, params).shape == (1, 512, 4, 4)

    def test_constant_inputs_give_constant_output(self):
        rng = np.random.default_rng(8)
        params = tensors(init_aif(rng, 3 * 4, 6, np.float64))
        lo, cur, hi = (Tensor(np.full((1, 4, s, s), 0.7)) for s in (8, 4, 2))
        out = aggregate_aif(lo, cur, hi, params).data
        np.testing.assert_allclose(out, out[:, :, :1, :1] * np.ones_like(out), atol=1e-12)

    def test_boundary_subsets(self):
        rng = np.random.default_rng(9)
        cur = Tensor(rng.standard_normal((1, 4, 4, 4)))
        lo = Tensor(rng.standard_normal((1, 4, 8, 8)))
        hi = Tensor(rng.standard_normal((1, 4, 2, 2)))
        two = tensors(init_aif(rng, 8, 5, np.float64))
        assert aggregate_aif(None, cur, hi, two).shape == (1, 5, 4, 4)
        assert aggregate_aif(lo, cur, None, two).shape == (1, 5, 4, 4)

    def test_resolution_errors(self):
        rng = np.random.default_rng(10)
        params = tensors(init_aif(rng, 12, 4, np.float64))
        cur = Tensor(np.zeros((1, 4, 4, 4)))
        with pytest.raises(ShapeError):
            aggregate_aif(Tensor(np.zeros((1, 4, 6, 6))), cur, Tensor(np.zeros((1, 4, 2, 2))), params)
        with pytest.raises(ShapeError):
            aggregate_aif(Tensor(np.zeros((1, 4, 8, 8))), cur, Tensor(np.zeros((1, 4, 4, 4))), params)
        with pytest.raises(ShapeError):
            aggregate_aif(None, cur, Tensor(np.zeros((1, 4, 2, 2))), params)

    def test_gradcheck(self):
        rng = np.random.default_rng(11)
        raw = init_aif(rng, 9, 4, np.float64)
        lo, cur, hi = (Tensor(rng.standard_normal((1, 3, s, s))) for s in (8, 4, 2))

        def fn(a, b, c, w, bias):
            return aggregate_aif(a, b, c, {"proj.w": w, "proj.b": bias})

        assert gradcheck(fn, [lo, cur, hi, Tensor(raw["proj.w"]), Tensor(raw["proj.b"])]) < 1e-5
