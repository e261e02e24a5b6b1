import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from heightkit.postproc import aggregate_multiscale, correct_heights, resize_array, resize_bilinear
from heightkit.raster import HeightMap, HierarchyMap


def torch_resize(a, size):
    t = torch.tensor(np.asarray(a, dtype=np.float64))[None, None]
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0].numpy()


sizes = st.tuples(st.integers(1, 9), st.integers(1, 9))


class TestResize:
    def test_two_by_one_golden(self):
        out = resize_bilinear(HeightMap(np.array([[0.0], [10.0]])), (4, 1))
        assert out.data[:, 0].tolist() == [0.0, 2.5, 7.5, 10.0]

    def test_identity_and_constant(self):
        hm = HeightMap(np.random.default_rng(0).random((5, 3)))
        assert np.array_equal(resize_bilinear(hm, (5, 3)).data, hm.data)
        const = HeightMap(np.full((3, 7), 4.2))
        out = resize_bilinear(const, (11, 2))
        assert np.all(out.data == np.float32(4.2))

    def test_int_size(self):
        assert resize_bilinear(HeightMap(np.ones((2, 2))), 5).shape == (5, 5)

    def test_zero_size(self):
        with pytest.raises(ValueError):
            resize_bilinear(HeightMap(np.ones((2, 2))), (0, 3))

    def test_nodata_rejected(self):
        with pytest.raises(ValueError):
            resize_bilinear(HeightMap(np.array([[1.0, -1.0]]), nodata=-1.0), (2, 2))

    @given(sizes, sizes, st.integers(0, 10_000))
    def test_matches_torch(self, src, dst, seed):
        a = np.random.default_rng(seed).uniform(0, 50, src)
        out = resize_array(a, dst)
        np.testing.assert_allclose(out, torch_resize(a, dst), rtol=1e-12, atol=1e-12)
        assert out.min() >= a.min() and out.max() <= a.max()


class TestAggregate:
    def test_single_identity(self):
        hm = HeightMap(np.random.default_rng(1).random((4, 4)))
        assert np.array_equal(aggregate_multiscale([hm], 4).data, hm.data)

    def test_elementwise_max(self):
        rng = np.random.default_rng(2)
        a, b = HeightMap(rng.random((3, 3))), HeightMap(rng.random((3, 3)))
        assert np.array_equal(aggregate_multiscale([a, b], 3).data, np.maximum(a.data, b.data))

    def test_constant_scales(self):
        out = aggregate_multiscale([HeightMap(np.full((4, 4), 2.0)), HeightMap(np.full((8, 8), 5.0))], 8)
        assert np.all(out.data == 5.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate_multiscale([], 4)

    @given(st.lists(sizes, min_size=1, max_size=4), sizes, st.integers(0, 1000))
    def test_dominates_inputs_and_order_free(self, shapes, target, seed):
        rng = np.random.default_rng(seed)
        maps = [HeightMap(rng.uniform(0, 30, s)) for s in shapes]
        out = aggregate_multiscale(maps, target)
        for m in maps:
            assert np.all(out.data >= resize_array(m.data, target).astype(np.float32))
        rev = aggregate_multiscale(maps[::-1], target)
        assert np.array_equal(out.data, rev.data)


class TestCorrect:
    def test_rule_examples(self):
        h = HeightMap(np.array([[2.5, 3.5, 2.5]]))
        seg = HierarchyMap(np.array([[0, 0, 1]]), 4)
        assert correct_heights(h, seg).data.tolist() == [[0.0, 3.5, 2.5]]

    def test_threshold_is_configurable(self):
        h = HeightMap(np.array([[4.0]]))
        seg = HierarchyMap(np.array([[0]]), 2)
        assert correct_heights(h, seg, 5.0).data[0, 0] == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            correct_heights(HeightMap(np.ones((2, 2))), HierarchyMap(np.zeros((2, 3), int), 2))

    @given(st.integers(0, 10_000))
    def test_properties(self, seed):
        rng = np.random.default_rng(seed)
        h = HeightMap(rng.uniform(0, 8, (6, 5)))
        seg = HierarchyMap(rng.integers(0, 3, (6, 5)), 3)
        once = correct_heights(h, seg)
        assert np.array_equal(correct_heights(once, seg).data, once.data)
        assert np.all(once.data <= h.data)
        nonzero = seg.data != 0
        assert np.array_equal(once.data[nonzero], h.data[nonzero])
