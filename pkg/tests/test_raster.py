import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import reference as ref
from heightkit.raster import (
    BBox,
    HeightMap,
    HierarchyMap,
    Instance,
    InstanceSet,
    NormalizedHeightMap,
    RasterError,
    box_to_mask,
    iou_box,
    iou_mask,
    mask_iou_matrix,
    mask_to_box,
    read_height_map,
    read_hierarchy_map,
    read_image,
    read_instance_set,
    read_normalized_map,
    rle_decode,
    rle_encode,
    write_height_map,
    write_hierarchy_map,
    write_image,
    write_instance_set,
    write_normalized_map,
)

masks = st.tuples(st.integers(1, 9), st.integers(1, 9)).flatmap(lambda hw: arrays(bool, hw))
coord = st.floats(0, 50, allow_nan=False)


@st.composite
def boxes(draw):
    x0, x1 = sorted((draw(coord), draw(coord)))
    y0, y1 = sorted((draw(coord), draw(coord)))
    return BBox(x0, y0, x1, y1)


class TestTypes:
    def test_height_map_rejects_negative_and_nan(self):
        with pytest.raises(RasterError):
            HeightMap(np.array([[1.0, -0.5]]))
        with pytest.raises(RasterError):
            HeightMap(np.array([[np.nan]]))

    def test_nodata_pixels_are_exempt(self):
        hm = HeightMap(np.array([[1.0, -9999.0]]), nodata=-9999.0)
        assert hm.valid.tolist() == [[True, False]]
        nan_hm = HeightMap(np.array([[np.nan, 2.0]]), nodata=float("nan"))
        assert nan_hm.valid.tolist() == [[False, True]]
        assert nan_hm.filled(0.0).tolist() == [[0.0, 2.0]]

    def test_height_map_is_float32_and_read_only(self):
        hm = HeightMap(np.ones((2, 3)))
        assert hm.data.dtype == np.float32
        assert (hm.width, hm.height) == (3, 2)
        with pytest.raises(ValueError):
            hm.data[0, 0] = 5

    def test_normalized_range_and_constant(self):
        with pytest.raises(RasterError):
            NormalizedHeightMap(np.array([[1.2]]), 1.0)
        with pytest.raises(RasterError):
            NormalizedHeightMap(np.array([[0.2]]), 0.0)

    def test_hierarchy_map_bounds(self):
        with pytest.raises(RasterError):
            HierarchyMap(np.array([[4]]), 4)
        with pytest.raises(RasterError):
            HierarchyMap(np.array([[0]]), 1)
        assert HierarchyMap(np.array([[3]]), 4).data.dtype == np.uint8

    def test_bbox_ordering(self):
        with pytest.raises(RasterError):
            BBox(5, 0, 1, 1)

    def test_instance_set_shapes_must_agree(self):
        a = Instance(BBox(0, 0, 1, 1), np.zeros((4, 4), bool))
        b = Instance(BBox(0, 0, 1, 1), np.zeros((5, 4), bool))
        with pytest.raises(RasterError):
            InstanceSet("t", "m", (a, b))
        assert InstanceSet("t", "m", (a,)).tile_size == (4, 4)

    def test_probability_mask_range(self):
        with pytest.raises(RasterError):
            Instance(BBox(0, 0, 1, 1), np.full((2, 2), 1.5))


class TestIoU:
    def test_box_examples(self):
        a = BBox(0, 0, 10, 10)
        assert iou_box(a, BBox(0, 0, 10, 10)) == 1.0
        assert iou_box(a, BBox(20, 20, 30, 30)) == 0.0
        assert iou_box(a, BBox(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)

    def test_degenerate_boxes(self):
        p = BBox(3, 3, 3, 3)
        assert iou_box(p, p) == 0.0

    def test_mask_examples(self):
        a = np.zeros((4, 4), bool)
        a[0, :4] = True
        b = np.zeros((4, 4), bool)
        b[0, 2:] = True
        b[1, :2] = True
        assert iou_mask(a, a) == 1.0
        assert iou_mask(a, ~a) == 0.0
        assert iou_mask(a, b) == pytest.approx(2 / 6)
        assert iou_mask(np.zeros((3, 3), bool), np.zeros((3, 3), bool)) == 0.0

    def test_mask_shape_mismatch(self):
        with pytest.raises(RasterError):
            iou_mask(np.zeros((2, 2), bool), np.zeros((3, 2), bool))

    @given(boxes(), boxes())
    def test_box_properties(self, a, b):
        v = iou_box(a, b)
        assert 0.0 <= v <= 1.0
        assert v == iou_box(b, a)
        assert v == pytest.approx(ref.box_iou(a.coords, b.coords), abs=1e-12)
        if a.area > 0:
            assert iou_box(a, a) == 1.0

    @given(st.integers(1, 7), st.integers(1, 7), st.data())
    def test_mask_properties(self, h, w, data):
        a = data.draw(arrays(bool, (h, w)))
        b = data.draw(arrays(bool, (h, w)))
        v = iou_mask(a, b)
        assert v == iou_mask(b, a)
        assert v == ref.mask_iou(a.tolist(), b.tolist())
        if a.any():
            assert iou_mask(a, a) == 1.0
            assert (v == 1.0) == bool(np.array_equal(a, b))

    def test_iou_matrix_matches_pairwise(self):
        rng = np.random.default_rng(0)
        p = [rng.random((6, 6)) < 0.4 for _ in range(4)]
        g = [rng.random((6, 6)) < 0.4 for _ in range(3)]
        m = mask_iou_matrix(p, g)
        for i in range(4):
            for j in range(3):
                assert m[i, j] == pytest.approx(iou_mask(p[i], g[j]), abs=1e-15)
        assert mask_iou_matrix([], g).shape == (0, 3)

    def test_box_to_mask_uses_pixel_centers(self):
        m = box_to_mask(BBox(0.5, 0.5, 2.5, 1.4), (3, 4))
        expected = [[ref.inside((0.5, 0.5, 2.5, 1.4), r, c) for c in range(4)] for r in range(3)]
        assert m.tolist() == expected

    def test_mask_to_box(self):
        m = np.zeros((5, 5), bool)
        m[1:3, 2:5] = True
        assert mask_to_box(m).coords == (2.0, 1.0, 5.0, 3.0)
        assert np.array_equal(box_to_mask(mask_to_box(m), m.shape), m)
        with pytest.raises(RasterError):
            mask_to_box(np.zeros((2, 2), bool))


class TestRLE:
    def test_examples(self):
        assert rle_encode(np.zeros((3, 3), bool))["counts"] == [9]
        assert rle_encode(np.ones((3, 3), bool))["counts"] == [0, 9]
        # column-major bits 0,1,1,0
        m = np.array([[0, 1], [1, 0]], dtype=np.uint8)
        assert rle_encode(m) == {"size": [2, 2], "counts": [1, 2, 1]}

    def test_decode_rejects_bad_runs(self):
        with pytest.raises(RasterError):
            rle_decode({"size": [2, 2], "counts": [1, 2]})
        with pytest.raises(RasterError):
            rle_decode({"size": [2, 2], "counts": [5, -1]})

    def test_encode_rejects_non_binary(self):
        with pytest.raises(RasterError):
            rle_encode(np.array([[0, 2]]))

    @given(masks)
    def test_matches_reference_and_round_trips(self, m):
        rec = rle_encode(m)
        assert rec["counts"] == ref.rle(m.tolist())
        assert np.array_equal(rle_decode(rec), m)


class TestRasterIO:
    def test_height_map_byte_stable(self, tmp_path):
        rng = np.random.default_rng(1)
        hm = HeightMap(rng.uniform(0, 80, (5, 7)), nodata=None)
        p1 = write_height_map(tmp_path / "a.f32", hm)
        back = read_height_map(p1)
        p2 = write_height_map(tmp_path / "b.f32", back)
        assert p1.read_bytes() == p2.read_bytes()
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert np.array_equal(back.data, hm.data)

    def test_header_layout(self, tmp_path):
        write_height_map(tmp_path / "h.f32", HeightMap(np.zeros((2, 3)), nodata=-1.0))
        header = json.loads((tmp_path / "h.json").read_text())
        assert header == {"width": 3, "height": 2, "dtype": "f32le", "nodata": -1.0}
        payload = (tmp_path / "h.f32").read_bytes()
        assert len(payload) == 2 * 3 * 4

    def test_little_endian_payload(self, tmp_path):
        write_height_map(tmp_path / "h.f32", HeightMap(np.array([[1.5]])))
        assert (tmp_path / "h.f32").read_bytes() == np.array([1.5], dtype="<f4").tobytes()

    def test_nan_nodata_round_trip(self, tmp_path):
        hm = HeightMap(np.array([[np.nan, 4.0]]), nodata=float("nan"))
        back = read_height_map(write_height_map(tmp_path / "n.f32", hm))
        assert math.isnan(back.nodata)
        assert back.valid.tolist() == [[False, True]]

    def test_truncated_payload(self, tmp_path):
        p = write_height_map(tmp_path / "h.f32", HeightMap(np.zeros((2, 2))))
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(RasterError):
            read_height_map(p)

    def test_other_rasters(self, tmp_path):
        nm = NormalizedHeightMap(np.array([[0.0, 0.5]]), 5.2)
        back = read_normalized_map(write_normalized_map(tmp_path / "n.f32", nm))
        assert back.norm_constant == 5.2
        assert np.array_equal(back.data, nm.data)
        hm = HierarchyMap(np.array([[0, 3]]), 4)
        hb = read_hierarchy_map(write_hierarchy_map(tmp_path / "c.u8", hm))
        assert hb.n_classes == 4 and np.array_equal(hb.data, hm.data)
        img = np.random.default_rng(0).random((3, 4, 2)).astype(np.float32)
        assert np.array_equal(read_image(write_image(tmp_path / "i.f32", img)), img)

    def test_instance_set_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        binary = Instance(BBox(1, 2, 5.5, 6.25, 0.9), rng.random((8, 8)) < 0.5)
        prob = Instance(BBox(0, 0, 3, 3, 0.4), rng.random((8, 8)))
        s = InstanceSet("t7", "m", (binary, prob), 0.5)
        back = read_instance_set(write_instance_set(tmp_path / "s.json", s))
        assert (back.tile_id, back.model_id, back.model_weight, back.tile_size) == ("t7", "m", 0.5, (8, 8))
        assert back.instances[0].bbox == binary.bbox
        assert np.array_equal(back.instances[0].mask, binary.mask)
        assert np.array_equal(back.instances[1].mask, prob.mask)
        rec = json.loads((tmp_path / "s.json").read_text())["instances"][0]
        assert set(rec) == {"bbox", "score", "mask_rle"}
        assert rec["bbox"] == [1, 2, 5.5, 6.25]
