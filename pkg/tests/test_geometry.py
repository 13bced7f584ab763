import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pyramidssl.errors import SamplingExhausted, ShapeError
from pyramidssl.geometry import (
    Box3,
    CropSpec2D,
    SubCropResult,
    intersection_volume,
    iou,
    min_bounding_box,
    multicrop_2d,
    sample_global_pair,
    sample_local_views,
    sample_subcrop,
)

from oracles import voxel_iou

GLOBAL_SIZES = ((64, 64, 32), (96, 96, 64), (96, 96, 96), (112, 112, 64))
LOCAL_SIZES = ((8, 8, 8), (16, 16, 16), (32, 32, 16), (32, 32, 32))


def boxes(max_origin=40, max_size=24):
    coord = st.integers(min_value=0, max_value=max_origin)
    extent = st.integers(min_value=1, max_value=max_size)
    return st.builds(
        Box3,
        st.tuples(coord, coord, coord),
        st.tuples(extent, extent, extent),
    )


class TestBox3:
    def test_far_corner_and_volume(self):
        b = Box3((1, 2, 3), (4, 5, 6))
        assert b.far == (5, 7, 9)
        assert b.volume == 120

    def test_rejects_zero_extent(self):
        with pytest.raises(ShapeError):
            Box3((0, 0, 0), (0, 4, 4))

    def test_rejects_negative_origin(self):
        with pytest.raises(ShapeError):
            Box3((-1, 0, 0), (4, 4, 4))


class TestIoU:
    def test_identical_boxes(self):
        b = Box3((3, 4, 5), (10, 20, 30))
        assert iou(b, b) == 1.0

    def test_disjoint_boxes(self):
        a = Box3((0, 0, 0), (4, 4, 4))
        b = Box3((4, 0, 0), (4, 4, 4))
        assert iou(a, b) == 0.0

    def test_half_offset_pair(self):
        # 64x64x32 boxes offset by 32 along x: intersection 32*64*32 = 65536,
        # union 2*131072 - 65536 = 196608, ratio exactly 1/3.
        a = Box3((0, 0, 0), (64, 64, 32))
        b = Box3((32, 0, 0), (64, 64, 32))
        assert intersection_volume(a, b) == 65536
        assert iou(a, b) == 65536 / 196608
        assert iou(a, b) == pytest.approx(1 / 3, abs=0)

    @given(boxes(), boxes())
    @settings(max_examples=200, deadline=None)
    def test_matches_voxel_counting_oracle(self, a, b):
        assert iou(a, b) == voxel_iou(a.origin, a.size, b.origin, b.size)

    @given(boxes(), boxes())
    @settings(max_examples=100, deadline=None)
    def test_symmetry_and_range(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0


class TestMinBoundingBox:
    def test_known_pair(self):
        a = Box3((0, 0, 0), (4, 4, 4))
        b = Box3((6, 2, 0), (2, 2, 8))
        bb = min_bounding_box(a, b)
        assert bb.origin == (0, 0, 0)
        assert bb.size == (8, 4, 8)

    @given(boxes(), boxes())
    @settings(max_examples=100, deadline=None)
    def test_contains_both(self, a, b):
        bb = min_bounding_box(a, b)
        assert bb.contains_box(a)
        assert bb.contains_box(b)

    @given(boxes())
    @settings(max_examples=50, deadline=None)
    def test_idempotent_on_identical(self, a):
        assert min_bounding_box(a, a) == a


class TestGlobalPair:
    def test_sizes_and_overlap(self):
        rng = np.random.default_rng(7)
        shape = (192, 192, 192)
        for _ in range(50):
            a, b = sample_global_pair(shape, GLOBAL_SIZES, rng)
            assert a.size in GLOBAL_SIZES
            assert b.size in GLOBAL_SIZES
            assert iou(a, b) >= 0.3
            for box in (a, b):
                assert all(o >= 0 for o in box.origin)
                assert all(f <= s for f, s in zip(box.far, shape))

    def test_sizes_clip_to_small_volume(self):
        rng = np.random.default_rng(3)
        shape = (48, 48, 24)
        a, b = sample_global_pair(shape, GLOBAL_SIZES, rng)
        for box in (a, b):
            assert all(s <= v for s, v in zip(box.size, shape))

    def test_exhaustion_raises(self):
        rng = np.random.default_rng(0)
        # Impossible threshold that random near-full-volume pairs can't reach
        # because two distinct clipped sizes never coincide exactly.
        with pytest.raises(SamplingExhausted):
            sample_global_pair(
                (192, 192, 192), GLOBAL_SIZES, rng, iou_min=1.0, max_attempts=50
            )

    def test_reject_callback_is_honored(self):
        rng = np.random.default_rng(11)
        shape = (128, 128, 64)
        seen = []
        a, b = sample_global_pair(
            shape,
            GLOBAL_SIZES,
            rng,
            reject=lambda box: (seen.append(box) or False),
        )
        assert seen  # the predicate ran on candidate boxes
        assert iou(a, b) >= 0.3


class TestLocalViews:
    def test_inside_bbox_and_count(self):
        rng = np.random.default_rng(5)
        bbox = Box3((10, 20, 4), (80, 70, 40))
        views = sample_local_views(bbox, rng, count=6, size_set=LOCAL_SIZES)
        assert len(views) == 6
        for v in views:
            assert bbox.contains_box(v)

    def test_tiny_bbox_clips_everything(self):
        rng = np.random.default_rng(5)
        bbox = Box3((2, 2, 2), (8, 8, 8))
        views = sample_local_views(bbox, rng, count=6, size_set=LOCAL_SIZES)
        assert all(v == bbox for v in views)


class TestSubCrop:
    def test_bitwise_deterministic(self):
        a = sample_subcrop((160, 160, 96), np.random.default_rng(42))
        b = sample_subcrop((160, 160, 96), np.random.default_rng(42))
        assert a == b
        assert isinstance(a, SubCropResult)

    def test_composite_invariants(self):
        rng = np.random.default_rng(9)
        res = sample_subcrop((192, 192, 192), rng)
        assert res.bounding_box == min_bounding_box(res.global_a, res.global_b)
        assert len(res.locals) == 6
        for v in res.locals:
            assert res.bounding_box.contains_box(v)


class TestMulticrop2D:
    def test_counts_and_fraction_ranges(self):
        rng = np.random.default_rng(1)
        shape = (512, 512)
        for _ in range(100):
            globals_, locals_ = multicrop_2d(shape, rng)
            assert len(globals_) == 2 and len(locals_) == 6
            for spec in globals_:
                frac = (spec.size[0] * spec.size[1]) / (shape[0] * shape[1])
                assert 0.3 <= frac <= 1.0
                assert spec.scale_fraction == frac
            for spec in locals_:
                frac = (spec.size[0] * spec.size[1]) / (shape[0] * shape[1])
                assert 0.05 <= frac <= 0.3

    def test_crops_stay_inside_image(self):
        rng = np.random.default_rng(2)
        h, w = 300, 480
        for _ in range(100):
            globals_, locals_ = multicrop_2d((h, w), rng)
            for spec in globals_ + locals_:
                assert spec.origin[0] + spec.size[0] <= h
                assert spec.origin[1] + spec.size[1] <= w

    def test_degenerate_scale_range_returns_full_image(self):
        rng = np.random.default_rng(3)
        globals_, _ = multicrop_2d(
            (256, 256), rng, global_scale_range=(1.0, 1.0)
        )
        for spec in globals_:
            assert spec.origin == (0, 0)
            assert spec.size == (256, 256)
            assert spec.scale_fraction == 1.0

    def test_output_size_recorded(self):
        rng = np.random.default_rng(4)
        globals_, locals_ = multicrop_2d((400, 400), rng, output_size=224)
        assert all(s.output_size == 224 for s in globals_ + locals_)

    def test_non_square_image(self):
        spec = CropSpec2D((0, 0), (10, 20), 0.5)
        assert spec.size == (10, 20)
