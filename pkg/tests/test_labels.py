import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ebc.bins import build_bins
from ebc.labels import (
    PointAnnotation,
    clamp_points,
    dataset_statistics,
    encode_targets,
    rasterize_points,
)


def ann(points, width=16, height=16, image_id="img"):
    return PointAnnotation(
        image_id=image_id, width=width, height=height, points=np.asarray(points)
    )


class TestRasterize:
    def test_floor_division_assignment(self):
        bcm = rasterize_points(ann([(3, 5), (10, 2)]), r=8)
        assert bcm.grid.tolist() == [[1, 1], [0, 0]]

    def test_empty_annotation(self):
        bcm = rasterize_points(ann(np.zeros((0, 2))), r=8)
        assert bcm.grid.sum() == 0

    def test_conservation_random(self):
        rng = np.random.default_rng(7)
        pts = np.column_stack([rng.uniform(0, 64, 1000), rng.uniform(0, 64, 1000)])
        bcm = rasterize_points(ann(pts, width=64, height=64), r=8)
        assert bcm.total == 1000

    def test_remainder_strip_clamped(self):
        # 20x20 image at r=8 covers 16x16; points beyond go to the last row/col
        a = ann([(18.0, 2.0), (2.0, 19.0)], width=20, height=20)
        bcm = rasterize_points(a, r=8)
        assert bcm.grid.shape == (2, 2)
        assert bcm.total == 2
        assert bcm.grid[0, 1] == 1 and bcm.grid[1, 0] == 1

    def test_block_edge_goes_to_higher_block(self):
        bcm = rasterize_points(ann([(8.0, 0.0)]), r=8)
        assert bcm.grid[0, 1] == 1

    def test_image_smaller_than_block(self):
        with pytest.raises(ValueError):
            rasterize_points(ann([(1, 1)], width=4, height=4), r=8)

    def test_shift_equivariance_interior(self):
        rng = np.random.default_rng(3)
        pts = np.column_stack([rng.uniform(8, 40, 60), rng.uniform(0, 64, 60)])
        base = rasterize_points(ann(pts, width=64, height=64), r=8).grid
        shifted = rasterize_points(ann(pts + [8, 0], width=64, height=64), r=8).grid
        assert (shifted[:, 2:6] == base[:, 1:5]).all()


class TestEncodeTargets:
    def test_class_indices(self):
        bcm = rasterize_points(ann([]), r=8)
        bcm.grid = np.array([[0, 2], [5, 1]])
        t = encode_targets(bcm, build_bins("fine", 4))
        assert t.class_indices.tolist() == [[0, 2], [4, 1]]

    def test_zero_block_onehot(self):
        bcm = rasterize_points(ann([]), r=8)
        bcm.grid = np.array([[0]])
        t = encode_targets(bcm, build_bins("fine", 4))
        assert t.onehot[:, 0, 0].tolist() == [1.0, 0.0, 0.0, 0.0, 0.0]

    def test_clamped_density_uses_terminal_representative(self):
        bcm = rasterize_points(ann([]), r=8)
        bcm.grid = np.array([[7]])
        t = encode_targets(bcm, build_bins("fine", 4), clamp_density=True)
        assert t.gt_density.tolist() == [[4.0]]

    def test_raw_density_conserves_counts(self):
        rng = np.random.default_rng(11)
        pts = np.column_stack([rng.uniform(0, 64, 200), rng.uniform(0, 64, 200)])
        bcm = rasterize_points(ann(pts, width=64, height=64), r=8)
        t = encode_targets(bcm, build_bins("fine", 4))
        assert t.gt_density.sum() == 200
        # no smoothing: raw densities are exact integers
        assert (t.gt_density == np.round(t.gt_density)).all()

    def test_onehot_argmax_matches_class_indices(self):
        rng = np.random.default_rng(2)
        bcm = rasterize_points(ann([]), r=8)
        bcm.grid = rng.integers(0, 12, size=(6, 6))
        t = encode_targets(bcm, build_bins("coarse", 6))
        assert (t.onehot.argmax(axis=0) == t.class_indices).all()
        assert np.allclose(t.onehot.sum(axis=0), 1.0)


class TestClampPoints:
    def test_slightly_negative_clamped_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            pts = clamp_points(np.array([[-0.4, 5.0]]), 16, 16, image_id="x")
        assert pts[0, 0] == 0.0 and pts[0, 1] == 5.0
        assert "clamped" in caplog.text

    def test_beyond_tolerance_rejected(self):
        with pytest.raises(ValueError):
            clamp_points(np.array([[-9.0, 5.0]]), 16, 16, tolerance=4.0)

    def test_upper_edge_clamped_inside(self):
        pts = clamp_points(np.array([[16.0, 15.5]]), 16, 16)
        assert pts[0, 0] < 16.0


class TestDatasetStatistics:
    def test_single_grid_histogram(self):
        a = ann([(9, 9), (10, 10), (12, 12)])  # all three in block (1, 1)
        stats = dataset_statistics([a], r=8, policy=build_bins("fine", 4))
        assert stats.histogram == {0: 3, 3: 1}
        assert stats.clamped_fraction == 0.0
        assert stats.max_block_count == 3

    def test_clamped_fraction(self):
        pts = [(4 + 0.1 * i, 4.0) for i in range(9)]  # 9 points in one block
        a = ann(pts)
        stats = dataset_statistics([a], r=8, policy=build_bins("fine", 4))
        assert stats.clamped_fraction == pytest.approx(1 / 4)
        assert stats.tail_mean == 9.0

    def test_histogram_total_property(self):
        rng = np.random.default_rng(5)
        anns = []
        for i in range(100):
            n = int(rng.integers(0, 50))
            pts = np.column_stack([rng.uniform(0, 32, n), rng.uniform(0, 32, n)])
            anns.append(ann(pts, width=32, height=32, image_id=f"i{i}"))
        stats = dataset_statistics(anns, r=8, policy=build_bins("fine", 4))
        assert stats.bin_counts.sum() == stats.total_blocks == 100 * 16

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            dataset_statistics([], r=8, policy=build_bins("fine", 4))


@given(
    st.integers(min_value=0, max_value=200),
    st.integers(min_value=1, max_value=5),
    st.randoms(use_true_random=False),
)
@settings(max_examples=60, deadline=None)
def test_conservation_property(n_points, r_pow, rnd):
    r = 2**r_pow
    rng = np.random.default_rng(rnd.randint(0, 2**31))
    w, h = int(rng.integers(r, 100)), int(rng.integers(r, 100))
    pts = np.column_stack([rng.uniform(0, w, n_points), rng.uniform(0, h, n_points)])
    bcm = rasterize_points(ann(pts, width=w, height=h, image_id="p"), r=r)
    assert bcm.total == n_points
