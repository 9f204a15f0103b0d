"""Cylinder crops and sliding-window grids against distance oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forestseg.core import PointCloud
from forestseg.errors import ConfigError, EmptyBlock, EmptyInput
from forestseg.tiling import cylinder_crop, random_crop_center, sliding_window_centers, tile_cloud


def _cloud_at(xy_points):
    xy = np.asarray(xy_points, dtype=float)
    return PointCloud(positions=np.c_[xy, np.zeros(len(xy))])


class TestCylinderCrop:
    def test_interior_point_included(self):
        cloud = _cloud_at([[15.9, 0.0]])
        block = cylinder_crop(cloud, (0.0, 0.0), 16.0)
        assert block.n == 1

    def test_exterior_point_excluded(self):
        cloud = _cloud_at([[16.1, 0.0], [1.0, 1.0]])
        block = cylinder_crop(cloud, (0.0, 0.0), 16.0)
        assert np.array_equal(block.point_indices, [1])

    def test_boundary_inclusive(self):
        cloud = _cloud_at([[16.0, 0.0]])
        assert cylinder_crop(cloud, (0.0, 0.0), 16.0).n == 1

    def test_membership_matches_brute_force(self, rng):
        xy = rng.uniform(-20.0, 20.0, size=(5000, 2))
        cloud = _cloud_at(xy)
        center = np.array([2.0, -3.0])
        radius = 9.5
        block = cylinder_crop(cloud, center, radius)
        expected = sorted(
            i for i in range(5000) if np.hypot(xy[i, 0] - center[0], xy[i, 1] - center[1]) <= radius
        )
        assert block.point_indices.tolist() == expected

    def test_monotone_in_radius(self, rng):
        cloud = _cloud_at(rng.uniform(-10, 10, size=(800, 2)))
        small = set(cylinder_crop(cloud, (0, 0), 4.0).point_indices.tolist())
        large = set(cylinder_crop(cloud, (0, 0), 7.0).point_indices.tolist())
        assert small <= large

    def test_empty_block_raises(self):
        cloud = _cloud_at([[50.0, 50.0]])
        with pytest.raises(EmptyBlock):
            cylinder_crop(cloud, (0.0, 0.0), 1.0)

    def test_bad_radius(self):
        with pytest.raises(ConfigError):
            cylinder_crop(_cloud_at([[0, 0]]), (0, 0), 0.0)


class TestSlidingWindow:
    def test_exact_grid(self):
        centers = sliding_window_centers((0.0, 0.0), (16.0, 16.0), 4.0)
        assert len(centers) == 25
        xs = sorted(set(centers[:, 0].tolist()))
        assert xs == [0.0, 4.0, 8.0, 12.0, 16.0]

    def test_degenerate_bounds(self):
        centers = sliding_window_centers((3.0, 5.0), (3.0, 5.0), 4.0)
        assert centers.shape == (1, 2)
        assert centers[0].tolist() == [3.0, 5.0]

    def test_last_center_reaches_bounds(self):
        centers = sliding_window_centers((0.0, 0.0), (9.0, 7.0), 4.0)
        assert centers[:, 0].max() >= 9.0
        assert centers[:, 1].max() >= 7.0

    def test_row_major_order(self):
        centers = sliding_window_centers((0.0, 0.0), (4.0, 4.0), 4.0)
        assert centers.tolist() == [[0, 0], [0, 4], [4, 0], [4, 4]]

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**16), stride=st.floats(0.5, 4.0))
    def test_coverage_of_all_points(self, seed, stride):
        gen = np.random.default_rng(seed)
        xy = gen.uniform(-15.0, 15.0, size=(300, 2))
        radius = stride  # radius >= stride guarantees coverage
        centers = sliding_window_centers(xy.min(axis=0), xy.max(axis=0), stride)
        dist = np.hypot(xy[:, None, 0] - centers[None, :, 0], xy[:, None, 1] - centers[None, :, 1])
        assert np.all(dist.min(axis=1) <= radius + 1e-9)

    def test_tile_cloud_covers_everything(self, rng):
        cloud = _cloud_at(rng.uniform(0.0, 10.0, size=(400, 2)))
        blocks = tile_cloud(cloud, radius=4.0, stride=4.0)
        covered = np.zeros(cloud.n, dtype=bool)
        for block in blocks:
            covered[block.point_indices] = True
        assert covered.all()

    def test_block_ids_are_grid_indices(self, rng):
        cloud = _cloud_at(rng.uniform(0.0, 8.0, size=(200, 2)))
        blocks = tile_cloud(cloud, radius=16.0, stride=4.0)
        ids = [b.block_id for b in blocks]
        assert ids == sorted(ids)
        assert len(set(ids)) == len(ids)


class TestRandomCropCenter:
    def test_deterministic(self, labeled_cloud):
        a = random_crop_center(labeled_cloud, 99)
        b = random_crop_center(labeled_cloud, 99)
        assert np.array_equal(a, b)

    def test_center_is_a_cloud_point(self, labeled_cloud):
        center = random_crop_center(labeled_cloud, 5)
        assert any(np.allclose(center, p) for p in labeled_cloud.positions[:, :2])

    def test_cluster_sampling_proportions(self):
        # two clusters of 200 and 800 points; binomial with p = 0.2
        a = np.tile([0.0, 0.0], (200, 1))
        b = np.tile([100.0, 100.0], (800, 1))
        cloud = _cloud_at(np.vstack([a, b]))
        hits_a = sum(random_crop_center(cloud, seed)[0] < 50.0 for seed in range(1000))
        sigma = np.sqrt(1000 * 0.2 * 0.8)
        assert abs(hits_a - 200) <= 5 * sigma

    def test_empty_cloud(self):
        with pytest.raises(EmptyInput):
            random_crop_center(PointCloud(positions=np.empty((0, 3))), 0)
