#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""Tests for `panofield.occupancy`."""

import os
import shutil
import tempfile
import unittest

import numpy as np
import numpy.testing as npt

from panofield import occupancy as oc
from panofield.depth_prior import PointCloud, lift_point_cloud
from panofield.pano_geometry import Ray, panorama_rays
from panofield.scene_io import default_room, render_room_oracle, room_surface_distance
from panofield.utils import EmptyCloudError, InputError, NumericError, hash_uniform, seeded_rng


class ConstantDensity(object):
    def __init__(self, value):
        self.value = value

    def density(self, positions):
        return np.full(len(positions), self.value)


class SpikeDensity(object):
    """Huge density at one point, zero elsewhere."""

    def __init__(self, where, value=1e6):
        self.where = np.asarray(where, dtype=np.float64)
        self.value = value

    def density(self, positions):
        hit = np.linalg.norm(positions - self.where, axis=1) < 1e-9
        return np.where(hit, self.value, 0.0)


def _single_point_cloud(point):
    return PointCloud([point], [[1.0, 1.0, 1.0]], [[0, 0]])


def _dense_oracle(grid, origins, dirs, t_near, t_far, step, seed=None):
    """March every lattice point and keep those inside active cells."""
    result = []
    n_steps = int(np.ceil((t_far - t_near) / step)) + 1
    k = np.arange(n_steps)
    for r in range(origins.shape[0]):
        jitter = np.full(n_steps, 0.5) if seed is None else hash_uniform(seed, r, k)
        t = t_near + (k + jitter) * step
        t = t[t < t_far]
        cells = grid.cell_of(origins[r] + t[:, np.newaxis] * dirs[r])
        keep = cells >= 0
        keep[keep] = grid.active[cells[keep]]
        result.append(t[keep])
    return result


class TestInit(unittest.TestCase):
    def test_kernel_values(self):
        bounds = [[0, 0, 0], [1, 1, 1]]
        center = np.array([3.5, 3.5, 3.5]) * 0.125
        grid = oc.init_from_depth_prior(
            _single_point_cloud(center), (0.4375, 0.4375, 0.05), 8, bounds, sigma_o=0.125, view_weight=0.0
        )
        n = 8
        self.assertAlmostEqual(float(grid.occ[(3 * n + 3) * n + 3]), 1.0, places=6)
        self.assertAlmostEqual(float(grid.occ[(6 * n + 3) * n + 3]), np.exp(-4.5), places=6)
        self.assertEqual(float(grid.occ[(7 * n + 3) * n + 3]), 0.0)
        self.assertTrue(grid.active[(3 * n + 3) * n + 3])
        self.assertFalse(grid.active[(6 * n + 3) * n + 3])

    def test_view_factor_formula(self):
        bounds = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
        camera = np.array([0.125, 0.125, 0.125])
        point = np.array([0.5, 0.5, 0.5])
        grid = oc.init_from_depth_prior(
            _single_point_cloud(point), camera, 4, bounds, sigma_o=10.0, view_weight=0.2
        )
        centers = grid.cell_centers()
        base = np.exp(-np.sum((centers - point) ** 2, axis=1) / (2.0 * 100.0))
        view = 1.0 - 0.2 * np.minimum(1.0, np.linalg.norm(centers - camera, axis=1) / np.sqrt(3.0))
        npt.assert_allclose(grid.occ, base * view, rtol=1e-6)
        # two cells equidistant from the point: the camera cell and its mirror
        near = grid.cell_of(camera[np.newaxis])[0]
        far = grid.cell_of((1.0 - camera)[np.newaxis])[0]
        ratio = grid.occ[near] / grid.occ[far]
        expected = 1.0 / (1.0 - 0.2 * np.linalg.norm(0.75 * np.ones(3)) / np.sqrt(3.0))
        self.assertAlmostEqual(float(ratio), expected, places=5)

    def test_threshold_consistency(self):
        room = default_room()
        scene = render_room_oracle(room, room.pose, 64, 32)
        grid = oc.init_from_depth_prior(lift_point_cloud(scene), room.pose.position, 24)
        npt.assert_array_equal(grid.active, grid.occ >= np.float32(grid.threshold))
        self.assertTrue(np.all((grid.occ >= 0) & (grid.occ <= 1)))

    def test_far_cells_inactive(self):
        room = default_room()
        scene = render_room_oracle(room, room.pose, 128, 64)
        cloud = lift_point_cloud(scene)
        grid = oc.init_from_depth_prior(cloud, room.pose.position, 32)
        sigma_o = 2.0 * float(grid.voxel_size.min())
        centers = grid.cell_centers()
        inside = np.all((centers > room.lower) & (centers < room.upper), axis=1)
        far = inside & (room_surface_distance(room, centers) > 3.0 * sigma_o)
        far &= ~oc._carve_free_space(grid, cloud.points, room.pose.position)
        self.assertGreater(far.sum(), 0)
        self.assertGreaterEqual((~grid.active[far]).mean(), 0.95)

    def test_camera_free_space_is_traversable(self):
        room = default_room()
        scene = render_room_oracle(room, room.pose, 64, 32)
        grid = oc.init_from_depth_prior(lift_point_cloud(scene), room.pose.position, 32)
        rays = panorama_rays(room.pose, 64, 32, 0.0, grid.diagonal)
        packed = oc.traverse_batch(grid, rays.origins, rays.directions, 0.0, grid.diagonal, 0.05)
        self.assertTrue(np.all(packed.counts() > 0))

    def test_errors(self):
        with self.assertRaises(EmptyCloudError):
            oc.init_from_depth_prior(PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2))), (0, 0, 0))
        with self.assertRaises(InputError):
            oc.init_from_depth_prior(_single_point_cloud((0.5, 0.5, 0.5)), (2.0, 0.5, 0.5), 4, [[0, 0, 0], [1, 1, 1]])
        with self.assertRaises(InputError):
            oc.OccupancyGrid(4, [[0, 0, 0], [1, 0, 1]])

    def test_bounds_for_cloud(self):
        cloud = PointCloud([[1, 0, 0], [-1, 2, 0.5]], np.ones((2, 3)), [[0, 0], [1, 0]])
        bounds = oc.bounds_for_cloud(cloud, (0, 0, 0))
        grid = oc.OccupancyGrid(4, bounds)
        self.assertTrue(np.all(grid.contains(cloud.points)))
        self.assertTrue(grid.contains(np.zeros((1, 3)))[0])
        npt.assert_allclose(np.ptp(bounds, axis=0), np.ptp(bounds, axis=0)[0])


class TestTraverse(unittest.TestCase):
    def test_dense_axis_aligned_count(self):
        grid = oc.OccupancyGrid.dense(8, [[0, 0, 0], [1, 1, 1]])
        ray = Ray((-0.5, 0.37, 0.41), (1.0, 0.0, 0.0), 0.0, 3.0)
        samples = oc.traverse(grid, ray, 0.01)
        self.assertLessEqual(abs(len(samples) - 100), 1)

    def test_inactive_middle_third(self):
        occ = np.ones((3, 3, 3), dtype=np.float32)
        occ[1] = 0.0
        grid = oc.OccupancyGrid(3, [[0, 0, 0], [1, 1, 1]], occ)
        ray = Ray((-0.2, 0.5, 0.5), (1.0, 0.0, 0.0), 0.0, 2.0)
        samples = oc.traverse(grid, ray, 0.01, seed=3)
        x = samples.positions()[:, 0]
        self.assertGreater(len(x), 0)
        self.assertFalse(np.any((x > 1.0 / 3.0) & (x < 2.0 / 3.0)))

    def test_samples_sorted_and_in_range(self):
        grid = oc.OccupancyGrid.dense(6, [[-1, -1, -1], [1, 1, 1]])
        ray = Ray((0.1, 0.2, 0.3), (0.6, 0.0, 0.8), 0.05, 0.9)
        samples = oc.traverse(grid, ray, 0.013, seed=9)
        self.assertTrue(np.all(np.diff(samples.t) > 0))
        self.assertTrue(np.all((samples.t >= 0.05) & (samples.t <= 0.9)))
        self.assertTrue(np.all(grid.active[samples.cells]))

    def test_miss_is_empty(self):
        grid = oc.OccupancyGrid.dense(4, [[0, 0, 0], [1, 1, 1]])
        ray = Ray((2.0, 2.0, 2.0), (0.0, 0.0, 1.0), 0.0, 5.0)
        self.assertEqual(len(oc.traverse(grid, ray, 0.1)), 0)

    def test_bad_step(self):
        grid = oc.OccupancyGrid.dense(4, [[0, 0, 0], [1, 1, 1]])
        with self.assertRaises(InputError):
            oc.traverse(grid, Ray((0.5, 0.5, 0.5), (0, 0, 1), 0.0, 1.0), 0.0)

    def _random_case(self, seed):
        rng = np.random.default_rng(seed)
        occ = (rng.random(8 ** 3) < 0.4).astype(np.float32)
        grid = oc.OccupancyGrid(8, [[-1.0, -0.5, -1.2], [1.1, 1.3, 0.9]], occ)
        origins = rng.uniform(-1.5, 1.5, size=(60, 3))
        dirs = rng.normal(size=(60, 3))
        dirs /= np.linalg.norm(dirs, axis=1)[:, np.newaxis]
        return grid, origins, dirs

    def _compare(self, grid, origins, dirs, seed):
        t_near, t_far, step = 0.05, 5.0, 0.037
        packed = oc.traverse_batch(grid, origins, dirs, t_near, t_far, step, seed=seed)
        expected = _dense_oracle(grid, origins, dirs, t_near, t_far, step, seed)
        offsets = packed.offsets()
        for r in range(origins.shape[0]):
            got = packed.t[offsets[r]:offsets[r + 1]]
            self.assertEqual(len(got), len(expected[r]), "ray {}".format(r))
            npt.assert_allclose(got, expected[r], atol=1e-12)

    def test_matches_filtered_dense_march(self):
        grid, origins, dirs = self._random_case(0)
        self._compare(grid, origins, dirs, None)

    def test_matches_filtered_dense_march_jittered(self):
        grid, origins, dirs = self._random_case(1)
        self._compare(grid, origins, dirs, 42)

    def test_threads_do_not_change_samples(self):
        grid, origins, dirs = self._random_case(2)
        origins = np.repeat(origins, 80, axis=0)
        dirs = np.repeat(dirs, 80, axis=0)
        one = oc.traverse_batch(grid, origins, dirs, 0.0, 4.0, 0.05, seed=1, threads=1)
        four = oc.traverse_batch(grid, origins, dirs, 0.0, 4.0, 0.05, seed=1, threads=4)
        npt.assert_array_equal(one.t, four.t)
        npt.assert_array_equal(one.ray_index, four.ray_index)

    def test_sample_savings_after_first_update(self):
        room = default_room()
        scene = render_room_oracle(room, room.pose, 128, 64)
        grid = oc.init_from_depth_prior(lift_point_cloud(scene), room.pose.position, 96)
        step = 0.5 * float(grid.voxel_size.min())
        oc.update(grid, ConstantDensity(0.0), step)
        rays = panorama_rays(room.pose, 64, 32, 0.0, grid.diagonal)
        dense = oc.OccupancyGrid.dense(96, grid.bounds)
        n_active = len(oc.traverse_batch(grid, rays.origins, rays.directions, 0.0, grid.diagonal, step))
        n_dense = len(oc.traverse_batch(dense, rays.origins, rays.directions, 0.0, grid.diagonal, step))
        self.assertLessEqual(n_active, 0.4 * n_dense)


class TestUpdate(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(7)
        self.grid = oc.OccupancyGrid(6, [[0, 0, 0], [1, 1, 1]], rng.random(216).astype(np.float32))

    def test_zero_density_decays(self):
        before = self.grid.occ.copy()
        queries = oc.update(self.grid, ConstantDensity(0.0), 0.01)
        npt.assert_array_equal(self.grid.occ, before * np.float32(0.95))
        self.assertGreater(queries, 0)
        npt.assert_array_equal(self.grid.active, self.grid.occ >= np.float32(self.grid.threshold))

    def test_spike_activates_sampled_cell(self):
        grid = oc.OccupancyGrid(6, [[0, 0, 0], [1, 1, 1]])
        pick = seeded_rng(0, 13, 0).random(grid.n_cells) < oc.INACTIVE_SAMPLE_FRACTION
        cell = int(np.nonzero(pick)[0][0])
        oc.update(grid, SpikeDensity(grid.centers_of([cell])[0]), 0.01, seed=0, round_index=0)
        self.assertTrue(grid.active[cell])
        self.assertEqual(int(grid.active.sum()), 1)

    def test_decay_count(self):
        grid = oc.OccupancyGrid(4, [[0, 0, 0], [1, 1, 1]], np.ones(64, dtype=np.float32))
        needed = int(np.ceil(np.log(grid.threshold) / np.log(grid.decay)))
        for i in range(needed - 1):
            oc.update(grid, ConstantDensity(0.0), 0.01, round_index=i)
        self.assertTrue(np.all(grid.active))
        oc.update(grid, ConstantDensity(0.0), 0.01, round_index=needed)
        self.assertFalse(np.any(grid.active))

    def test_no_decay_is_monotone(self):
        grid = oc.OccupancyGrid(6, [[0, 0, 0], [1, 1, 1]], self.grid.occ.copy(), decay=1.0)
        for i in range(3):
            before = grid.occ.copy()
            oc.update(grid, ConstantDensity(float(i)), 0.01, round_index=i)
            self.assertTrue(np.all(grid.occ >= before))

    def test_non_finite_density(self):
        with self.assertRaises(NumericError) as ctx:
            oc.update(self.grid, ConstantDensity(np.nan), 0.01)
        self.assertIn("cell (", str(ctx.exception))


class TestSnapshot(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        grid = oc.OccupancyGrid(5, [[-1, -2, -3], [1, 2, 3]], rng.random(125), threshold=0.3, decay=0.9)
        path = grid.save(os.path.join(self.tmp, "grid.bin"))
        loaded = oc.OccupancyGrid.load(path)
        self.assertEqual(loaded.occ.tobytes(), grid.occ.tobytes())
        npt.assert_array_equal(loaded.bounds, grid.bounds)
        self.assertEqual(loaded.threshold, 0.3)
        npt.assert_array_equal(loaded.active, grid.active)

    def test_not_a_snapshot(self):
        path = os.path.join(self.tmp, "junk.bin")
        with open(path, "wb") as fid:
            fid.write(b"nothing to see")
        with self.assertRaises(InputError):
            oc.OccupancyGrid.load(path)


if __name__ == "__main__":
    unittest.main()
