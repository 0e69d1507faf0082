#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""Tests for `panofield.renderer`."""

import unittest

import numpy as np
import numpy.testing as npt

from panofield import renderer as rd
from panofield.occupancy import OccupancyGrid, PackedSamples, RaySegmentSamples
from panofield.pano_geometry import Pose, Ray
from panofield.radiance_field import FieldOutput
from panofield.utils import InputError, NumericError


class ConstantField(object):
    def __init__(self, sigma, color=(0.2, 0.4, 0.6)):
        self.sigma = sigma
        self.color = np.asarray(color, dtype=np.float64)

    def forward(self, positions, directions):
        n = len(positions)
        return FieldOutput(np.full(n, float(self.sigma)), np.tile(self.color, (n, 1))), {}


def _segment(t, sigma, color, step, t_far=1.0):
    t = np.asarray(t, dtype=np.float64)
    ray = Ray((0, 0, 0), (1, 0, 0), 0.0, t_far)
    lattice = np.round(t / step - 0.5).astype(np.int64)
    samples = RaySegmentSamples(ray, t, np.zeros(len(t), dtype=np.int64), lattice, step)
    outputs = FieldOutput(np.asarray(sigma, dtype=np.float64), np.asarray(color, dtype=np.float64).reshape(-1, 3))
    return samples, outputs


class TestComposite(unittest.TestCase):
    def test_no_samples_gives_background(self):
        samples, outputs = _segment([], [], np.zeros((0, 3)), 0.1, t_far=3.0)
        result = rd.composite(samples, outputs, background=(0.1, 0.2, 0.3))
        npt.assert_allclose(result.color, [0.1, 0.2, 0.3])
        self.assertEqual(result.depth, 3.0)
        self.assertEqual(result.opacity, 0.0)

    def test_opaque_sample(self):
        samples, outputs = _segment([0.45, 0.55], [1e4, 1e4], [[0.9, 0.1, 0.0], [0.0, 0.0, 1.0]], 0.1)
        result = rd.composite(samples, outputs, background=(1.0, 1.0, 1.0))
        npt.assert_allclose(result.color, [0.9, 0.1, 0.0], atol=1e-9)
        self.assertAlmostEqual(result.depth, 0.45, places=9)
        self.assertAlmostEqual(result.opacity, 1.0, places=9)

    def test_homogeneous_medium(self):
        step = 1.0 / 256
        t = (np.arange(256) + 0.5) * step
        sigma = 2.0
        samples, outputs = _segment(t, np.full(256, sigma), np.tile([0.5, 0.25, 1.0], (256, 1)), step)
        result = rd.composite(samples, outputs)
        opacity = 1.0 - np.exp(-sigma)
        self.assertAlmostEqual(result.opacity, opacity, delta=2e-3)
        npt.assert_allclose(result.color, opacity * np.array([0.5, 0.25, 1.0]), atol=2e-3)
        self.assertAlmostEqual(result.depth, (1.0 - np.exp(-sigma)) / sigma, delta=2e-3)

    def test_unit_density_over_unit_interval(self):
        exact = 1.0 - np.exp(-1.0)
        for n in (256, 512, 1024):
            step = 1.0 / n
            t = (np.arange(n) + 0.5) * step
            samples, outputs = _segment(t, np.ones(n), np.ones((n, 3)), step)
            result = rd.composite(samples, outputs)
            self.assertLess(abs(result.opacity - exact), 2e-3, n)
            npt.assert_allclose(result.color, exact, atol=2e-3)

    def test_first_order_convergence(self):
        # left-end samples of sigma(t) = 2t on [0, 1]: halving the step halves the error
        exact = 1.0 - np.exp(-1.0)
        errors = []
        for n in (64, 128, 256):
            step = 1.0 / n
            t = np.arange(n) * step
            ray = Ray((0, 0, 0), (1, 0, 0), 0.0, 1.0)
            samples = RaySegmentSamples(ray, t, np.zeros(n, dtype=np.int64), np.arange(n), step)
            outputs = FieldOutput(2.0 * t, np.ones((n, 3)))
            errors.append(abs(rd.composite(samples, outputs).opacity - exact))
        for coarse, fine in zip(errors[:-1], errors[1:]):
            self.assertGreaterEqual(coarse / fine, 1.7)
            self.assertLessEqual(coarse / fine, 2.3)
        self.assertLess(errors[-1], 2e-3)

    def test_unsorted_samples(self):
        samples, outputs = _segment([0.5, 0.3], [1.0, 1.0], np.zeros((2, 3)), 0.1)
        with self.assertRaises(InputError):
            rd.composite(samples, outputs)

    def test_weights_and_transmittance_sum_to_one(self):
        rng = np.random.default_rng(4)
        t = np.sort(rng.uniform(0, 2, 40))
        sigma = rng.uniform(0, 5, 40)
        packed = PackedSamples(np.zeros(40, dtype=np.int64), t, np.zeros(40), np.arange(40), 1, 0.05)
        result, cache = rd.composite_packed(packed, sigma, rng.random((40, 3)), (0, 0, 0), 2.5)
        self.assertAlmostEqual(float(result.opacity[0] + cache["t_final"][0]), 1.0, places=12)
        self.assertTrue(np.all(cache["weight"] >= 0))


class TestDeltas(unittest.TestCase):
    def test_gaps_and_ray_ends_use_step(self):
        t = np.array([0.05, 0.15, 0.55, 0.65, 0.05])
        lattice = np.array([0, 1, 5, 6, 0])
        ray = np.array([0, 0, 0, 0, 1])
        npt.assert_allclose(rd.sample_deltas(t, 0.1, lattice, ray), [0.1, 0.1, 0.1, 0.1, 0.1])
        jittered = np.array([0.02, 0.17, 0.51, 0.69, 0.03])
        npt.assert_allclose(rd.sample_deltas(jittered, 0.1, lattice, ray), [0.15, 0.1, 0.18, 0.1, 0.1])


class TestBackward(unittest.TestCase):
    def setUp(self):
        step = 0.1
        lattice = np.array([3, 4, 5, 6, 1, 2, 5, 6, 7])
        self.packed = PackedSamples(
            np.array([0, 0, 0, 0, 2, 2, 2, 2, 2]), (lattice + 0.5) * step, np.zeros(9), lattice, 3, step
        )
        rng = np.random.default_rng(12)
        self.sigma = rng.uniform(0.0, 3.0, 9)
        self.color = rng.random((9, 3))
        self.grad_color = rng.normal(size=(3, 3))
        self.grad_depth = rng.normal(size=3)
        self.grad_opacity = rng.normal(size=3)
        self.background = np.array([0.3, 0.6, 0.9])

    def _loss(self, sigma, color):
        result, _ = rd.composite_packed(self.packed, sigma, color, self.background, 2.0)
        return float(
            np.sum(self.grad_color * result.color)
            + np.sum(self.grad_depth * result.depth)
            + np.sum(self.grad_opacity * result.opacity)
        )

    def test_matches_finite_differences(self):
        _, cache = rd.composite_packed(self.packed, self.sigma, self.color, self.background, 2.0)
        d_sigma, d_color = rd.composite_packed_backward(
            self.packed, cache, self.grad_color, self.grad_depth, self.grad_opacity
        )
        eps = 1e-6
        for i in range(9):
            bump = np.zeros(9)
            bump[i] = eps
            numeric = (self._loss(self.sigma + bump, self.color) - self._loss(self.sigma - bump, self.color)) / (2 * eps)
            self.assertAlmostEqual(d_sigma[i], numeric, delta=1e-7 + 1e-5 * abs(numeric))
            for c in range(3):
                bump = np.zeros((9, 3))
                bump[i, c] = eps
                numeric = (self._loss(self.sigma, self.color + bump) - self._loss(self.sigma, self.color - bump)) / (2 * eps)
                self.assertAlmostEqual(d_color[i, c], numeric, delta=1e-7 + 1e-5 * abs(numeric))

    def test_non_finite_upstream_gradient(self):
        _, cache = rd.composite_packed(self.packed, self.sigma, self.color, self.background, 2.0)
        with self.assertRaises(NumericError):
            rd.composite_packed_backward(self.packed, cache, self.grad_color, [np.nan, 0.0, 0.0], self.grad_opacity)

    def test_single_ray_wrapper(self):
        samples, outputs = _segment([0.05, 0.15, 0.25], [1.0, 2.0, 0.5], np.eye(3), 0.1)
        d_sigma, d_color = rd.composite_backward(samples, outputs, [1.0, 0.0, 0.0], 0.0, 0.0)
        self.assertEqual(d_sigma.shape, (3,))
        self.assertEqual(d_color.shape, (3, 3))
        # only the red channel receives gradient
        npt.assert_array_equal(d_color[:, 1:], 0.0)


class TestRenderRays(unittest.TestCase):
    def setUp(self):
        self.grid = OccupancyGrid.dense(4, [[-1, -1, -1], [1, 1, 1]])
        rng = np.random.default_rng(3)
        dirs = rng.normal(size=(200, 3))
        self.dirs = dirs / np.linalg.norm(dirs, axis=1)[:, np.newaxis]
        self.origins = np.zeros((200, 3))

    def test_halving_the_step_changes_little(self):
        field = ConstantField(1.5)
        coarse, _ = rd.render_rays(field, self.grid, self.origins, self.dirs, 0.0, 5.0, 0.02)
        fine, n_fine = rd.render_rays(field, self.grid, self.origins, self.dirs, 0.0, 5.0, 0.01)
        npt.assert_allclose(coarse.opacity, fine.opacity, atol=2e-2)
        npt.assert_allclose(coarse.color, fine.color, atol=2e-2)
        self.assertGreater(n_fine, 200 * 90)

    def test_thread_count_does_not_change_pixels(self):
        origins = np.tile(self.origins, (25, 1))
        dirs = np.tile(self.dirs, (25, 1))
        field = ConstantField(0.7)
        one, n_one = rd.render_rays(field, self.grid, origins, dirs, 0.0, 5.0, 0.05, seed=8, threads=1)
        many, n_many = rd.render_rays(field, self.grid, origins, dirs, 0.0, 5.0, 0.05, seed=8, threads=3)
        npt.assert_array_equal(one.color, many.color)
        npt.assert_array_equal(one.depth, many.depth)
        self.assertEqual(n_one, n_many)


class TestRenderPanorama(unittest.TestCase):
    def setUp(self):
        self.grid = OccupancyGrid.dense(4, [[-1, -1, -1], [1, 1, 1]])

    def test_opaque_medium(self):
        image, depth, opacity = rd.render_panorama(ConstantField(50.0), self.grid, Pose.identity(), 32, 16, 0.005)
        self.assertEqual(image.data.shape, (16, 32, 3))
        self.assertTrue(np.all(opacity > 0.999))
        npt.assert_allclose(image.data, np.broadcast_to([0.2, 0.4, 0.6], (16, 32, 3)), atol=1e-3)
        self.assertTrue(np.all(depth.data < 0.1))

    def test_pose_outside_grid(self):
        with self.assertRaises(InputError):
            rd.render_panorama(ConstantField(1.0), self.grid, Pose((5.0, 0.0, 0.0)), 32, 16, 0.05)

    def test_non_finite_output_names_pixel(self):
        with self.assertRaises(NumericError) as ctx:
            rd.render_panorama(ConstantField(np.nan), self.grid, Pose.identity(), 32, 16, 0.05)
        self.assertIn("pixel (", str(ctx.exception))


if __name__ == "__main__":
    unittest.main()
