#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""Tests for `panofield.radiance_field`."""

import os
import shutil
import tempfile
import unittest

import numpy as np
import numpy.testing as npt

from panofield import radiance_field as rf
from panofield.utils import InputError, NumericError

BOUNDS = [[-1.0, -2.0, -1.5], [1.0, 2.0, 1.5]]


def _small_config(activation="softplus"):
    return rf.FieldConfig(
        L_pos=2, L_dir=1, hidden_width=8, hidden_layers=3, skip_layer=2, hidden_activation=activation
    )


def _unit(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1)[:, np.newaxis]


class TestEncode(unittest.TestCase):
    def test_layout(self):
        p = np.array([[0.25, -0.5, 0.0]])
        enc = rf.encode(p, 2)
        self.assertEqual(enc.shape, (1, 15))
        npt.assert_allclose(enc[0, :3], p[0])
        npt.assert_allclose(enc[0, 3:6], np.sin(np.pi * p[0]))
        npt.assert_allclose(enc[0, 6:9], np.cos(np.pi * p[0]))
        npt.assert_allclose(enc[0, 9:12], np.sin(2.0 * np.pi * p[0]))
        npt.assert_allclose(enc[0, 12:15], np.cos(2.0 * np.pi * p[0]))

    def test_no_frequencies(self):
        p = np.arange(6.0).reshape(2, 3)
        npt.assert_array_equal(rf.encode(p, 0), p)

    def test_negative_frequencies(self):
        with self.assertRaises(InputError):
            rf.encode(np.zeros((1, 3)), -1)


class TestField(unittest.TestCase):
    def test_zero_parameters(self):
        config = _small_config("relu")
        field = rf.RadianceField(config, BOUNDS, np.zeros(config.parameter_count))
        rng = np.random.default_rng(0)
        out = rf.evaluate(field, rng.uniform(-1, 1, (5, 3)), _unit(rng, 5))
        npt.assert_allclose(out.sigma, np.log(2.0), rtol=1e-6)
        npt.assert_allclose(out.color, 0.5)

    def test_density_ignores_direction(self):
        field = rf.RadianceField(rf.FieldConfig(hidden_width=32), BOUNDS, seed=4)
        rng = np.random.default_rng(1)
        positions = rng.uniform(-1, 1, (20, 3))
        a = rf.evaluate(field, positions, _unit(rng, 20))
        b = rf.evaluate(field, positions, _unit(rng, 20))
        npt.assert_array_equal(a.sigma, b.sigma)
        npt.assert_allclose(field.density(positions), a.sigma, rtol=1e-6)
        self.assertTrue(np.all(a.sigma >= 0))
        self.assertTrue(np.all((a.color >= 0) & (a.color <= 1)))

    def test_seeded_initialization(self):
        config = _small_config()
        a = rf.RadianceField(config, BOUNDS, seed=11)
        b = rf.RadianceField(config, BOUNDS, seed=11)
        c = rf.RadianceField(config, BOUNDS, seed=12)
        npt.assert_array_equal(a.params, b.params)
        self.assertFalse(np.array_equal(a.params, c.params))
        self.assertEqual(a.parameter_count, config.parameter_count)

    def test_gradients_match_finite_differences(self):
        config = _small_config()
        field = rf.RadianceField(config, BOUNDS, seed=2, dtype=np.float64)
        rng = np.random.default_rng(5)
        positions = rng.uniform(-0.9, 0.9, (7, 3))
        directions = _unit(rng, 7)
        grad_sigma = rng.normal(size=7)
        grad_color = rng.normal(size=(7, 3))

        def objective(params):
            perturbed = rf.RadianceField(config, BOUNDS, params, dtype=np.float64)
            out = rf.evaluate(perturbed, positions, directions)
            return float(np.sum(grad_sigma * out.sigma) + np.sum(grad_color * out.color))

        _, grad = rf.evaluate_with_gradients(field, positions, directions, grad_sigma, grad_color)
        eps = 1e-6
        for index in rng.choice(config.parameter_count, 40, replace=False):
            bump = np.zeros(config.parameter_count)
            bump[index] = eps
            numeric = (objective(field.params + bump) - objective(field.params - bump)) / (2 * eps)
            self.assertAlmostEqual(grad[index], numeric, delta=1e-6 + 1e-4 * abs(numeric))

    def test_invalid_inputs(self):
        field = rf.RadianceField(_small_config(), BOUNDS)
        with self.assertRaises(NumericError):
            field.density([[np.nan, 0.0, 0.0]])
        with self.assertRaises(InputError):
            field.forward(np.zeros((1, 3)), [[0.0, 0.0, 2.0]])
        with self.assertRaises(InputError):
            field.forward(np.zeros((2, 3)), [[0.0, 0.0, 1.0]])
        with self.assertRaises(InputError):
            rf.RadianceField(_small_config(), BOUNDS, np.zeros(3))
        with self.assertRaises(InputError):
            rf.RadianceField(rf.FieldConfig(hidden_activation="tanh"), BOUNDS)
        with self.assertRaises(InputError):
            rf.RadianceField(_small_config(), [[0, 0, 0], [1, 0, 1]])

    def test_batched_density(self):
        field = rf.RadianceField(_small_config("relu"), BOUNDS, seed=3)
        positions = np.random.default_rng(8).uniform(-1, 1, (70000, 3))
        npt.assert_allclose(rf.density_batched(field, positions, threads=3), field.density(positions), rtol=1e-6)

    def test_dtype_conversion(self):
        field = rf.RadianceField(_small_config(), BOUNDS, seed=3)
        wide = field.with_dtype(np.float64)
        self.assertEqual(wide.dtype, np.float64)
        npt.assert_allclose(wide.density(np.zeros((1, 3))), field.density(np.zeros((1, 3))), rtol=1e-5)


class TestCheckpoint(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_round_trip(self):
        field = rf.RadianceField(_small_config("relu"), BOUNDS, seed=6)
        path = field.save(os.path.join(self.tmp, "checkpoint.bin"))
        loaded = rf.RadianceField.load(path)
        self.assertEqual(loaded.params.tobytes(), field.params.tobytes())
        self.assertEqual(loaded.config, field.config)
        npt.assert_array_equal(loaded.bounds, field.bounds)
        rng = np.random.default_rng(0)
        positions, directions = rng.uniform(-1, 1, (4, 3)), _unit(rng, 4)
        npt.assert_array_equal(
            rf.evaluate(loaded, positions, directions).color,
            rf.evaluate(field, positions, directions).color,
        )

    def test_not_a_checkpoint(self):
        path = os.path.join(self.tmp, "bad.bin")
        with open(path, "wb") as fid:
            fid.write(b"PFOCC001" + bytes(200))
        with self.assertRaises(InputError):
            rf.RadianceField.load(path)


if __name__ == "__main__":
    unittest.main()
