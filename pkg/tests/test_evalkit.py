#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""Tests for `panofield.evalkit`."""

import os
import csv
import shutil
import tempfile
import unittest
from dataclasses import replace

import numpy as np

from panofield import evalkit as ek
from panofield.config import GridConfig
from panofield.pano_geometry import EquirectImage
from panofield.radiance_field import FieldConfig
from panofield.scene_io import default_room, render_room_oracle
from panofield.trainer import ReportRecord, TrainConfig, TrainReport
from panofield.utils import DimensionMismatchError, InputError

SLOW = os.environ.get("PANOFIELD_SLOW_TESTS")


class TestPsnr(unittest.TestCase):
    def test_identical_images_hit_cap(self):
        image = np.random.default_rng(0).random((8, 16, 3))
        self.assertEqual(ek.psnr(image, image), ek.PSNR_CAP)

    def test_known_error(self):
        ref = np.zeros((8, 16, 3))
        self.assertAlmostEqual(ek.psnr(ref, np.full((8, 16, 3), 0.1)), 20.0)
        self.assertAlmostEqual(ek.psnr(EquirectImage(ref), EquirectImage(np.full((8, 16, 3), 0.01))), 40.0)

    def test_mask_excludes_pixels(self):
        ref = np.zeros((8, 16, 3))
        out = ref.copy()
        out[:4] = 1.0
        out[4:] = 0.1
        mask = np.zeros((8, 16), dtype=bool)
        mask[4:] = True
        self.assertAlmostEqual(ek.psnr(ref, out, mask), 20.0)

    def test_errors(self):
        with self.assertRaises(DimensionMismatchError):
            ek.psnr(np.zeros((8, 16, 3)), np.zeros((4, 8, 3)))
        with self.assertRaises(DimensionMismatchError):
            ek.psnr(np.zeros((8, 16, 3)), np.zeros((8, 16, 3)), np.ones((4, 8)))
        with self.assertRaises(InputError):
            ek.psnr(np.zeros((8, 16, 3)), np.zeros((8, 16, 3)), np.zeros((8, 16)))


class TestRecords(unittest.TestCase):
    def test_rows(self):
        ok = ek.EvalRecord("dp-nerf", 100, 24.123456, 1.23456, 5000, 3000, 0.123456)
        self.assertEqual(ok.row(), ["dp-nerf", 100, "24.1235", "1.235", 5000, 3000, "0.1235"])
        short = ek.EvalRecord("dp-nerf", 100, 24.123456, 1.23456, 5000)
        self.assertEqual(short.row()[5:], ["", ""])
        failed = ek.EvalRecord("dense-ablation", 100, error=InputError("boom"))
        self.assertFalse(failed.ok)
        self.assertEqual(failed.row(), ["dense-ablation", 100, "", "", "", "", ""])
        self.assertEqual(len(ok.row()), len(ek.BENCHMARK_COLUMNS))

    def test_ratio_at_matched_psnr(self):
        records = [
            ek.EvalRecord("dp-nerf", 10, 28.0, 1.0, 1000, evals_to_target=800),
            ek.EvalRecord("dense-ablation", 10, 28.0, 3.0, 4000, evals_to_target=3200),
        ]
        self.assertAlmostEqual(ek.evals_ratio(records), 4.0)
        self.assertIsNone(ek.evals_ratio(records[:1]))
        records[1] = ek.EvalRecord("dense-ablation", 10, error=InputError("boom"))
        self.assertIsNone(ek.evals_ratio(records))

    def test_ratio_ignores_final_counts(self):
        # the accelerated run stopped short of 26 dB; its final count says nothing
        records = [
            ek.EvalRecord("dp-nerf", 10, 20.0, 1.0, 1000),
            ek.EvalRecord("dense-ablation", 10, 30.0, 3.0, 5000, evals_to_target=4000),
        ]
        self.assertIsNone(ek.evals_ratio(records))
        records.reverse()
        self.assertIsNone(ek.evals_ratio(records, "dp-nerf", "dense-ablation"))

    def test_evals_to_target_from_report(self):
        report = TrainReport()
        for step, value, evals in ((100, 20.0, 1000), (200, 26.5, 2000), (300, 29.0, 3000)):
            report.append(ReportRecord(step, 0.1, 0.1, value, evals, 10.0))
        self.assertEqual(report.evals_to_reach(ek.TARGET_PSNR), 2000)
        self.assertIsNone(report.evals_to_reach(30.0))

    def test_default_rows(self):
        train = TrainConfig(steps=50, depth_weight=0.3)
        configs = ek.default_benchmark_configs(train)
        self.assertEqual([c.label for c in configs], ["dp-nerf", "dense-ablation", "no-depth-ablation"])
        self.assertTrue(configs[0].train_config.accelerate)
        self.assertFalse(configs[1].train_config.accelerate)
        self.assertEqual(configs[1].train_config.depth_weight, 0.3)
        self.assertEqual(configs[2].train_config.depth_weight, 0.0)
        decorated = ek.default_benchmark_configs(train, include_decorated=True)[-1]
        self.assertTrue(decorated.decorated)
        self.assertEqual(decorated.label, "dp-nerf-decorated")


class TestBenchmark(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        room = default_room()
        self.scene = render_room_oracle(room, room.pose, 32, 16)

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_small_benchmark(self):
        train = TrainConfig(
            steps=4, rays_per_batch=32, simulated_view_count=1, report_interval=2, grid_update_start=100, seed=2
        )
        configs = ek.default_benchmark_configs(train)
        configs.append(ek.BenchmarkConfig("broken", replace(train, rays_per_batch=0)))
        field = FieldConfig(L_pos=2, L_dir=1, hidden_width=8, hidden_layers=2, skip_layer=1)
        csv_path = os.path.join(self.tmp, "benchmark.csv")
        records = ek.run_benchmark(self.scene, configs, field, GridConfig(resolution=16), csv_path)

        self.assertEqual([r.label for r in records], ["dp-nerf", "dense-ablation", "no-depth-ablation", "broken"])
        self.assertTrue(all(r.ok for r in records[:3]))
        self.assertFalse(records[3].ok)
        self.assertTrue(all(np.isfinite(r.psnr_db) for r in records[:3]))
        self.assertTrue(all(np.isfinite(r.depth_rmse) for r in records[:3]))
        self.assertGreater(records[1].mlp_evals, records[0].mlp_evals)
        unmatched = records[0].evals_to_target is None or records[1].evals_to_target is None
        self.assertEqual(ek.evals_ratio(records) is None, unmatched)

        with open(csv_path) as fid:
            rows = list(csv.reader(fid))
        self.assertEqual(tuple(rows[0]), ek.BENCHMARK_COLUMNS)
        self.assertEqual(len(rows), 5)
        for record, row in zip(records[:3], rows[1:4]):
            expected = "" if record.evals_to_target is None else str(record.evals_to_target)
            self.assertEqual(row[5], expected)
        self.assertEqual(rows[4], ["broken", "4", "", "", "", "", ""])

    def test_fit_scene(self):
        train = TrainConfig(steps=2, rays_per_batch=16, simulated_view_count=1, report_interval=1, grid_update_start=100)
        field_config = FieldConfig(L_pos=2, L_dir=1, hidden_width=8, hidden_layers=2, skip_layer=1)
        field, grid, report, training_set = ek.fit_scene(self.scene, field_config, GridConfig(resolution=16), train)
        self.assertEqual([r.step for r in report.records], [1, 2])
        self.assertEqual(len(training_set), 2)
        self.assertEqual(grid.resolution, 16)
        self.assertTrue(np.all(np.isfinite(field.density(np.zeros((1, 3))))))


@unittest.skipUnless(SLOW, "set PANOFIELD_SLOW_TESTS to run the full-budget benchmark")
class TestAcceptance(unittest.TestCase):
    """Full-budget runs on the 256x128 synthetic room."""

    @classmethod
    def setUpClass(cls):
        room = default_room()
        cls.scene = render_room_oracle(room, room.pose, 256, 128)
        train = TrainConfig(steps=20000, report_interval=250)
        configs = [
            ek.BenchmarkConfig("dp-nerf", train),
            ek.BenchmarkConfig("dense-ablation", train, accelerate=False),
        ]
        cls.records = ek.run_benchmark(cls.scene, configs, FieldConfig(), GridConfig())

    def test_held_out_psnr(self):
        self.assertTrue(self.records[0].ok, self.records[0].error)
        self.assertGreaterEqual(self.records[0].psnr_db, 28.0)

    def test_dense_evaluations_at_matched_psnr(self):
        ratio = ek.evals_ratio(self.records)
        self.assertIsNotNone(ratio, "a run did not reach {} dB".format(ek.TARGET_PSNR))
        self.assertGreaterEqual(ratio, 3.0)

    def test_depth_loss_halves_depth_error(self):
        train = TrainConfig(steps=5000, depth_weight=0.1)
        configs = [
            ek.BenchmarkConfig("dp-nerf", train),
            ek.BenchmarkConfig("no-depth-ablation", train, depth_weight=0.0),
        ]
        with_depth, without = ek.run_benchmark(self.scene, configs, FieldConfig(), GridConfig())
        self.assertTrue(with_depth.ok and without.ok)
        self.assertLessEqual(with_depth.depth_rmse, 0.5 * without.depth_rmse)


if __name__ == "__main__":
    unittest.main()
