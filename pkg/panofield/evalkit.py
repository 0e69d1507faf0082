"""
PSNR and the benchmark harness comparing the accelerated, dense and
depth-free training variants.
"""

import csv
import time
import logging
from dataclasses import replace

import numpy as np

from .depth_prior import lift_point_cloud
from .occupancy import init_from_depth_prior
from .pano_geometry import EquirectImage
from .scene_io import perturb_scene
from .trainer import build_training_set, held_out_metrics, train
from .utils import DimensionMismatchError, InputError, PanofieldError, warn

mod_logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
TARGET_PSNR = 26.0
BENCHMARK_COLUMNS = ("label", "steps", "psnr_db", "wall_s", "mlp_evals", "evals_to_26db", "depth_rmse")


def psnr(reference, rendered, mask=None):
    """Peak signal-to-noise ratio in dB over the masked pixels.

    The MSE is taken over every masked pixel and channel of images in
    [0, 1]. Identical images give the 99 dB cap.
    """
    ref = reference.data if isinstance(reference, EquirectImage) else np.asarray(reference, dtype=np.float64)
    out = rendered.data if isinstance(rendered, EquirectImage) else np.asarray(rendered, dtype=np.float64)
    if ref.shape != out.shape:
        raise DimensionMismatchError(
            "Cannot compare images of shapes {} and {}".format(ref.shape, out.shape)
        )
    if mask is None:
        mask = np.ones(ref.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != ref.shape[:2]:
        raise DimensionMismatchError("Mask shape {} does not match image {}".format(mask.shape, ref.shape[:2]))
    if not np.any(mask):
        raise InputError("PSNR mask selects no pixel")
    mse = float(np.mean(np.square(ref[mask] - out[mask])))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


class BenchmarkConfig(object):
    """One benchmark row: a label, a training config and its scene variant."""

    def __init__(self, label, train_config, accelerate=True, depth_weight=None, decorated=False):
        self.label = label
        self.train_config = replace(
            train_config,
            accelerate=accelerate,
            depth_weight=train_config.depth_weight if depth_weight is None else depth_weight,
        )
        self.decorated = decorated


class EvalRecord(object):
    """One benchmark row. ``evals_to_target`` is None when the run never
    reached :data:`TARGET_PSNR` on the held-out view."""

    def __init__(
        self, label, steps, psnr_db=None, wall_s=None, mlp_evals=None, evals_to_target=None, depth_rmse=None,
        error=None,
    ):
        self.label = label
        self.steps = steps
        self.psnr_db = psnr_db
        self.wall_s = wall_s
        self.mlp_evals = mlp_evals
        self.evals_to_target = evals_to_target
        self.depth_rmse = depth_rmse
        self.error = error

    @property
    def ok(self):
        return self.error is None

    def row(self):
        if not self.ok:
            return [self.label, self.steps, "", "", "", "", ""]
        return [
            self.label,
            self.steps,
            "{:.4f}".format(self.psnr_db),
            "{:.3f}".format(self.wall_s),
            self.mlp_evals,
            "" if self.evals_to_target is None else self.evals_to_target,
            "" if self.depth_rmse is None else "{:.4f}".format(self.depth_rmse),
        ]


def default_benchmark_configs(train_config, include_decorated=False):
    """The accelerated run and its two ablations (plus a noisy-input row)."""
    configs = [
        BenchmarkConfig("dp-nerf", train_config),
        BenchmarkConfig("dense-ablation", train_config, accelerate=False),
        BenchmarkConfig("no-depth-ablation", train_config, depth_weight=0.0),
    ]
    if include_decorated:
        configs.append(BenchmarkConfig("dp-nerf-decorated", train_config, decorated=True))
    return configs


def fit_scene(scene, field_config, grid_config, train_config, threads=None):
    """Depth-prior grid, training set and trained field for one scene.

    Returns ``(field, grid, report, training_set)``.
    """
    cloud = lift_point_cloud(scene)
    grid = init_from_depth_prior(
        cloud,
        scene.pose.position,
        grid_config.resolution,
        None,
        grid_config.sigma_o,
        grid_config.view_weight,
        grid_config.threshold,
        grid_config.decay,
    )
    training_set = build_training_set(scene, train_config, cloud)
    field, report = train(scene, field_config, grid, train_config, threads, training_set=training_set)
    return field, grid, report, training_set


def _run_row(scene, field_config, grid_config, row, threads):
    config = row.train_config
    if row.decorated:
        scene = perturb_scene(scene, seed=config.seed)
    start = time.time()
    field, grid, report, training_set = fit_scene(scene, field_config, grid_config, config, threads)
    wall = time.time() - start
    if report.final is not None:
        value, depth_rmse = report.final.psnr, report.final.depth_rmse
    else:
        step_size = config.step_size or 0.5 * float(grid.voxel_size.min())
        value, depth_rmse = held_out_metrics(field, grid, training_set.held_out, grid.diagonal, step_size, threads)
    evals = report.final.mlp_evals if report.final is not None else 0
    return EvalRecord(
        row.label, config.steps, value, wall, evals, report.evals_to_reach(TARGET_PSNR), depth_rmse
    )


def run_benchmark(scene, configs, field_config, grid_config, csv_path=None, threads=None):
    """Train every configuration from identical seeds and collect one record each.

    A row that fails is recorded with its error and the run continues.
    """
    records = []
    for row in configs:
        mod_logger.info("Benchmark row %s (%d steps)", row.label, row.train_config.steps)
        try:
            record = _run_row(scene, field_config, grid_config, row, threads)
        except PanofieldError as exc:
            warn("Benchmark row {} failed: {}".format(row.label, exc.raw_message))
            record = EvalRecord(row.label, row.train_config.steps, error=exc)
        records.append(record)
    if csv_path is not None:
        write_benchmark_csv(records, csv_path)
    ratio = evals_ratio(records)
    if ratio is None:
        mod_logger.info("dense-ablation / dp-nerf MLP evaluations: %g dB not reached", TARGET_PSNR)
    else:
        mod_logger.info("dense-ablation / dp-nerf MLP evaluations to %g dB: %.2fx", TARGET_PSNR, ratio)
    return records


def write_benchmark_csv(records, path):
    with open(path, "w", newline="") as fid:
        writer = csv.writer(fid)
        writer.writerow(BENCHMARK_COLUMNS)
        for record in records:
            writer.writerow(record.row())
    return path


def evals_ratio(records, numerator="dense-ablation", denominator="dp-nerf"):
    """Ratio of the MLP evaluations two rows needed to reach :data:`TARGET_PSNR`.

    None when either row failed or never reached the target, so runs are
    only compared at matched quality.
    """
    by_label = dict((r.label, r) for r in records if r.ok)
    if numerator not in by_label or denominator not in by_label:
        return None
    top = by_label[numerator].evals_to_target
    bottom = by_label[denominator].evals_to_target
    if top is None or not bottom:
        return None
    return top / float(bottom)
