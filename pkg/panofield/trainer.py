"""
Training loop: RGB and depth supervision over the captured view and
reprojected simulated views, with occupancy-restricted sampling.
"""

import os
import csv
import time
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .depth_prior import ReprojectedView, lift_point_cloud, reproject, sample_training_poses
from .occupancy import OccupancyGrid, traverse_batch, update
from .pano_geometry import EquirectImage, pixel_grid, pixel_to_direction
from .radiance_field import RadianceField
from .renderer import composite_packed, composite_packed_backward, render_rays, sample_points
from .utils import (
    DivergenceError,
    EmptyBatch,
    InputError,
    chunk_slices,
    ordered_map,
    seeded_rng,
)

mod_logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("step", "rgb_loss", "depth_loss", "psnr", "mlp_evals", "wall_ms")
SHARD_SIZE = 256
DIVERGENCE_FACTOR = 10.0


@dataclass
class TrainConfig:
    steps: int = 20000
    rays_per_batch: int = 1024
    learning_rate: float = 5e-4
    learning_rate_final: float = 5e-5
    depth_weight: float = 0.1
    grid_update_interval: int = 250
    grid_update_start: int = 500
    simulated_view_count: int = 8
    jitter_radius: float = 0.3
    seed: int = 0
    step_size: Optional[float] = None
    accelerate: bool = True
    report_interval: int = 500
    checkpoint_interval: int = 0

    def validate(self):
        if self.steps < 0:
            raise InputError("steps must be >= 0, got {}".format(self.steps))
        if self.rays_per_batch < 1:
            raise InputError("rays_per_batch must be >= 1, got {}".format(self.rays_per_batch))
        if self.depth_weight < 0:
            raise InputError("depth_weight must be >= 0, got {}".format(self.depth_weight))
        if self.learning_rate <= 0 or self.learning_rate_final <= 0:
            raise InputError("learning rates must be > 0")
        if self.grid_update_interval < 1 or self.report_interval < 1:
            raise InputError("grid_update_interval and report_interval must be >= 1")
        if self.simulated_view_count < 0:
            raise InputError("simulated_view_count must be >= 0")
        if self.step_size is not None and self.step_size <= 0:
            raise InputError("step_size must be > 0, got {}".format(self.step_size))
        return self


def learning_rate(config, step):
    """Exponential decay from ``learning_rate`` to ``learning_rate_final``."""
    frac = min(max(step / float(max(config.steps, 1)), 0.0), 1.0)
    return config.learning_rate * (config.learning_rate_final / config.learning_rate) ** frac


class Adam(object):
    """First/second moment step-size adaptation, updating parameters in place."""

    def __init__(self, size, betas=(0.9, 0.99), eps=1e-15):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * np.square(grad)
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(params.dtype)


class TrainingSet(object):
    """Supervision views plus one held-out simulated view for monitoring."""

    def __init__(self, views, held_out):
        self.views = list(views)
        self.held_out = held_out

    def __len__(self):
        return len(self.views)


def build_training_set(scene, config, cloud=None):
    """Identity view plus ``simulated_view_count`` reprojected views.

    One extra pose is sampled and reprojected as the held-out view.
    """
    config.validate()
    cloud = lift_point_cloud(scene) if cloud is None else cloud
    poses = sample_training_poses(
        scene, config.simulated_view_count + 1, config.jitter_radius, config.seed, cloud
    )
    views = [ReprojectedView.from_scene(scene)]
    views += [reproject(cloud, pose, scene.width, scene.height) for pose in poses[:-1]]
    held_out = reproject(cloud, poses[-1], scene.width, scene.height)
    for i, view in enumerate(views):
        mod_logger.debug("Training view %d: %.1f%% valid", i, 100.0 * view.validity.mean())
    return TrainingSet(views, held_out)


class RayPool(object):
    """Every supervised pixel of a training set, flattened."""

    def __init__(self, views):
        origins, dirs, colors, depths, depth_valid = [], [], [], [], []
        for view in views:
            u, v = pixel_grid(view.width, view.height)
            mask = view.validity.reshape(-1)
            cam = pixel_to_direction(u[mask], v[mask], view.width, view.height)
            dirs.append(cam.dot(view.pose.rotation.T))
            origins.append(np.broadcast_to(view.pose.position, (int(mask.sum()), 3)))
            colors.append(view.rgb.data.reshape(-1, 3)[mask])
            depth = view.depth.data.reshape(-1)[mask]
            depths.append(depth)
            depth_valid.append(depth > 0)
        self.origins = np.concatenate(origins) if origins else np.zeros((0, 3))
        self.directions = np.concatenate(dirs) if dirs else np.zeros((0, 3))
        self.colors = np.concatenate(colors) if colors else np.zeros((0, 3))
        self.depths = np.concatenate(depths) if depths else np.zeros(0)
        self.depth_valid = np.concatenate(depth_valid) if depth_valid else np.zeros(0, dtype=bool)

    def __len__(self):
        return self.origins.shape[0]


def loss(gt_color, gt_depth, valid, depth_valid, result, depth_weight):
    """RGB plus weighted depth loss of a batch.

    Returns
    -------
    total : float
    components : dict
        ``rgb`` (mean squared color error over valid rays) and ``depth`` (mean
        squared depth error over rays with valid depth, unweighted).
    """
    total, components, _, _ = _loss_and_gradients(
        gt_color, gt_depth, valid, depth_valid, result, depth_weight
    )
    return total, components


def _loss_and_gradients(gt_color, gt_depth, valid, depth_valid, result, depth_weight, n_valid=None, n_depth=None):
    valid = np.asarray(valid, dtype=bool)
    depth_valid = np.asarray(depth_valid, dtype=bool) & valid
    n_valid = int(valid.sum()) if n_valid is None else n_valid
    n_depth = int(depth_valid.sum()) if n_depth is None else n_depth
    if n_valid == 0:
        raise EmptyBatch("Batch holds no valid ray")
    color_err = np.asarray(result.color) - np.asarray(gt_color)
    depth_err = np.asarray(result.depth) - np.asarray(gt_depth)
    rgb = float(np.sum(np.square(color_err[valid]))) / n_valid
    grad_color = np.where(valid[:, np.newaxis], 2.0 * color_err / n_valid, 0.0)
    if n_depth > 0:
        depth = float(np.sum(np.square(depth_err[depth_valid]))) / n_depth
        grad_depth = np.where(depth_valid, 2.0 * depth_weight * depth_err / n_depth, 0.0)
    else:
        depth = 0.0
        grad_depth = np.zeros_like(depth_err, dtype=np.float64)
    return rgb + depth_weight * depth, {"rgb": rgb, "depth": depth}, grad_color, grad_depth


class ReportRecord(object):
    def __init__(self, step, rgb_loss, depth_loss, psnr, mlp_evals, wall_ms, depth_rmse=None):
        self.step = step
        self.rgb_loss = rgb_loss
        self.depth_loss = depth_loss
        self.psnr = psnr
        self.mlp_evals = mlp_evals
        self.wall_ms = wall_ms
        self.depth_rmse = depth_rmse

    def row(self):
        return [
            self.step,
            "{:.6g}".format(self.rgb_loss),
            "{:.6g}".format(self.depth_loss),
            "{:.4f}".format(self.psnr),
            self.mlp_evals,
            int(round(self.wall_ms)),
        ]


class TrainReport(object):
    def __init__(self):
        self.records = []

    def append(self, record):
        if self.records and record.mlp_evals < self.records[-1].mlp_evals:
            raise ValueError("MLP evaluation count must not decrease")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    @property
    def final(self):
        return self.records[-1] if self.records else None

    def evals_to_reach(self, psnr):
        """MLP evaluations at the first record whose held-out PSNR reaches ``psnr``."""
        for record in self.records:
            if record.psnr >= psnr:
                return record.mlp_evals
        return None

    def to_csv(self, path):
        with open(path, "w", newline="") as fid:
            writer = csv.writer(fid)
            writer.writerow(REPORT_COLUMNS)
            for record in self.records:
                writer.writerow(record.row())
        return path


def held_out_metrics(field, grid, view, t_far, step, threads=None):
    """PSNR and depth RMSE of the field against a view, on its validity mask."""
    from .evalkit import psnr

    mask = view.validity.reshape(-1)
    u, v = pixel_grid(view.width, view.height)
    dirs = pixel_to_direction(u[mask], v[mask], view.width, view.height).dot(view.pose.rotation.T)
    origins = np.broadcast_to(view.pose.position, dirs.shape)
    result, _ = render_rays(field, grid, origins, dirs, 0.0, t_far, step, threads=threads)
    rendered = np.zeros((view.height * view.width, 3))
    rendered[mask] = np.clip(result.color, 0.0, 1.0)
    value = psnr(view.rgb, EquirectImage(rendered.reshape(view.height, view.width, 3)), view.validity)
    depth_rmse = float(np.sqrt(np.mean(np.square(result.depth - view.depth.data.reshape(-1)[mask]))))
    return value, depth_rmse


def train(scene, field_config, grid, config, threads=None, checkpoint_dir=None, training_set=None):
    """Optimize a radiance field on ``scene``.

    Parameters
    ----------
    scene : Scene
    field_config : FieldConfig
    grid : OccupancyGrid
        Initialized from the scene's depth prior. It is updated in place
        every ``grid_update_interval`` steps when ``config.accelerate`` is set;
        otherwise a dense grid over the same bounds is used.
    config : TrainConfig
    threads : int, optional
        Worker cap; results do not depend on it.
    checkpoint_dir : str, optional
        Where periodic and final checkpoints are written.
    training_set : TrainingSet, optional
        Reused instead of building one from ``scene``.

    Returns
    -------
    field : RadianceField
    report : TrainReport
    """
    config.validate()
    field = RadianceField(field_config, grid.bounds, seed=config.seed)
    report = TrainReport()
    if config.steps == 0:
        return field, report

    training_set = build_training_set(scene, config) if training_set is None else training_set
    pool = RayPool(training_set.views)
    if len(pool) == 0:
        raise InputError("Training set has no valid pixel")
    sample_grid = grid if config.accelerate else OccupancyGrid.dense(grid.resolution, grid.bounds)
    step_size = config.step_size or 0.5 * float(grid.voxel_size.min())
    t_far = grid.diagonal
    optimizer = Adam(field.parameter_count)
    mlp_evals = 0
    initial_rgb = None
    recent = {"rgb": [], "depth": []}
    update_round = 0
    start = time.time()

    mod_logger.info(
        "Training %d steps on %d rays from %d views (accelerate=%s, step=%.4f m)",
        config.steps, len(pool), len(training_set), config.accelerate, step_size,
    )
    for step in range(1, config.steps + 1):
        rng = seeded_rng(config.seed, 17, step)
        batch = rng.integers(0, len(pool), config.rays_per_batch)
        jitter_seed = int(rng.integers(0, 2 ** 31))
        depth_valid = pool.depth_valid[batch]
        n_valid, n_depth = batch.shape[0], int(depth_valid.sum())

        def run_shard(s, batch=batch, jitter_seed=jitter_seed, n_valid=n_valid, n_depth=n_depth):
            ids = batch[s]
            origins, dirs = pool.origins[ids], pool.directions[ids]
            packed = traverse_batch(
                sample_grid, origins, dirs, 0.0, t_far, step_size, jitter_seed, ids, threads=1
            )
            positions, sample_dirs = sample_points(packed, origins, dirs)
            out, cache = field.forward(positions, sample_dirs)
            result, comp_cache = composite_packed(packed, out.sigma, out.color, (0.0, 0.0, 0.0), t_far)
            _, parts, grad_color, grad_depth = _loss_and_gradients(
                pool.colors[ids], pool.depths[ids], np.ones(len(ids), dtype=bool),
                pool.depth_valid[ids], result, config.depth_weight, n_valid, n_depth,
            )
            d_sigma, d_color = composite_packed_backward(
                packed, comp_cache, grad_color, grad_depth, np.zeros(len(ids))
            )
            grad = field.backward(cache, d_sigma, d_color)
            return grad, parts, len(packed)

        try:
            shards = ordered_map(run_shard, chunk_slices(n_valid, SHARD_SIZE), threads)
        except EmptyBatch as exc:
            mod_logger.warning("Skipping step %d: %s", step, exc)
            continue
        grad = shards[0][0].astype(np.float64)
        for shard in shards[1:]:
            grad += shard[0]
        rgb_loss = sum(s[1]["rgb"] for s in shards)
        depth_loss = sum(s[1]["depth"] for s in shards)
        mlp_evals += sum(s[2] for s in shards)

        if initial_rgb is None:
            initial_rgb = rgb_loss
        elif rgb_loss > DIVERGENCE_FACTOR * initial_rgb:
            raise DivergenceError(
                "RGB loss {:.6g} exceeds {:g}x its initial value {:.6g} (learning rate {:.3g})".format(
                    rgb_loss, DIVERGENCE_FACTOR, initial_rgb, learning_rate(config, step)
                ),
                "step {}".format(step),
            )
        optimizer.step(field.params, grad, learning_rate(config, step))
        recent["rgb"].append(rgb_loss)
        recent["depth"].append(depth_loss)

        if (
            config.accelerate
            and step >= config.grid_update_start
            and (step - config.grid_update_start) % config.grid_update_interval == 0
        ):
            mlp_evals += update(grid, field, step_size, config.seed, update_round, threads)
            update_round += 1

        if step % config.report_interval == 0 or step == config.steps:
            value, depth_rmse = held_out_metrics(
                field, sample_grid, training_set.held_out, t_far, step_size, threads
            )
            record = ReportRecord(
                step,
                float(np.mean(recent["rgb"])),
                float(np.mean(recent["depth"])),
                value,
                mlp_evals,
                1000.0 * (time.time() - start),
                depth_rmse,
            )
            report.append(record)
            recent = {"rgb": [], "depth": []}
            mod_logger.info(
                "step %d: rgb %.5f depth %.5f held-out psnr %.2f dB, %d MLP evaluations",
                step, record.rgb_loss, record.depth_loss, value, mlp_evals,
            )

        if checkpoint_dir and config.checkpoint_interval and step % config.checkpoint_interval == 0:
            field.save(os.path.join(checkpoint_dir, "checkpoint_{:06d}.bin".format(step)))

    if checkpoint_dir:
        path = field.save(os.path.join(checkpoint_dir, "checkpoint.bin"))
        mod_logger.info("Final checkpoint written to %s", path)
    return field, report
