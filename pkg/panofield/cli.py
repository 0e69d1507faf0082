# -*- coding: utf-8 -*-

"""Console script for panofield."""
import os
import sys
import json
import logging
from functools import update_wrapper

import click
import numpy as np

from . import utils
from .config import PipelineConfig
from .evalkit import TARGET_PSNR, default_benchmark_configs, evals_ratio, psnr, run_benchmark
from .occupancy import OccupancyGrid
from .pano_geometry import EquirectImage, Pose, equirect_to_skybox, skybox_to_equirect
from .radiance_field import RadianceField
from .renderer import render_panorama
from .scene_io import (
    Scene,
    SyntheticRoom,
    default_room,
    load_scene,
    load_skybox,
    read_rgb_png,
    render_room_oracle,
    save_scene,
    save_skybox,
    write_opacity_png,
    write_rgb_png,
)
from .workflows.base import init_scene_mesh_wf, init_scene_train_wf

mod_logger = logging.getLogger(__name__)

DENSE_FALLBACK_RESOLUTION = 64


class Parameters:
    def __init__(self, scene, output_dir, work_dir, threads):
        self.scene = scene
        self.output_dir = output_dir
        self.work_dir = work_dir
        self.threads = threads


def handle_errors(func):
    """Turn pipeline errors into an ``error:`` line and an exit code.

    Configuration and input errors exit with 2, every other pipeline error
    (including a crashed workflow) with 1.
    """

    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        try:
            return func(*args, **kwargs)
        except (click.exceptions.Exit, click.exceptions.Abort):
            raise
        except (utils.ConfigError, utils.InputError) as exc:
            click.echo("error: [{}] {}".format(exc.code, exc.raw_message), err=True)
            ctx.exit(2)
        except utils.PanofieldError as exc:
            click.echo("error: [{}] {}".format(exc.code, exc.raw_message), err=True)
            ctx.exit(1)
        except RuntimeError as exc:
            click.echo("error: [workflow] {}".format(str(exc).splitlines()[0]), err=True)
            ctx.exit(1)

    return update_wrapper(wrapper, func)


def _threads(ctx):
    return utils.thread_count(ctx.obj.get("threads"))


def _load_config(config_file, overrides, seed):
    overrides = list(overrides)
    if seed is not None:
        overrides.append("seed={}".format(seed))
    return PipelineConfig.from_json(config_file, overrides)


def _prepare_output(config):
    if not config.output_dir:
        raise utils.ConfigError("No output directory configured (set output_dir)")
    os.makedirs(config.output_dir, exist_ok=True)
    config_file = config.save(os.path.join(config.output_dir, "config.json"))
    utils.write_seed(config.output_dir, config.seed)
    return config_file


def _run_workflow(wf):
    wf.config["execution"]["keep_inputs"] = True
    wf.run()


set_option = click.option(
    "--set",
    "overrides",
    multiple=True,
    metavar="KEY=VALUE",
    help="Override a config entry, e.g. --set train.steps=1000. Repeatable.",
)
seed_option = click.option(
    "--seed", type=int, default=None, help="Root seed; overrides the config's seed."
)


@click.group()
@click.option("-v", "--verbose", count=True, help="Raise log verbosity (-v info, -vv debug).")
@click.option(
    "--threads",
    type=int,
    default=None,
    envvar=utils.THREADS_ENV,
    help="Worker cap for parallel stages. Falls back to $PANOFIELD_THREADS, then 1. "
    "Results do not depend on it.",
)
@click.pass_context
def main(ctx, verbose, threads):
    """Panorama-to-mesh reconstruction with a depth-prior radiance field."""
    level = logging.WARNING
    if verbose == 1:
        level = logging.INFO
    elif verbose > 1:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s: %(message)s")
    logging.getLogger("panofield").setLevel(level)
    ctx.ensure_object(dict)
    ctx.obj["threads"] = threads


@main.command("generate-scene")
@click.argument("output_dir")
@click.option("--room", "room_file", default=None, help="Room description JSON. Default: the built-in room.")
@click.option("--width", default=512, show_default=True, help="Panorama width (height is half).")
@seed_option
@handle_errors
def generate_scene(output_dir, room_file, width, seed):
    """Render the synthetic room oracle into a scene directory."""
    room = default_room() if room_file is None else SyntheticRoom.load(room_file)
    if width <= 0 or width % 2:
        raise utils.InputError("Width must be a positive even number, got {}".format(width))
    scene = render_room_oracle(room, room.pose, width, width // 2)
    save_scene(scene, output_dir)
    with open(os.path.join(output_dir, "room.json"), "w") as fid:
        json.dump(room.to_json(), fid, indent=2)
    utils.write_seed(output_dir, 0 if seed is None else seed)
    click.echo("Wrote {}x{} scene to {}".format(scene.width, scene.height, output_dir))


def _detect_format(in_path):
    if os.path.isdir(in_path):
        return "skybox"
    if os.path.isfile(in_path) and in_path.lower().endswith(".png"):
        return "equirect"
    raise utils.InputError("Cannot detect the format of {}".format(in_path))


def _faces_psnr(reference, rendered):
    ref = np.concatenate([reference[name] for name in sorted(reference.faces)])
    out = np.concatenate([rendered[name] for name in sorted(rendered.faces)])
    return psnr(ref, out)


@main.command()
@click.argument("in_path")
@click.argument("out_path")
@click.option(
    "--from",
    "source_format",
    type=click.Choice(["skybox", "equirect"]),
    default=None,
    help="Input layout; detected from IN_PATH when omitted (directory: skybox, .png: equirect).",
)
@click.option("--width", default=None, type=int, help="Output panorama width (skybox input). Default: 4 x face size.")
@click.option("--face-size", default=None, type=int, help="Output face size (equirect input). Default: width / 4.")
@handle_errors
def convert(in_path, out_path, source_format, width, face_size):
    """Convert between a six-face skybox directory and an equirect PNG.

    The input is resampled back from the output and the round-trip PSNR is
    printed.
    """
    detected = _detect_format(in_path)
    if source_format is not None and source_format != detected:
        raise utils.InputError("{} does not look like a {} input".format(in_path, source_format))
    if detected == "skybox":
        faces = load_skybox(in_path)
        pano = skybox_to_equirect(faces, width or 4 * faces.face_size)
        out_dir = os.path.dirname(os.path.abspath(out_path))
        os.makedirs(out_dir, exist_ok=True)
        write_rgb_png(out_path, pano.data)
        value = _faces_psnr(faces, equirect_to_skybox(pano, faces.face_size))
        click.echo("Wrote {}x{} panorama to {}".format(pano.width, pano.height, out_path))
    else:
        pano = EquirectImage(read_rgb_png(in_path))
        faces = equirect_to_skybox(pano, face_size or pano.width // 4)
        save_skybox(faces, out_path)
        value = psnr(pano, skybox_to_equirect(faces, pano.width))
        click.echo("Wrote six {0}x{0} faces to {1}".format(faces.face_size, out_path))
    click.echo("round-trip PSNR: {:.2f} dB".format(value))


@main.command()
@click.argument("config_file")
@set_option
@seed_option
@click.pass_context
@handle_errors
def train(ctx, config_file, overrides, seed):
    """Initialize the occupancy grid and train the field for a scene.

    Writes checkpoint.bin, occupancy.bin, train_report.csv, config.json and
    seed.txt into the configured output_dir.
    """
    config = _load_config(config_file, overrides, seed).validate()
    scene = load_scene(config.scene)
    resolved = _prepare_output(config)
    parameters = Parameters(
        config.scene, config.output_dir, os.path.join(config.output_dir, "scratch"), _threads(ctx)
    )
    wf = init_scene_train_wf(scene.name, resolved, parameters)
    _run_workflow(wf)
    click.echo("Checkpoint: {}".format(os.path.join(config.output_dir, "checkpoint.bin")))


def _grid_for(field, checkpoint, grid_file, resolution):
    if grid_file is None:
        sibling = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), "occupancy.bin")
        if os.path.isfile(sibling):
            grid_file = sibling
    if grid_file is not None:
        return OccupancyGrid.load(grid_file)
    mod_logger.info("No occupancy grid given, sampling the field bounds densely")
    return OccupancyGrid.dense(resolution, field.bounds)


@main.command()
@click.argument("checkpoint")
@click.argument("output_dir")
@click.option("--grid", "grid_file", default=None, help="Occupancy snapshot. Default: occupancy.bin next to CHECKPOINT.")
@click.option("--pose", "pose_file", default=None, help="pose.json of the render camera.")
@click.option("--reference", default=None, help="Scene directory; its pose and size are the defaults and PSNR against its rgb is printed.")
@click.option("--width", default=None, type=int, help="Panorama width. Default: reference width, else 512.")
@click.option("--step", default=None, type=float, help="Sample spacing in meters. Default: half a voxel.")
@seed_option
@click.pass_context
@handle_errors
def render(ctx, checkpoint, output_dir, grid_file, pose_file, reference, width, step, seed):
    """Render a trained field to a panorama (rgb, depth, opacity)."""
    field = RadianceField.load(checkpoint)
    grid = _grid_for(field, checkpoint, grid_file, DENSE_FALLBACK_RESOLUTION)
    ref_scene = load_scene(reference) if reference is not None else None
    if pose_file is not None:
        with open(pose_file) as fid:
            pose = Pose.from_json(json.load(fid))
    elif ref_scene is not None:
        pose = ref_scene.pose
    else:
        pose = Pose(0.5 * (grid.bounds[0] + grid.bounds[1]))
    if width is None:
        width = ref_scene.width if ref_scene is not None else 512
    if width <= 0 or width % 2:
        raise utils.InputError("Width must be a positive even number, got {}".format(width))
    step = step or 0.5 * float(grid.voxel_size.min())
    rgb, depth, opacity = render_panorama(
        field, grid, pose, width, width // 2, step, threads=_threads(ctx)
    )
    save_scene(Scene(rgb, depth, pose, "render", "synthetic"), output_dir)
    write_opacity_png(os.path.join(output_dir, "opacity.png"), opacity)
    utils.write_seed(output_dir, 0 if seed is None else seed)
    click.echo("Wrote {}x{} render to {}".format(width, width // 2, output_dir))
    if ref_scene is not None:
        if ref_scene.width != width:
            raise utils.InputError("Reference is {} wide, render is {}".format(ref_scene.width, width))
        click.echo("PSNR vs reference: {:.2f} dB".format(psnr(ref_scene.rgb, rgb)))


@main.command()
@click.argument("checkpoint")
@click.argument("output_dir")
@click.option("--config", "config_file", default=None, help="Pipeline config JSON (mesh and grid sections, scene).")
@click.option("--scene", default=None, help="Scene directory for refinement views; overrides the config's scene.")
@click.option("--grid", "grid_file", default=None, help="Occupancy snapshot. Default: occupancy.bin next to CHECKPOINT.")
@set_option
@seed_option
@click.pass_context
@handle_errors
def mesh(ctx, checkpoint, output_dir, config_file, scene, grid_file, overrides, seed):
    """Extract, refine and texture a mesh; writes mesh.obj, mesh.mtl, texture.png."""
    overrides = list(overrides) + ["output_dir={}".format(output_dir)]
    if scene is not None:
        overrides.append("scene={}".format(scene))
    config = _load_config(config_file, overrides, seed).validate()
    scene_obj = load_scene(config.scene)
    field = RadianceField.load(checkpoint)
    resolved = _prepare_output(config)
    work_dir = os.path.join(config.output_dir, "scratch")
    grid = _grid_for(field, checkpoint, grid_file, config.grid.resolution)
    if grid_file is None:
        os.makedirs(work_dir, exist_ok=True)
        grid_file = grid.save(os.path.join(work_dir, "mesh_grid.bin"))
    parameters = Parameters(config.scene, config.output_dir, work_dir, _threads(ctx))
    wf = init_scene_mesh_wf(scene_obj.name, resolved, checkpoint, grid_file, parameters)
    _run_workflow(wf)
    click.echo("Mesh: {}".format(os.path.join(config.output_dir, "mesh.obj")))


@main.command("eval")
@click.argument("config_file")
@set_option
@seed_option
@click.option("--csv", "csv_path", default=None, help="Benchmark CSV path. Default: <output_dir>/benchmark.csv.")
@click.pass_context
@handle_errors
def eval_command(ctx, config_file, overrides, seed, csv_path):
    """Train the accelerated run and its ablations; write the benchmark CSV.

    Exits with 1 when any row failed.
    """
    config = _load_config(config_file, overrides, seed).validate()
    scene = load_scene(config.scene)
    _prepare_output(config)
    csv_path = csv_path or os.path.join(config.output_dir, "benchmark.csv")
    configs = default_benchmark_configs(config.train, config.include_decorated)
    records = run_benchmark(scene, configs, config.field, config.grid, csv_path, _threads(ctx))
    for record in records:
        click.echo(",".join(str(v) for v in record.row()))
    ratio = evals_ratio(records)
    reached = "not reached" if ratio is None else "{:.2f}x".format(ratio)
    click.echo("dense/accelerated MLP evaluations to {:g} dB: {}".format(TARGET_PSNR, reached))
    click.echo("Benchmark: {}".format(csv_path))
    if not all(record.ok for record in records):
        ctx.exit(1)


if __name__ == "__main__":
    sys.exit(main())  # pragma: no cover
