#!/usr/bin/env python

"""nipype interfaces wrapping the reconstruction stages."""

import os
import logging

from nipype.interfaces.base import (
    BaseInterfaceInputSpec,
    Directory,
    File,
    SimpleInterface,
    TraitedSpec,
    traits,
)

from ..config import PipelineConfig
from ..depth_prior import lift_point_cloud, sample_training_poses
from ..mesher import (
    bake_texture,
    export_obj,
    extract_coarse,
    load_mesh_npz,
    refine,
    save_mesh_npz,
)
from ..occupancy import OccupancyGrid, bounds_for_cloud, init_from_depth_prior
from ..radiance_field import RadianceField
from ..scene_io import load_scene
from ..trainer import train
from ..utils import PanofieldError

mod_logger = logging.getLogger(__name__)

REFINE_EXTRA_VIEWS = 2


def _load_config(config_file):
    return PipelineConfig.from_json(config_file)


class InitGridInputSpec(BaseInterfaceInputSpec):
    scene_dir = Directory(exists=True, mandatory=True, desc="scene directory")
    config_file = File(exists=True, mandatory=True, desc="resolved pipeline config")


class InitGridOutputSpec(TraitedSpec):
    grid_file = File(exists=True, desc="occupancy grid snapshot")


class InitGrid(SimpleInterface):
    """Initialize the occupancy grid from the scene's depth prior."""

    input_spec = InitGridInputSpec
    output_spec = InitGridOutputSpec

    def _run_interface(self, runtime):
        config = _load_config(self.inputs.config_file)
        scene = load_scene(self.inputs.scene_dir)
        cloud = lift_point_cloud(scene)
        grid_cfg = config.grid
        grid = init_from_depth_prior(
            cloud,
            scene.pose.position,
            grid_cfg.resolution,
            bounds_for_cloud(cloud, scene.pose.position, grid_cfg.padding),
            grid_cfg.sigma_o,
            grid_cfg.view_weight,
            grid_cfg.threshold,
            grid_cfg.decay,
        )
        self._results["grid_file"] = grid.save(os.path.join(runtime.cwd, "grid_init.bin"))
        return runtime


class TrainFieldInputSpec(BaseInterfaceInputSpec):
    scene_dir = Directory(exists=True, mandatory=True, desc="scene directory")
    config_file = File(exists=True, mandatory=True, desc="resolved pipeline config")
    grid_file = File(exists=True, mandatory=True, desc="initial occupancy grid")
    threads = traits.Int(1, usedefault=True, desc="worker cap")


class TrainFieldOutputSpec(TraitedSpec):
    checkpoint_file = File(exists=True, desc="final field checkpoint")
    report_file = File(exists=True, desc="training report CSV")
    grid_file = File(exists=True, desc="occupancy grid after training")


class TrainField(SimpleInterface):
    """Train the radiance field; the grid is updated along the way."""

    input_spec = TrainFieldInputSpec
    output_spec = TrainFieldOutputSpec

    def _run_interface(self, runtime):
        config = _load_config(self.inputs.config_file)
        scene = load_scene(self.inputs.scene_dir)
        grid = OccupancyGrid.load(self.inputs.grid_file)
        field, report = train(
            scene, config.field, grid, config.train, self.inputs.threads, checkpoint_dir=runtime.cwd
        )
        self._results["checkpoint_file"] = os.path.join(runtime.cwd, "checkpoint.bin")
        if not os.path.isfile(self._results["checkpoint_file"]):
            field.save(self._results["checkpoint_file"])
        self._results["report_file"] = report.to_csv(os.path.join(runtime.cwd, "report.csv"))
        self._results["grid_file"] = grid.save(os.path.join(runtime.cwd, "grid.bin"))
        return runtime


class ExtractMeshInputSpec(BaseInterfaceInputSpec):
    checkpoint_file = File(exists=True, mandatory=True, desc="field checkpoint")
    grid_file = File(exists=True, mandatory=True, desc="occupancy grid")
    config_file = File(exists=True, mandatory=True, desc="resolved pipeline config")
    threads = traits.Int(1, usedefault=True, desc="worker cap")


class MeshOutputSpec(TraitedSpec):
    mesh_file = File(exists=True, desc="mesh arrays (npz)")


class ExtractMesh(SimpleInterface):
    """Marching cubes on the trained field."""

    input_spec = ExtractMeshInputSpec
    output_spec = MeshOutputSpec

    def _run_interface(self, runtime):
        config = _load_config(self.inputs.config_file)
        field = RadianceField.load(self.inputs.checkpoint_file)
        grid = OccupancyGrid.load(self.inputs.grid_file)
        mesh = extract_coarse(field, grid, config.mesh.iso_density, self.inputs.threads)
        if mesh.is_empty():
            raise PanofieldError("Marching cubes produced an empty mesh; lower mesh.iso_density")
        self._results["mesh_file"] = save_mesh_npz(mesh, os.path.join(runtime.cwd, "coarse.npz"))
        return runtime


class RefineMeshInputSpec(ExtractMeshInputSpec):
    mesh_file = File(exists=True, mandatory=True, desc="coarse mesh")
    scene_dir = Directory(exists=True, mandatory=True, desc="scene directory (view poses)")


class RefineMesh(SimpleInterface):
    """Photometric refinement from the capture pose and a few jittered poses."""

    input_spec = RefineMeshInputSpec
    output_spec = MeshOutputSpec

    def _run_interface(self, runtime):
        config = _load_config(self.inputs.config_file)
        field = RadianceField.load(self.inputs.checkpoint_file)
        grid = OccupancyGrid.load(self.inputs.grid_file)
        scene = load_scene(self.inputs.scene_dir)
        refine_cfg = config.mesh.refine
        refine_cfg.views = [scene.pose] + sample_training_poses(
            scene, REFINE_EXTRA_VIEWS, config.train.jitter_radius, config.seed
        )
        history = []
        mesh = refine(
            load_mesh_npz(self.inputs.mesh_file), field, grid, refine_cfg, self.inputs.threads, history
        )
        mod_logger.info("Refinement error per iteration: %s", ", ".join("{:.5f}".format(e) for e in history))
        self._results["mesh_file"] = save_mesh_npz(mesh, os.path.join(runtime.cwd, "refined.npz"))
        return runtime


class BakeMeshInputSpec(BaseInterfaceInputSpec):
    mesh_file = File(exists=True, mandatory=True, desc="refined mesh")
    checkpoint_file = File(exists=True, mandatory=True, desc="field checkpoint")
    config_file = File(exists=True, mandatory=True, desc="resolved pipeline config")
    threads = traits.Int(1, usedefault=True, desc="worker cap")


class BakeMeshOutputSpec(TraitedSpec):
    obj_file = File(exists=True, desc="Wavefront OBJ")
    mtl_file = File(exists=True, desc="material library")
    texture_file = File(exists=True, desc="baked texture atlas")


class BakeMesh(SimpleInterface):
    """Bake the texture atlas and export the OBJ bundle."""

    input_spec = BakeMeshInputSpec
    output_spec = BakeMeshOutputSpec

    def _run_interface(self, runtime):
        config = _load_config(self.inputs.config_file)
        field = RadianceField.load(self.inputs.checkpoint_file)
        baked = bake_texture(
            load_mesh_npz(self.inputs.mesh_file), field, config.mesh.atlas_size, self.inputs.threads
        )
        out_dir = os.path.join(runtime.cwd, "obj")
        self._results["obj_file"] = export_obj(baked, out_dir)
        self._results["mtl_file"] = os.path.join(out_dir, "mesh.mtl")
        self._results["texture_file"] = os.path.join(out_dir, "texture.png")
        return runtime
