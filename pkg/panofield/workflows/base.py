#!/usr/bin/env python

import os
import re
from copy import deepcopy

from nipype.pipeline import engine as pe

from ..utils import ConfigError
from .reconstruction.base import init_mesh_stage_wf, init_train_stage_wf
from .reconstruction.outputs import init_mesh_output_wf, init_train_output_wf


def _safe_name(text):
    return re.sub(r"\W", "_", text)


def _finalize(scene_wf, parameters):
    scene_wf.base_dir = os.path.abspath(parameters.work_dir)
    scene_wf.config["execution"]["crashdump_dir"] = os.path.join(
        os.path.abspath(parameters.output_dir), "panofield_crash", "log"
    )
    scene_wf.config["execution"]["remove_unnecessary_outputs"] = False

    for node in scene_wf._get_all_nodes():
        node.config = deepcopy(scene_wf.config)

    return scene_wf


def init_scene_train_wf(scene_name, config_file, parameters):
    """Grid initialization and training for one scene.

    ``parameters`` carries the scene and output folders plus the worker cap;
    ``config_file`` is the resolved config written next to the outputs.
    """
    if not parameters.scene:
        raise ConfigError("No scene directory configured for {}".format(scene_name))

    scene_wf = pe.Workflow(name="scene_" + _safe_name(scene_name) + "_train_wf")

    train_wf = init_train_stage_wf()

    inputspec = train_wf.get_node("inputnode")
    inputspec.inputs.scene_dir = os.path.abspath(parameters.scene)
    inputspec.inputs.config_file = os.path.abspath(config_file)
    inputspec.inputs.threads = parameters.threads

    datasink_wf = init_train_output_wf()

    ds_inputspec = datasink_wf.get_node("inputnode")
    ds_inputspec.inputs.output_folder = os.path.abspath(parameters.output_dir)

    scene_wf.connect(
        [
            (
                train_wf,
                datasink_wf,
                [
                    # Outputs
                    ("outputnode.checkpoint_file", "inputnode.checkpoint_file"),
                    ("outputnode.report_file", "inputnode.report_file"),
                    ("outputnode.grid_file", "inputnode.grid_file"),
                ],
            )
        ]
    )

    return _finalize(scene_wf, parameters)


def init_scene_mesh_wf(scene_name, config_file, checkpoint_file, grid_file, parameters):
    """Extraction, refinement and baking of a trained field."""
    scene_wf = pe.Workflow(name="scene_" + _safe_name(scene_name) + "_mesh_wf")

    mesh_wf = init_mesh_stage_wf()

    inputspec = mesh_wf.get_node("inputnode")
    inputspec.inputs.scene_dir = os.path.abspath(parameters.scene)
    inputspec.inputs.config_file = os.path.abspath(config_file)
    inputspec.inputs.checkpoint_file = os.path.abspath(checkpoint_file)
    inputspec.inputs.grid_file = os.path.abspath(grid_file)
    inputspec.inputs.threads = parameters.threads

    datasink_wf = init_mesh_output_wf()

    ds_inputspec = datasink_wf.get_node("inputnode")
    ds_inputspec.inputs.output_folder = os.path.abspath(parameters.output_dir)

    scene_wf.connect(
        [
            (
                mesh_wf,
                datasink_wf,
                [
                    ("outputnode.coarse_mesh", "inputnode.coarse_mesh"),
                    ("outputnode.refined_mesh", "inputnode.refined_mesh"),
                    ("outputnode.obj_file", "inputnode.obj_file"),
                    ("outputnode.mtl_file", "inputnode.mtl_file"),
                    ("outputnode.texture_file", "inputnode.texture_file"),
                ],
            )
        ]
    )

    return _finalize(scene_wf, parameters)
