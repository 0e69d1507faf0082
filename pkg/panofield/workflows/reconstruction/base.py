#!/usr/bin/env python

from nipype.pipeline import engine as pe
from nipype.interfaces import utility as niu

from ...interfaces.reconstruction import (
    BakeMesh,
    ExtractMesh,
    InitGrid,
    RefineMesh,
    TrainField,
)


def init_train_stage_wf():
    train_wf = pe.Workflow(name="train_wf")

    inputnode = pe.Node(
        niu.IdentityInterface(fields=["scene_dir", "config_file", "threads"]),
        name="inputnode",
    )

    outputnode = pe.Node(
        niu.IdentityInterface(fields=["checkpoint_file", "report_file", "grid_file"]),
        name="outputnode",
    )

    # Occupancy grid from the depth prior of the capture
    init_grid = pe.Node(InitGrid(), name="init_grid")

    # Field training, the grid is refreshed on schedule
    train_field = pe.Node(TrainField(), name="train_field")

    train_wf.connect(
        [
            (inputnode, init_grid, [("scene_dir", "scene_dir"), ("config_file", "config_file")]),
            (
                inputnode,
                train_field,
                [
                    ("scene_dir", "scene_dir"),
                    ("config_file", "config_file"),
                    ("threads", "threads"),
                ],
            ),
            (init_grid, train_field, [("grid_file", "grid_file")]),
            (
                train_field,
                outputnode,
                [
                    ("checkpoint_file", "checkpoint_file"),
                    ("report_file", "report_file"),
                    ("grid_file", "grid_file"),
                ],
            ),
        ]
    )

    return train_wf


def init_mesh_stage_wf():
    mesh_wf = pe.Workflow(name="mesh_wf")

    inputnode = pe.Node(
        niu.IdentityInterface(
            fields=["scene_dir", "config_file", "checkpoint_file", "grid_file", "threads"]
        ),
        name="inputnode",
    )

    outputnode = pe.Node(
        niu.IdentityInterface(
            fields=["coarse_mesh", "refined_mesh", "obj_file", "mtl_file", "texture_file"]
        ),
        name="outputnode",
    )

    # Marching cubes on the density lattice
    extract = pe.Node(ExtractMesh(), name="extract_mesh")

    # Photometric refinement
    refine = pe.Node(RefineMesh(), name="refine_mesh")

    # Texture atlas + OBJ export
    bake = pe.Node(BakeMesh(), name="bake_mesh")

    shared = [("config_file", "config_file"), ("threads", "threads")]
    field_inputs = [("checkpoint_file", "checkpoint_file")]

    mesh_wf.connect(
        [
            (inputnode, extract, shared + field_inputs + [("grid_file", "grid_file")]),
            (
                inputnode,
                refine,
                shared + field_inputs + [("grid_file", "grid_file"), ("scene_dir", "scene_dir")],
            ),
            (extract, refine, [("mesh_file", "mesh_file")]),
            (inputnode, bake, shared + field_inputs),
            (refine, bake, [("mesh_file", "mesh_file")]),
            (extract, outputnode, [("mesh_file", "coarse_mesh")]),
            (refine, outputnode, [("mesh_file", "refined_mesh")]),
            (
                bake,
                outputnode,
                [
                    ("obj_file", "obj_file"),
                    ("mtl_file", "mtl_file"),
                    ("texture_file", "texture_file"),
                ],
            ),
        ]
    )

    return mesh_wf
