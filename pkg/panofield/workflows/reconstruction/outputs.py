#!/usr/bin/env python

from nipype.pipeline import engine as pe
from nipype.interfaces import io as nio, utility as niu


def build_path(output_folder):
    import os

    return os.path.abspath(output_folder)


def _sink_base(op_wf, inputnode):
    concat = pe.Node(
        niu.Function(
            input_names=["output_folder"],
            output_names=["built_folder"],
            function=build_path,
        ),
        name="build_path",
    )

    datasink = pe.Node(nio.DataSink(parameterization=False), name="datasink")

    op_wf.connect(
        [
            (inputnode, concat, [("output_folder", "output_folder")]),
            (concat, datasink, [("built_folder", "base_directory")]),
        ]
    )
    return datasink


def init_train_output_wf():
    op_wf = pe.Workflow(name="train_output_wf")

    inputnode = pe.Node(
        niu.IdentityInterface(
            fields=["output_folder", "checkpoint_file", "report_file", "grid_file"]
        ),
        name="inputnode",
    )

    datasink = _sink_base(op_wf, inputnode)

    # Rename Nodes
    checkpoint_rename = pe.Node(niu.Rename(format_string="checkpoint", keep_ext=True), name="checkpoint_rename")
    report_rename = pe.Node(niu.Rename(format_string="train_report", keep_ext=True), name="report_rename")
    grid_rename = pe.Node(niu.Rename(format_string="occupancy", keep_ext=True), name="grid_rename")

    op_wf.connect(
        [
            (inputnode, checkpoint_rename, [("checkpoint_file", "in_file")]),
            (inputnode, report_rename, [("report_file", "in_file")]),
            (inputnode, grid_rename, [("grid_file", "in_file")]),
            (checkpoint_rename, datasink, [("out_file", "@result.@checkpoint_file")]),
            (report_rename, datasink, [("out_file", "@result.@report_file")]),
            (grid_rename, datasink, [("out_file", "@result.@grid_file")]),
        ]
    )

    return op_wf


def init_mesh_output_wf():
    op_wf = pe.Workflow(name="mesh_output_wf")

    inputnode = pe.Node(
        niu.IdentityInterface(
            fields=[
                "output_folder",
                "coarse_mesh",
                "refined_mesh",
                "obj_file",
                "mtl_file",
                "texture_file",
            ]
        ),
        name="inputnode",
    )

    datasink = _sink_base(op_wf, inputnode)

    coarse_rename = pe.Node(niu.Rename(format_string="coarse_mesh", keep_ext=True), name="coarse_rename")
    refined_rename = pe.Node(niu.Rename(format_string="refined_mesh", keep_ext=True), name="refined_rename")

    # mesh.obj references mesh.mtl and texture.png by name, they keep theirs
    op_wf.connect(
        [
            (inputnode, coarse_rename, [("coarse_mesh", "in_file")]),
            (inputnode, refined_rename, [("refined_mesh", "in_file")]),
            (coarse_rename, datasink, [("out_file", "@result.@coarse_mesh")]),
            (refined_rename, datasink, [("out_file", "@result.@refined_mesh")]),
            (inputnode, datasink, [("obj_file", "@result.@obj_file")]),
            (inputnode, datasink, [("mtl_file", "@result.@mtl_file")]),
            (inputnode, datasink, [("texture_file", "@result.@texture_file")]),
        ]
    )

    return op_wf
