#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""Tests for `panofield.scene_io`."""

import os
import json
import shutil
import tempfile
import unittest

import numpy as np
import numpy.testing as npt

from panofield import scene_io
from panofield.evalkit import psnr
from panofield.pano_geometry import FACE_NAMES, Pose, panorama_rays, pixel_to_direction
from panofield.utils import (
    DimensionMismatchError,
    InputError,
    InvalidPoseError,
    MissingFileError,
)

GRAY_WALLS = dict((name, (0.5, 0.5, 0.5)) for name in scene_io.WALL_NAMES)


def cube_room(boxes=()):
    return scene_io.SyntheticRoom((-2, -2, -2), (2, 2, 2), GRAY_WALLS, list(boxes), Pose((0, 0, 0)))


class TestOracle(unittest.TestCase):
    def test_forward_depth_in_cube(self):
        scene = scene_io.render_room_oracle(cube_room(), Pose((0, 0, 0)), 512, 256)
        self.assertAlmostEqual(scene.depth.data[128, 256], 2.0, delta=1e-3)
        self.assertEqual(scene.source, "synthetic")

    def test_diagonal_depth_in_cube(self):
        room = cube_room()
        d = np.array([[np.sqrt(0.5), 0.0, np.sqrt(0.5)]])
        depth, _ = scene_io.trace_room(room, np.zeros((1, 3)), d)
        self.assertAlmostEqual(depth[0], 2.0 * np.sqrt(2.0), places=9)
        scene = scene_io.render_room_oracle(room, Pose((0, 0, 0)), 512, 256)
        # theta = 45 deg sits between columns 319 and 320
        self.assertAlmostEqual(scene.depth.data[128, 320], 2.0 * np.sqrt(2.0), delta=0.02)

    def test_box_occludes_wall(self):
        box = scene_io.Box((-0.5, -0.5, 1.0), (0.5, 0.5, 1.5), (0.9, 0.1, 0.1))
        room = cube_room([box])
        scene = scene_io.render_room_oracle(room, Pose((0, 0, 0)), 128, 64)
        rays = panorama_rays(Pose((0, 0, 0)), 128, 64, 0.0, 1.0)
        # independent slab test
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (box.lower - rays.origins) / rays.directions
            t1 = (box.upper - rays.origins) / rays.directions
        t_in = np.nanmax(np.minimum(t0, t1), axis=1)
        t_out = np.nanmin(np.maximum(t0, t1), axis=1)
        hits = (t_in <= t_out) & (t_in > 0)
        self.assertTrue(np.any(hits))
        depth = scene.depth.data.reshape(-1)
        rgb = scene.rgb.data.reshape(-1, 3)
        npt.assert_allclose(depth[hits], t_in[hits], atol=1e-9)
        npt.assert_allclose(rgb[hits], np.tile([0.9, 0.1, 0.1], (int(hits.sum()), 1)))
        npt.assert_allclose(rgb[~hits], 0.5)

    def test_depth_lands_on_surfaces(self):
        room = scene_io.default_room()
        scene = scene_io.render_room_oracle(room, room.pose, 128, 64)
        rays = panorama_rays(room.pose, 128, 64, 0.0, 1.0)
        points = rays.origins + scene.depth.data.reshape(-1, 1) * rays.directions
        self.assertLess(scene_io.room_surface_distance(room, points).max(), 1e-6)

    def test_deterministic(self):
        room = scene_io.default_room()
        a = scene_io.render_room_oracle(room, room.pose, 64, 32)
        b = scene_io.render_room_oracle(room, room.pose, 64, 32)
        self.assertEqual(a.rgb.data.tobytes(), b.rgb.data.tobytes())
        self.assertEqual(a.depth.data.tobytes(), b.depth.data.tobytes())

    def test_camera_inside_box(self):
        box = scene_io.Box((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5), (1, 1, 1))
        with self.assertRaises(InputError):
            cube_room([box])

    def test_pose_outside_room(self):
        with self.assertRaises(InputError):
            scene_io.render_room_oracle(cube_room(), Pose((3.0, 0, 0)), 32, 16)

    def test_room_json_round_trip(self):
        room = scene_io.default_room()
        again = scene_io.SyntheticRoom.from_json(json.loads(json.dumps(room.to_json())))
        a = scene_io.render_room_oracle(room, room.pose, 32, 16)
        b = scene_io.render_room_oracle(again, again.pose, 32, 16)
        npt.assert_array_equal(a.depth.data, b.depth.data)

    def test_room_json_missing_walls(self):
        payload = scene_io.default_room().to_json()
        del payload["walls"]
        with self.assertRaises(InputError):
            scene_io.SyntheticRoom.from_json(payload)


class TestSceneDirectories(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        room = scene_io.default_room()
        self.scene = scene_io.render_room_oracle(room, room.pose, 128, 64)

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_round_trip(self):
        path = os.path.join(self.tmp, "room")
        scene_io.save_scene(self.scene, path)
        loaded = scene_io.load_scene(path)
        self.assertLessEqual(np.abs(loaded.rgb.data - self.scene.rgb.data).max(), 1.0 / 255.0)
        self.assertLessEqual(np.abs(loaded.depth.data - self.scene.depth.data).max(), 0.0005 + 1e-9)
        self.assertGreaterEqual(psnr(self.scene.rgb, loaded.rgb), 48.0)
        self.assertEqual(loaded.pose, self.scene.pose)
        self.assertEqual(loaded.name, "synthetic-room")
        self.assertEqual(loaded.source, "synthetic")

    def test_depth_units(self):
        path = os.path.join(self.tmp, "units")
        depth = np.zeros((4, 8))
        depth[1, 2] = 1.234
        scene_io.save_scene(scene_io.Scene(np.zeros((4, 8, 3)), depth, Pose.identity(), "units"), path)
        raw = scene_io.read_depth_png(os.path.join(path, "depth.png"))
        self.assertAlmostEqual(raw[1, 2], 1.234)
        self.assertEqual(raw[0, 0], 0.0)

    def test_empty_name(self):
        with self.assertRaises(InputError):
            scene_io.save_scene(
                scene_io.Scene(self.scene.rgb, self.scene.depth, self.scene.pose, ""),
                os.path.join(self.tmp, "noname"),
            )

    def test_missing_file(self):
        path = os.path.join(self.tmp, "room")
        scene_io.save_scene(self.scene, path)
        os.remove(os.path.join(path, "depth.png"))
        with self.assertRaises(MissingFileError) as ctx:
            scene_io.load_scene(path)
        self.assertEqual(ctx.exception.code, "missing-file")

    def test_dimension_mismatch(self):
        path = os.path.join(self.tmp, "room")
        scene_io.save_scene(self.scene, path)
        scene_io.write_depth_png(os.path.join(path, "depth.png"), np.ones((32, 64)))
        with self.assertRaises(DimensionMismatchError) as ctx:
            scene_io.load_scene(path)
        self.assertEqual(ctx.exception.code, "dimension-mismatch")

    def test_reflected_pose(self):
        path = os.path.join(self.tmp, "room")
        scene_io.save_scene(self.scene, path)
        with open(os.path.join(path, "pose.json"), "w") as fid:
            json.dump({"position": [0, 0, 0], "rotation": [1, 0, 0, 0, 1, 0, 0, 0, -1]}, fid)
        with self.assertRaises(InvalidPoseError) as ctx:
            scene_io.load_scene(path)
        self.assertEqual(ctx.exception.code, "invalid-pose")

    def test_perturbed_scene(self):
        noisy = scene_io.perturb_scene(self.scene, seed=3)
        self.assertEqual(noisy.source, "decorated")
        self.assertEqual(noisy.name, "synthetic-room-decorated")
        self.assertGreater(np.abs(noisy.rgb.data - self.scene.rgb.data).max(), 0.0)
        again = scene_io.perturb_scene(self.scene, seed=3)
        npt.assert_array_equal(noisy.depth.data, again.depth.data)

    def test_skybox_directory(self):
        faces = dict((name, np.full((8, 8, 3), i / 10.0)) for i, name in enumerate(FACE_NAMES))
        path = os.path.join(self.tmp, "sky")
        scene_io.save_skybox(faces, path)
        loaded = scene_io.load_skybox(path)
        self.assertEqual(loaded.face_size, 8)
        npt.assert_allclose(loaded["left"], faces["left"], atol=0.5 / 255.0)
        os.remove(os.path.join(path, "up.png"))
        with self.assertRaises(MissingFileError):
            scene_io.load_skybox(path)

    def test_scene_dimension_check(self):
        with self.assertRaises(DimensionMismatchError):
            scene_io.Scene(np.zeros((4, 8, 3)), np.zeros((2, 4)), Pose.identity(), "x")

    def test_forward_pixel_direction_matches_oracle(self):
        d = pixel_to_direction(64, 32, 128, 64)
        depth, _ = scene_io.trace_room(cube_room(), np.zeros((1, 3)), d[np.newaxis])
        scene = scene_io.render_room_oracle(cube_room(), Pose((0, 0, 0)), 128, 64)
        self.assertAlmostEqual(scene.depth.data[32, 64], depth[0])


if __name__ == "__main__":
    unittest.main()
