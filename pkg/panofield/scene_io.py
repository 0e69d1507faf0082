"""
Scene directories, PNG codecs and the synthetic room oracle.

A scene directory holds ``rgb.png`` (8-bit RGB), ``depth.png`` (16-bit,
millimeters, 0 = missing), ``pose.json`` and optionally ``meta.json``.
"""

import os
import json
import errno
import logging

import numpy as np
from PIL import Image

from .pano_geometry import (
    FACE_NAMES,
    DepthPanorama,
    EquirectImage,
    Pose,
    SkyboxFaces,
    panorama_rays,
)
from .utils import (
    DimensionMismatchError,
    InputError,
    InvalidPoseError,
    MissingFileError,
    SceneError,
    UnwritablePathError,
    seeded_rng,
)

mod_logger = logging.getLogger(__name__)

SOURCES = ("captured", "decorated", "synthetic")
MAX_DEPTH_MM = 65535


class Scene(object):
    """An RGB-D panorama with its capture pose."""

    def __init__(self, rgb, depth, pose, name, source="captured"):
        if not isinstance(rgb, EquirectImage):
            rgb = EquirectImage(rgb)
        if not isinstance(depth, DepthPanorama):
            depth = DepthPanorama(depth)
        if rgb.data.shape[:2] != depth.data.shape:
            raise DimensionMismatchError(
                "RGB is {}x{} but depth is {}x{}".format(
                    rgb.width, rgb.height, depth.width, depth.height
                )
            )
        if source not in SOURCES:
            raise InputError("Unknown scene source {!r}, expected one of {}".format(source, SOURCES))
        self.rgb = rgb
        self.depth = depth
        self.pose = pose
        self.name = name
        self.source = source

    @property
    def width(self):
        return self.rgb.width

    @property
    def height(self):
        return self.rgb.height


# PNG codecs ------------------------------------------------------------------

def read_rgb_png(path):
    with Image.open(path) as img:
        data = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return data


def write_rgb_png(path, data):
    data = np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(data * 255.0).astype(np.uint8), mode="RGB").save(path)


def read_depth_png(path):
    with Image.open(path) as img:
        raw = np.asarray(img)
    return raw.astype(np.float64) / 1000.0


def write_depth_png(path, depth):
    mm = np.clip(np.round(np.asarray(depth, dtype=np.float64) * 1000.0), 0, MAX_DEPTH_MM)
    Image.fromarray(mm.astype(np.uint16)).save(path)


def write_opacity_png(path, opacity):
    opacity = np.clip(np.asarray(opacity, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(opacity * 255.0).astype(np.uint8), mode="L").save(path)


def load_skybox(directory):
    faces = {}
    for name in FACE_NAMES:
        path = os.path.join(directory, name + ".png")
        if not os.path.isfile(path):
            raise MissingFileError("Missing skybox face {}.png".format(name), directory)
        faces[name] = read_rgb_png(path)
    return SkyboxFaces(faces)


def save_skybox(faces, directory):
    _makedirs(directory)
    for name in FACE_NAMES:
        write_rgb_png(os.path.join(directory, name + ".png"), faces[name])


def _makedirs(directory):
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as exc:
        raise UnwritablePathError("Cannot create directory: {}".format(exc.strerror), directory)
    if not os.access(directory, os.W_OK):
        raise UnwritablePathError("Directory is not writable", directory)


# Scene directories -------------------------------------------------------------

def load_scene(directory):
    """Read a scene directory and validate it."""
    for fname in ("rgb.png", "depth.png", "pose.json"):
        if not os.path.isfile(os.path.join(directory, fname)):
            raise MissingFileError("Missing {}".format(fname), directory)

    rgb = read_rgb_png(os.path.join(directory, "rgb.png"))
    depth = read_depth_png(os.path.join(directory, "depth.png"))
    if rgb.shape[:2] != depth.shape:
        raise DimensionMismatchError(
            "rgb.png is {}x{} but depth.png is {}x{}".format(
                rgb.shape[1], rgb.shape[0], depth.shape[1], depth.shape[0]
            ),
            directory,
        )

    with open(os.path.join(directory, "pose.json")) as fid:
        try:
            pose = Pose.from_json(json.load(fid))
        except InvalidPoseError as exc:
            raise InvalidPoseError(exc.raw_message, directory)
        except ValueError as exc:
            raise InvalidPoseError("pose.json is not valid JSON: {}".format(exc), directory)

    meta = {}
    meta_file = os.path.join(directory, "meta.json")
    if os.path.isfile(meta_file):
        with open(meta_file) as fid:
            meta = json.load(fid)
    name = meta.get("name") or os.path.basename(os.path.normpath(directory))
    source = meta.get("source", "captured")
    scene = Scene(rgb, depth, pose, name, source)
    mod_logger.info("Loaded scene %s (%dx%d, %s)", name, scene.width, scene.height, source)
    return scene


def save_scene(scene, directory):
    """Write ``scene`` in the layout :func:`load_scene` reads."""
    if not scene.name:
        raise InputError("Scene name must not be empty")
    _makedirs(directory)
    try:
        write_rgb_png(os.path.join(directory, "rgb.png"), scene.rgb.data)
        write_depth_png(os.path.join(directory, "depth.png"), scene.depth.data)
        with open(os.path.join(directory, "pose.json"), "w") as fid:
            json.dump(scene.pose.to_json(), fid, indent=2)
        with open(os.path.join(directory, "meta.json"), "w") as fid:
            json.dump({"name": scene.name, "source": scene.source}, fid, indent=2)
    except (IOError, OSError) as exc:
        if exc.errno in (errno.EACCES, errno.EROFS, errno.ENOENT):
            raise UnwritablePathError("Cannot write scene: {}".format(exc), directory)
        raise SceneError("Cannot write scene: {}".format(exc), directory)
    return directory


def perturb_scene(scene, rgb_noise=0.02, depth_noise=0.01, seed=0):
    """Noisy copy of ``scene`` tagged as decorated.

    Gaussian noise of standard deviation ``rgb_noise`` is added to the colors
    and multiplicative noise of relative standard deviation ``depth_noise`` to
    the valid depths.
    """
    rng = seeded_rng(seed, 7)
    rgb = np.clip(scene.rgb.data + rng.normal(0.0, rgb_noise, scene.rgb.data.shape), 0.0, 1.0)
    depth = scene.depth.data.copy()
    valid = depth > 0
    depth[valid] *= np.maximum(1.0 + rng.normal(0.0, depth_noise, int(valid.sum())), 0.5)
    return Scene(rgb, depth, scene.pose, scene.name + "-decorated", "decorated")


# Synthetic room oracle -------------------------------------------------------------

WALL_NAMES = ("left", "right", "floor", "ceiling", "back", "front")


class Box(object):
    def __init__(self, lower, upper, albedo):
        self.lower = np.asarray(lower, dtype=np.float64).reshape(3)
        self.upper = np.asarray(upper, dtype=np.float64).reshape(3)
        self.albedo = np.asarray(albedo, dtype=np.float64).reshape(3)
        if np.any(self.upper <= self.lower):
            raise InputError("Box upper corner must exceed lower corner")

    def contains(self, point):
        point = np.asarray(point, dtype=np.float64)
        return bool(np.all(point >= self.lower) and np.all(point <= self.upper))

    def to_json(self):
        return {
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "albedo": self.albedo.tolist(),
        }


class SyntheticRoom(object):
    """Axis-aligned room with flat-colored walls and box furniture."""

    def __init__(self, lower, upper, wall_albedo, boxes, pose):
        self.lower = np.asarray(lower, dtype=np.float64).reshape(3)
        self.upper = np.asarray(upper, dtype=np.float64).reshape(3)
        if np.any(self.upper <= self.lower):
            raise InputError("Room upper corner must exceed lower corner")
        missing = [w for w in WALL_NAMES if w not in wall_albedo]
        if missing:
            raise InputError("Room is missing wall albedos: {}".format(", ".join(missing)))
        self.wall_albedo = dict(
            (w, np.asarray(wall_albedo[w], dtype=np.float64).reshape(3)) for w in WALL_NAMES
        )
        self.boxes = list(boxes)
        self.pose = pose
        self.check_free_space(pose.position)

    def check_free_space(self, position):
        position = np.asarray(position, dtype=np.float64)
        if not (np.all(position > self.lower) and np.all(position < self.upper)):
            raise InputError("Camera {} is outside the room".format(position.tolist()))
        for i, box in enumerate(self.boxes):
            if box.contains(position):
                raise InputError("Camera {} is inside box {}".format(position.tolist(), i))

    def to_json(self):
        return {
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "walls": dict((w, a.tolist()) for w, a in self.wall_albedo.items()),
            "boxes": [box.to_json() for box in self.boxes],
            "pose": self.pose.to_json(),
        }

    @classmethod
    def from_json(cls, payload):
        try:
            boxes = [Box(b["lower"], b["upper"], b["albedo"]) for b in payload.get("boxes", [])]
            pose = Pose.from_json(payload["pose"]) if "pose" in payload else Pose.identity()
            return cls(payload["lower"], payload["upper"], payload["walls"], boxes, pose)
        except (KeyError, TypeError) as exc:
            raise InputError("Invalid room description: missing {}".format(exc))

    @classmethod
    def load(cls, path):
        with open(path) as fid:
            try:
                payload = json.load(fid)
            except ValueError as exc:
                raise InputError("Room file {} is not valid JSON: {}".format(path, exc))
        return cls.from_json(payload)


def default_room():
    """A 4 m x 2.8 m x 5 m room with two pieces of furniture."""
    walls = {
        "left": (0.80, 0.35, 0.30),
        "right": (0.30, 0.55, 0.80),
        "floor": (0.55, 0.45, 0.30),
        "ceiling": (0.92, 0.92, 0.88),
        "back": (0.35, 0.70, 0.40),
        "front": (0.85, 0.75, 0.35),
    }
    boxes = [
        Box((-1.9, -1.4, 0.9), (-0.7, -0.8, 2.3), (0.60, 0.20, 0.55)),
        Box((0.6, -1.4, -2.4), (1.8, -0.4, -1.5), (0.20, 0.30, 0.35)),
    ]
    return SyntheticRoom((-2.0, -1.4, -2.5), (2.0, 1.4, 2.5), walls, boxes, Pose((0.1, 0.05, -0.2)))


def _ray_box(origins, dirs, lower, upper):
    """Slab test; returns (t_enter, t_exit, enter_axis)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lower - origins) * inv
        t1 = (upper - origins) * inv
    t0 = np.where(np.isnan(t0), -np.inf, t0)
    t1 = np.where(np.isnan(t1), np.inf, t1)
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    return tmin.max(axis=1), tmax.min(axis=1), tmin.argmax(axis=1)


def trace_room(room, origins, dirs):
    """Nearest surface distance and albedo for each ray inside ``room``."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    with np.errstate(divide="ignore"):
        inv = 1.0 / dirs
    t_wall = np.where(dirs > 0, (room.upper - origins) * inv, (room.lower - origins) * inv)
    t_wall = np.where(dirs == 0, np.inf, t_wall)
    axis = np.argmin(t_wall, axis=1)
    depth = t_wall[np.arange(len(axis)), axis]
    positive = dirs[np.arange(len(axis)), axis] > 0
    wall_table = np.array([room.wall_albedo[w] for w in WALL_NAMES])
    color = wall_table[axis * 2 + positive.astype(int)]
    for box in room.boxes:
        t_in, t_out, _ = _ray_box(origins, dirs, box.lower, box.upper)
        hit = (t_in <= t_out) & (t_in > 0) & (t_in < depth)
        depth = np.where(hit, t_in, depth)
        color[hit] = box.albedo
    return depth, color


def render_room_oracle(room, pose, width, height):
    """Exact flat-shaded RGB-D panorama of ``room`` seen from ``pose``."""
    room.check_free_space(pose.position)
    rays = panorama_rays(pose, width, height, 0.0, 1.0)
    depth, color = trace_room(room, rays.origins, rays.directions)
    return Scene(
        np.clip(color.reshape(height, width, 3), 0.0, 1.0),
        depth.reshape(height, width),
        pose,
        "synthetic-room",
        "synthetic",
    )


def room_surface_distance(room, points):
    """Distance from each point to the nearest wall or box face."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    walls = np.minimum(points - room.lower, room.upper - points)
    dist = np.abs(walls).min(axis=1)
    for box in room.boxes:
        dist = np.minimum(dist, _box_surface_distance(box, points))
    return dist


def _box_surface_distance(box, points):
    center = 0.5 * (box.lower + box.upper)
    half = 0.5 * (box.upper - box.lower)
    q = np.abs(points - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return np.abs(outside + inside)
