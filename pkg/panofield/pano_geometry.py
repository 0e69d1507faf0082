"""
Spherical camera model for equirectangular panoramas.

Conventions (fixed throughout the package):

* Y is up, +Z is forward, +X is right.
* Longitude ``theta = 2*pi*(u + 0.5)/width - pi`` (0 at +Z, positive to +X).
* Latitude ``phi = pi/2 - pi*(v + 0.5)/height`` (+pi/2 at the top row).
* ``direction = (cos(phi) sin(theta), sin(phi), cos(phi) cos(theta))``.

Skybox faces are named ``front`` (+Z), ``back`` (-Z), ``right`` (+X),
``left`` (-X), ``up`` (+Y) and ``down`` (-Y). Face images are seen from the
inside of the cube with Y up: columns run left to right, rows top to bottom.
"""

import logging
from collections import OrderedDict

import numpy as np
from scipy import ndimage

from .utils import InputError, InvalidPoseError, check_unit_vectors

mod_logger = logging.getLogger(__name__)

FACE_NAMES = ("front", "back", "left", "right", "up", "down")

# (normal, u axis, v axis) per face; dir = normal + u * u_axis + v * v_axis
_FACE_AXES = OrderedDict(
    [
        ("right", ((1, 0, 0), (0, 0, -1), (0, 1, 0))),
        ("left", ((-1, 0, 0), (0, 0, 1), (0, 1, 0))),
        ("up", ((0, 1, 0), (1, 0, 0), (0, 0, -1))),
        ("down", ((0, -1, 0), (1, 0, 0), (0, 0, 1))),
        ("front", ((0, 0, 1), (1, 0, 0), (0, 1, 0))),
        ("back", ((0, 0, -1), (-1, 0, 0), (0, 1, 0))),
    ]
)


class EquirectImage(object):
    """A 2:1 RGB panorama with values in [0, 1], stored as (height, width, 3)."""

    def __init__(self, data):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3:
            raise InputError("Equirect image must have shape (H, W, 3), got {}".format(data.shape))
        if data.shape[1] != 2 * data.shape[0]:
            raise InputError(
                "Equirect image must be 2:1, got {}x{}".format(data.shape[1], data.shape[0])
            )
        if not np.all(np.isfinite(data)) or data.min() < 0 or data.max() > 1:
            raise InputError("Equirect image values must be finite and in [0, 1]")
        self.data = data

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]


class DepthPanorama(object):
    """Metric distance along each pixel ray; 0 marks missing depth."""

    def __init__(self, data):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2:
            raise InputError("Depth panorama must be 2D, got {}".format(data.shape))
        if not np.all(np.isfinite(data)) or data.min() < 0:
            raise InputError("Depth values must be 0 (invalid) or finite and > 0")
        self.data = data

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def valid(self):
        return self.data > 0


class SkyboxFaces(object):
    """Six square RGB faces sharing one size."""

    def __init__(self, faces):
        missing = [name for name in FACE_NAMES if name not in faces]
        if missing:
            raise InputError("Skybox is missing faces: {}".format(", ".join(missing)))
        arrays = OrderedDict()
        sizes = set()
        for name in FACE_NAMES:
            face = np.asarray(faces[name], dtype=np.float64)
            if face.ndim != 3 or face.shape[2] != 3 or face.shape[0] != face.shape[1]:
                raise InputError("Skybox face {} must be square RGB, got {}".format(name, face.shape))
            sizes.add(face.shape[0])
            arrays[name] = face
        if len(sizes) != 1:
            raise InputError("Skybox faces have mismatched sizes: {}".format(sorted(sizes)))
        self.faces = arrays
        self.face_size = sizes.pop()

    def __getitem__(self, name):
        return self.faces[name]


class Pose(object):
    """Camera-to-world rigid transform."""

    def __init__(self, position, rotation=None):
        position = np.asarray(position, dtype=np.float64).reshape(3)
        rotation = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        if rotation.shape != (3, 3):
            rotation = rotation.reshape(3, 3)
        if not np.all(np.isfinite(position)) or not np.all(np.isfinite(rotation)):
            raise InvalidPoseError("Pose must be finite")
        if not np.allclose(rotation.T.dot(rotation), np.eye(3), rtol=0, atol=1e-6):
            raise InvalidPoseError("Pose rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > 1e-6:
            raise InvalidPoseError(
                "Pose rotation must have determinant +1, got {:.6f}".format(np.linalg.det(rotation))
            )
        self.position = position
        self.rotation = rotation

    @classmethod
    def identity(cls):
        return cls(np.zeros(3))

    def translated(self, offset):
        return Pose(self.position + np.asarray(offset, dtype=np.float64), self.rotation)

    def to_json(self):
        return {
            "position": [float(x) for x in self.position],
            "rotation": [float(x) for x in self.rotation.reshape(-1)],
        }

    @classmethod
    def from_json(cls, payload):
        try:
            position = payload["position"]
            rotation = payload.get("rotation", np.eye(3).reshape(-1).tolist())
        except (KeyError, TypeError, AttributeError):
            raise InvalidPoseError("Pose JSON needs 'position' and 'rotation' entries")
        if len(position) != 3 or len(np.asarray(rotation).reshape(-1)) != 9:
            raise InvalidPoseError("Pose JSON needs a 3-vector position and 9 rotation values")
        return cls(position, np.asarray(rotation, dtype=np.float64).reshape(3, 3))

    def __eq__(self, other):
        return (
            isinstance(other, Pose)
            and np.array_equal(self.position, other.position)
            and np.array_equal(self.rotation, other.rotation)
        )

    def __repr__(self):
        return "Pose(position={})".format(np.round(self.position, 4).tolist())


class Ray(object):
    def __init__(self, origin, direction, t_near, t_far):
        origin = np.asarray(origin, dtype=np.float64).reshape(3)
        direction = check_unit_vectors(np.asarray(direction).reshape(3))
        if not 0 <= t_near < t_far:
            raise InputError("Ray needs 0 <= t_near < t_far, got {} / {}".format(t_near, t_far))
        self.origin = origin
        self.direction = direction
        self.t_near = float(t_near)
        self.t_far = float(t_far)


class RayBundle(object):
    """Many rays sharing near/far distances, stored as (N, 3) arrays."""

    def __init__(self, origins, directions, t_near, t_far):
        self.origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        self.directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        if self.origins.shape != self.directions.shape:
            raise InputError("Ray origins and directions must have matching shapes")
        if not 0 <= t_near < t_far:
            raise InputError("Rays need 0 <= t_near < t_far, got {} / {}".format(t_near, t_far))
        self.t_near = float(t_near)
        self.t_far = float(t_far)

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, index):
        if isinstance(index, (int, np.integer)):
            return Ray(self.origins[index], self.directions[index], self.t_near, self.t_far)
        return RayBundle(self.origins[index], self.directions[index], self.t_near, self.t_far)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def _check_panorama_size(width, height):
    if width <= 0 or height <= 0 or width != 2 * height:
        raise InputError("Panorama size must be 2:1, got {}x{}".format(width, height))


def pixel_to_direction(u, v, width, height):
    """Camera-frame unit direction through pixel (u, v).

    ``u`` and ``v`` may be scalars or arrays (integer or continuous pixel
    coordinates); the result has shape ``broadcast(u, v).shape + (3,)``.
    """
    _check_panorama_size(width, height)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(u < 0) or np.any(u >= width) or np.any(v < 0) or np.any(v >= height):
        raise InputError("Pixel coordinates out of range for {}x{}".format(width, height))
    theta = 2.0 * np.pi * (u + 0.5) / width - np.pi
    phi = 0.5 * np.pi - np.pi * (v + 0.5) / height
    cos_phi = np.cos(phi)
    return np.stack([cos_phi * np.sin(theta), np.sin(phi), cos_phi * np.cos(theta)], axis=-1)


def direction_to_pixel(d, width, height):
    """Continuous pixel coordinates (u, v) of unit direction(s) ``d``.

    ``u`` wraps modulo ``width``; at the poles ``u`` is ``width / 2``.
    """
    _check_panorama_size(width, height)
    d = check_unit_vectors(d)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    theta = np.arctan2(x, z)
    phi = np.arcsin(np.clip(y, -1.0, 1.0))
    u = np.mod((theta + np.pi) * width / (2.0 * np.pi) - 0.5, width)
    v = (0.5 * np.pi - phi) * height / np.pi - 0.5
    pole = np.hypot(x, z) < 1e-12
    u = np.where(pole, width / 2.0, u)
    return u, v


def pixel_grid(width, height):
    """Row-major (u, v) integer coordinates of every pixel."""
    v, u = np.mgrid[0:height, 0:width]
    return u.reshape(-1), v.reshape(-1)


def pixel_solid_angles(width, height):
    """Solid angle covered by each pixel, shape (height, width)."""
    _check_panorama_size(width, height)
    v = np.arange(height, dtype=np.float64)
    phi = 0.5 * np.pi - np.pi * (v + 0.5) / height
    per_row = np.cos(phi) * (2.0 * np.pi / width) * (np.pi / height)
    return np.repeat(per_row[:, np.newaxis], width, axis=1)


def panorama_rays(pose, width, height, t_near, t_far):
    """One world-space ray per pixel, row-major."""
    u, v = pixel_grid(width, height)
    directions = pixel_to_direction(u, v, width, height).dot(pose.rotation.T)
    origins = np.broadcast_to(pose.position, directions.shape)
    return RayBundle(origins, directions, t_near, t_far)


def _sample_face(face, cols, rows):
    """Bilinear sample of a face at continuous pixel positions, edge-clamped."""
    out = np.empty(cols.shape + (3,), dtype=np.float64)
    for c in range(3):
        out[..., c] = ndimage.map_coordinates(
            face[..., c], [rows, cols], order=1, mode="nearest"
        )
    return out


def _sample_equirect(data, u, v):
    """Bilinear sample with a wrapping seam and clamped poles."""
    height, width = data.shape[:2]
    padded = np.concatenate([data[:, -1:], data, data[:, :1]], axis=1)
    out = np.empty(np.shape(u) + (data.shape[2],), dtype=np.float64)
    for c in range(data.shape[2]):
        out[..., c] = ndimage.map_coordinates(
            padded[..., c], [v, u + 1.0], order=1, mode="nearest"
        )
    return out


def skybox_to_equirect(faces, out_width):
    """Resample a skybox into an equirectangular image of width ``out_width``."""
    if out_width <= 0 or out_width % 2:
        raise InputError("Output width must be a positive even number, got {}".format(out_width))
    if not isinstance(faces, SkyboxFaces):
        faces = SkyboxFaces(faces)
    width, height = out_width, out_width // 2
    u, v = pixel_grid(width, height)
    d = pixel_to_direction(u, v, width, height)
    size = faces.face_size
    out = np.zeros((d.shape[0], 3), dtype=np.float64)
    dominant = np.argmax(np.abs(d), axis=1)
    for name, (normal, u_axis, v_axis) in _FACE_AXES.items():
        normal = np.asarray(normal, dtype=np.float64)
        axis = int(np.flatnonzero(normal)[0])
        sel = (dominant == axis) & (d[:, axis] * normal[axis] > 0)
        if not np.any(sel):
            continue
        ds = d[sel]
        depth = ds.dot(normal)
        fu = ds.dot(np.asarray(u_axis, dtype=np.float64)) / depth
        fv = ds.dot(np.asarray(v_axis, dtype=np.float64)) / depth
        cols = (fu + 1.0) * 0.5 * size - 0.5
        rows = (1.0 - fv) * 0.5 * size - 0.5
        out[sel] = _sample_face(faces[name], cols, rows)
    return EquirectImage(np.clip(out.reshape(height, width, 3), 0.0, 1.0))


def equirect_to_skybox(img, face_size):
    """Resample an equirectangular image into six ``face_size`` faces."""
    if face_size < 4:
        raise InputError("Face size must be >= 4, got {}".format(face_size))
    if not isinstance(img, EquirectImage):
        img = EquirectImage(img)
    rows, cols = np.mgrid[0:face_size, 0:face_size].astype(np.float64)
    fu = (cols + 0.5) / face_size * 2.0 - 1.0
    fv = 1.0 - (rows + 0.5) / face_size * 2.0
    faces = {}
    for name, (normal, u_axis, v_axis) in _FACE_AXES.items():
        d = (
            np.asarray(normal, dtype=np.float64)
            + fu[..., np.newaxis] * np.asarray(u_axis, dtype=np.float64)
            + fv[..., np.newaxis] * np.asarray(v_axis, dtype=np.float64)
        )
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        u, v = direction_to_pixel(d, img.width, img.height)
        faces[name] = np.clip(_sample_equirect(img.data, u, v), 0.0, 1.0)
    return SkyboxFaces(faces)
