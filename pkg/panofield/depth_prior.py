"""
Point clouds lifted from RGB-D panoramas and reprojected training views.
"""

import logging

import numpy as np
from scipy.spatial import cKDTree

from .pano_geometry import (
    DepthPanorama,
    EquirectImage,
    Pose,
    direction_to_pixel,
    pixel_grid,
    pixel_to_direction,
)
from .scene_io import Scene, save_scene
from .utils import EmptyCloudError, FreeSpaceError, InputError, seeded_rng

mod_logger = logging.getLogger(__name__)

FREE_SPACE_MARGIN = 0.2
MAX_ATTEMPTS_PER_POSE = 1000


class PointCloud(object):
    """World points with colors and the (u, v) pixel each came from."""

    def __init__(self, points, colors, source_pixel):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        self.source_pixel = np.asarray(source_pixel, dtype=np.int64).reshape(-1, 2)
        if not (len(self.points) == len(self.colors) == len(self.source_pixel)):
            raise InputError("Point cloud arrays must have the same length")
        if not np.all(np.isfinite(self.points)):
            raise InputError("Point cloud contains non-finite coordinates")
        self._tree = None

    def __len__(self):
        return self.points.shape[0]

    @property
    def tree(self):
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree


class ReprojectedView(object):
    def __init__(self, rgb, depth, validity, pose):
        self.rgb = rgb if isinstance(rgb, EquirectImage) else EquirectImage(rgb)
        self.depth = depth if isinstance(depth, DepthPanorama) else DepthPanorama(depth)
        self.validity = np.asarray(validity, dtype=bool)
        if self.validity.shape != self.depth.data.shape:
            raise InputError("Validity mask must match the depth raster")
        self.pose = pose

    @property
    def width(self):
        return self.rgb.width

    @property
    def height(self):
        return self.rgb.height

    @classmethod
    def from_scene(cls, scene):
        """Identity view: the captured panorama, valid wherever depth is."""
        return cls(scene.rgb, scene.depth, scene.depth.valid, scene.pose)


def lift_point_cloud(scene):
    """One world point per valid-depth pixel of ``scene``."""
    valid = scene.depth.valid.reshape(-1)
    if not np.any(valid):
        raise EmptyCloudError("Scene {} has no valid depth pixel".format(scene.name))
    u, v = pixel_grid(scene.width, scene.height)
    u, v = u[valid], v[valid]
    dirs = pixel_to_direction(u, v, scene.width, scene.height).dot(scene.pose.rotation.T)
    depth = scene.depth.data.reshape(-1)[valid]
    points = scene.pose.position + depth[:, np.newaxis] * dirs
    colors = scene.rgb.data.reshape(-1, 3)[valid]
    mod_logger.debug("Lifted %d points from %s", len(points), scene.name)
    return PointCloud(points, colors, np.stack([u, v], axis=1))


def reproject(cloud, target, width, height):
    """Forward-splat ``cloud`` into a panorama seen from ``target``.

    Each point covers one pixel. The nearest point wins a pixel; on equal
    distance the point with the lower row-major source pixel index wins.
    """
    if len(cloud) == 0:
        raise EmptyCloudError("Cannot reproject an empty point cloud")
    offsets = cloud.points - target.position
    dist = np.linalg.norm(offsets, axis=1)
    keep = dist > 1e-9
    offsets, dist = offsets[keep], dist[keep]
    colors = cloud.colors[keep]
    src = cloud.source_pixel[keep]
    # world -> camera frame (R is camera-to-world)
    dirs = (offsets / dist[:, np.newaxis]).dot(target.rotation)
    dirs /= np.linalg.norm(dirs, axis=1)[:, np.newaxis]
    u, v = direction_to_pixel(dirs, width, height)
    col = np.mod(np.rint(u).astype(np.int64), width)
    row = np.clip(np.rint(v).astype(np.int64), 0, height - 1)
    pixel = row * width + col
    # ties on distance go to the lower row-major source pixel
    order = np.lexsort((src[:, 0], src[:, 1], dist, pixel))
    pixel_sorted = pixel[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pixel_sorted[1:] != pixel_sorted[:-1]
    winners = order[first]

    rgb = np.zeros((height * width, 3))
    depth = np.zeros(height * width)
    validity = np.zeros(height * width, dtype=bool)
    rgb[pixel[winners]] = colors[winners]
    depth[pixel[winners]] = dist[winners]
    validity[pixel[winners]] = True
    return ReprojectedView(
        np.clip(rgb.reshape(height, width, 3), 0.0, 1.0),
        depth.reshape(height, width),
        validity.reshape(height, width),
        target,
    )


def sample_training_poses(scene, count, jitter_radius, seed, cloud=None):
    """Seeded camera positions in free space around the capture position.

    Positions are uniform in the ball of radius ``jitter_radius`` and kept
    only when at least 0.2 m away from every lifted point.
    """
    if jitter_radius <= 0:
        raise InputError("jitter_radius must be > 0, got {}".format(jitter_radius))
    if count < 0:
        raise InputError("count must be >= 0, got {}".format(count))
    if count == 0:
        return []
    cloud = lift_point_cloud(scene) if cloud is None else cloud
    rng = seeded_rng(seed, 11)
    center = scene.pose.position
    poses = []
    attempts = 0
    max_attempts = MAX_ATTEMPTS_PER_POSE * count
    while len(poses) < count:
        if attempts >= max_attempts:
            raise FreeSpaceError(
                "Found {} of {} free-space poses after {} attempts (jitter radius {} m)".format(
                    len(poses), count, attempts, jitter_radius
                )
            )
        attempts += 1
        direction = rng.normal(size=3)
        norm = np.linalg.norm(direction)
        if norm == 0:
            continue
        radius = jitter_radius * rng.uniform() ** (1.0 / 3.0)
        position = center + radius * direction / norm
        nearest, _ = cloud.tree.query(position)
        if nearest >= FREE_SPACE_MARGIN:
            poses.append(Pose(position))
    mod_logger.info("Sampled %d training poses in %d attempts", count, attempts)
    return poses


def save_reprojected_view(view, directory, name="reprojected"):
    """Debug dump of ``view`` as a scene directory (invalid pixels have depth 0)."""
    depth = np.where(view.validity, view.depth.data, 0.0)
    return save_scene(Scene(view.rgb, depth, view.pose, name, "synthetic"), directory)
