"""
Depth-prior occupancy grid and empty-space skipping ray traversal.

The grid covers an axis-aligned box with ``N**3`` cells. Cells whose
occupancy reaches the threshold are *active*; rays only receive samples
inside active cells. Samples always sit on a per-ray lattice
``t_k = t_near + (k + j_k) * step`` where ``j_k`` is 0.5, or a uniform value
hashed from ``(seed, ray_id, k)`` when jitter is requested. Skipping cells
therefore removes lattice points without moving the others, which is what
makes a traversal equal to a dense march filtered by the active set.
"""

import struct
import logging

import numpy as np
from scipy.spatial import cKDTree

from .utils import (
    EmptyCloudError,
    InputError,
    NumericError,
    chunk_slices,
    hash_uniform,
    ordered_map,
    seeded_rng,
)

mod_logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"PFOCC001"
_HEADER = struct.Struct("<8sI6dddd")

DEFAULT_RESOLUTION = 128
DEFAULT_THRESHOLD = 0.05
DEFAULT_DECAY = 0.95
DEFAULT_VIEW_WEIGHT = 0.1
INACTIVE_SAMPLE_FRACTION = 0.25

_CARVE_CHUNK = 4096
_QUERY_CHUNK = 65536
_TRAVERSE_CHUNK = 2048


class OccupancyGrid(object):
    """Per-cell occupancy in [0, 1] with a thresholded active set.

    Parameters
    ----------
    resolution : int
        Cells per axis.
    bounds : array_like
        ``(2, 3)`` lower and upper corners in meters.
    occ : array_like, optional
        Flat (or ``(N, N, N)``) occupancy values, x-major.
    threshold, decay, view_weight : float
        Activation threshold, per-update decay and the view-distance weight
        used at initialization.
    """

    def __init__(
        self,
        resolution,
        bounds,
        occ=None,
        threshold=DEFAULT_THRESHOLD,
        decay=DEFAULT_DECAY,
        view_weight=DEFAULT_VIEW_WEIGHT,
    ):
        resolution = int(resolution)
        if resolution < 1:
            raise InputError("Grid resolution must be >= 1, got {}".format(resolution))
        bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
        if not np.all(np.isfinite(bounds)) or np.any(bounds[1] <= bounds[0]):
            raise InputError("Degenerate grid bounds {}".format(bounds.tolist()))
        if not 0.0 <= threshold <= 1.0:
            raise InputError("Occupancy threshold must be in [0, 1], got {}".format(threshold))
        if not 0.0 < decay <= 1.0:
            raise InputError("Occupancy decay must be in (0, 1], got {}".format(decay))
        if not 0.0 <= view_weight <= 0.5:
            raise InputError("View weight must be in [0, 0.5], got {}".format(view_weight))
        self.resolution = resolution
        self.bounds = bounds
        self.threshold = float(threshold)
        self.decay = float(decay)
        self.view_weight = float(view_weight)
        n_cells = resolution ** 3
        if occ is None:
            occ = np.zeros(n_cells, dtype=np.float32)
        occ = np.asarray(occ, dtype=np.float32).reshape(-1)
        if occ.shape[0] != n_cells:
            raise InputError("Expected {} occupancy values, got {}".format(n_cells, occ.shape[0]))
        if not np.all(np.isfinite(occ)) or occ.min() < 0 or occ.max() > 1:
            raise InputError("Occupancy values must lie in [0, 1]")
        self.occ = occ
        self.refresh()

    @classmethod
    def dense(cls, resolution, bounds, threshold=DEFAULT_THRESHOLD):
        """Grid with every cell active; used for dense-sampling runs."""
        return cls(resolution, bounds, np.ones(resolution ** 3, dtype=np.float32), threshold)

    def refresh(self):
        self.active = self.occ >= np.float32(self.threshold)

    @property
    def n_cells(self):
        return self.occ.shape[0]

    @property
    def voxel_size(self):
        return (self.bounds[1] - self.bounds[0]) / self.resolution

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.bounds[1] - self.bounds[0]))

    @property
    def active_fraction(self):
        return float(self.active.mean())

    def unravel(self, flat):
        return np.stack(np.unravel_index(flat, (self.resolution,) * 3), axis=-1)

    def centers_of(self, flat):
        """World-space centers of the cells with flat indices ``flat``."""
        ijk = self.unravel(np.asarray(flat, dtype=np.int64))
        return self.bounds[0] + (ijk + 0.5) * self.voxel_size

    def cell_centers(self):
        return self.centers_of(np.arange(self.n_cells))

    def cell_of(self, points):
        """Flat cell index of each point, -1 outside the bounds."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        ijk = np.floor((points - self.bounds[0]) / self.voxel_size).astype(np.int64)
        inside = np.all((ijk >= 0) & (ijk < self.resolution), axis=1)
        n = self.resolution
        flat = (ijk[:, 0] * n + ijk[:, 1]) * n + ijk[:, 2]
        return np.where(inside, flat, -1)

    def contains(self, points, strict=True):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if strict:
            return np.all((points > self.bounds[0]) & (points < self.bounds[1]), axis=1)
        return np.all((points >= self.bounds[0]) & (points <= self.bounds[1]), axis=1)

    def set_occupancy(self, occ):
        occ = np.asarray(occ, dtype=np.float32).reshape(self.occ.shape)
        self.occ = np.clip(occ, 0.0, 1.0).astype(np.float32)
        self.refresh()

    def copy(self):
        return OccupancyGrid(
            self.resolution, self.bounds, self.occ.copy(), self.threshold, self.decay, self.view_weight
        )

    def save(self, path):
        """Binary snapshot: fixed header then little-endian float32 occupancy."""
        header = _HEADER.pack(
            SNAPSHOT_MAGIC,
            self.resolution,
            *(list(self.bounds.reshape(-1)) + [self.threshold, self.decay, self.view_weight])
        )
        with open(path, "wb") as fid:
            fid.write(header)
            fid.write(self.occ.astype("<f4").tobytes())
        return path

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fid:
            raw = fid.read()
        if len(raw) < _HEADER.size or raw[:8] != SNAPSHOT_MAGIC:
            raise InputError("{} is not an occupancy grid snapshot".format(path))
        fields = _HEADER.unpack(raw[: _HEADER.size])
        resolution = fields[1]
        bounds = np.array(fields[2:8]).reshape(2, 3)
        threshold, decay, view_weight = fields[8:11]
        occ = np.frombuffer(raw[_HEADER.size:], dtype="<f4")
        if occ.shape[0] != resolution ** 3:
            raise InputError("Truncated occupancy snapshot {}".format(path))
        return cls(resolution, bounds, occ.astype(np.float32), threshold, decay, view_weight)


class RaySegmentSamples(object):
    """Sorted samples along one ray, each tagged with its (active) cell."""

    def __init__(self, ray, t, cells, lattice, step):
        self.ray = ray
        self.t = np.asarray(t, dtype=np.float64)
        self.cells = np.asarray(cells, dtype=np.int64)
        self.lattice = np.asarray(lattice, dtype=np.int64)
        self.step = float(step)

    def __len__(self):
        return self.t.shape[0]

    def positions(self):
        return self.ray.origin + self.t[:, np.newaxis] * self.ray.direction


class PackedSamples(object):
    """Samples of many rays stored back to back, grouped by ray in order."""

    def __init__(self, ray_index, t, cells, lattice, n_rays, step):
        self.ray_index = np.asarray(ray_index, dtype=np.int64)
        self.t = np.asarray(t, dtype=np.float64)
        self.cells = np.asarray(cells, dtype=np.int64)
        self.lattice = np.asarray(lattice, dtype=np.int64)
        self.n_rays = int(n_rays)
        self.step = float(step)

    def __len__(self):
        return self.t.shape[0]

    def counts(self):
        return np.bincount(self.ray_index, minlength=self.n_rays)

    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.counts())])

    def select(self, mask):
        mask = np.asarray(mask, dtype=bool)
        return PackedSamples(
            self.ray_index[mask], self.t[mask], self.cells[mask], self.lattice[mask], self.n_rays, self.step
        )

    @classmethod
    def concatenate(cls, parts, step):
        """Join packed samples of consecutive ray chunks."""
        ray_index, t, cells, lattice = [], [], [], []
        offset = 0
        for part in parts:
            ray_index.append(part.ray_index + offset)
            t.append(part.t)
            cells.append(part.cells)
            lattice.append(part.lattice)
            offset += part.n_rays
        if not parts:
            return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), 0, step)
        return cls(
            np.concatenate(ray_index), np.concatenate(t), np.concatenate(cells),
            np.concatenate(lattice), offset, step,
        )


def bounds_for_cloud(cloud, camera, padding=0.05):
    """Cubic bounds strictly containing ``camera`` and every cloud point."""
    if len(cloud) == 0:
        raise EmptyCloudError("Cannot size a grid from an empty point cloud")
    points = np.vstack([cloud.points, np.asarray(camera, dtype=np.float64).reshape(1, 3)])
    lower, upper = points.min(axis=0), points.max(axis=0)
    center = 0.5 * (lower + upper)
    half = 0.5 * float((upper - lower).max()) * (1.0 + padding) + 1e-3
    return np.stack([center - half, center + half])


def init_from_depth_prior(
    cloud,
    camera,
    resolution=DEFAULT_RESOLUTION,
    bounds=None,
    sigma_o=None,
    view_weight=DEFAULT_VIEW_WEIGHT,
    threshold=DEFAULT_THRESHOLD,
    decay=DEFAULT_DECAY,
):
    """Occupancy from distance to the nearest depth-prior point.

    ``occ(c) = exp(-d(c)**2 / (2 sigma_o**2)) * (1 - w * min(1, |c - camera| / diag))``,
    zero beyond ``3 sigma_o``. Cells crossed by a camera-to-point segment are
    raised to the threshold so the free space seen by the camera stays
    traversable. ``sigma_o`` defaults to two voxel widths.
    """
    if len(cloud) == 0:
        raise EmptyCloudError("Cannot initialize occupancy from an empty point cloud")
    camera = np.asarray(camera, dtype=np.float64).reshape(3)
    if bounds is None:
        bounds = bounds_for_cloud(cloud, camera)
    grid = OccupancyGrid(resolution, bounds, None, threshold, decay, view_weight)
    if not grid.contains(camera[np.newaxis])[0]:
        raise InputError("Grid bounds must strictly contain the camera position")
    if not np.all(grid.contains(cloud.points)):
        raise InputError("Grid bounds must strictly contain every depth-prior point")
    if sigma_o is None:
        sigma_o = 2.0 * float(grid.voxel_size.min())
    if sigma_o <= 0:
        raise InputError("sigma_o must be > 0, got {}".format(sigma_o))

    tree = cKDTree(cloud.points)
    cutoff = 3.0 * sigma_o * (1.0 + 1e-9)
    occ = np.zeros(grid.n_cells, dtype=np.float64)
    diag = grid.diagonal
    for block in chunk_slices(grid.n_cells, _QUERY_CHUNK):
        centers = grid.centers_of(np.arange(block.start, block.stop))
        dist, _ = tree.query(centers, distance_upper_bound=cutoff)
        base = np.where(np.isfinite(dist), np.exp(-np.square(dist) / (2.0 * sigma_o ** 2)), 0.0)
        view = 1.0 - view_weight * np.minimum(1.0, np.linalg.norm(centers - camera, axis=1) / diag)
        occ[block] = base * view

    carved = _carve_free_space(grid, cloud.points, camera)
    occ[carved] = np.maximum(occ[carved], threshold)
    grid.set_occupancy(occ)
    mod_logger.info(
        "Initialized %d^3 occupancy grid: %.1f%% active (%d cells carved)",
        resolution, 100.0 * grid.active_fraction, int(carved.sum()),
    )
    return grid


def _carve_free_space(grid, points, camera):
    """Mask of cells crossed by camera-to-point segments."""
    spacing = 0.5 * float(grid.voxel_size.min())
    carved = np.zeros(grid.n_cells, dtype=bool)
    for block in chunk_slices(points.shape[0], _CARVE_CHUNK):
        offsets = points[block] - camera
        lengths = np.linalg.norm(offsets, axis=1)
        counts = np.ceil(lengths / spacing).astype(np.int64)
        owner = np.repeat(np.arange(len(counts)), counts)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        k = np.arange(owner.shape[0]) - starts[owner]
        frac = (k + 0.5) * spacing / np.maximum(lengths[owner], 1e-12)
        samples = camera + frac[:, np.newaxis] * offsets[owner]
        cells = grid.cell_of(samples)
        carved[cells[cells >= 0]] = True
    return carved


def _clip_to_box(origins, dirs, lower, upper, t_near, t_far):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lower - origins) * inv
        t1 = (upper - origins) * inv
    parallel = dirs == 0
    inside = (origins >= lower) & (origins <= upper)
    t0 = np.where(parallel, np.where(inside, -np.inf, np.inf), t0)
    t1 = np.where(parallel, np.inf, t1)
    t_enter = np.maximum(np.minimum(t0, t1).max(axis=1), t_near)
    t_exit = np.minimum(np.maximum(t0, t1).min(axis=1), t_far)
    return t_enter, t_exit


def _active_segments(grid, origins, dirs, t_enter, t_exit):
    """Cell-by-cell segments of each ray, restricted to active cells.

    Returns (ray, t_start, t_end, cell) arrays ordered by ray then distance.
    """
    n = grid.resolution
    lower, vox = grid.bounds[0], grid.voxel_size
    planes = lower[np.newaxis, :] + np.arange(n + 1)[:, np.newaxis] * vox
    with np.errstate(divide="ignore", invalid="ignore"):
        crossings = (planes[np.newaxis, :, :] - origins[:, np.newaxis, :]) / dirs[:, np.newaxis, :]
    crossings = crossings.reshape(origins.shape[0], -1)
    inside = (crossings > t_enter[:, np.newaxis]) & (crossings < t_exit[:, np.newaxis])
    crossings = np.where(inside, crossings, np.inf)
    breaks = np.concatenate([t_enter[:, np.newaxis], crossings, t_exit[:, np.newaxis]], axis=1)
    breaks.sort(axis=1)
    start, end = breaks[:, :-1], breaks[:, 1:]
    keep = np.isfinite(end) & (end > start)
    ray, col = np.nonzero(keep)
    t_start, t_end = start[ray, col], end[ray, col]
    mid = 0.5 * (t_start + t_end)
    points = origins[ray] + mid[:, np.newaxis] * dirs[ray]
    ijk = np.clip(np.floor((points - lower) / vox).astype(np.int64), 0, n - 1)
    cell = (ijk[:, 0] * n + ijk[:, 1]) * n + ijk[:, 2]
    active = grid.active[cell]
    return ray[active], t_start[active], t_end[active], cell[active]


def lattice_jitter(seed, ray_ids, k):
    """Offset of lattice sample ``k`` inside its step, in [0, 1)."""
    if seed is None:
        return np.full(np.shape(k), 0.5)
    return hash_uniform(seed, ray_ids, k)


def _traverse_chunk(grid, origins, dirs, ray_ids, t_near, t_far, step, seed):
    t_enter, t_exit = _clip_to_box(origins, dirs, grid.bounds[0], grid.bounds[1], t_near, t_far)
    hit = t_enter < t_exit
    n_rays = origins.shape[0]
    if not np.any(hit):
        empty = np.zeros(0)
        return PackedSamples(empty, empty, empty, empty, n_rays, step)
    hit_idx = np.nonzero(hit)[0]
    ray, t_a, t_b, cell = _active_segments(
        grid, origins[hit_idx], dirs[hit_idx], t_enter[hit_idx], t_exit[hit_idx]
    )
    ray = hit_idx[ray]

    k_lo = np.maximum(np.floor((t_a - t_near) / step).astype(np.int64), 0)
    k_hi = np.ceil((t_b - t_near) / step).astype(np.int64)
    counts = np.maximum(k_hi - k_lo + 1, 0)
    seg = np.repeat(np.arange(counts.shape[0]), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    k = k_lo[seg] + (np.arange(seg.shape[0]) - starts[seg])
    t = t_near + (k + lattice_jitter(seed, ray_ids[ray[seg]], k)) * step
    keep = (t >= t_a[seg]) & (t < t_b[seg]) & (t < t_far)
    seg = seg[keep]
    return PackedSamples(ray[seg], t[keep], cell[seg], k[keep], n_rays, step)


def traverse_batch(grid, origins, directions, t_near, t_far, step, seed=None, ray_ids=None, threads=None):
    """Samples inside active cells for a batch of rays.

    Parameters
    ----------
    grid : OccupancyGrid
    origins, directions : numpy.ndarray
        ``(R, 3)`` ray origins and unit directions.
    t_near, t_far : float
        Distance range of every ray.
    step : float
        Lattice spacing in meters.
    seed : int, optional
        Jitter seed; without it samples sit at step midpoints.
    ray_ids : numpy.ndarray, optional
        Global ids keying the jitter (e.g. pixel indices); defaults to
        ``arange(R)``.

    Returns
    -------
    PackedSamples
    """
    if step <= 0:
        raise InputError("Traversal step must be > 0, got {}".format(step))
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    ray_ids = np.arange(origins.shape[0]) if ray_ids is None else np.asarray(ray_ids, dtype=np.int64)
    chunks = chunk_slices(origins.shape[0], _TRAVERSE_CHUNK)
    parts = ordered_map(
        lambda s: _traverse_chunk(
            grid, origins[s], directions[s], ray_ids[s], t_near, t_far, step, seed
        ),
        chunks,
        threads,
    )
    return PackedSamples.concatenate(parts, step)


def traverse(grid, ray, step, seed=None, ray_id=0):
    """Samples along one ray; a batch of one."""
    packed = traverse_batch(
        grid, ray.origin[np.newaxis], ray.direction[np.newaxis], ray.t_near, ray.t_far,
        step, seed, np.array([ray_id]),
    )
    return RaySegmentSamples(ray, packed.t, packed.cells, packed.lattice, step)


def update(grid, field, step_size, seed=0, round_index=0, threads=None):
    """Decay occupancy and refresh it from the field's density.

    Every cell is multiplied by ``decay``. Active cells and a seeded quarter
    of the inactive ones are then raised to ``1 - exp(-sigma * step_size)``
    when that is larger. Returns the number of density queries made.
    """
    if step_size <= 0:
        raise InputError("step_size must be > 0, got {}".format(step_size))
    decayed = grid.occ * np.float32(grid.decay)
    rng = seeded_rng(seed, 13, round_index)
    pick = rng.random(grid.n_cells) < INACTIVE_SAMPLE_FRACTION
    selected = np.nonzero(grid.active | pick)[0]

    def query(block):
        return field.density(grid.centers_of(selected[block]))

    blocks = chunk_slices(selected.shape[0], _QUERY_CHUNK)
    sigma = np.concatenate([np.zeros(0)] + ordered_map(query, blocks, threads))
    bad = ~np.isfinite(sigma)
    if np.any(bad):
        cell = selected[np.argmax(bad)]
        raise NumericError(
            "Non-finite density during occupancy update",
            "cell {}".format(tuple(int(i) for i in grid.unravel(cell))),
        )
    alpha = (1.0 - np.exp(-np.maximum(sigma, 0.0) * step_size)).astype(np.float32)
    decayed[selected] = np.maximum(decayed[selected], alpha)
    grid.occ = decayed
    grid.refresh()
    mod_logger.debug(
        "Occupancy update %d: %d queries, %.2f%% active",
        round_index, selected.shape[0], 100.0 * grid.active_fraction,
    )
    return int(selected.shape[0])
