"""
Mesh extraction from a trained field: marching cubes on the occupancy
lattice, photometric refinement, texture baking and Wavefront OBJ export.
"""

import os
import errno
import logging
from dataclasses import dataclass, field as dataclass_field
from typing import List, Optional

import mcubes
import numpy as np
import trimesh
from scipy import ndimage

from .pano_geometry import EquirectImage, Pose, direction_to_pixel, panorama_rays
from .radiance_field import density_batched
from .renderer import render_panorama
from .scene_io import write_rgb_png
from .utils import (
    CapacityError,
    InputError,
    RefinementError,
    UnwritablePathError,
    chunk_slices,
    ordered_map,
)

mod_logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12
WELD_TOLERANCE = 1e-6
GUTTER = 2
MIN_CHART = 4
MAX_SPLAT_DIVISIONS = 64
_EVAL_CHUNK = 32768


class TexturedMesh(object):
    """Triangle mesh with optional texture coordinates and texture.

    ``uvs`` are per vertex when ``uv_faces`` is None, otherwise ``uv_faces``
    indexes them per face corner.
    """

    def __init__(self, vertices, faces, uvs=None, texture=None, uv_faces=None):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= self.vertices.shape[0]):
            raise InputError("Face indices out of range")
        if self.faces.size and np.any(self.face_areas() < DEGENERATE_AREA):
            raise InputError("Mesh has degenerate faces")
        self.uvs = None if uvs is None else np.asarray(uvs, dtype=np.float64).reshape(-1, 2)
        self.uv_faces = None if uv_faces is None else np.asarray(uv_faces, dtype=np.int64).reshape(-1, 3)
        if self.uvs is not None and self.uv_faces is None and self.uvs.shape[0] != self.vertices.shape[0]:
            raise InputError("Per-vertex uvs must match the vertex count")
        self.texture = None if texture is None else np.asarray(texture, dtype=np.float64)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    def is_empty(self):
        return self.n_faces == 0

    def _cross(self):
        tri = self.vertices[self.faces]
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    def face_areas(self):
        return 0.5 * np.linalg.norm(self._cross(), axis=1)

    def face_normals(self):
        cross = self._cross()
        return cross / np.linalg.norm(cross, axis=1)[:, np.newaxis]

    def vertex_normals(self):
        """Area-weighted vertex normals (zero for unreferenced vertices)."""
        cross = self._cross()
        normals = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(normals, self.faces[:, k], cross)
        norm = np.linalg.norm(normals, axis=1)
        ok = norm > 0
        normals[ok] /= norm[ok][:, np.newaxis]
        return normals

    def edges(self):
        """Sorted vertex pairs of every face edge, three per face."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.sort(e, axis=1)

    def to_trimesh(self):
        return trimesh.Trimesh(self.vertices, self.faces, process=False)

    def copy(self):
        return TexturedMesh(
            self.vertices.copy(), self.faces.copy(),
            None if self.uvs is None else self.uvs.copy(),
            None if self.texture is None else self.texture.copy(),
            None if self.uv_faces is None else self.uv_faces.copy(),
        )

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


@dataclass
class RefineConfig:
    iterations: int = 3
    error_threshold: float = 0.05
    vertex_step: Optional[float] = None
    views: List[Pose] = dataclass_field(default_factory=list)
    width: int = 128
    height: int = 64
    render_step: Optional[float] = None

    def validate(self):
        if self.iterations < 0:
            raise InputError("iterations must be >= 0, got {}".format(self.iterations))
        if not 0.0 <= self.error_threshold <= 1.0:
            raise InputError("error_threshold must be in [0, 1]")
        if self.vertex_step is not None and self.vertex_step <= 0:
            raise InputError("vertex_step must be > 0")
        return self


def default_iso_density(grid):
    """Density whose opacity over one voxel is 0.5."""
    return np.log(2.0) / float(grid.voxel_size.min())


def _density_lattice(field, grid, threads=None):
    """Density at every cell center, zero on inactive cells, zero-padded by one cell."""
    n = grid.resolution
    values = np.zeros(grid.n_cells)
    active = np.nonzero(grid.active)[0]
    if active.size:
        values[active] = density_batched(field, grid.centers_of(active), threads)
    return np.pad(values.reshape(n, n, n), 1, mode="constant")


def _lattice_to_world(grid, index_coords):
    return grid.bounds[0] + (index_coords - 1.0 + 0.5) * grid.voxel_size


def _world_to_lattice(grid, points):
    return (points - grid.bounds[0]) / grid.voxel_size - 0.5 + 1.0


def weld(vertices, faces, tolerance=WELD_TOLERANCE):
    """Merge vertices closer than ``tolerance``; drop degenerate and duplicate faces."""
    if faces.shape[0] == 0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    keys = np.round(vertices / tolerance).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    vertices = vertices[first]
    faces = inverse[faces]
    distinct = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[distinct]
    tri = vertices[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    faces = faces[area >= DEGENERATE_AREA]
    _, keep = np.unique(np.sort(faces, axis=1), axis=0, return_index=True)
    faces = faces[np.sort(keep)]
    used, remap = np.unique(faces, return_inverse=True)
    return vertices[used], remap.reshape(-1, 3)


def _orient_outward(grid, volume, vertices, faces):
    """Flip the winding when most normals point toward higher density."""
    tri = vertices[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    normals = cross / np.linalg.norm(cross, axis=1)[:, np.newaxis]
    centroids = tri.mean(axis=1)
    eps = 0.5 * float(grid.voxel_size.min())

    def sample(points):
        coords = _world_to_lattice(grid, points).T
        return ndimage.map_coordinates(volume, coords, order=1, mode="nearest")

    ahead = sample(centroids + eps * normals)
    behind = sample(centroids - eps * normals)
    if np.sum(ahead > behind) > np.sum(ahead < behind):
        return faces[:, [0, 2, 1]]
    return faces


def extract_coarse(field, grid, iso_density=None, threads=None):
    """Marching cubes on cell-center densities (inactive cells count as zero).

    Normals point toward lower density, so faces wind counter-clockwise when
    seen from empty space.
    """
    iso = default_iso_density(grid) if iso_density is None else float(iso_density)
    if iso <= 0:
        raise InputError("iso_density must be > 0, got {}".format(iso))
    volume = _density_lattice(field, grid, threads)
    if volume.max() < iso:
        mod_logger.info("No lattice value reaches iso density %.4g; mesh is empty", iso)
        return TexturedMesh.empty()
    index_vertices, triangles = mcubes.marching_cubes(volume, iso)
    vertices = _lattice_to_world(grid, np.asarray(index_vertices, dtype=np.float64))
    vertices, faces = weld(vertices, np.asarray(triangles, dtype=np.int64))
    if faces.shape[0] == 0:
        return TexturedMesh.empty()
    faces = _orient_outward(grid, volume, vertices, faces)
    mesh = TexturedMesh(vertices, faces)
    mod_logger.info(
        "Marching cubes at iso %.4g: %d vertices, %d faces", iso, mesh.n_vertices, mesh.n_faces
    )
    return mesh


def check_manifold(mesh):
    """Raise RefinementError on an edge shared by more than two faces."""
    if mesh.is_empty():
        return
    edges, counts = np.unique(mesh.edges(), axis=0, return_counts=True)
    bad = np.nonzero(counts > 2)[0]
    if bad.size:
        raise RefinementError("Non-manifold edge shared by {} faces".format(counts[bad[0]]), edges[bad[0]])


class Rasterization(object):
    """Nearest face per pixel of a panorama.

    ``pixels`` are the flat indices of covered pixels; ``points`` and
    ``directions`` are the surface hits and ray directions for those pixels.
    """

    def __init__(self, face_id, depth, pixels, points, directions):
        self.face_id = face_id
        self.depth = depth
        self.pixels = pixels
        self.points = points
        self.directions = directions

    @property
    def covered_faces(self):
        return self.face_id.reshape(-1)[self.pixels]


_BARY_CACHE = {}


def _bary_grid(m):
    if m not in _BARY_CACHE:
        i, j = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="ij")
        keep = (i + j) <= m
        a, b = i[keep] / float(m), j[keep] / float(m)
        _BARY_CACHE[m] = np.stack([1.0 - a - b, a, b], axis=1)
    return _BARY_CACHE[m]


def rasterize(mesh, pose, width, height):
    """Z-buffered panoramic rasterization of ``mesh`` seen from ``pose``.

    Each face is splatted as a barycentric point set at least twice as dense
    as the pixel pitch; each pixel keeps its nearest face and the hit point
    is the exact intersection of the pixel ray with that face's plane.
    """
    n_pix = width * height
    face_id = np.full(n_pix, -1, dtype=np.int64)
    depth = np.zeros(n_pix)
    if mesh.is_empty():
        empty = np.zeros((0, 3))
        return Rasterization(face_id.reshape(height, width), depth.reshape(height, width),
                             np.zeros(0, dtype=np.int64), empty, empty)
    tri = mesh.vertices[mesh.faces]
    near = np.linalg.norm(tri - pose.position, axis=2).min(axis=1)
    edge = np.max(np.linalg.norm(tri - np.roll(tri, 1, axis=1), axis=2), axis=1)
    pitch = 2.0 * np.pi / width
    divisions = np.clip(
        np.ceil(2.0 * edge / (np.maximum(near, 1e-6) * pitch)), 1, MAX_SPLAT_DIVISIONS
    ).astype(np.int64)

    points, owner = [], []
    for m in np.unique(divisions):
        idx = np.nonzero(divisions == m)[0]
        bary = _bary_grid(int(m))
        points.append(np.einsum("kc,fcd->fkd", bary, tri[idx]).reshape(-1, 3))
        owner.append(np.repeat(idx, bary.shape[0]))
    points = np.concatenate(points)
    owner = np.concatenate(owner)
    offsets = points - pose.position
    dist = np.linalg.norm(offsets, axis=1)
    ok = dist > 1e-9
    offsets, dist, owner = offsets[ok], dist[ok], owner[ok]
    cam = (offsets / dist[:, np.newaxis]).dot(pose.rotation)
    cam /= np.linalg.norm(cam, axis=1)[:, np.newaxis]
    u, v = direction_to_pixel(cam, width, height)
    pixel = np.clip(np.rint(v).astype(np.int64), 0, height - 1) * width + np.mod(
        np.rint(u).astype(np.int64), width
    )
    order = np.lexsort((owner, dist, pixel))
    first = np.ones(order.shape[0], dtype=bool)
    first[1:] = pixel[order][1:] != pixel[order][:-1]
    winners = order[first]
    face_id[pixel[winners]] = owner[winners]
    splat_dist = np.zeros(n_pix)
    splat_dist[pixel[winners]] = dist[winners]

    covered = np.nonzero(face_id >= 0)[0]
    rays = panorama_rays(pose, width, height, 0.0, 1.0)
    dirs = rays.directions[covered]
    faces = face_id[covered]
    normals = mesh.face_normals()[faces]
    anchor = tri[faces, 0]
    denom = np.sum(normals * dirs, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.sum(normals * (anchor - pose.position), axis=1) / denom
    bad = ~np.isfinite(t) | (np.abs(denom) < 1e-12) | (t <= 0)
    t = np.where(bad, splat_dist[covered], t)
    depth[covered] = t
    hits = pose.position + t[:, np.newaxis] * dirs
    return Rasterization(face_id.reshape(height, width), depth.reshape(height, width), covered, hits, dirs)


def field_colors(field, points, directions, threads=None):
    """Field color at each point seen along each direction, in fixed chunks."""
    chunks = chunk_slices(points.shape[0], _EVAL_CHUNK)
    parts = ordered_map(lambda s: field.forward(points[s], directions[s])[0].color, chunks, threads)
    return np.concatenate([np.zeros((0, 3))] + parts)


def _photometric_error(mesh, field, views, references, width, height, threads=None):
    """Summed per-pixel error, plus per-face error sums and pixel counts."""
    face_sum = np.zeros(mesh.n_faces)
    face_count = np.zeros(mesh.n_faces)
    total = 0.0
    for pose, reference in zip(views, references):
        ras = rasterize(mesh, pose, width, height)
        if ras.pixels.size == 0:
            continue
        colors = field_colors(field, ras.points, ras.directions, threads)
        err = np.mean(np.abs(colors - reference.reshape(-1, 3)[ras.pixels]), axis=1)
        faces = ras.covered_faces
        face_sum += np.bincount(faces, weights=err, minlength=mesh.n_faces)
        face_count += np.bincount(faces, minlength=mesh.n_faces)
        total += float(err.sum())
    return total, face_sum, face_count


def _face_mean_error(face_sum, face_count):
    return np.where(face_count > 0, face_sum / np.maximum(face_count, 1), 0.0)


def photometric_error(mesh, field, grid, config, threads=None):
    """Summed per-pixel error of ``mesh`` over the views of ``config``."""
    render_step = config.render_step or 0.5 * float(grid.voxel_size.min())
    references = [
        render_panorama(field, grid, pose, config.width, config.height, render_step, threads=threads)[0].data
        for pose in config.views
    ]
    return _photometric_error(mesh, field, config.views, references, config.width, config.height, threads)[0]


def subdivide(mesh, mask):
    """Midpoint subdivision of the faces in ``mask`` with conforming neighbors.

    Marked faces split 4-way. Only edges of marked faces get a midpoint, so
    the closure never spreads past their edge neighbors: a neighbor with one
    split edge is bisected toward its opposite corner, one with two is cut
    into three triangles, one with three splits 4-way. Faces sharing no edge
    with a marked face are kept as they are.
    """
    mask = np.asarray(mask, dtype=bool)
    if not np.any(mask):
        return mesh.copy()
    faces = mesh.faces
    unique_edges, face_edges = _face_edge_ids(mesh)

    split = np.zeros(unique_edges.shape[0], dtype=bool)
    split[face_edges[mask].reshape(-1)] = True
    n_split = split[face_edges].sum(axis=1)

    split_ids = np.nonzero(split)[0]
    midpoint_index = np.full(unique_edges.shape[0], -1, dtype=np.int64)
    midpoint_index[split_ids] = mesh.n_vertices + np.arange(split_ids.shape[0])
    mids = 0.5 * (mesh.vertices[unique_edges[split_ids, 0]] + mesh.vertices[unique_edges[split_ids, 1]])
    vertices = np.vstack([mesh.vertices, mids])

    new_faces = [faces[n_split == 0]]
    red = n_split == 3
    if np.any(red):
        a, b, c = faces[red, 0], faces[red, 1], faces[red, 2]
        mab, mbc, mca = (midpoint_index[face_edges[red, k]] for k in range(3))
        new_faces.append(np.stack([a, mab, mca], axis=1))
        new_faces.append(np.stack([mab, b, mbc], axis=1))
        new_faces.append(np.stack([mca, mbc, c], axis=1))
        new_faces.append(np.stack([mab, mbc, mca], axis=1))
    green = np.nonzero(n_split == 1)[0]
    if green.size:
        k = np.argmax(split[face_edges[green]], axis=1)
        rows = np.arange(green.size)
        corner = faces[green]
        start = corner[rows, k]
        end = corner[rows, (k + 1) % 3]
        opposite = corner[rows, (k + 2) % 3]
        mid = midpoint_index[face_edges[green, k]]
        new_faces.append(np.stack([start, mid, opposite], axis=1))
        new_faces.append(np.stack([mid, end, opposite], axis=1))
    pair = np.nonzero(n_split == 2)[0]
    if pair.size:
        # u -> u + 1 is the unsplit edge, w the corner between the split ones
        k = np.argmin(split[face_edges[pair]], axis=1)
        rows = np.arange(pair.size)
        corner = faces[pair]
        u = corner[rows, k]
        u1 = corner[rows, (k + 1) % 3]
        w = corner[rows, (k + 2) % 3]
        m1 = midpoint_index[face_edges[pair, (k + 1) % 3]]
        m2 = midpoint_index[face_edges[pair, (k + 2) % 3]]
        new_faces.append(np.stack([m1, w, m2], axis=1))
        new_faces.append(np.stack([u, u1, m1], axis=1))
        new_faces.append(np.stack([u, m1, m2], axis=1))
    return TexturedMesh(vertices, np.concatenate(new_faces))


def _face_edge_ids(mesh):
    """Unique sorted edges and, per face, the id of the edge from corner k to k + 1."""
    unique_edges, edge_ids = np.unique(mesh.edges(), axis=0, return_inverse=True)
    return unique_edges, edge_ids.reshape(-1).reshape(3, mesh.n_faces).T


def refine(mesh, field, grid, config, threads=None, history=None):
    """Photometric refinement against the field's own volume renders.

    Each iteration measures the per-face error between the field color at
    the rasterized surface and the volume-rendered color, subdivides faces
    above ``error_threshold`` and tries moving their vertices by
    ``-vertex_step``, 0 or ``+vertex_step`` along the vertex normal. The
    candidate mesh with the lowest summed error is kept, so that error never
    increases.

    When given, ``history`` receives the summed error before the first
    iteration and after each one.
    """
    config.validate()
    if mesh.is_empty():
        raise InputError("Cannot refine an empty mesh")
    check_manifold(mesh)
    if config.iterations == 0:
        return mesh.copy()
    if not config.views:
        raise InputError("Refinement needs at least one view pose")
    step = config.vertex_step or 0.5 * float(grid.voxel_size.min())
    render_step = config.render_step or 0.5 * float(grid.voxel_size.min())
    references = [
        render_panorama(field, grid, pose, config.width, config.height, render_step, threads=threads)[0].data
        for pose in config.views
    ]

    def measure(candidate):
        return _photometric_error(candidate, field, config.views, references, config.width, config.height, threads)

    current = mesh.copy()
    total, face_sum, face_count = measure(current)
    history = [] if history is None else history
    history.append(total)
    for iteration in range(config.iterations):
        high = _face_mean_error(face_sum, face_count) > config.error_threshold
        if not np.any(high):
            mod_logger.info("Refinement iteration %d: no face above threshold", iteration)
            break
        subdivided = subdivide(current, high)
        sub_total, sub_sum, sub_count = measure(subdivided)
        candidates = [(total, current, face_sum, face_count), (sub_total, subdivided, sub_sum, sub_count)]

        sub_high = _face_mean_error(sub_sum, sub_count) > config.error_threshold
        moved = _line_search(subdivided, sub_high, sub_sum, step, measure)
        if moved is not None:
            moved_total, moved_sum, moved_count = measure(moved)
            candidates.append((moved_total, moved, moved_sum, moved_count))

        best = min(range(len(candidates)), key=lambda i: candidates[i][0])
        total, current, face_sum, face_count = candidates[best]
        history.append(total)
        assert history[-1] <= history[-2]
        mod_logger.info(
            "Refinement iteration %d: %d faces above threshold, error %.4f -> %.4f, %d faces",
            iteration, int(high.sum()), history[-2], history[-1], current.n_faces,
        )
    return current


def _line_search(mesh, high, zero_sum, step, measure):
    """Per-vertex choice among -step, 0, +step along the vertex normal."""
    if not np.any(high):
        return None
    normals = mesh.vertex_normals()
    movable = np.zeros(mesh.n_vertices, dtype=bool)
    movable[np.unique(mesh.faces[high])] = True
    offsets = (0.0, -step, step)
    scores = []
    for offset in offsets:
        if offset == 0.0:
            per_face = zero_sum
        else:
            shifted = mesh.vertices + np.where(movable[:, np.newaxis], offset * normals, 0.0)
            try:
                candidate = TexturedMesh(shifted, mesh.faces)
            except InputError:
                scores.append(np.full(mesh.n_vertices, np.inf))
                continue
            per_face = measure(candidate)[1]
        scores.append(
            np.bincount(mesh.faces.reshape(-1), weights=np.repeat(per_face, 3), minlength=mesh.n_vertices)
        )
    choice = np.argmin(np.stack(scores), axis=0)
    shift = np.array(offsets)[choice]
    shift = np.where(movable, shift, 0.0)
    if not np.any(shift):
        return None
    try:
        return TexturedMesh(mesh.vertices + shift[:, np.newaxis] * normals, mesh.faces)
    except InputError:
        return None


def atlas_layout(n_charts, atlas_size):
    """Charts per row and cell size of the uniform atlas grid."""
    per_row = int(np.ceil(np.sqrt(max(n_charts, 1))))
    cell = atlas_size // per_row
    if cell - 2 * GUTTER < MIN_CHART:
        raise CapacityError(
            "{} charts do not fit an atlas of {} pixels".format(n_charts, atlas_size),
            per_row * (MIN_CHART + 2 * GUTTER),
        )
    return per_row, cell


def pair_faces(mesh):
    """Greedy pairing of faces across shared edges into square charts.

    Returns ``charts``, an (C, 2) array of face indices (second column -1
    for a face left alone), and ``order``, the per-face corner permutation
    that puts the shared edge on corners 1 -> 2. Two faces are paired only
    when they traverse the shared edge in opposite directions.
    """
    faces = mesh.faces
    n = mesh.n_faces
    _, face_edges = _face_edge_ids(mesh)
    owners = {}
    for f in range(n):
        for k in range(3):
            owners.setdefault(int(face_edges[f, k]), []).append((f, k))

    order = np.tile(np.arange(3), (n, 1))
    used = np.zeros(n, dtype=bool)
    charts = []
    for f in range(n):
        if used[f]:
            continue
        used[f] = True
        mate = -1
        for k in range(3):
            for g, j in owners[int(face_edges[f, k])]:
                if not used[g] and faces[g, j] == faces[f, (k + 1) % 3]:
                    mate = g
                    order[f] = [(k + 2) % 3, k, (k + 1) % 3]
                    order[g] = [(j + 2) % 3, j, (j + 1) % 3]
                    break
            if mate >= 0:
                break
        if mate >= 0:
            used[mate] = True
        charts.append((f, mate))
    return np.array(charts, dtype=np.int64).reshape(-1, 2), order


def _cell_coords(cell):
    """Chart coordinates of every texel of a cell, clamped to the unit square."""
    size = float(cell - 2 * GUTTER)
    y, x = np.mgrid[0:cell, 0:cell]
    a = np.clip((x.reshape(-1) + 0.5 - GUTTER) / size, 0.0, 1.0)
    b = np.clip((y.reshape(-1) + 0.5 - GUTTER) / size, 0.0, 1.0)
    return a, b


def _chart_barycentrics(a, b):
    """Barycentrics of a lone face's right-triangle chart, projected onto it."""
    a, b = a.copy(), b.copy()
    total = a + b
    over = total > 1.0
    a[over] /= total[over]
    b[over] /= total[over]
    return np.stack([1.0 - a - b, a, b], axis=1)


def bake_texture(mesh, field, atlas_size=1024, threads=None):
    """Texture atlas sampled from the field.

    Faces are paired across shared edges (:func:`pair_faces`); each chart
    owns one cell of a uniform grid. The first face of a pair covers the
    lower-left triangle of the cell, the second the upper-right one, and
    the shared edge is the diagonal, so its end points share texture
    coordinates. A lone face covers the lower-left triangle. Every texel
    (gutters included) takes the field color at the clamped surface point,
    looking along the inward normal.
    """
    if mesh.is_empty():
        raise InputError("Cannot bake an empty mesh")
    charts, order = pair_faces(mesh)
    n_charts = charts.shape[0]
    per_row, cell = atlas_layout(n_charts, atlas_size)
    size = cell - 2 * GUTTER
    first = charts[:, 0]
    paired = charts[:, 1] >= 0
    second = np.where(paired, charts[:, 1], first)
    normals = mesh.face_normals()
    tri_a = mesh.vertices[mesh.faces[first[:, np.newaxis], order[first]]]
    tri_b = mesh.vertices[mesh.faces[second[:, np.newaxis], order[second]]]

    a, b = _cell_coords(cell)
    lower = a + b <= 1.0
    points = np.einsum("kc,fcd->fkd", _chart_barycentrics(a, b), tri_a)
    if np.any(paired):
        lower_bary = np.stack([1.0 - a - b, a, b], axis=1)
        upper_bary = np.stack([a + b - 1.0, 1.0 - a, 1.0 - b], axis=1)
        points[paired] = np.where(
            lower[np.newaxis, :, np.newaxis],
            np.einsum("kc,fcd->fkd", lower_bary, tri_a[paired]),
            np.einsum("kc,fcd->fkd", upper_bary, tri_b[paired]),
        )
    in_first = lower[np.newaxis, :] | ~paired[:, np.newaxis]
    dirs = np.where(
        in_first[..., np.newaxis], -normals[first][:, np.newaxis], -normals[second][:, np.newaxis]
    )
    colors = field_colors(field, points.reshape(-1, 3), dirs.reshape(-1, 3), threads)
    colors = colors.reshape(n_charts, cell, cell, 3)

    texture = np.empty((atlas_size, atlas_size, 3))
    texture[...] = colors.reshape(-1, 3).mean(axis=0)
    rows, cols = np.divmod(np.arange(n_charts), per_row)
    for c in range(n_charts):
        y0, x0 = rows[c] * cell, cols[c] * cell
        texture[y0:y0 + cell, x0:x0 + cell] = colors[c]

    x0 = (cols * cell + GUTTER).astype(np.float64)
    y0 = (rows * cell + GUTTER).astype(np.float64)
    lower_px = np.stack([np.stack([x0, y0], 1), np.stack([x0 + size, y0], 1), np.stack([x0, y0 + size], 1)], 1)
    upper_px = np.stack(
        [np.stack([x0 + size, y0 + size], 1), np.stack([x0, y0 + size], 1), np.stack([x0 + size, y0], 1)], 1
    )
    corner_px = np.zeros((mesh.n_faces, 3, 2))
    corner_px[first[:, np.newaxis], order[first]] = lower_px
    mates = charts[paired, 1]
    corner_px[mates[:, np.newaxis], order[mates]] = upper_px[paired]
    corner = np.stack([corner_px[..., 0] / atlas_size, 1.0 - corner_px[..., 1] / atlas_size], axis=-1)
    uvs, uv_faces = np.unique(corner.reshape(-1, 2), axis=0, return_inverse=True)
    mod_logger.info(
        "Baked %d faces as %d charts into a %dx%d atlas (%d px cells)",
        mesh.n_faces, n_charts, atlas_size, atlas_size, cell,
    )
    return TexturedMesh(
        mesh.vertices, mesh.faces, uvs, np.clip(texture, 0.0, 1.0), uv_faces.reshape(-1).reshape(-1, 3)
    )


def corner_uvs(mesh):
    """(F, 3, 2) texture coordinates of every face corner."""
    if mesh.uvs is None:
        raise InputError("Mesh has no texture coordinates")
    if mesh.uv_faces is None:
        return mesh.uvs[mesh.faces]
    return mesh.uvs[mesh.uv_faces]


def sample_texture(texture, uv):
    """Bilinear lookup of ``texture`` at OBJ-convention uv (v up)."""
    size_y, size_x = texture.shape[:2]
    cols = uv[:, 0] * size_x - 0.5
    rows = (1.0 - uv[:, 1]) * size_y - 0.5
    return np.stack(
        [ndimage.map_coordinates(texture[..., c], [rows, cols], order=1, mode="nearest") for c in range(3)],
        axis=1,
    )


def render_textured(mesh, pose, width, height):
    """Panorama of the baked mesh; uncovered pixels are black."""
    image = np.zeros((height * width, 3))
    ras = rasterize(mesh, pose, width, height)
    if ras.pixels.size:
        faces = ras.covered_faces
        tri = mesh.vertices[mesh.faces[faces]]
        v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
        e1, e2, p = v1 - v0, v2 - v0, ras.points - v0
        d11 = np.sum(e1 * e1, axis=1)
        d12 = np.sum(e1 * e2, axis=1)
        d22 = np.sum(e2 * e2, axis=1)
        dp1 = np.sum(p * e1, axis=1)
        dp2 = np.sum(p * e2, axis=1)
        denom = d11 * d22 - d12 * d12
        b1 = np.clip((d22 * dp1 - d12 * dp2) / denom, 0.0, 1.0)
        b2 = np.clip((d11 * dp2 - d12 * dp1) / denom, 0.0, 1.0)
        over = b1 + b2 > 1.0
        scale = np.where(over, b1 + b2, 1.0)
        b1, b2 = b1 / scale, b2 / scale
        uv = corner_uvs(mesh)[faces]
        coords = (1.0 - b1 - b2)[:, np.newaxis] * uv[:, 0] + b1[:, np.newaxis] * uv[:, 1] + b2[:, np.newaxis] * uv[:, 2]
        image[ras.pixels] = sample_texture(mesh.texture, coords)
    return EquirectImage(np.clip(image.reshape(height, width, 3), 0.0, 1.0))


def export_obj(mesh, directory):
    """Write ``mesh.obj``, ``mesh.mtl`` and ``texture.png`` to ``directory``."""
    if mesh.texture is None or mesh.uvs is None:
        raise InputError("Only baked meshes can be exported")
    try:
        os.makedirs(directory, exist_ok=True)
        uv_faces = mesh.faces if mesh.uv_faces is None else mesh.uv_faces
        with open(os.path.join(directory, "mesh.obj"), "w") as fid:
            fid.write("mtllib mesh.mtl\n")
            for x, y, z in mesh.vertices:
                fid.write("v {:.6g} {:.6g} {:.6g}\n".format(x, y, z))
            for s, t in mesh.uvs:
                fid.write("vt {:.6g} {:.6g}\n".format(s, t))
            fid.write("usemtl baked\n")
            for (a, b, c), (ta, tb, tc) in zip(mesh.faces + 1, uv_faces + 1):
                fid.write("f {}/{} {}/{} {}/{}\n".format(a, ta, b, tb, c, tc))
        with open(os.path.join(directory, "mesh.mtl"), "w") as fid:
            fid.write("newmtl baked\n")
            fid.write("Ka 1 1 1\nKd 1 1 1\nKs 0 0 0\nd 1\nillum 1\n")
            fid.write("map_Kd texture.png\n")
        write_rgb_png(os.path.join(directory, "texture.png"), mesh.texture)
    except (IOError, OSError) as exc:
        if exc.errno in (errno.EACCES, errno.EROFS, errno.ENOENT, errno.ENOTDIR):
            raise UnwritablePathError("Cannot write mesh: {}".format(exc), directory)
        raise
    return os.path.join(directory, "mesh.obj")


def save_mesh_npz(mesh, path):
    payload = {"vertices": mesh.vertices, "faces": mesh.faces}
    if mesh.uvs is not None:
        payload["uvs"] = mesh.uvs
    if mesh.uv_faces is not None:
        payload["uv_faces"] = mesh.uv_faces
    if mesh.texture is not None:
        payload["texture"] = mesh.texture
    np.savez(path, **payload)
    return path


def load_mesh_npz(path):
    with np.load(path) as data:
        return TexturedMesh(
            data["vertices"],
            data["faces"],
            data["uvs"] if "uvs" in data else None,
            data["texture"] if "texture" in data else None,
            data["uv_faces"] if "uv_faces" in data else None,
        )
