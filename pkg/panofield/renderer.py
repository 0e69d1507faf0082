"""
Volume rendering of occupancy-restricted rays.

For samples ``t_i`` with densities ``sigma_i`` and spacings ``delta_i``::

    alpha_i = 1 - exp(-sigma_i delta_i)
    T_i     = prod_{j<i} (1 - alpha_j)
    w_i     = T_i alpha_i
    color   = sum w_i c_i + T_final * background
    depth   = sum w_i t_i + T_final * t_far
    opacity = sum w_i

``delta_i`` is ``t_{i+1} - t_i`` when the next sample is the next lattice
point of the same ray and ``step`` otherwise (last sample, or a skipped
inactive span).
"""

import logging

import numpy as np

from .occupancy import PackedSamples, traverse_batch
from .pano_geometry import DepthPanorama, EquirectImage, panorama_rays
from .utils import InputError, NumericError, chunk_slices, ordered_map

mod_logger = logging.getLogger(__name__)

_RAY_CHUNK = 4096


class RenderResult(object):
    """Color (.., 3), expected depth and opacity of one ray or a batch."""

    def __init__(self, color, depth, opacity):
        self.color = color
        self.depth = depth
        self.opacity = opacity


def sample_deltas(t, step, lattice=None, ray_index=None):
    """Interval widths for sorted samples (per ray when ``ray_index`` is given)."""
    t = np.asarray(t, dtype=np.float64)
    delta = np.full(t.shape, float(step))
    if t.shape[0] < 2:
        return delta
    nxt = np.ones(t.shape[0] - 1, dtype=bool)
    if ray_index is not None:
        nxt &= ray_index[1:] == ray_index[:-1]
    if lattice is not None:
        nxt &= lattice[1:] == lattice[:-1] + 1
    delta[:-1] = np.where(nxt, t[1:] - t[:-1], step)
    return delta


def _check_sorted(t):
    if t.shape[0] > 1 and np.any(np.diff(t) <= 0):
        raise InputError("Sample distances must be strictly increasing")


def composite(samples, outputs, background=(0.0, 0.0, 0.0)):
    """Composite one ray's samples into a :class:`RenderResult`."""
    _check_sorted(samples.t)
    packed = PackedSamples(
        np.zeros(len(samples), dtype=np.int64), samples.t, samples.cells, samples.lattice, 1, samples.step
    )
    result, _ = composite_packed(packed, outputs.sigma, outputs.color, background, samples.ray.t_far)
    return RenderResult(result.color[0], float(result.depth[0]), float(result.opacity[0]))


def composite_packed(packed, sigma, color, background, t_far):
    """Composite every ray of ``packed``; returns the result and a backward cache."""
    background = np.asarray(background, dtype=np.float64).reshape(3)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    color = np.asarray(color, dtype=np.float64).reshape(-1, 3)
    ray = packed.ray_index
    n_rays = packed.n_rays
    delta = sample_deltas(packed.t, packed.step, packed.lattice, ray)
    tau = sigma * delta
    counts = np.bincount(ray, minlength=n_rays)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)

    cum = np.cumsum(tau)
    ray_base = np.concatenate([[0.0], cum])[starts]
    before = cum - tau - ray_base[ray]
    trans = np.exp(-np.maximum(before, 0.0))
    alpha = -np.expm1(-tau)
    weight = trans * alpha
    total_tau = np.bincount(ray, weights=tau, minlength=n_rays)
    t_final = np.exp(-total_tau)

    out_color = np.stack(
        [np.bincount(ray, weights=weight * color[:, c], minlength=n_rays) for c in range(3)], axis=1
    ) + t_final[:, np.newaxis] * background
    depth = np.bincount(ray, weights=weight * packed.t, minlength=n_rays) + t_final * t_far
    opacity = np.bincount(ray, weights=weight, minlength=n_rays)
    cache = {
        "delta": delta,
        "trans": trans,
        "weight": weight,
        "t_final": t_final,
        "tau": tau,
        "starts": starts,
        "counts": counts,
        "color": color,
        "background": background,
        "t_far": t_far,
    }
    return RenderResult(out_color, np.clip(depth, 0.0, t_far), np.clip(opacity, 0.0, 1.0)), cache


def composite_packed_backward(packed, cache, grad_color, grad_depth, grad_opacity):
    """Per-sample gradients on sigma (n,) and color (n, 3).

    With ``v_i = gC.c_i + gD t_i + gO`` and ``v_f = gC.bg + gD t_far``::

        dL/dtau_k = T_{k+1} v_k - sum_{i>k} w_i v_i - T_final v_f
    """
    grad_color = np.asarray(grad_color, dtype=np.float64).reshape(-1, 3)
    grad_depth = np.asarray(grad_depth, dtype=np.float64).reshape(-1)
    grad_opacity = np.asarray(grad_opacity, dtype=np.float64).reshape(-1)
    for name, g in (("color", grad_color), ("depth", grad_depth), ("opacity", grad_opacity)):
        if not np.all(np.isfinite(g)):
            raise NumericError("Non-finite upstream gradient", "render {}".format(name))
    ray = packed.ray_index
    n_rays = packed.n_rays
    weight, trans, tau = cache["weight"], cache["trans"], cache["tau"]

    v = (cache["color"] * grad_color[ray]).sum(axis=1) + grad_depth[ray] * packed.t + grad_opacity[ray]
    v_final = grad_color.dot(cache["background"]) + grad_depth * cache["t_far"]
    wv = weight * v
    cum = np.cumsum(wv)
    ray_total = np.bincount(ray, weights=wv, minlength=n_rays)
    ray_base = np.concatenate([[0.0], cum])[cache["starts"]]
    after = ray_total[ray] - (cum - ray_base[ray])
    trans_next = trans * np.exp(-tau)

    d_tau = trans_next * v - after - (cache["t_final"] * v_final)[ray]
    d_sigma = d_tau * cache["delta"]
    d_color = weight[:, np.newaxis] * grad_color[ray]
    return d_sigma, d_color


def composite_backward(samples, outputs, grad_color, grad_depth, grad_opacity, background=(0.0, 0.0, 0.0)):
    """Gradients of one ray's render with respect to its samples' sigma and color."""
    _check_sorted(samples.t)
    packed = PackedSamples(
        np.zeros(len(samples), dtype=np.int64), samples.t, samples.cells, samples.lattice, 1, samples.step
    )
    _, cache = composite_packed(packed, outputs.sigma, outputs.color, background, samples.ray.t_far)
    return composite_packed_backward(
        packed, cache, np.reshape(grad_color, (1, 3)), [grad_depth], [grad_opacity]
    )


def sample_points(packed, origins, directions):
    """World positions and directions of every packed sample."""
    dirs = directions[packed.ray_index]
    return origins[packed.ray_index] + packed.t[:, np.newaxis] * dirs, dirs


def render_rays(
    field, grid, origins, directions, t_near, t_far, step,
    background=(0.0, 0.0, 0.0), seed=None, ray_ids=None, threads=None,
):
    """Render a bundle of rays.

    Returns
    -------
    result : RenderResult
        Batched color (R, 3), depth (R,) and opacity (R,).
    n_samples : int
        Number of field evaluations performed.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    ray_ids = np.arange(origins.shape[0]) if ray_ids is None else np.asarray(ray_ids, dtype=np.int64)

    def render_chunk(s):
        packed = traverse_batch(
            grid, origins[s], directions[s], t_near, t_far, step, seed, ray_ids[s], threads=1
        )
        positions, dirs = sample_points(packed, origins[s], directions[s])
        out, _ = field.forward(positions, dirs)
        bad = ~(np.isfinite(out.sigma) & np.all(np.isfinite(out.color), axis=1))
        if np.any(bad):
            ray_id = int(ray_ids[s][packed.ray_index[np.argmax(bad)]])
            exc = NumericError("Non-finite field output while rendering", "ray {}".format(ray_id))
            exc.ray_id = ray_id
            raise exc
        result, _ = composite_packed(packed, out.sigma, out.color, background, t_far)
        return result, len(packed)

    parts = ordered_map(render_chunk, chunk_slices(origins.shape[0], _RAY_CHUNK), threads)
    if not parts:
        return RenderResult(np.zeros((0, 3)), np.zeros(0), np.zeros(0)), 0
    result = RenderResult(
        np.concatenate([p[0].color for p in parts]),
        np.concatenate([p[0].depth for p in parts]),
        np.concatenate([p[0].opacity for p in parts]),
    )
    return result, int(sum(p[1] for p in parts))


def render_panorama(
    field, grid, pose, width, height, step,
    background=(0.0, 0.0, 0.0), t_near=0.0, t_far=None, seed=None, threads=None,
):
    """Render the panorama seen from ``pose``.

    Returns the color image, the expected depth and the opacity raster.
    """
    if not grid.contains(pose.position[np.newaxis], strict=False)[0]:
        raise InputError("Render pose {} lies outside the grid bounds".format(pose.position.tolist()))
    t_far = grid.diagonal if t_far is None else t_far
    rays = panorama_rays(pose, width, height, t_near, t_far)
    try:
        result, n_samples = render_rays(
            field, grid, rays.origins, rays.directions, t_near, t_far, step,
            background, seed, np.arange(len(rays)), threads,
        )
    except NumericError as exc:
        ray_id = getattr(exc, "ray_id", None)
        if ray_id is None:
            raise
        v, u = divmod(ray_id, width)
        raise NumericError("Non-finite field output while rendering", "pixel ({}, {})".format(u, v))
    mod_logger.info("Rendered %dx%d panorama with %d samples", width, height, n_samples)
    return (
        EquirectImage(np.clip(result.color.reshape(height, width, 3), 0.0, 1.0)),
        DepthPanorama(result.depth.reshape(height, width)),
        result.opacity.reshape(height, width),
    )
