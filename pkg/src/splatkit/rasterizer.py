"""Tile-based differentiable rasterization of Gaussian clouds (CPU).

Forward model, per pixel centre ``x`` and splats sorted front to back by
(depth, index)::

    a_i = opacity_i * w(d_i^T cov2d_i^-1 d_i),   d_i = x - mean2d_i
    C   = sum_i rgb_i a_i T_i + T_final * background,  T_i = prod_{j<i} (1 - a_j)

``w(m)`` is exp(-m/2) on the splat core (m <= 8) and is blended to zero with
a quintic smootherstep on 8 < m < 9, so every footprint ends exactly on its
3-sigma ellipse while staying twice continuously differentiable (finite
differences of the rendered loss then converge at the usual h^2 rate).  Compositing
stops once transmittance falls below ``T_MIN``.

Per-pixel work runs in numba kernels parallel over tiles.  Each tile owns
its output pixels and its own slice of the gradient scratch buffer, and the
scratch is reduced serially, so results do not depend on the thread count.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .gaussians import CloudProjection, GaussianCloud, project_cloud, sh_basis, sh_basis_grad
from .geometry import NEAR_PLANE, PinholeCamera

if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    # Prefer OpenMP: probing an outdated TBB first only produces warnings.
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

TILE_SIZE = 16
T_MIN = 1e-4
SUPPORT = 9.0      # squared Mahalanobis radius of the 3-sigma ellipse
TAPER_START = 8.0  # footprint is an exact Gaussian below this radius


@dataclass
class RenderOutput:
    color: np.ndarray   # (H, W, 3) float64 in [0, 1]
    alpha: np.ndarray   # (H, W) accumulated opacity
    count: np.ndarray   # (H, W) number of splats composited


@dataclass
class ParamGradients:
    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    mean2d: np.ndarray   # screen-space gradient, used by density control
    visible: np.ndarray  # Gaussians that survived culling

    PARAMS = GaussianCloud.PARAMS

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud) -> "ParamGradients":
        n = len(cloud)
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
                   np.zeros_like(cloud.sh), np.zeros((n, 2)), np.zeros(n, dtype=bool))

    def params(self) -> dict:
        return {name: getattr(self, name) for name in self.PARAMS}

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.params().values())


@dataclass
class TileBins:
    """CSR layout of per-tile splat lists; entries index the depth-sorted splats."""

    offsets: np.ndarray  # (n_tiles + 1,)
    entries: np.ndarray  # (E,)
    tiles_x: int
    tiles_y: int
    tile_size: int = TILE_SIZE

    @property
    def n_tiles(self) -> int:
        return self.tiles_x * self.tiles_y

    def tile(self, tx: int, ty: int) -> np.ndarray:
        t = ty * self.tiles_x + tx
        return self.entries[self.offsets[t]:self.offsets[t + 1]]

    def __len__(self):
        return len(self.entries)


def tile_bin(mean2d, half_extent, image_size, tile: int = TILE_SIZE) -> TileBins:
    """Assign each splat to every tile its 3-sigma AABB overlaps.

    ``mean2d`` and ``half_extent`` are (P, 2) arrays in the order splats are
    composited; ``image_size`` is (rows, cols).  Lists keep that order.
    """
    height, width = image_size
    tiles_x = -(-width // tile)
    tiles_y = -(-height // tile)
    mean2d = np.asarray(mean2d, dtype=np.float64).reshape(-1, 2)
    half = np.asarray(half_extent, dtype=np.float64).reshape(-1, 2)
    lo = mean2d - half - 1e-6
    hi = mean2d + half + 1e-6
    tx0 = np.clip(np.floor(lo[:, 0] / tile), 0, tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor(hi[:, 0] / tile), -1, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor(lo[:, 1] / tile), 0, tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor(hi[:, 1] / tile), -1, tiles_y - 1).astype(np.int64)
    off = (hi[:, 0] < 0) | (lo[:, 0] >= width) | (hi[:, 1] < 0) | (lo[:, 1] >= height)
    nx = np.where(off, 0, np.maximum(tx1 - tx0 + 1, 0))
    ny = np.where(off, 0, np.maximum(ty1 - ty0 + 1, 0))
    counts = nx * ny
    total = int(counts.sum())
    splat = np.repeat(np.arange(len(mean2d)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    nx_s = np.repeat(nx, counts)
    tile_x = tx0[splat] + local % np.maximum(nx_s, 1)
    tile_y = ty0[splat] + local // np.maximum(nx_s, 1)
    tile_id = tile_y * tiles_x + tile_x
    order = np.argsort(tile_id, kind="stable")
    entries = splat[order]
    offsets = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile_id, minlength=tiles_x * tiles_y), out=offsets[1:])
    return TileBins(offsets, entries.astype(np.int64), tiles_x, tiles_y, tile)


# ---------------------------------------------------------------------------
# numba kernels

@numba.njit(inline="always")
def _footprint(m):
    if m >= SUPPORT:
        return 0.0
    g = np.exp(-0.5 * m)
    if m <= TAPER_START:
        return g
    t = m - TAPER_START
    return g * (1.0 - t * t * t * (10.0 - t * (15.0 - 6.0 * t)))


@numba.njit(inline="always")
def _footprint_grad(m):
    if m >= SUPPORT:
        return 0.0
    g = np.exp(-0.5 * m)
    if m <= TAPER_START:
        return -0.5 * g
    t = m - TAPER_START
    s = 1.0 - t * t * t * (10.0 - t * (15.0 - 6.0 * t))
    return -0.5 * g * s - 30.0 * t * t * (1.0 - t) * (1.0 - t) * g


@numba.njit(parallel=True, cache=True)
def _forward_kernel(mean2d, conic, opac, rgb, offsets, entries, height, width,
                    tile, tiles_x, bg, out_color, out_trans, out_count):
    n_tiles = len(offsets) - 1
    for ti in numba.prange(n_tiles):
        ty = ti // tiles_x
        tx = ti - ty * tiles_x
        start = offsets[ti]
        end = offsets[ti + 1]
        for row in range(ty * tile, min(height, ty * tile + tile)):
            py = row + 0.5
            for col in range(tx * tile, min(width, tx * tile + tile)):
                px = col + 0.5
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                cnt = 0
                for k in range(start, end):
                    p = entries[k]
                    dx = px - mean2d[p, 0]
                    dy = py - mean2d[p, 1]
                    m = conic[p, 0] * dx * dx + 2.0 * conic[p, 1] * dx * dy + conic[p, 2] * dy * dy
                    if m >= SUPPORT:
                        continue
                    a = opac[p] * _footprint(m)
                    if a <= 0.0:
                        continue
                    wgt = a * T
                    c0 += rgb[p, 0] * wgt
                    c1 += rgb[p, 1] * wgt
                    c2 += rgb[p, 2] * wgt
                    T = T * (1.0 - a)
                    cnt += 1
                    if T < T_MIN:
                        break
                out_color[row, col, 0] = c0 + T * bg[0]
                out_color[row, col, 1] = c1 + T * bg[1]
                out_color[row, col, 2] = c2 + T * bg[2]
                out_trans[row, col] = T
                out_count[row, col] = cnt


@numba.njit(parallel=True, cache=True)
def _backward_kernel(mean2d, conic, opac, rgb, offsets, entries, height, width,
                     tile, tiles_x, bg, upstream, grad_entries):
    # grad_entries[k] = (d mean2d x, y, d conic a, b, c, d opacity, d rgb r, g, b)
    n_tiles = len(offsets) - 1
    for ti in numba.prange(n_tiles):
        ty = ti // tiles_x
        tx = ti - ty * tiles_x
        start = offsets[ti]
        end = offsets[ti + 1]
        n = end - start
        if n == 0:
            continue
        kbuf = np.empty(n, dtype=np.int64)
        abuf = np.empty(n)
        tbuf = np.empty(n)
        mbuf = np.empty(n)
        dxbuf = np.empty(n)
        dybuf = np.empty(n)
        for row in range(ty * tile, min(height, ty * tile + tile)):
            py = row + 0.5
            for col in range(tx * tile, min(width, tx * tile + tile)):
                g0 = upstream[row, col, 0]
                g1 = upstream[row, col, 1]
                g2 = upstream[row, col, 2]
                if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                    continue
                px = col + 0.5
                T = 1.0
                nc = 0
                for k in range(start, end):
                    p = entries[k]
                    dx = px - mean2d[p, 0]
                    dy = py - mean2d[p, 1]
                    m = conic[p, 0] * dx * dx + 2.0 * conic[p, 1] * dx * dy + conic[p, 2] * dy * dy
                    if m >= SUPPORT:
                        continue
                    a = opac[p] * _footprint(m)
                    if a <= 0.0:
                        continue
                    kbuf[nc] = k
                    abuf[nc] = a
                    tbuf[nc] = T
                    mbuf[nc] = m
                    dxbuf[nc] = dx
                    dybuf[nc] = dy
                    nc += 1
                    T = T * (1.0 - a)
                    if T < T_MIN:
                        break
                ar = bg[0]
                ag = bg[1]
                ab = bg[2]
                for j in range(nc - 1, -1, -1):
                    k = kbuf[j]
                    p = entries[k]
                    a = abuf[j]
                    Tj = tbuf[j]
                    w = a * Tj
                    grad_entries[k, 6] += g0 * w
                    grad_entries[k, 7] += g1 * w
                    grad_entries[k, 8] += g2 * w
                    d_a = Tj * (g0 * (rgb[p, 0] - ar) + g1 * (rgb[p, 1] - ag) + g2 * (rgb[p, 2] - ab))
                    ar = rgb[p, 0] * a + (1.0 - a) * ar
                    ag = rgb[p, 1] * a + (1.0 - a) * ag
                    ab = rgb[p, 2] * a + (1.0 - a) * ab
                    m = mbuf[j]
                    grad_entries[k, 5] += d_a * _footprint(m)
                    d_m = d_a * opac[p] * _footprint_grad(m)
                    dx = dxbuf[j]
                    dy = dybuf[j]
                    grad_entries[k, 0] -= d_m * (2.0 * conic[p, 0] * dx + 2.0 * conic[p, 1] * dy)
                    grad_entries[k, 1] -= d_m * (2.0 * conic[p, 1] * dx + 2.0 * conic[p, 2] * dy)
                    grad_entries[k, 2] += d_m * dx * dx
                    grad_entries[k, 3] += d_m * 2.0 * dx * dy
                    grad_entries[k, 4] += d_m * dy * dy


@numba.njit(cache=True)
def _reduce_entries(entries, grad_entries, out):
    for k in range(len(entries)):
        p = entries[k]
        for c in range(out.shape[1]):
            out[p, c] += grad_entries[k, c]


@numba.njit(parallel=True, cache=True)
def _naive_kernel(mean2d, conic, opac, rgb, depth, height, width, bg,
                  out_color, out_trans, out_count):
    # Reference: every splat is tested at every pixel and the hits are
    # depth-sorted per pixel.  Splats arrive in index order, so a stable
    # sort on depth breaks ties by index.
    n = len(opac)
    for row in numba.prange(height):
        hits = np.empty(n, dtype=np.int64)
        keys = np.empty(n)
        py = row + 0.5
        for col in range(width):
            px = col + 0.5
            nh = 0
            for p in range(n):
                dx = px - mean2d[p, 0]
                dy = py - mean2d[p, 1]
                m = conic[p, 0] * dx * dx + 2.0 * conic[p, 1] * dx * dy + conic[p, 2] * dy * dy
                if m < SUPPORT:
                    hits[nh] = p
                    keys[nh] = depth[p]
                    nh += 1
            order = np.argsort(keys[:nh], kind="mergesort")
            T = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            cnt = 0
            for o in range(nh):
                p = hits[order[o]]
                dx = px - mean2d[p, 0]
                dy = py - mean2d[p, 1]
                m = conic[p, 0] * dx * dx + 2.0 * conic[p, 1] * dx * dy + conic[p, 2] * dy * dy
                a = opac[p] * _footprint(m)
                if a <= 0.0:
                    continue
                wgt = a * T
                c0 += rgb[p, 0] * wgt
                c1 += rgb[p, 1] * wgt
                c2 += rgb[p, 2] * wgt
                T = T * (1.0 - a)
                cnt += 1
                if T < T_MIN:
                    break
            out_color[row, col, 0] = c0 + T * bg[0]
            out_color[row, col, 1] = c1 + T * bg[1]
            out_color[row, col, 2] = c2 + T * bg[2]
            out_trans[row, col] = T
            out_count[row, col] = cnt


# ---------------------------------------------------------------------------
# python-level API

@dataclass
class _Raster:
    proj: CloudProjection
    order: np.ndarray  # original indices of visible splats, front to back
    bins: TileBins
    bg: np.ndarray
    mean2d: np.ndarray
    conic: np.ndarray
    opac: np.ndarray
    rgb: np.ndarray


def _background(background) -> np.ndarray:
    bg = np.asarray(background if background is not None else (0.0, 0.0, 0.0), dtype=np.float64)
    return np.ascontiguousarray(np.broadcast_to(bg, (3,)))


def _prepare(cloud: GaussianCloud, cam: PinholeCamera, background, near) -> _Raster:
    proj = project_cloud(cloud, cam, near)
    visible = np.flatnonzero(proj.valid)
    order = visible[np.lexsort((visible, proj.depth[visible]))]
    mean2d = np.ascontiguousarray(proj.mean2d[order])
    bins = tile_bin(mean2d, proj.half_extent[order], cam.shape)
    return _Raster(
        proj=proj, order=order, bins=bins, bg=_background(background), mean2d=mean2d,
        conic=np.ascontiguousarray(proj.conic[order]),
        opac=np.ascontiguousarray(proj.opacity[order]),
        rgb=np.ascontiguousarray(proj.rgb[order]),
    )


def _forward(r: _Raster, cam: PinholeCamera) -> RenderOutput:
    h, w = cam.shape
    color = np.empty((h, w, 3))
    trans = np.empty((h, w))
    count = np.empty((h, w), dtype=np.int32)
    _forward_kernel(r.mean2d, r.conic, r.opac, r.rgb, r.bins.offsets, r.bins.entries,
                    h, w, r.bins.tile_size, r.bins.tiles_x, r.bg, color, trans, count)
    return RenderOutput(color, 1.0 - trans, count)


def render(cloud: GaussianCloud, cam: PinholeCamera, background=(0.0, 0.0, 0.0),
           near: float = NEAR_PLANE) -> RenderOutput:
    """Render ``cloud`` from ``cam`` over a constant background color."""
    if len(cloud) == 0:
        return _empty_render(cam, background)
    return _forward(_prepare(cloud, cam, background, near), cam)


def _empty_render(cam, background) -> RenderOutput:
    h, w = cam.shape
    color = np.empty((h, w, 3))
    color[:] = _background(background)
    return RenderOutput(color, np.zeros((h, w)), np.zeros((h, w), dtype=np.int32))


def render_naive(cloud: GaussianCloud, cam: PinholeCamera, background=(0.0, 0.0, 0.0),
                 near: float = NEAR_PLANE) -> RenderOutput:
    """Untiled reference renderer with a full per-pixel depth sort."""
    if len(cloud) == 0:
        return _empty_render(cam, background)
    proj = project_cloud(cloud, cam, near)
    vis = np.flatnonzero(proj.valid)
    h, w = cam.shape
    color = np.empty((h, w, 3))
    trans = np.empty((h, w))
    count = np.empty((h, w), dtype=np.int32)
    _naive_kernel(np.ascontiguousarray(proj.mean2d[vis]), np.ascontiguousarray(proj.conic[vis]),
                  np.ascontiguousarray(proj.opacity[vis]), np.ascontiguousarray(proj.rgb[vis]),
                  np.ascontiguousarray(proj.depth[vis]), h, w, _background(background),
                  color, trans, count)
    return RenderOutput(color, 1.0 - trans, count)


def render_backward(cloud: GaussianCloud, cam: PinholeCamera, background, upstream,
                    near: float = NEAR_PLANE, _raster: Optional[_Raster] = None) -> ParamGradients:
    """Gradient of a scalar loss w.r.t. every Gaussian parameter.

    ``upstream`` is dLoss/dColor with the shape of the rendered image.
    """
    grads = ParamGradients.zeros_like(cloud)
    if len(cloud) == 0:
        return grads
    r = _raster if _raster is not None else _prepare(cloud, cam, background, near)
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    cam.check_image(upstream)
    if len(r.order) == 0:
        return grads

    h, w = cam.shape
    scratch = np.zeros((len(r.bins.entries), 9))
    _backward_kernel(r.mean2d, r.conic, r.opac, r.rgb, r.bins.offsets, r.bins.entries,
                     h, w, r.bins.tile_size, r.bins.tiles_x, r.bg, upstream, scratch)
    per_splat = np.zeros((len(r.order), 9))
    _reduce_entries(r.bins.entries, scratch, per_splat)
    _chain_to_params(cloud, cam, r.proj, r.order, per_splat, grads)
    return grads


def _chain_to_params(cloud, cam, proj: CloudProjection, idx, g, out: ParamGradients):
    """Propagate screen-space gradients of the splats ``idx`` to cloud parameters."""
    g_mean2d = g[:, 0:2]
    g_conic = g[:, 2:5]
    g_opac = g[:, 5]
    g_rgb = g[:, 6:9]
    W = cam.pose.rotation

    # color: clamp, then SH basis
    raw = proj.rgb_raw[idx]
    g_raw = g_rgb * ((raw > 0.0) & (raw < 1.0))
    dirs = proj.view_dirs[idx]
    degree = cloud.sh_degree
    basis = sh_basis(dirs, degree)
    out.sh[idx] = basis[:, :, None] * g_raw[:, None, :]
    g_mean = np.zeros((len(idx), 3))
    if degree > 0:
        dbasis = sh_basis_grad(dirs, degree)
        coef = np.einsum("nkc,nc->nk", cloud.sh[idx], g_raw)
        g_dir = np.einsum("nk,nkd->nd", coef, dbasis)
        radial = np.sum(g_dir * dirs, axis=1, keepdims=True)
        g_mean += (g_dir - dirs * radial) / proj.view_dist[idx][:, None]

    # conic -> cov2d
    Q = np.empty((len(idx), 2, 2))
    Q[:, 0, 0] = proj.conic[idx, 0]
    Q[:, 0, 1] = Q[:, 1, 0] = proj.conic[idx, 1]
    Q[:, 1, 1] = proj.conic[idx, 2]
    GQ = np.empty_like(Q)
    GQ[:, 0, 0] = g_conic[:, 0]
    GQ[:, 0, 1] = GQ[:, 1, 0] = 0.5 * g_conic[:, 1]
    GQ[:, 1, 1] = g_conic[:, 2]
    GC = -Q @ GQ @ Q

    # cov2d = T Sigma T^T with T = J W
    J = proj.jac[idx]
    T = J @ W
    Sigma = proj.cov3d[idx]
    G_Sigma = np.swapaxes(T, 1, 2) @ GC @ T
    G_T = 2.0 * GC @ T @ Sigma
    G_J = G_T @ W.T

    x, y, z = proj.p_cam[idx, 0], proj.p_cam[idx, 1], proj.p_cam[idx, 2]
    fx, fy = cam.fx, cam.fy
    g_t = np.einsum("nij,ni->nj", J, g_mean2d)
    iz2 = 1.0 / (z * z)
    iz3 = iz2 / z
    g_t[:, 0] += G_J[:, 0, 2] * (-fx * iz2)
    g_t[:, 1] += G_J[:, 1, 2] * (-fy * iz2)
    g_t[:, 2] += (G_J[:, 0, 0] * (-fx * iz2) + G_J[:, 0, 2] * (2.0 * fx * x * iz3)
                  + G_J[:, 1, 1] * (-fy * iz2) + G_J[:, 1, 2] * (2.0 * fy * y * iz3))
    g_mean += g_t @ W
    out.means[idx] = g_mean
    out.mean2d[idx] = g_mean2d
    out.visible[idx] = True

    # Sigma = (R S)(R S)^T
    R = proj.rotmat[idx]
    s = proj.scales[idx]
    M = R * s[:, None, :]
    G_M = 2.0 * G_Sigma @ M
    out.log_scales[idx] = np.sum(G_M * R, axis=1) * s
    G_R = G_M * s[:, None, :]
    out.rotations[idx] = _quat_backward(proj.quat[idx], cloud.rotations[idx], G_R)

    a = proj.opacity[idx]
    out.opacity_logits[idx] = g_opac * a * (1.0 - a)


def _quat_backward(qn, q_raw, G_R) -> np.ndarray:
    """d loss / d raw quaternion given d loss / d R(q / |q|)."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = G_R
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
              - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    gq = np.stack([gw, gx, gy, gz], axis=1)
    norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    return (gq - qn * np.sum(gq * qn, axis=1, keepdims=True)) / norm


def render_with_grad(cloud, cam, background, loss_fn, near: float = NEAR_PLANE):
    """Forward, loss and backward in one pass, sharing the projection.

    ``loss_fn(color) -> (loss, dloss/dcolor)``.  Returns (loss, RenderOutput, ParamGradients).
    """
    if len(cloud) == 0:
        out = _empty_render(cam, background)
        loss, _ = loss_fn(out.color)
        return loss, out, ParamGradients.zeros_like(cloud)
    r = _prepare(cloud, cam, background, near)
    out = _forward(r, cam)
    loss, upstream = loss_fn(out.color)
    grads = render_backward(cloud, cam, background, upstream, near, _raster=r)
    return loss, out, grads
