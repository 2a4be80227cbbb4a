"""Differentiable ray marching of volumetric primitives.

The opacity payload is a density field: a step of world length dt through
sampled density sigma contributes alpha = 1 - exp(-sigma * dt), composited
front-to-back until transmittance drops below `t_stop`. Overlapping
primitives accumulate density, with colors blended density-weighted.

Two backward paths exist: `march_backward` is the exact adjoint for both
color and opacity (used by the gradient oracles), while `RenderOperator`
freezes the sampling geometry of a scene with fixed opacity into a sparse
color->pixel linear map (the training fast path; its forward agrees with
`march` bitwise).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from . import tensor as tz
from .primitives import PrimitiveSet, all_voxel_positions, unstack_uv

T_STOP = 1e-3
MAX_STEPS = 100_000


# ---------------------------------------------------------------------------
# camera


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_to_world: np.ndarray  # 4x4; camera axes: +x right, +y up, +z forward

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @property
    def position(self) -> np.ndarray:
        return self.cam_to_world[:3, 3].copy()

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel origins (H*W, 3) and unit directions (H*W, 3)."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (self.cy - (np.arange(self.height) + 0.5)) / self.fy
        xx, yy = np.meshgrid(xs, ys)
        d_cam = np.stack([xx, yy, np.ones_like(xx)], axis=-1).reshape(-1, 3)
        rot = self.cam_to_world[:3, :3]
        d = d_cam @ rot.T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.position, d.shape).copy()
        return o, d

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), fov_deg: float = 45.0,
                width: int = 64, height: int = 64) -> "Camera":
        eye = np.asarray(eye, np.float64)
        fwd = np.asarray(target, np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(np.asarray(up, np.float64), fwd)
        right = right / np.linalg.norm(right)
        upv = np.cross(fwd, right)
        m = np.eye(4)
        m[:3, 0] = right
        m[:3, 1] = upv
        m[:3, 2] = fwd
        m[:3, 3] = eye
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height, m)


# ---------------------------------------------------------------------------
# payload / shadow types


@dataclass
class VolumeTexture:
    """Per-primitive color (N,3,S,S,S) and opacity density (N,S,S,S)."""

    color: np.ndarray
    opacity: np.ndarray

    def __post_init__(self):
        n, c, s = self.color.shape[0], self.color.shape[1], self.color.shape[2]
        if c != 3 or self.color.shape[2:] != (s, s, s):
            raise ValueError(f"color payload must be (N,3,S,S,S), got {self.color.shape}")
        if self.opacity.shape != (n, s, s, s):
            raise ValueError(f"opacity shape {self.opacity.shape} does not match color {self.color.shape}")
        if np.any(self.opacity < 0) or not np.all(np.isfinite(self.opacity)):
            raise ValueError("opacity density must be finite and nonnegative")

    @property
    def S(self) -> int:
        return self.color.shape[2]

    def voxel_opacity(self, pset: PrimitiveSet) -> np.ndarray:
        """Per-voxel opacity 1-exp(-sigma*voxel_extent), guaranteed in [0,1]."""
        ext = pset.voxel_extents().min(axis=1)
        return 1.0 - np.exp(-self.opacity * ext[:, None, None, None])


@dataclass
class ShadowVolume:
    """Per-voxel transmittance toward one light, in [0, 1]."""

    values: np.ndarray  # (N, S, S, S)

    def __post_init__(self):
        if np.any(self.values < 0) or np.any(self.values > 1 + 1e-6):
            raise ValueError("transmittance must lie in [0, 1]")


Scene = list[tuple[PrimitiveSet, VolumeTexture]]


def _as_scene(scene) -> Scene:
    if isinstance(scene, tuple):
        return [scene]
    return list(scene)


def default_step(psets) -> float:
    """Quarter of the median voxel extent across all primitives."""
    if isinstance(psets, PrimitiveSet):
        psets = [psets]
    ext = np.concatenate([p.voxel_extents().min(axis=1) for p in psets])
    return 0.25 * float(np.median(ext))


# ---------------------------------------------------------------------------
# flattened scene + uniform grid over primitive bounding boxes


@dataclass
class FlatScene:
    centers: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    color: np.ndarray      # (N, 3, S^3) float64
    opacity: np.ndarray    # (N, S^3) float64
    S: int
    set_offsets: list[int]
    grid_lo: np.ndarray
    grid_inv: np.ndarray
    grid_dims: np.ndarray
    cell_start: np.ndarray
    cell_items: np.ndarray


def _prim_aabbs(centers, rotations, scales):
    ext = np.einsum("nij,nj->ni", np.abs(rotations), scales)
    return centers - ext, centers + ext


def flatten_scene(scene: Scene, grid_res: int = 32) -> FlatScene:
    sets = _as_scene(scene)
    S = sets[0][0].S
    for pset, tex in sets:
        if pset.S != S or tex.S != S:
            raise ValueError("all primitive sets in a scene must share S")
        if tex.color.shape[0] != pset.count:
            raise ValueError(f"payload has {tex.color.shape[0]} primitives, set has {pset.count}")
    centers = np.concatenate([p.centers for p, _ in sets]).astype(np.float64)
    rotations = np.concatenate([p.rotations for p, _ in sets]).astype(np.float64)
    scales = np.concatenate([p.scales for p, _ in sets]).astype(np.float64)
    color = np.concatenate([t.color.reshape(len(t.color), 3, -1) for _, t in sets]).astype(np.float64)
    opacity = np.concatenate([t.opacity.reshape(len(t.opacity), -1) for _, t in sets]).astype(np.float64)
    offsets = np.cumsum([0] + [p.count for p, _ in sets]).tolist()

    lo, hi = _prim_aabbs(centers, rotations, scales)
    glo = lo.min(axis=0)
    ghi = hi.max(axis=0)
    span = np.maximum(ghi - glo, 1e-9)
    dims = np.maximum(1, np.minimum(grid_res, np.ceil(span / span.max() * grid_res))).astype(np.int32)
    cell = span / dims
    inv = 1.0 / cell

    ncell = int(dims[0] * dims[1] * dims[2])
    il = np.clip(((lo - glo) * inv).astype(np.int64), 0, dims - 1)
    ih = np.clip(((hi - glo) * inv).astype(np.int64), 0, dims - 1)
    counts = np.zeros(ncell, np.int64)
    spans = []
    for k in range(len(centers)):
        zz, yy, xx = np.meshgrid(np.arange(il[k, 2], ih[k, 2] + 1),
                                 np.arange(il[k, 1], ih[k, 1] + 1),
                                 np.arange(il[k, 0], ih[k, 0] + 1), indexing="ij")
        cells = (zz * dims[1] + yy) * dims[0] + xx
        spans.append(cells.reshape(-1))
        np.add.at(counts, cells.reshape(-1), 1)
    start = np.zeros(ncell + 1, np.int64)
    np.cumsum(counts, out=start[1:])
    items = np.empty(start[-1], np.int32)
    fill = start[:-1].copy()
    for k, cells in enumerate(spans):
        for c in cells:
            items[fill[c]] = k
            fill[c] += 1
    return FlatScene(centers, rotations, scales, color, opacity, S, offsets,
                     glo, inv, dims, start, items)


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True, inline="always")
def _ray_range(centers, rotations, scales, o, d):
    """Entry/exit of the ray across the union of primitive boxes."""
    t0 = np.inf
    t1 = -np.inf
    for k in range(len(centers)):
        e0 = 0.0
        e1 = np.inf
        ok = True
        for a in range(3):
            ol = 0.0
            dl = 0.0
            for b in range(3):
                ol += rotations[k, b, a] * (o[b] - centers[k, b])
                dl += rotations[k, b, a] * d[b]
            ol /= scales[k, a]
            dl /= scales[k, a]
            if abs(dl) < 1e-12:
                if ol < -1.0 or ol > 1.0:
                    ok = False
                    break
            else:
                ta = (-1.0 - ol) / dl
                tb = (1.0 - ol) / dl
                if ta > tb:
                    ta, tb = tb, ta
                if ta > e0:
                    e0 = ta
                if tb < e1:
                    e1 = tb
                if e0 > e1:
                    ok = False
                    break
        if ok:
            if e0 < t0:
                t0 = e0
            if e1 > t1:
                t1 = e1
    return t0, t1


@njit(cache=True, inline="always")
def _cell_of(grid_lo, grid_inv, grid_dims, x, y, z):
    ix = int((x - grid_lo[0]) * grid_inv[0])
    iy = int((y - grid_lo[1]) * grid_inv[1])
    iz = int((z - grid_lo[2]) * grid_inv[2])
    if ix < 0 or iy < 0 or iz < 0 or ix >= grid_dims[0] or iy >= grid_dims[1] or iz >= grid_dims[2]:
        return -1
    return (iz * grid_dims[1] + iy) * grid_dims[0] + ix


@njit(cache=True, inline="always")
def _sample_prim(centers, rotations, scales, opacity, color, S, k, x, y, z,
                 corners, weights):
    """Trilinear sample of primitive k at world point; returns (inside, sigma,
    c0, c1, c2) and fills the 8 corner voxel ids / weights."""
    lx = 0.0
    ly = 0.0
    lz = 0.0
    dx = x - centers[k, 0]
    dy = y - centers[k, 1]
    dz = z - centers[k, 2]
    lx = (rotations[k, 0, 0] * dx + rotations[k, 1, 0] * dy + rotations[k, 2, 0] * dz) / scales[k, 0]
    ly = (rotations[k, 0, 1] * dx + rotations[k, 1, 1] * dy + rotations[k, 2, 1] * dz) / scales[k, 1]
    lz = (rotations[k, 0, 2] * dx + rotations[k, 1, 2] * dy + rotations[k, 2, 2] * dz) / scales[k, 2]
    if lx < -1.0 or lx > 1.0 or ly < -1.0 or ly > 1.0 or lz < -1.0 or lz > 1.0:
        return False, 0.0, 0.0, 0.0, 0.0
    gx = (lx + 1.0) * 0.5 * S - 0.5
    gy = (ly + 1.0) * 0.5 * S - 0.5
    gz = (lz + 1.0) * 0.5 * S - 0.5
    x0 = int(math.floor(gx))
    y0 = int(math.floor(gy))
    z0 = int(math.floor(gz))
    fx = gx - x0
    fy = gy - y0
    fz = gz - z0
    if x0 < 0:
        x0 = 0
        fx = 0.0
    if y0 < 0:
        y0 = 0
        fy = 0.0
    if z0 < 0:
        z0 = 0
        fz = 0.0
    x1 = x0 + 1 if x0 + 1 < S else x0
    y1 = y0 + 1 if y0 + 1 < S else y0
    z1 = z0 + 1 if z0 + 1 < S else z0
    if x0 >= S:
        x0 = S - 1
        x1 = S - 1
        fx = 0.0
    if y0 >= S:
        y0 = S - 1
        y1 = S - 1
        fy = 0.0
    if z0 >= S:
        z0 = S - 1
        z1 = S - 1
        fz = 0.0
    sigma = 0.0
    c0 = 0.0
    c1 = 0.0
    c2 = 0.0
    i = 0
    for dzc in range(2):
        zc = z0 if dzc == 0 else z1
        wz = (1.0 - fz) if dzc == 0 else fz
        for dyc in range(2):
            yc = y0 if dyc == 0 else y1
            wy = (1.0 - fy) if dyc == 0 else fy
            for dxc in range(2):
                xc = x0 if dxc == 0 else x1
                wx = (1.0 - fx) if dxc == 0 else fx
                wgt = wz * wy * wx
                vox = (zc * S + yc) * S + xc
                corners[i] = vox
                weights[i] = wgt
                sigma += wgt * opacity[k, vox]
                c0 += wgt * color[k, 0, vox]
                c1 += wgt * color[k, 1, vox]
                c2 += wgt * color[k, 2, vox]
                i += 1
    return True, sigma, c0, c1, c2


@njit(cache=True, parallel=True)
def _march_kernel(centers, rotations, scales, opacity, color, S,
                  grid_lo, grid_inv, grid_dims, cell_start, cell_items,
                  origins, dirs, step, t_stop, out):
    npix = len(origins)
    for p in prange(npix):
        corners_l = np.empty(8, np.int64)
        weights_l = np.empty(8, np.float64)
        o = origins[p]
        d = dirs[p]
        t0, t1 = _ray_range(centers, rotations, scales, o, d)
        if not (t0 < t1):
            continue
        if t0 < 0.0:
            t0 = 0.0
        trans = 1.0
        r = 0.0
        g = 0.0
        b = 0.0
        nsteps = int((t1 - t0) / step) + 1
        if nsteps > MAX_STEPS:
            nsteps = MAX_STEPS
        for j in range(nsteps):
            t = t0 + (j + 0.5) * step
            if t >= t1:
                break
            x = o[0] + t * d[0]
            y = o[1] + t * d[1]
            z = o[2] + t * d[2]
            cell = _cell_of(grid_lo, grid_inv, grid_dims, x, y, z)
            if cell < 0:
                continue
            sigma = 0.0
            cr = 0.0
            cg = 0.0
            cb = 0.0
            for ii in range(cell_start[cell], cell_start[cell + 1]):
                k = cell_items[ii]
                inside, s_k, a0, a1, a2 = _sample_prim(
                    centers, rotations, scales, opacity, color, S, k, x, y, z,
                    corners_l, weights_l)
                if inside and s_k > 0.0:
                    sigma += s_k
                    cr += s_k * a0
                    cg += s_k * a1
                    cb += s_k * a2
            if sigma <= 0.0:
                continue
            alpha = 1.0 - math.exp(-sigma * step)
            w = trans * alpha
            r += w * cr / sigma
            g += w * cg / sigma
            b += w * cb / sigma
            trans *= 1.0 - alpha
            if trans < t_stop:
                break
        out[p, 0] = r
        out[p, 1] = g
        out[p, 2] = b
        out[p, 3] = 1.0 - trans


@njit(cache=True, parallel=True)
def _march_record(centers, rotations, scales, opacity, color, S,
                  grid_lo, grid_inv, grid_dims, cell_start, cell_items,
                  origins, dirs, step, t_stop,
                  counts, offsets, idx_out, w_out, fill: bool):
    npix = len(origins)
    sss = S * S * S
    for p in prange(npix):
        corners_l = np.empty(8, np.int64)
        weights_l = np.empty(8, np.float64)
        o = origins[p]
        d = dirs[p]
        t0, t1 = _ray_range(centers, rotations, scales, o, d)
        n_entries = 0
        pos = offsets[p] if fill else 0
        if t0 < t1:
            if t0 < 0.0:
                t0 = 0.0
            trans = 1.0
            nsteps = int((t1 - t0) / step) + 1
            if nsteps > MAX_STEPS:
                nsteps = MAX_STEPS
            for j in range(nsteps):
                t = t0 + (j + 0.5) * step
                if t >= t1:
                    break
                x = o[0] + t * d[0]
                y = o[1] + t * d[1]
                z = o[2] + t * d[2]
                cell = _cell_of(grid_lo, grid_inv, grid_dims, x, y, z)
                if cell < 0:
                    continue
                sigma = 0.0
                for ii in range(cell_start[cell], cell_start[cell + 1]):
                    k = cell_items[ii]
                    inside, s_k, a0, a1, a2 = _sample_prim(
                        centers, rotations, scales, opacity, color, S, k, x, y, z,
                        corners_l, weights_l)
                    if inside and s_k > 0.0:
                        sigma += s_k
                if sigma <= 0.0:
                    continue
                alpha = 1.0 - math.exp(-sigma * step)
                wpix = trans * alpha / sigma
                # second pass over the cell to emit (voxel, weight) entries
                for ii in range(cell_start[cell], cell_start[cell + 1]):
                    k = cell_items[ii]
                    inside, s_k, a0, a1, a2 = _sample_prim(
                        centers, rotations, scales, opacity, color, S, k, x, y, z,
                        corners_l, weights_l)
                    if inside and s_k > 0.0:
                        for c in range(8):
                            if fill:
                                idx_out[pos] = k * sss + corners_l[c]
                                w_out[pos] = wpix * s_k * weights_l[c]
                                pos += 1
                            n_entries += 1
                trans *= 1.0 - alpha
                if trans < t_stop:
                    break
        if not fill:
            counts[p] = n_entries


@njit(cache=True, parallel=True)
def _operator_apply(offsets, idx, w, color, sss, out):
    npix = len(offsets) - 1
    for p in prange(npix):
        r = 0.0
        g = 0.0
        b = 0.0
        for i in range(offsets[p], offsets[p + 1]):
            k = idx[i] // sss
            vox = idx[i] % sss
            r += w[i] * color[k, 0, vox]
            g += w[i] * color[k, 1, vox]
            b += w[i] * color[k, 2, vox]
        out[p, 0] = r
        out[p, 1] = g
        out[p, 2] = b


@njit(cache=True)
def _operator_backward(offsets, idx, w, grad_img, sss, dcolor):
    npix = len(offsets) - 1
    for p in range(npix):
        g0 = grad_img[p, 0]
        g1 = grad_img[p, 1]
        g2 = grad_img[p, 2]
        for i in range(offsets[p], offsets[p + 1]):
            k = idx[i] // sss
            vox = idx[i] % sss
            dcolor[k, 0, vox] += w[i] * g0
            dcolor[k, 1, vox] += w[i] * g1
            dcolor[k, 2, vox] += w[i] * g2


@njit(cache=True)
def _march_adjoint(centers, rotations, scales, opacity, color, S,
                   grid_lo, grid_inv, grid_dims, cell_start, cell_items,
                   origins, dirs, step, t_stop, grad_img, dcolor, dopacity):
    npix = len(origins)
    corners_l = np.empty(8, np.int64)
    weights_l = np.empty(8, np.float64)
    for p in range(npix):
        o = origins[p]
        d = dirs[p]
        t0, t1 = _ray_range(centers, rotations, scales, o, d)
        if not (t0 < t1):
            continue
        if t0 < 0.0:
            t0 = 0.0
        maxn = int((t1 - t0) / step) + 2
        if maxn > MAX_STEPS:
            maxn = MAX_STEPS
        ts = np.empty(maxn)
        sig = np.empty(maxn)
        keep = np.empty(maxn)      # 1 - alpha = exp(-sigma * step)
        tb4 = np.empty(maxn)       # transmittance before the sample
        cb = np.empty((maxn, 3))   # blended color at the sample
        n = 0
        trans = 1.0
        for j in range(maxn):
            t = t0 + (j + 0.5) * step
            if t >= t1:
                break
            x = o[0] + t * d[0]
            y = o[1] + t * d[1]
            z = o[2] + t * d[2]
            cell = _cell_of(grid_lo, grid_inv, grid_dims, x, y, z)
            if cell < 0:
                continue
            sigma = 0.0
            cr = 0.0
            cg = 0.0
            cbl = 0.0
            for ii in range(cell_start[cell], cell_start[cell + 1]):
                k = cell_items[ii]
                inside, s_k, a0, a1, a2 = _sample_prim(
                    centers, rotations, scales, opacity, color, S, k, x, y, z,
                    corners_l, weights_l)
                if inside and s_k > 0.0:
                    sigma += s_k
                    cr += s_k * a0
                    cg += s_k * a1
                    cbl += s_k * a2
            if sigma <= 0.0:
                continue
            ts[n] = t
            sig[n] = sigma
            keep[n] = math.exp(-sigma * step)
            tb4[n] = trans
            cb[n, 0] = cr / sigma
            cb[n, 1] = cg / sigma
            cb[n, 2] = cbl / sigma
            trans *= keep[n]
            n += 1
            if trans < t_stop:
                break
        t_final = trans
        g0 = grad_img[p, 0]
        g1 = grad_img[p, 1]
        g2 = grad_img[p, 2]
        ga = grad_img[p, 3]
        s_after0 = 0.0
        s_after1 = 0.0
        s_after2 = 0.0
        for j in range(n - 1, -1, -1):
            alpha = 1.0 - keep[j]
            tj = tb4[j]
            denom = keep[j] if keep[j] > 1e-300 else 1e-300
            dalpha = (g0 * (tj * cb[j, 0] - s_after0 / denom)
                      + g1 * (tj * cb[j, 1] - s_after1 / denom)
                      + g2 * (tj * cb[j, 2] - s_after2 / denom)
                      + ga * (t_final / denom))
            dc0 = g0 * tj * alpha
            dc1 = g1 * tj * alpha
            dc2 = g2 * tj * alpha
            dsig_total = dalpha * step * keep[j]
            # re-evaluate prims at the sample to distribute gradients
            t = ts[j]
            x = o[0] + t * d[0]
            y = o[1] + t * d[1]
            z = o[2] + t * d[2]
            cell = _cell_of(grid_lo, grid_inv, grid_dims, x, y, z)
            for ii in range(cell_start[cell], cell_start[cell + 1]):
                k = cell_items[ii]
                inside, s_k, a0, a1, a2 = _sample_prim(
                    centers, rotations, scales, opacity, color, S, k, x, y, z,
                    corners_l, weights_l)
                if inside and s_k > 0.0:
                    dsk = dsig_total + (dc0 * (a0 - cb[j, 0])
                                        + dc1 * (a1 - cb[j, 1])
                                        + dc2 * (a2 - cb[j, 2])) / sig[j]
                    frac = s_k / sig[j]
                    for c in range(8):
                        vox = corners_l[c]
                        wgt = weights_l[c]
                        dopacity[k, vox] += wgt * dsk
                        dcolor[k, 0, vox] += wgt * frac * dc0
                        dcolor[k, 1, vox] += wgt * frac * dc1
                        dcolor[k, 2, vox] += wgt * frac * dc2
            # fold this sample's own contribution in for the next (earlier) one
            s_after0 += tj * alpha * cb[j, 0]
            s_after1 += tj * alpha * cb[j, 1]
            s_after2 += tj * alpha * cb[j, 2]


@njit(cache=True, parallel=True)
def _deep_shadow_kernel(centers, rotations, scales, opacity, color, S,
                        grid_lo, grid_inv, grid_dims, cell_start, cell_items,
                        light, targets, eps_per_target, step, out):
    for i in prange(len(targets)):
        corners_l = np.empty(8, np.int64)
        weights_l = np.empty(8, np.float64)
        dx = targets[i, 0] - light[0]
        dy = targets[i, 1] - light[1]
        dz = targets[i, 2] - light[2]
        dist = math.sqrt(dx * dx + dy * dy + dz * dz)
        if dist < 1e-12:
            out[i] = 1.0
            continue
        dxn = dx / dist
        dyn = dy / dist
        dzn = dz / dist
        dirv = np.empty(3)
        dirv[0] = dxn
        dirv[1] = dyn
        dirv[2] = dzn
        t0, t1 = _ray_range(centers, rotations, scales, light, dirv)
        t_end = dist - eps_per_target[i]
        if t1 < t_end:
            t_end = t1
        if t0 < 0.0:
            t0 = 0.0
        tau = 0.0
        if t0 < t_end:
            nsteps = int((t_end - t0) / step) + 1
            if nsteps > MAX_STEPS:
                nsteps = MAX_STEPS
            for j in range(nsteps):
                t = t0 + (j + 0.5) * step
                if t >= t_end:
                    break
                x = light[0] + t * dxn
                y = light[1] + t * dyn
                z = light[2] + t * dzn
                cell = _cell_of(grid_lo, grid_inv, grid_dims, x, y, z)
                if cell < 0:
                    continue
                for ii in range(cell_start[cell], cell_start[cell + 1]):
                    k = cell_items[ii]
                    inside, s_k, a0, a1, a2 = _sample_prim(
                        centers, rotations, scales, opacity, color, S, k, x, y, z,
                        corners_l, weights_l)
                    if inside and s_k > 0.0:
                        tau += s_k * step
        out[i] = math.exp(-tau)


# ---------------------------------------------------------------------------
# public API


@dataclass
class MarchRecord:
    flat: FlatScene
    origins: np.ndarray
    dirs: np.ndarray
    step: float
    t_stop: float
    height: int
    width: int
    n_sets: int


def march(scene, camera: Camera, step: float | None = None,
          t_stop: float = T_STOP, record: bool = False):
    """Render linear RGBA (H, W, 4). With record=True also returns the
    forward record needed by march_backward."""
    sets = _as_scene(scene)
    if step is None:
        step = default_step([p for p, _ in sets])
    if step <= 0:
        raise ValueError("step must be positive")
    flat = flatten_scene(sets)
    origins, dirs = camera.rays()
    out = np.zeros((len(origins), 4))
    _march_kernel(flat.centers, flat.rotations, flat.scales, flat.opacity,
                  flat.color, flat.S, flat.grid_lo, flat.grid_inv, flat.grid_dims,
                  flat.cell_start, flat.cell_items, origins, dirs, step, t_stop, out)
    img = out.reshape(camera.height, camera.width, 4)
    if record:
        rec = MarchRecord(flat, origins, dirs, step, t_stop,
                          camera.height, camera.width, len(sets))
        return img, rec
    return img


def march_backward(record: MarchRecord | None, grad_image: np.ndarray):
    """Exact adjoint of `march`: gradients w.r.t. color and opacity payloads.

    Returns (dcolor, dopacity) shaped like the scene payloads for a
    single-set scene, or a list of such pairs for multi-set scenes.
    """
    if record is None:
        raise ValueError("missing forward record: call march(..., record=True) first")
    flat = record.flat
    g = np.ascontiguousarray(grad_image, np.float64).reshape(-1, 4)
    if g.shape[0] != len(record.origins):
        raise ValueError("gradient image size does not match the recorded render")
    dcolor = np.zeros_like(flat.color)
    dopacity = np.zeros_like(flat.opacity)
    _march_adjoint(flat.centers, flat.rotations, flat.scales, flat.opacity,
                   flat.color, flat.S, flat.grid_lo, flat.grid_inv, flat.grid_dims,
                   flat.cell_start, flat.cell_items, record.origins, record.dirs,
                   record.step, record.t_stop, g, dcolor, dopacity)
    s = flat.S
    outs = []
    for a, b in zip(flat.set_offsets[:-1], flat.set_offsets[1:]):
        outs.append((dcolor[a:b].reshape(b - a, 3, s, s, s),
                     dopacity[a:b].reshape(b - a, s, s, s)))
    return outs[0] if record.n_sets == 1 else outs


def deep_shadow(pset: PrimitiveSet, opacity: np.ndarray, light,
                step: float | None = None) -> ShadowVolume:
    """Per-voxel transmittance from `light`, marching light -> voxel and
    excluding a half-voxel segment at the destination.

    The default step is one median voxel extent (coarser than the camera
    march; exponential accumulation keeps the error small)."""
    light = np.asarray(light, np.float64)
    if not np.all(np.isfinite(light)):
        raise ValueError("light position must be finite")
    if step is None:
        step = 4.0 * default_step(pset)
    S = pset.S
    tex = VolumeTexture(np.zeros((pset.count, 3, S, S, S)), opacity.astype(np.float64))
    flat = flatten_scene([(pset, tex)])
    targets = all_voxel_positions(pset).reshape(-1, 3)
    eps = np.repeat(0.5 * pset.voxel_extents().max(axis=1), S ** 3)
    out = np.empty(len(targets))
    _deep_shadow_kernel(flat.centers, flat.rotations, flat.scales, flat.opacity,
                        flat.color, S, flat.grid_lo, flat.grid_inv, flat.grid_dims,
                        flat.cell_start, flat.cell_items, light, targets, eps,
                        step, out)
    return ShadowVolume(np.minimum(out, 1.0).reshape(pset.count, S, S, S))


class RenderOperator:
    """Sparse linear map payload colors -> pixels for a fixed-opacity scene.

    Built by marching once and recording compositing weights; applying it
    reproduces `march` up to float64 rounding of the reordered sums.
    Differentiable through `apply` (color gradients only; opacity is frozen).
    """

    def __init__(self, pset: PrimitiveSet, opacity: np.ndarray, camera: Camera,
                 step: float | None = None, t_stop: float = T_STOP):
        self.pset = pset
        self.camera = camera
        self.step = default_step(pset) if step is None else step
        S = pset.S
        tex = VolumeTexture(np.zeros((pset.count, 3, S, S, S)), opacity.astype(np.float64))
        flat = flatten_scene([(pset, tex)])
        origins, dirs = camera.rays()
        npix = len(origins)
        counts = np.zeros(npix, np.int64)
        dummy = np.empty(0, np.int64)
        dummyw = np.empty(0, np.float64)
        offsets0 = np.zeros(npix, np.int64)
        _march_record(flat.centers, flat.rotations, flat.scales, flat.opacity,
                      flat.color, S, flat.grid_lo, flat.grid_inv, flat.grid_dims,
                      flat.cell_start, flat.cell_items, origins, dirs, self.step,
                      t_stop, counts, offsets0, dummy, dummyw, False)
        offsets = np.zeros(npix + 1, np.int64)
        np.cumsum(counts, out=offsets[1:])
        idx = np.empty(offsets[-1], np.int64)
        wts = np.empty(offsets[-1], np.float64)
        _march_record(flat.centers, flat.rotations, flat.scales, flat.opacity,
                      flat.color, S, flat.grid_lo, flat.grid_inv, flat.grid_dims,
                      flat.cell_start, flat.cell_items, origins, dirs, self.step,
                      t_stop, counts, offsets[:-1], idx, wts, True)
        # alpha channel is independent of color: render once for it
        out = np.zeros((npix, 4))
        _march_kernel(flat.centers, flat.rotations, flat.scales, flat.opacity,
                      flat.color, S, flat.grid_lo, flat.grid_inv, flat.grid_dims,
                      flat.cell_start, flat.cell_items, origins, dirs, self.step,
                      t_stop, out)
        self.offsets = offsets
        self.idx = idx
        self.weights = wts
        self.alpha = out[:, 3].reshape(camera.height, camera.width)

    def render_np(self, color: np.ndarray) -> np.ndarray:
        """(N,3,S,S,S) colors -> (H,W,4) linear RGBA."""
        S = self.pset.S
        c = np.ascontiguousarray(color, np.float64).reshape(self.pset.count, 3, -1)
        out = np.zeros((len(self.offsets) - 1, 3))
        _operator_apply(self.offsets, self.idx, self.weights, c, S ** 3, out)
        img = np.concatenate([out.reshape(self.camera.height, self.camera.width, 3),
                              self.alpha[..., None]], axis=-1)
        return img

    def render_np_from_stacked(self, stacked: np.ndarray) -> np.ndarray:
        """(3S, wS, wS) UV-stacked colors -> (H,W,4) linear RGBA."""
        return self.render_np(unstack_uv(self.pset, np.asarray(stacked, np.float64)))

    def apply(self, stacked_color: "tz.Tensor") -> "tz.Tensor":
        """Differentiable render of a UV-stacked (3S, wS, wS) color tensor;
        output is a (4, H, W) image tensor (alpha row is constant)."""
        pset = self.pset
        S = pset.S
        sss = S ** 3
        color = unstack_uv(pset, stacked_color.data.astype(np.float64)).reshape(pset.count, 3, sss)
        out = np.zeros((len(self.offsets) - 1, 3))
        _operator_apply(self.offsets, self.idx, self.weights, color, sss, out)
        h, w = self.camera.height, self.camera.width
        img = np.concatenate([out.T.reshape(3, h, w),
                              self.alpha[None]], axis=0).astype(stacked_color.data.dtype)

        def backward(g):
            if not stacked_color.requires_grad:
                return
            gi = np.ascontiguousarray(g[:3], np.float64).reshape(3, -1).T
            dcolor = np.zeros((pset.count, 3, sss))
            _operator_backward(self.offsets, self.idx, self.weights, gi, sss, dcolor)
            from .primitives import stack_uv
            dstacked = stack_uv(pset, dcolor.reshape(pset.count, 3, S, S, S))
            stacked_color.accumulate_grad(dstacked.astype(stacked_color.data.dtype))

        return tz.record_custom(img, (stacked_color,), backward)
