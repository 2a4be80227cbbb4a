"""Median-split BVH over mesh triangles with numba traversal kernels.

Construction is deterministic for a fixed mesh: longest-axis median split
on centroids, leaves of at most 4 triangles. Traversal supports any-hit
(occlusion) and closest-hit queries, both with a small per-query skip list
to mask out faces incident to the ray origin.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from .rig import CoarseMesh

LEAF_SIZE = 4


class Bvh:
    def __init__(self, mesh: CoarseMesh):
        if len(mesh.faces) == 0:
            raise ValueError("cannot build a BVH over an empty mesh")
        self.mesh = mesh
        tris = mesh.vertices[mesh.faces]                         # (F, 3, 3)
        self.v0 = np.ascontiguousarray(tris[:, 0])
        self.e1 = np.ascontiguousarray(tris[:, 1] - tris[:, 0])
        self.e2 = np.ascontiguousarray(tris[:, 2] - tris[:, 0])
        lo = tris.min(axis=1)
        hi = tris.max(axis=1)
        centroids = tris.mean(axis=1)

        nodes_min, nodes_max, left, right, leaf_start, leaf_count, order = _build(
            lo, hi, centroids)
        self.nodes_min = nodes_min
        self.nodes_max = nodes_max
        self.left = left
        self.right = right
        self.leaf_start = leaf_start
        self.leaf_count = leaf_count
        self.order = order                                        # traversal order -> face id
        self.scene_scale = float(np.linalg.norm(nodes_max[0] - nodes_min[0]))
        # triangle data permuted into traversal order
        self.tv0 = np.ascontiguousarray(self.v0[order])
        self.te1 = np.ascontiguousarray(self.e1[order])
        self.te2 = np.ascontiguousarray(self.e2[order])
        self.face_of = order.astype(np.int32)

    @property
    def root_bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.nodes_min[0].copy(), self.nodes_max[0].copy()

    @property
    def depth(self) -> int:
        depth = np.zeros(len(self.left), dtype=np.int32)
        best = 1
        for i in range(len(self.left)):  # children follow parents in build order
            if self.left[i] >= 0:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
                best = max(best, depth[i] + 2)
        return best

    def _default_tmin(self, t_min: float | None) -> float:
        return 1e-4 * self.scene_scale if t_min is None else t_min

    def occluded(self, origin, direction, t_min: float | None = None,
                 t_max: float = np.inf, skip=()) -> bool:
        skip_arr = np.asarray(sorted(skip), dtype=np.int32)
        return bool(_any_hit(self.nodes_min, self.nodes_max, self.left, self.right,
                             self.leaf_start, self.leaf_count, self.tv0, self.te1,
                             self.te2, self.face_of, np.asarray(origin, np.float64),
                             np.asarray(direction, np.float64),
                             self._default_tmin(t_min), t_max, skip_arr))

    def occluded_batch(self, origins, directions, t_min: float | None = None,
                       t_max=np.inf, skip_per_ray=None) -> np.ndarray:
        origins = np.ascontiguousarray(origins, np.float64)
        directions = np.ascontiguousarray(directions, np.float64)
        if skip_per_ray is None:
            skip_flat = np.empty(0, np.int32)
            skip_off = np.zeros(len(origins) + 1, np.int64)
        else:
            skip_flat = np.concatenate([np.sort(np.asarray(s, np.int32)) for s in skip_per_ray]) \
                if any(len(s) for s in skip_per_ray) else np.empty(0, np.int32)
            skip_off = np.zeros(len(origins) + 1, np.int64)
            np.cumsum([len(s) for s in skip_per_ray], out=skip_off[1:])
        tmax_arr = np.broadcast_to(np.asarray(t_max, np.float64), (len(origins),))
        return _any_hit_batch(self.nodes_min, self.nodes_max, self.left, self.right,
                              self.leaf_start, self.leaf_count, self.tv0, self.te1,
                              self.te2, self.face_of, origins, directions,
                              self._default_tmin(t_min), np.ascontiguousarray(tmax_arr),
                              skip_flat, skip_off)

    def raycast(self, origin, direction, t_min: float | None = None,
                t_max: float = np.inf):
        """Closest hit: (t, face, u, v) with t = inf when nothing is hit."""
        return _closest_hit(self.nodes_min, self.nodes_max, self.left, self.right,
                            self.leaf_start, self.leaf_count, self.tv0, self.te1,
                            self.te2, self.face_of, np.asarray(origin, np.float64),
                            np.asarray(direction, np.float64),
                            self._default_tmin(t_min), t_max)

    def raycast_batch(self, origins, directions, t_min: float | None = None,
                      t_max: float = np.inf):
        origins = np.ascontiguousarray(origins, np.float64)
        directions = np.ascontiguousarray(directions, np.float64)
        return _closest_hit_batch(self.nodes_min, self.nodes_max, self.left, self.right,
                                  self.leaf_start, self.leaf_count, self.tv0, self.te1,
                                  self.te2, self.face_of, origins, directions,
                                  self._default_tmin(t_min), t_max)


def build_bvh(mesh: CoarseMesh) -> Bvh:
    return Bvh(mesh)


def brute_force_occluded(mesh: CoarseMesh, origin, direction, t_min: float,
                         t_max: float = np.inf, skip=()) -> bool:
    """Reference all-triangles intersection test (the oracle for `occluded`)."""
    tris = mesh.vertices[mesh.faces]
    v0 = tris[:, 0]
    e1 = tris[:, 1] - tris[:, 0]
    e2 = tris[:, 2] - tris[:, 0]
    o = np.asarray(origin, np.float64)
    d = np.asarray(direction, np.float64)
    p = np.cross(d, e2)
    det = np.einsum("fi,fi->f", e1, p)
    ok = np.abs(det) > 1e-12
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tv = o - v0
    u = np.einsum("fi,fi->f", tv, p) * inv
    q = np.cross(tv, e1)
    v = np.einsum("fi,fi->f", np.broadcast_to(d, e1.shape), q) * inv
    t = np.einsum("fi,fi->f", e2, q) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > t_min) & (t < t_max)
    if len(skip):
        hit[np.asarray(list(skip), dtype=np.int64)] = False
    return bool(hit.any())


# ---------------------------------------------------------------------------
# construction


def _build(lo, hi, centroids):
    n = len(lo)
    order = np.arange(n, dtype=np.int64)
    max_nodes = 4 * n + 2
    nodes_min = np.empty((max_nodes, 3))
    nodes_max = np.empty((max_nodes, 3))
    left = np.full(max_nodes, -1, np.int32)
    right = np.full(max_nodes, -1, np.int32)
    leaf_start = np.full(max_nodes, -1, np.int32)
    leaf_count = np.zeros(max_nodes, np.int32)
    n_nodes = 1
    stack = [(0, 0, n)]  # node id, range into `order`
    while stack:
        node, a, b = stack.pop()
        idx = order[a:b]
        nodes_min[node] = lo[idx].min(axis=0)
        nodes_max[node] = hi[idx].max(axis=0)
        if b - a <= LEAF_SIZE:
            leaf_start[node] = a
            leaf_count[node] = b - a
            continue
        cen = centroids[idx]
        axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
        mid = (b - a) // 2
        part = np.argsort(cen[:, axis], kind="stable")
        order[a:b] = idx[part]
        lid, rid = n_nodes, n_nodes + 1
        n_nodes += 2
        left[node] = lid
        right[node] = rid
        stack.append((rid, a + mid, b))
        stack.append((lid, a, a + mid))
    return (nodes_min[:n_nodes].copy(), nodes_max[:n_nodes].copy(),
            left[:n_nodes].copy(), right[:n_nodes].copy(),
            leaf_start[:n_nodes].copy(), leaf_count[:n_nodes].copy(), order)


# ---------------------------------------------------------------------------
# traversal kernels


@njit(cache=True, inline="always")
def _slab_hit(bmin, bmax, o, d, t_min, t_max):
    t0 = t_min
    t1 = t_max
    for a in range(3):
        if abs(d[a]) < 1e-300:
            if o[a] < bmin[a] or o[a] > bmax[a]:
                return False
        else:
            inv = 1.0 / d[a]
            ta = (bmin[a] - o[a]) * inv
            tb = (bmax[a] - o[a]) * inv
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
            if t0 > t1:
                return False
    return True


@njit(cache=True, inline="always")
def _tri_t(v0, e1, e2, o, d):
    px = d[1] * e2[2] - d[2] * e2[1]
    py = d[2] * e2[0] - d[0] * e2[2]
    pz = d[0] * e2[1] - d[1] * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    if abs(det) < 1e-12:
        return -1.0, 0.0, 0.0
    inv = 1.0 / det
    tx = o[0] - v0[0]
    ty = o[1] - v0[1]
    tz = o[2] - v0[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return -1.0, 0.0, 0.0
    qx = ty * e1[2] - tz * e1[1]
    qy = tz * e1[0] - tx * e1[2]
    qz = tx * e1[1] - ty * e1[0]
    v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return -1.0, 0.0, 0.0
    t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
    return t, u, v


@njit(cache=True)
def _any_hit(nmin, nmax, left, right, lstart, lcount, v0, e1, e2, face_of,
             o, d, t_min, t_max, skip):
    stack = np.empty(128, np.int32)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        if not _slab_hit(nmin[node], nmax[node], o, d, t_min, t_max):
            continue
        if lcount[node] > 0:
            for i in range(lstart[node], lstart[node] + lcount[node]):
                t, _, _ = _tri_t(v0[i], e1[i], e2[i], o, d)
                if t_min < t < t_max:
                    fid = face_of[i]
                    skipped = False
                    for s in range(len(skip)):
                        if skip[s] == fid:
                            skipped = True
                            break
                    if not skipped:
                        return True
        else:
            stack[top] = left[node]
            stack[top + 1] = right[node]
            top += 2
    return False


@njit(cache=True, parallel=True)
def _any_hit_batch(nmin, nmax, left, right, lstart, lcount, v0, e1, e2, face_of,
                   origins, dirs, t_min, t_max, skip_flat, skip_off):
    n = len(origins)
    out = np.zeros(n, np.bool_)
    for r in prange(n):
        out[r] = _any_hit(nmin, nmax, left, right, lstart, lcount, v0, e1, e2,
                          face_of, origins[r], dirs[r], t_min, t_max[r],
                          skip_flat[skip_off[r]:skip_off[r + 1]])
    return out


@njit(cache=True)
def _closest_hit(nmin, nmax, left, right, lstart, lcount, v0, e1, e2, face_of,
                 o, d, t_min, t_max):
    stack = np.empty(128, np.int32)
    top = 0
    stack[top] = 0
    top += 1
    best_t = np.inf
    best_f = -1
    best_u = 0.0
    best_v = 0.0
    while top > 0:
        top -= 1
        node = stack[top]
        if not _slab_hit(nmin[node], nmax[node], o, d, t_min, min(t_max, best_t)):
            continue
        if lcount[node] > 0:
            for i in range(lstart[node], lstart[node] + lcount[node]):
                t, u, v = _tri_t(v0[i], e1[i], e2[i], o, d)
                if t_min < t < t_max and t < best_t:
                    best_t = t
                    best_f = face_of[i]
                    best_u = u
                    best_v = v
        else:
            stack[top] = left[node]
            stack[top + 1] = right[node]
            top += 2
    return best_t, best_f, best_u, best_v


@njit(cache=True, parallel=True)
def _closest_hit_batch(nmin, nmax, left, right, lstart, lcount, v0, e1, e2,
                       face_of, origins, dirs, t_min, t_max):
    n = len(origins)
    ts = np.empty(n)
    fs = np.empty(n, np.int32)
    us = np.empty(n)
    vs = np.empty(n)
    for r in prange(n):
        t, f, u, v = _closest_hit(nmin, nmax, left, right, lstart, lcount,
                                  v0, e1, e2, face_of, origins[r], dirs[r],
                                  t_min, t_max)
        ts[r] = t
        fs[r] = f
        us[r] = u
        vs[r] = v
    return ts, fs, us, vs
