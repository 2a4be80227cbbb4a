"""Volumetric primitives riding the skinned mesh.

A w*w grid over the UV square places one oriented, scaled voxel grid per
cell: center from the surface point at the cell-center UV, rotation from
the local tangent frame, scale from the cell's world extent plus a normal
shell. Payloads live either as (N, C, S, S, S) voxel arrays or as their
UV-stacked 2-D view of shape (C*S, w*S, w*S); the two layouts are an exact
bijection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rig import CoarseMesh, UvAtlas, _bary_2d


@dataclass
class PrimitiveSet:
    centers: np.ndarray      # (N, 3) meters
    rotations: np.ndarray    # (N, 3, 3) orthonormal, columns = tangent/bitangent/normal
    scales: np.ndarray       # (N, 3) per-axis half extents, > 0
    w: int                   # primitives per UV side, N = w*w
    S: int                   # voxel resolution per axis

    def __post_init__(self):
        n = len(self.centers)
        if n != self.w * self.w:
            raise ValueError(f"{n} primitives but w={self.w} implies {self.w ** 2}")
        eye = np.eye(3)
        err = np.abs(np.einsum("nij,nkj->nik", self.rotations, self.rotations) - eye).max()
        if err > 1e-5:
            raise ValueError(f"rotations not orthonormal (max deviation {err:.2e})")
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")

    @property
    def count(self) -> int:
        return len(self.centers)

    def voxel_extents(self) -> np.ndarray:
        """(N, 3) world-space voxel edge lengths."""
        return 2.0 * self.scales / self.S

    def transformed(self, rot: np.ndarray, trans: np.ndarray) -> "PrimitiveSet":
        """Apply a global rigid motion (rot, trans) to every primitive frame."""
        return PrimitiveSet(self.centers @ rot.T + trans,
                            np.einsum("ij,njk->nik", rot, self.rotations),
                            self.scales.copy(), self.w, self.S)

    def to_arrays(self, prefix: str = "prim") -> dict[str, np.ndarray]:
        return {
            f"{prefix}.centers": self.centers.astype(np.float32),
            f"{prefix}.rotations": self.rotations.astype(np.float32),
            f"{prefix}.scales": self.scales.astype(np.float32),
            f"{prefix}.meta": np.array([self.w, self.S], dtype=np.float32),
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str = "prim") -> "PrimitiveSet":
        w, s = (int(x) for x in arrays[f"{prefix}.meta"])
        rot = arrays[f"{prefix}.rotations"].astype(np.float64)
        # re-orthonormalize: float32 storage loses a few ulp
        u, _, vt = np.linalg.svd(rot)
        return cls(arrays[f"{prefix}.centers"].astype(np.float64), u @ vt,
                   arrays[f"{prefix}.scales"].astype(np.float64), w, s)


def place_primitives(mesh: CoarseMesh, atlas: UvAtlas, w: int, shell: float = 0.3,
                     lateral_overlap: float = 1.0, S: int = 8) -> PrimitiveSet:
    """Attach one primitive per cell of a w*w grid over the UV square.

    Cells whose center UV falls outside every chart snap to the nearest
    valid texel. `shell` sets the half-thickness along the normal relative
    to the mean lateral cell extent; `lateral_overlap` widens cells so
    neighboring primitives overlap slightly.
    """
    if w < 1:
        raise ValueError("w must be >= 1")
    valid_rc = np.argwhere(atlas.valid)
    if len(valid_rc) == 0:
        raise ValueError("atlas has no valid texels; cannot place primitives")
    res = atlas.resolution

    centers = np.empty((w * w, 3))
    rotations = np.empty((w * w, 3, 3))
    scales = np.empty((w * w, 3))
    for r in range(w):
        for q in range(w):
            u = (q + 0.5) / w
            v = (r + 0.5) / w
            row = min(int(v * res), res - 1)
            col = min(int(u * res), res - 1)
            if atlas.face_index[row, col] < 0:
                d2 = (valid_rc[:, 0] - row) ** 2 + (valid_rc[:, 1] - col) ** 2
                row, col = valid_rc[np.argmin(d2)]
                u = (col + 0.5) / res
                v = (row + 0.5) / res
            f = atlas.face_index[row, col]
            tri_uv = mesh.uv[f]
            b = _bary_2d(tri_uv, np.array(u), np.array(v))
            b = np.clip(b, 0, 1)
            b = b / b.sum()
            verts = mesh.vertices[mesh.faces[f]]
            center = b @ verts
            rot, (eu, ev) = _tangent_frame(verts, tri_uv)
            eu /= w
            ev /= w
            k = r * w + q
            centers[k] = center
            rotations[k] = rot
            sn = shell * 0.5 * (eu + ev)
            scales[k] = np.maximum([0.5 * eu * lateral_overlap,
                                    0.5 * ev * lateral_overlap, sn], 1e-6)
    return PrimitiveSet(centers, rotations, scales, w, S)


def _tangent_frame(verts: np.ndarray, tri_uv: np.ndarray) -> tuple[np.ndarray, tuple[float, float]]:
    """Orthonormal (tangent, bitangent, normal) columns from a face's UV map."""
    e1 = verts[1] - verts[0]
    e2 = verts[2] - verts[0]
    n = np.cross(e1, e2)
    nl = np.linalg.norm(n)
    n = n / nl if nl > 1e-20 else np.array([0.0, 0, 1])
    du1, dv1 = tri_uv[1] - tri_uv[0]
    du2, dv2 = tri_uv[2] - tri_uv[0]
    det = du1 * dv2 - du2 * dv1
    if abs(det) > 1e-20:
        tu = (dv2 * e1 - dv1 * e2) / det
        tv = (-du2 * e1 + du1 * e2) / det
    else:
        tu = e1
        tv = np.cross(n, e1)
    ext_u = float(np.linalg.norm(tu))
    ext_v = float(np.linalg.norm(tv))
    t = tu - n * np.dot(n, tu)
    tl = np.linalg.norm(t)
    if tl < 1e-20:
        t = _any_perpendicular(n)
    else:
        t = t / tl
    bt = np.cross(n, t)
    return np.stack([t, bt, n], axis=1), (ext_u, ext_v)


def _any_perpendicular(n: np.ndarray) -> np.ndarray:
    ref = np.array([1.0, 0, 0]) if abs(n[0]) < 0.9 else np.array([0.0, 1, 0])
    p = np.cross(n, ref)
    return p / np.linalg.norm(p)


def voxel_grid_coords(S: int) -> np.ndarray:
    """(S, S, S, 3) unit-cube coordinates in [-1, 1]^3, half-voxel inset,
    indexed [iz, iy, ix] with the last axis holding local (x, y, z)."""
    c = (np.arange(S) + 0.5) / S * 2.0 - 1.0
    zz, yy, xx = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([xx, yy, zz], axis=-1)


def voxel_positions(pset: PrimitiveSet, k: int) -> np.ndarray:
    """(S, S, S, 3) world positions of primitive k's voxel centers."""
    if not 0 <= k < pset.count:
        raise IndexError(f"primitive index {k} out of range [0, {pset.count})")
    u = voxel_grid_coords(pset.S) * pset.scales[k]
    return u @ pset.rotations[k].T + pset.centers[k]


def all_voxel_positions(pset: PrimitiveSet) -> np.ndarray:
    """(N, S, S, S, 3) world positions for every primitive."""
    u = voxel_grid_coords(pset.S)[None] * pset.scales[:, None, None, None, :]
    return np.einsum("nij,nabcj->nabci", pset.rotations, u) + pset.centers[:, None, None, None, :]


def localized_directions(pset: PrimitiveSet, k: int, target: np.ndarray,
                         eps: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """Per-voxel unit directions toward `target`, in primitive k's frame.

    Returns (dirs, degenerate) where degenerate marks voxels closer than
    eps to the target (direction forced to zero there).
    """
    p = voxel_positions(pset, k)
    d = np.asarray(target, dtype=np.float64) - p
    norms = np.linalg.norm(d, axis=-1)
    degenerate = norms < eps
    safe = np.where(degenerate, 1.0, norms)
    local = d @ pset.rotations[k]          # row-vector form of R^T d
    local = local / safe[..., None]
    local[degenerate] = 0.0
    return local, degenerate


def all_localized_directions(pset: PrimitiveSet, target: np.ndarray,
                             eps: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """(N, S, S, S, 3) localized directions for all primitives at once."""
    p = all_voxel_positions(pset)
    d = np.asarray(target, dtype=np.float64)[None, None, None, None, :] - p
    norms = np.linalg.norm(d, axis=-1)
    degenerate = norms < eps
    safe = np.where(degenerate, 1.0, norms)
    local = np.einsum("nabcj,nji->nabci", d, pset.rotations)
    local = local / safe[..., None]
    local[degenerate] = 0.0
    return local, degenerate


def stack_uv(pset: PrimitiveSet, payload: np.ndarray) -> np.ndarray:
    """(N, C, S, S, S) voxel payload -> (C*S, w*S, w*S) UV-stacked map.

    Primitive (row r, col q) owns the S*S tile at (r*S, q*S); the depth axis
    folds into channels as c*S + iz.
    """
    w, S = pset.w, pset.S
    n, c = payload.shape[0], payload.shape[1]
    if payload.shape != (pset.count, c, S, S, S):
        raise ValueError(f"payload shape {payload.shape} does not match N={pset.count}, S={S}")
    grid = payload.reshape(w, w, c, S, S, S)            # r q c z y x
    return np.ascontiguousarray(grid.transpose(2, 3, 0, 4, 1, 5).reshape(c * S, w * S, w * S))


def unstack_uv(pset: PrimitiveSet, stacked: np.ndarray) -> np.ndarray:
    """Exact inverse of stack_uv."""
    w, S = pset.w, pset.S
    cs, h, wd = stacked.shape
    if h != w * S or wd != w * S or cs % S != 0:
        raise ValueError(f"stacked shape {stacked.shape} does not match w={w}, S={S}")
    c = cs // S
    grid = stacked.reshape(c, S, w, S, w, S).transpose(2, 4, 0, 1, 3, 5)
    return np.ascontiguousarray(grid.reshape(w * w, c, S, S, S))


