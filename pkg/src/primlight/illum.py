"""Environment maps, light rigs, illumination features, and analytic BRDFs.

Envmap convention: row 0 is the +y pole, azimuth 0 is +z, right-handed
(azimuth rotates +z toward +x). Texel (r, c) of a rows*cols map looks along

    theta = pi * (r + 0.5) / rows        (polar angle from +y)
    phi   = 2 * pi * (c + 0.5) / cols    (azimuth from +z)
    dir   = (sin t * sin p, cos t, sin t * cos p)

Diffuse/specular features follow the plain sums over all M texels, without
solid-angle weights (the decoder absorbs constant factors); an optional
weighting is available but off by default. Both sums are restricted to the
upper hemisphere of the vertex normal: with raycast visibility enabled this
is a no-op (downward rays self-intersect the surface), and it makes the
"without visibility" variant agree with the full model on convex geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import imageio
from .bvh import Bvh
from .rig import CoarseMesh, UvAtlas, rasterize_texels

DEFAULT_SHININESS = (16.0, 32.0, 64.0)


@dataclass
class EnvMap:
    data: np.ndarray  # (rows, cols, 3) linear RGB radiance, >= 0

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"envmap must be (rows, cols, 3), got {self.data.shape}")
        if np.any(self.data < 0):
            raise ValueError("envmap radiance must be nonnegative")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def M(self) -> int:
        return self.rows * self.cols

    def flat(self) -> np.ndarray:
        """(M, 3) radiance in row-major texel order, matching envmap_dirs."""
        return self.data.reshape(-1, 3)

    @classmethod
    def from_hdr(cls, path, rows: int | None = 16, cols: int | None = 32) -> "EnvMap":
        """Load Radiance HDR, box-downsampling to rows x cols (None keeps
        the native resolution)."""
        img = imageio.read_hdr(path)
        if rows is not None and img.shape[:2] != (rows, cols):
            img = imageio.downsample_box(img, rows, cols)
        return cls(np.clip(img, 0, None))

    @classmethod
    def from_pfm(cls, path, rows: int | None = 16, cols: int | None = 32) -> "EnvMap":
        img = imageio.read_pfm(path)
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        if rows is not None and img.shape[:2] != (rows, cols):
            img = imageio.downsample_box(img, rows, cols)
        return cls(np.clip(img, 0, None))


@dataclass
class LightRig:
    positions: np.ndarray             # (n, 3) meters
    intensities: np.ndarray           # (n, 3) RGB intensity, >= 0
    group_size: int | None = None     # L, when grouped capture is used
    groups: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, np.float64)
        inten = np.asarray(self.intensities, np.float64)
        if inten.ndim == 1:
            inten = np.repeat(inten[:, None], 3, axis=1)
        self.intensities = inten
        if np.any(self.intensities < 0):
            raise ValueError("light intensities must be nonnegative")
        if self.group_size is not None:
            for g in self.groups:
                if len(g) != self.group_size:
                    raise ValueError(f"group of size {len(g)} != declared L={self.group_size}")

    @property
    def count(self) -> int:
        return len(self.positions)


def envmap_dirs(env: EnvMap | tuple[int, int]) -> np.ndarray:
    """(M, 3) unit texel-center directions, row-major."""
    rows, cols = (env.rows, env.cols) if isinstance(env, EnvMap) else env
    theta = np.pi * (np.arange(rows) + 0.5) / rows
    phi = 2 * np.pi * (np.arange(cols) + 0.5) / cols
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    d = np.empty((rows, cols, 3))
    d[..., 0] = st[:, None] * sp[None, :]
    d[..., 1] = ct[:, None]
    d[..., 2] = st[:, None] * cp[None, :]
    return d.reshape(-1, 3)


def solid_angle_weights(rows: int, cols: int) -> np.ndarray:
    """(M,) per-texel solid angles (optional alternative weighting)."""
    theta = np.pi * (np.arange(rows) + 0.5) / rows
    w = np.sin(theta) * (np.pi / rows) * (2 * np.pi / cols)
    return np.repeat(w, cols)


def env_to_rig(env: EnvMap, radius: float) -> LightRig:
    """One distant point light per texel at radius * direction; ordering
    matches envmap_dirs."""
    dirs = envmap_dirs(env)
    return LightRig(radius * dirs, env.flat().copy())


def incident_faces(mesh: CoarseMesh) -> list[np.ndarray]:
    """Per-vertex arrays of face ids touching the vertex (self-hit masks)."""
    lists: list[list[int]] = [[] for _ in range(mesh.n_vertices)]
    for f, tri in enumerate(mesh.faces):
        for v in tri:
            lists[v].append(f)
    return [np.asarray(sorted(l), dtype=np.int32) for l in lists]


def vertex_visibility(mesh: CoarseMesh, bvh: Bvh, dirs: np.ndarray,
                      vertex_ids: np.ndarray | None = None) -> np.ndarray:
    """h_i(r^m) for each (vertex, direction): True when the ray escapes.

    Rays start at the vertex with the BVH's default epsilon offset and skip
    faces incident to the vertex.
    """
    if vertex_ids is None:
        vertex_ids = np.arange(mesh.n_vertices)
    inc = incident_faces(mesh)
    m = len(dirs)
    origins = np.repeat(mesh.vertices[vertex_ids], m, axis=0)
    ray_dirs = np.tile(dirs, (len(vertex_ids), 1))
    skips = [inc[v] for v in vertex_ids for _ in range(m)]
    hit = bvh.occluded_batch(origins, ray_dirs, skip_per_ray=skips)
    return ~hit.reshape(len(vertex_ids), m)


def diffuse_feature(env: EnvMap, position: np.ndarray, normal: np.ndarray,
                    bvh: Bvh | None = None, visibility: np.ndarray | None = None,
                    dirs: np.ndarray | None = None, skip=()) -> np.ndarray:
    """Lambertian illumination feature: sum_m E_m h_m max(n . r_m, 0)."""
    if dirs is None:
        dirs = envmap_dirs(env)
    cos = np.maximum(dirs @ np.asarray(normal, np.float64), 0.0)
    h = _resolve_visibility(env, position, bvh, visibility, dirs, skip)
    return (env.flat() * (h * cos)[:, None]).sum(axis=0)


def specular_feature(env: EnvMap, position: np.ndarray, normal: np.ndarray,
                     viewer: np.ndarray, alpha: float, bvh: Bvh | None = None,
                     visibility: np.ndarray | None = None,
                     dirs: np.ndarray | None = None, skip=()) -> np.ndarray:
    """Phong illumination feature: sum_m E_m h_m max(v_hat . r_m, 0)^alpha,
    with v_hat the viewer direction reflected about the normal."""
    if alpha <= 0:
        raise ValueError("shininess must be positive")
    to_view = np.asarray(viewer, np.float64) - np.asarray(position, np.float64)
    norm = np.linalg.norm(to_view)
    if norm < 1e-12:
        raise ValueError("viewer coincides with the vertex; reflection undefined")
    to_view = to_view / norm
    n = np.asarray(normal, np.float64)
    refl = 2.0 * np.dot(n, to_view) * n - to_view
    if dirs is None:
        dirs = envmap_dirs(env)
    lobe = np.power(np.maximum(dirs @ refl, 0.0), alpha) * (dirs @ n > 0)
    h = _resolve_visibility(env, position, bvh, visibility, dirs, skip)
    return (env.flat() * (h * lobe)[:, None]).sum(axis=0)


def _resolve_visibility(env, position, bvh, visibility, dirs, skip):
    if visibility is not None:
        return visibility.astype(np.float64)
    if bvh is None:
        return np.ones(len(dirs))
    origins = np.broadcast_to(np.asarray(position, np.float64), dirs.shape)
    hit = bvh.occluded_batch(np.ascontiguousarray(origins), np.ascontiguousarray(dirs),
                             skip_per_ray=[skip] * len(dirs))
    return (~hit).astype(np.float64)


@dataclass
class FeatureMap:
    """Texel grid of illumination features, channels (d, s_a1, s_a2, ...)."""

    grid: np.ndarray          # (R, R, 3 + 3*len(shininess))
    valid: np.ndarray         # (R, R) bool
    shininess: tuple[float, ...]

    def __post_init__(self):
        want = 3 + 3 * len(self.shininess)
        if self.grid.shape[2] != want:
            raise ValueError(f"feature grid has {self.grid.shape[2]} channels, expected {want}")
        if np.any(self.grid[~self.valid] != 0):
            raise ValueError("invalid texels must be zero")

    @property
    def chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.grid.transpose(2, 0, 1))


def build_features(mesh: CoarseMesh, atlas: UvAtlas, env: EnvMap, viewer,
                   shininess: tuple[float, ...] = DEFAULT_SHININESS,
                   with_visibility: bool = True, bvh: Bvh | None = None,
                   visibility: np.ndarray | None = None) -> FeatureMap:
    """Per-vertex diffuse + specular features projected to the texel grid.

    with_visibility=False forces h == 1 (the "w/o visibility" ablation).
    `visibility` may carry a precomputed (V, M) mask to amortize ray casts
    across envmaps sharing one pose.
    """
    dirs = envmap_dirs(env)
    if with_visibility:
        if visibility is None:
            if bvh is None:
                bvh = Bvh(mesh)
            visibility = vertex_visibility(mesh, bvh, dirs)
        h = visibility.astype(np.float64)
    else:
        h = np.ones((mesh.n_vertices, len(dirs)))

    e = env.flat()                                        # (M, 3)
    cos = np.maximum(mesh.normals @ dirs.T, 0.0)          # (V, M)
    feats = [(h * cos) @ e]                               # diffuse, (V, 3)
    to_view = np.asarray(viewer, np.float64) - mesh.vertices
    norms = np.linalg.norm(to_view, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValueError("viewer coincides with a mesh vertex")
    to_view = to_view / norms
    ndv = np.einsum("vi,vi->v", mesh.normals, to_view)
    refl = 2.0 * ndv[:, None] * mesh.normals - to_view
    horizon = (mesh.normals @ dirs.T) > 0                 # (V, M)
    rdot = np.maximum(refl @ dirs.T, 0.0) * horizon
    for a in shininess:
        feats.append((h * np.power(rdot, a)) @ e)
    per_vertex = np.concatenate(feats, axis=1)            # (V, 3 + 3k)
    grid, valid = rasterize_texels(mesh, atlas, per_vertex)
    return FeatureMap(grid, valid, tuple(shininess))


def olat_aggregate(payloads, intensities) -> np.ndarray:
    """Weighted sum of per-light payloads: C = sum_i b_i * C_i.

    `intensities` is (n,) for scalar weights or (n, 3) to weight the color
    channel axis (payload axis 1). Summation order is fixed (index order),
    making the result deterministic.
    """
    payloads = [np.asarray(p) for p in payloads]
    b = np.asarray(intensities, np.float64)
    if len(payloads) != len(b):
        raise ValueError(f"{len(payloads)} payloads but {len(b)} intensities")
    out = np.zeros_like(payloads[0], dtype=np.float64)
    for i, p in enumerate(payloads):
        if p.shape != out.shape:
            raise ValueError("payload shapes differ")
        if b.ndim == 1:
            out += b[i] * p
        else:
            out += b[i].reshape((1, 3) + (1,) * (p.ndim - 2)) * p
    return out


# ---------------------------------------------------------------------------
# analytic BRDFs (reference material for the synthetic ground truth)


def analytic_brdf(kind: str, normal, view, light, albedo, alpha: float = 32.0,
                  roughness: float = 0.5) -> np.ndarray:
    """BRDF value f(light, view); multiply by cos and intensity to shade.

    kinds: "lambert" (albedo/pi), "phong" (pure lobe, peak = albedo),
    "ggx" (Lambert base + GGX microfacet lobe, Smith masking, Schlick
    Fresnel with F0 = 0.04).
    """
    n = _unit(normal)
    v = _unit(view)
    l = _unit(light)
    albedo = np.asarray(albedo, np.float64)
    if kind == "lambert":
        return albedo / np.pi
    if kind == "phong":
        refl = 2.0 * np.dot(n, v) * n - v
        return albedo * max(float(np.dot(refl, l)), 0.0) ** alpha
    if kind == "ggx":
        if roughness <= 0:
            raise ValueError("roughness must be positive")
        return _ggx(n, v, l, albedo, roughness)
    raise ValueError(f"unknown BRDF kind {kind!r}")


def _unit(x):
    x = np.asarray(x, np.float64)
    return x / np.linalg.norm(x)


F0 = 0.04


def _ggx(n, v, l, albedo, roughness):
    ndl = float(np.dot(n, l))
    ndv = float(np.dot(n, v))
    if ndl <= 0 or ndv <= 0:
        return albedo * 0.0
    a = roughness * roughness
    h = _unit(v + l)
    ndh = max(float(np.dot(n, h)), 0.0)
    vdh = max(float(np.dot(v, h)), 0.0)
    d = a * a / (np.pi * (ndh * ndh * (a * a - 1.0) + 1.0) ** 2)
    g = _smith_g1(ndl, a) * _smith_g1(ndv, a)
    f = F0 + (1.0 - F0) * (1.0 - vdh) ** 5
    spec = d * g * f / (4.0 * ndl * ndv)
    return albedo / np.pi * (1.0 - F0) + spec


def _smith_g1(ndx, a):
    return 2.0 * ndx / (ndx + np.sqrt(a * a + (1.0 - a * a) * ndx * ndx))
