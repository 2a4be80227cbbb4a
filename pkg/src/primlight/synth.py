"""Synthetic stand-in for the light-stage: a procedural articulated hand,
an analytic ground-truth renderer with hard shadows, and the capture
protocol (fully-lit keyframes interleaved with partially-lit group frames,
partial poses interpolated between keys).

The hand is a union of capsules: one thick palm capsule plus five digits of
three segments each, every segment skinned to its own joint with a short
blend zone at the joint. The posed shape has an analytic signed-distance
function built from the same capsules, which supplies the primitive opacity
field (there is no learned geometry here).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import imageio
from .bvh import Bvh
from .illum import EnvMap, LightRig, envmap_dirs
from .raymarch import Camera
from .rig import (CoarseMesh, Joint, Pose, Skeleton, compute_vertex_normals,
                  joint_world_transforms, lbs_skin, load_pose_stream,
                  save_pose_stream, slerp_pose)

# digit layout: (name, base position in palm frame, rest yaw about +y,
#                length scale, radius scale)
_DIGITS = (
    ("thumb", (0.025, 0.0, 0.030), -0.9, 1.00, 1.25),
    ("index", (0.082, 0.0, 0.027), 0.0, 0.95, 1.00),
    ("middle", (0.084, 0.0, 0.009), 0.0, 1.05, 1.00),
    ("ring", (0.083, 0.0, -0.009), 0.0, 0.98, 0.95),
    ("pinky", (0.080, 0.0, -0.027), 0.0, 0.78, 0.85),
)


@dataclass
class HandParams:
    palm_length: float = 0.088
    palm_radius: float = 0.030
    finger_length: float = 0.072      # nominal digit length, split over 3 segments
    finger_radius: float = 0.0095
    segment_split: tuple[float, float, float] = (0.42, 0.33, 0.25)
    ring_verts: int = 10              # vertices per capsule ring
    rings_per_segment: int = 7
    palm_rings: int = 14
    jitter: float = 0.08              # relative size randomization


@dataclass
class CapsuleSpec:
    joint: int                        # driving joint index
    length: float
    radius: float


@dataclass
class ProceduralHand:
    skeleton: Skeleton
    rest_mesh: CoarseMesh
    capsules: list[CapsuleSpec]
    segment_vertex_ranges: list[tuple[int, int]]
    segment_face_ranges: list[tuple[int, int]]
    theta_lo: np.ndarray
    theta_hi: np.ndarray
    params: HandParams

    @property
    def palm_face_ids(self) -> np.ndarray:
        a, b = self.segment_face_ranges[0]
        return np.arange(a, b, dtype=np.int32)

    def posed_capsules(self, pose: Pose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World-space capsule endpoints (n,3), (n,3) and radii (n,)."""
        world = joint_world_transforms(self.skeleton, pose)
        p0 = np.empty((len(self.capsules), 3))
        p1 = np.empty((len(self.capsules), 3))
        radii = np.empty(len(self.capsules))
        for i, cap in enumerate(self.capsules):
            t = world[cap.joint]
            p0[i] = t[:3, 3]
            p1[i] = (t @ np.array([cap.length, 0, 0, 1.0]))[:3]
            radii[i] = cap.radius
        return p0, p1, radii

    def sdf(self, pose: Pose, points: np.ndarray) -> np.ndarray:
        """Signed distance of the posed capsule union; negative inside."""
        p0, p1, radii = self.posed_capsules(pose)
        pts = np.asarray(points, np.float64)
        d = np.full(len(pts), np.inf)
        for a, b, r in zip(p0, p1, radii):
            ab = b - a
            denom = float(ab @ ab)
            t = np.clip((pts - a) @ ab / max(denom, 1e-18), 0.0, 1.0)
            closest = a + t[:, None] * ab
            d = np.minimum(d, np.linalg.norm(pts - closest, axis=1) - r)
        return d

    def identity_pose(self) -> Pose:
        return self.skeleton.identity_pose()

    def random_pose(self, rng: np.random.Generator, scale: float = 1.0) -> Pose:
        theta = rng.uniform(self.theta_lo * scale, self.theta_hi * scale)
        return Pose(theta, np.array([1.0, 0, 0, 0]), np.zeros(3))


def generate_hand(params: HandParams = HandParams(), seed: int = 0) -> ProceduralHand:
    """Deterministic per seed; default vertex budget lands in the low
    thousands, the regime of a coarse tracking proxy."""
    rng = np.random.default_rng(seed)
    p = params

    joints: list[Joint] = [Joint("wrist", -1, np.eye(4),
                                 dofs=[(0, "x"), (1, "y"), (2, "z")])]
    capsules: list[CapsuleSpec] = [CapsuleSpec(0, p.palm_length, p.palm_radius)]
    lo = [-0.45, -0.45, -0.45]
    hi = [0.45, 0.45, 0.45]
    # palm arch: a zero-length bone the pinky chain hangs off
    arch_pos = np.array([0.55 * p.palm_length, 0.0, -0.012])
    joints.append(Joint("arch", 0, _translation(arch_pos), dofs=[(3, "x")]))
    lo.append(-0.10)
    hi.append(0.30)

    theta_idx = 4
    seg_specs: list[CapsuleSpec] = []
    for name, base, yaw, lscale, rscale in _DIGITS:
        jitter_l = 1.0 + p.jitter * rng.uniform(-1, 1)
        jitter_r = 1.0 + p.jitter * rng.uniform(-1, 1)
        total_len = p.finger_length * lscale * jitter_l * (1.6 if name == "thumb" else 1.0)
        radius = p.finger_radius * rscale * jitter_r
        parent = 1 if name == "pinky" else 0
        base_local = np.asarray(base, np.float64)
        if name == "pinky":
            base_local = base_local - arch_pos
        rest = _translation(base_local) @ _yaw(yaw)
        if name == "thumb":
            dofs = [(theta_idx, "z"), (theta_idx + 1, "y"), (theta_idx + 2, "x")]
            lo += [-1.0, -0.6, -0.5]
            hi += [0.6, 0.6, 0.5]
            theta_idx += 3
        else:
            dofs = [(theta_idx, "z"), (theta_idx + 1, "y")]
            lo += [-1.5, -0.25]
            hi += [0.15, 0.25]
            theta_idx += 2
        for s, frac in enumerate(p.segment_split):
            seg_len = total_len * frac
            seg_r = radius * (1.0 - 0.12 * s)
            jid = len(joints)
            if s == 0:
                joints.append(Joint(f"{name}0", parent, rest, dofs=dofs))
            else:
                joints.append(Joint(f"{name}{s}", jid - 1,
                                    _translation([prev_len, 0, 0]),
                                    dofs=[(theta_idx, "z")]))
                lo.append(-1.6)
                hi.append(0.1)
                theta_idx += 1
            seg_specs.append(CapsuleSpec(jid, seg_len, seg_r))
            prev_len = seg_len
    assert theta_idx == 25, f"pose dimension came out as {theta_idx}"
    capsules.extend(seg_specs)

    verts, faces, uvs, vert_joint, vranges, franges = _build_capsule_meshes(
        capsules, joints, p)
    skin_joints, skin_weights = _skin_weights(verts, vert_joint, capsules, joints)
    skeleton = Skeleton(joints, 25, skin_joints, skin_weights)
    normals = compute_vertex_normals(verts, faces)
    mesh = CoarseMesh(verts, faces, uvs, normals)
    return ProceduralHand(skeleton, mesh, capsules, vranges, franges,
                          np.asarray(lo), np.asarray(hi), p)


def _translation(t) -> np.ndarray:
    m = np.eye(4)
    m[:3, 3] = t
    return m


def _yaw(angle: float) -> np.ndarray:
    m = np.eye(4)
    c, s = np.cos(angle), np.sin(angle)
    m[0, 0] = c
    m[0, 2] = s
    m[2, 0] = -s
    m[2, 2] = c
    return m


def _chart_rect(ci: int) -> tuple[float, float, float, float]:
    """UV chart rectangles (u0, v0, width, height), area-proportional:
    the palm takes a 3x2 block of the 4x4 cell grid, each digit segment
    half of a remaining cell. All rectangles align with the w=8 primitive
    grid so every primitive cell sees one chart."""
    if ci == 0:
        return 0.02, 0.02, 0.71, 0.46
    free_cells = [(0, 3), (1, 3), (2, 0), (2, 1), (2, 2), (2, 3),
                  (3, 0), (3, 1), (3, 2), (3, 3)]
    slot = ci - 1
    row, col = free_cells[slot // 2]
    half = slot % 2
    return col * 0.25 + 0.02, row * 0.25 + half * 0.125 + 0.0075, 0.21, 0.11


def _build_capsule_meshes(capsules, joints, p: HandParams):
    """One UV chart per capsule; cylinder unwrap with caps."""
    bind = np.empty((len(joints), 4, 4))
    for i, j in enumerate(joints):
        parent = bind[j.parent] if j.parent >= 0 else np.eye(4)
        bind[i] = parent @ j.rest

    all_v, all_f, all_uv, owner = [], [], [], []
    vranges, franges = [], []
    for ci, cap in enumerate(capsules):
        n_rings = p.palm_rings if ci == 0 else p.rings_per_segment
        n_ring = p.ring_verts * (2 if ci == 0 else 1)
        v, f, uv = _capsule_mesh(cap.length, cap.radius, n_ring, n_rings)
        u0, v0, cw, ch = _chart_rect(ci)
        uv = uv * np.array([cw, ch]) + np.array([u0, v0])
        t = bind[cap.joint]
        v = v @ t[:3, :3].T + t[:3, 3]
        base_v = sum(len(x) for x in all_v)
        base_f = sum(len(x) for x in all_f)
        all_v.append(v)
        all_f.append(f + base_v)
        all_uv.append(uv)
        owner.extend([ci] * len(v))
        vranges.append((base_v, base_v + len(v)))
        franges.append((base_f, base_f + len(f)))
    verts = np.concatenate(all_v)
    faces = np.concatenate(all_f).astype(np.int32)
    uvs_per_vertex = np.concatenate(all_uv)
    uv_corner = uvs_per_vertex[faces]
    return verts, faces, uv_corner, np.asarray(owner), vranges, franges


def _capsule_mesh(length: float, radius: float, n_ring: int, n_len: int):
    """Capsule along +x from 0 to `length`; returns verts, faces, per-vertex uv.

    The cylinder seam is duplicated (n_ring + 1 verts per ring) so UV charts
    unwrap without wrap-around faces; cap poles are collapsed rings.
    """
    cap_steps = 3
    xs, rs = [], []
    for i in range(cap_steps):  # start cap: pole (a=90 deg) toward equator
        a = 0.5 * np.pi * (1 - i / cap_steps)
        xs.append(-radius * np.sin(a))
        rs.append(radius * np.cos(a))
    for i in range(n_len):
        xs.append(length * i / (n_len - 1))
        rs.append(radius)
    for i in range(cap_steps):
        a = 0.5 * np.pi * (i + 1) / cap_steps
        xs.append(length + radius * np.sin(a))
        rs.append(radius * np.cos(a))
    xs = np.asarray(xs)
    rs = np.maximum(np.asarray(rs), 1e-5)

    per_ring = n_ring + 1
    verts, uvs = [], []
    for row, (x, r) in enumerate(zip(xs, rs)):
        for k in range(per_ring):
            ang = 2 * np.pi * (k % n_ring) / n_ring
            verts.append([x, r * np.cos(ang), r * np.sin(ang)])
            uvs.append([k / n_ring, row / (len(xs) - 1)])
    faces = []
    for row in range(len(xs) - 1):
        for k in range(n_ring):
            a = row * per_ring + k
            b = row * per_ring + k + 1
            c = (row + 1) * per_ring + k
            d = (row + 1) * per_ring + k + 1
            faces.append([a, b, d])
            faces.append([a, d, c])
    return np.asarray(verts), np.asarray(faces, dtype=np.int64), np.asarray(uvs)


def _skin_weights(verts, vert_owner, capsules, joints):
    """Rigid weights to the owning joint, blended toward the parent joint
    near the segment start."""
    n = len(verts)
    sj = np.zeros((n, 4), np.int32)
    sw = np.zeros((n, 4))
    bind = np.empty((len(joints), 4, 4))
    for i, j in enumerate(joints):
        parent = bind[j.parent] if j.parent >= 0 else np.eye(4)
        bind[i] = parent @ j.rest
    for vi in range(n):
        cap = capsules[vert_owner[vi]]
        jid = cap.joint
        origin = bind[jid][:3, 3]
        axis = bind[jid][:3, :3] @ np.array([1.0, 0, 0])
        x_local = float((verts[vi] - origin) @ axis)
        blend = 0.6 * cap.radius
        parent = joints[jid].parent
        if parent >= 0 and x_local < blend and vert_owner[vi] != 0:
            t = 0.5 + 0.5 * max(x_local, -blend) / blend   # 0 at -blend, 1 at +blend
            sj[vi, 0] = jid
            sj[vi, 1] = parent
            sw[vi, 0] = 0.5 + 0.5 * t
            sw[vi, 1] = 0.5 - 0.5 * t
        else:
            sj[vi, 0] = jid
            sw[vi, 0] = 1.0
    return sj, sw


# ---------------------------------------------------------------------------
# analytic reference renderer


@dataclass
class Material:
    albedo: tuple[float, float, float] = (0.8, 0.55, 0.45)
    specular: float = 0.35
    shininess: float = 32.0

    def to_dict(self):
        return {"albedo": list(self.albedo), "specular": self.specular,
                "shininess": self.shininess}


def render_scene(mesh: CoarseMesh, bvh: Bvh, camera: Camera, lights,
                 material: Material = Material()) -> np.ndarray:
    """Ray-cast primary visibility, direct lighting with hard shadows.

    `lights` is a LightRig (point lights, no distance falloff), an EnvMap
    (treated as one directional light per texel), or ("dir", dirs,
    intensities). Linear RGBA output; no secondary bounces.
    """
    o, d = camera.rays()
    ts, fs, us, vs = bvh.raycast_batch(o, d)
    hit = np.isfinite(ts)
    img = np.zeros((len(o), 4))
    img[hit, 3] = 1.0
    if not hit.any():
        return img.reshape(camera.height, camera.width, 4)
    pos = o[hit] + ts[hit, None] * d[hit]
    tri = mesh.faces[fs[hit]]
    bu, bv = us[hit, None], vs[hit, None]
    n = (mesh.normals[tri[:, 0]] * (1 - bu - bv)
         + mesh.normals[tri[:, 1]] * bu + mesh.normals[tri[:, 2]] * bv)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    view = -d[hit]
    refl = 2.0 * np.einsum("vi,vi->v", n, view)[:, None] * n - view
    eps = 1e-5 * bvh.scene_scale
    origin = pos + eps * n
    albedo = np.asarray(material.albedo)

    if isinstance(lights, EnvMap):
        dirs = envmap_dirs(lights)
        intens = lights.flat()
        point = False
    elif isinstance(lights, LightRig):
        point = True
    else:
        _, dirs, intens = lights
        dirs = np.asarray(dirs, np.float64)
        intens = np.asarray(intens, np.float64)
        if intens.ndim == 1:
            intens = np.repeat(intens[:, None], 3, axis=1)
        point = False

    rgb = np.zeros((hit.sum(), 3))
    n_lights = lights.count if point else len(dirs)
    for i in range(n_lights):
        if point:
            delta = lights.positions[i] - pos
            dist = np.linalg.norm(delta, axis=1)
            ldir = delta / dist[:, None]
            tmax = dist - 2 * eps
            b = lights.intensities[i]
        else:
            ldir = np.broadcast_to(dirs[i], pos.shape)
            tmax = np.inf
            b = intens[i]
        if np.all(b == 0):
            continue
        cos = np.einsum("vi,vi->v", n, ldir)
        lit = cos > 0
        if not lit.any():
            continue
        tmax_lit = tmax[lit] if isinstance(tmax, np.ndarray) else tmax
        shadow = bvh.occluded_batch(origin[lit], np.ascontiguousarray(ldir[lit]),
                                    t_min=eps, t_max=tmax_lit)
        idx = np.nonzero(lit)[0][~shadow]
        if len(idx) == 0:
            continue
        ldir_idx = ldir[idx]
        lobe = np.maximum(np.einsum("vi,vi->v", refl[idx], ldir_idx), 0.0) ** material.shininess
        f = albedo[None, :] / np.pi + material.specular * lobe[:, None]
        rgb[idx] += b[None, :] * f * cos[idx, None]
    img[hit, :3] = rgb
    return img.reshape(camera.height, camera.width, 4)


def reference_render(hand: ProceduralHand, pose: Pose, camera: Camera, lights,
                     material: Material = Material()) -> np.ndarray:
    mesh = lbs_skin(hand.skeleton, hand.rest_mesh, pose)
    return render_scene(mesh, Bvh(mesh), camera, lights, material)


# ---------------------------------------------------------------------------
# opacity from the signed-distance field


def opacity_from_sdf(hand: ProceduralHand, pose: Pose, pset, sharpness: float,
                     bandwidth: float | None = None) -> np.ndarray:
    """Per-voxel density sigma = sharpness * sigmoid(-sdf / bandwidth)."""
    from .primitives import all_voxel_positions
    if bandwidth is None:
        bandwidth = 0.2 * float(np.median(pset.voxel_extents().min(axis=1)))
    pts = all_voxel_positions(pset).reshape(-1, 3)
    sd = hand.sdf(pose, pts)
    sigma = sharpness / (1.0 + np.exp(np.clip(sd / bandwidth, -60, 60)))
    s = pset.S
    return sigma.reshape(pset.count, s, s, s)


# ---------------------------------------------------------------------------
# capture protocol


def random_envmap(rows: int, cols: int, rng: np.random.Generator,
                  n_blobs: int = 3, ambient: float = 0.03) -> EnvMap:
    """Synthetic envmap: a few bright angular Gaussian blobs over a dim
    ambient floor; enough structure for specular features to matter."""
    dirs = envmap_dirs((rows, cols))
    data = np.full((rows * cols, 3), ambient)
    for _ in range(n_blobs):
        center = rng.standard_normal(3)
        center /= np.linalg.norm(center)
        width = rng.uniform(0.05, 0.35)
        color = rng.uniform(0.2, 3.0, 3)
        ang = np.arccos(np.clip(dirs @ center, -1, 1))
        data += color[None, :] * np.exp(-(ang / width) ** 2)[:, None]
    return EnvMap(data.reshape(rows, cols, 3))


def stage_rig(count: int = 64, radius: float = 1.2, seed: int = 0) -> LightRig:
    """Quasi-uniform light placement on a sphere (Fibonacci spiral)."""
    i = np.arange(count) + 0.5
    phi = np.pi * (1 + 5 ** 0.5) * i
    cos_t = 1 - 2 * i / count
    sin_t = np.sqrt(1 - cos_t ** 2)
    pos = radius * np.stack([sin_t * np.cos(phi), cos_t, sin_t * np.sin(phi)], axis=1)
    return LightRig(pos, np.ones(count))


@dataclass
class CaptureScript:
    n_frames: int = 25
    key_stride: int = 4               # fully-lit every k-th frame
    group_size: int = 5               # L lights per partially-lit frame
    image_size: tuple[int, int] = (64, 64)
    n_cameras: int = 3
    camera_distance: float = 0.38
    fov_deg: float = 32.0
    seed: int = 0
    pose_scale: float = 1.0
    fully_lit_intensity: float = 3.0

    def __post_init__(self):
        if (self.n_frames - 1) % self.key_stride != 0:
            raise ValueError("n_frames must be key_stride * k + 1 so every "
                             "partially-lit frame sits between two fully-lit keys")


@dataclass
class CaptureRecord:
    frame: int
    kind: str                         # "full" | "partial"
    camera: int
    light_ids: list[int]
    intensities: np.ndarray           # (L, 3)
    image: str


@dataclass
class CaptureDataset:
    root: Path
    hand_seed: int
    poses: list[Pose]
    cameras: list[Camera]
    rig: LightRig
    records: list[CaptureRecord]
    material: Material

    def partial_records(self) -> list["CaptureRecord"]:
        return [r for r in self.records if r.kind == "partial"]

    def load_image(self, rec: CaptureRecord) -> np.ndarray:
        return imageio.read_pfm(self.root / rec.image)

    def load_mask(self, rec: CaptureRecord) -> np.ndarray:
        """Subject-region mask from the tracked geometry (render alpha)."""
        return imageio.read_pfm(self.root / (rec.image[:-4] + "_mask.pfm"))[..., 0]


def ring_cameras(n: int, distance: float, fov_deg: float, size, target=(0.07, 0.0, 0.0),
                 elevation: float = 0.45) -> list[Camera]:
    cams = []
    for i in range(n):
        a = 2 * np.pi * i / n
        eye = np.array(target) + distance * np.array(
            [np.sin(a) * np.cos(elevation), np.sin(elevation), np.cos(a) * np.cos(elevation)])
        cams.append(Camera.look_at(eye, target, fov_deg=fov_deg,
                                   width=size[0], height=size[1]))
    return cams


def script_poses(hand: ProceduralHand, script: CaptureScript) -> list[Pose]:
    """Keyframe poses at fully-lit frames, slerped for partial frames."""
    rng = np.random.default_rng(script.seed)
    n_keys = (script.n_frames - 1) // script.key_stride + 1
    keys = [hand.random_pose(rng, script.pose_scale) for _ in range(n_keys)]
    poses = []
    for i in range(script.n_frames):
        k, r = divmod(i, script.key_stride)
        if r == 0:
            poses.append(keys[k])
        else:
            poses.append(slerp_pose(keys[k], keys[k + 1], r / script.key_stride,
                                    hand.skeleton))
    return poses


def simulate_capture(hand: ProceduralHand, script: CaptureScript, rig: LightRig,
                     out_dir, material: Material = Material(),
                     hand_seed: int = 0) -> CaptureDataset:
    """Render the scripted frames and emit the dataset (JSONL manifest,
    PFM + PNG images, pose stream, stage description)."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(script.seed + 1)
    poses = script_poses(hand, script)
    cameras = ring_cameras(script.n_cameras, script.camera_distance,
                           script.fov_deg, script.image_size)
    records: list[CaptureRecord] = []
    for i, pose in enumerate(poses):
        full = i % script.key_stride == 0
        mesh = lbs_skin(hand.skeleton, hand.rest_mesh, pose)
        bvh = Bvh(mesh)
        if full:
            ids = list(range(rig.count))
            intens = np.full((rig.count, 3), script.fully_lit_intensity / rig.count)
        else:
            ids = sorted(rng.choice(rig.count, size=script.group_size, replace=False).tolist())
            intens = rng.uniform(0.8, 1.2, (script.group_size, 1)) * np.ones((1, 3))
        frame_rig = LightRig(rig.positions[ids], intens)
        for ci, cam in enumerate(cameras):
            img = render_scene(mesh, bvh, cam, frame_rig, material)
            name = f"frames/f{i:04d}_c{ci:02d}.pfm"
            imageio.write_pfm(out / name, img[..., :3])
            imageio.write_pfm(out / (name[:-4] + "_mask.pfm"), img[..., 3])
            imageio.write_png(out / (name[:-4] + ".png"), img)
            records.append(CaptureRecord(i, "full" if full else "partial", ci,
                                         ids, intens, name))
    save_pose_stream(out / "poses.pps", poses)
    _write_manifest(out, records, cameras, rig, material, hand_seed, script)
    return CaptureDataset(out, hand_seed, poses, cameras, rig, records, material)


def _write_manifest(out: Path, records, cameras, rig, material, hand_seed, script):
    with open(out / "manifest.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps({
                "frame": r.frame, "kind": r.kind, "pose": ["poses.pps", r.frame],
                "camera": r.camera, "lights": list(map(int, r.light_ids)),
                "intensities": np.asarray(r.intensities).tolist(), "image": r.image,
            }) + "\n")
    cams = [{"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "width": c.width,
             "height": c.height, "cam_to_world": c.cam_to_world.reshape(-1).tolist()}
            for c in cameras]
    (out / "cameras.json").write_text(json.dumps(cams))
    (out / "stage.json").write_text(json.dumps({
        "positions": rig.positions.tolist(),
        "intensities": rig.intensities.tolist(),
        "group_size": script.group_size,
    }))
    (out / "capture.json").write_text(json.dumps({
        "hand_seed": hand_seed,
        "material": material.to_dict(),
        "script": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in vars(script).items()},
    }))


def load_capture(root) -> CaptureDataset:
    root = Path(root)
    poses = load_pose_stream(root / "poses.pps")
    cams_doc = json.loads((root / "cameras.json").read_text())
    cameras = [Camera(c["fx"], c["fy"], c["cx"], c["cy"], c["width"], c["height"],
                      np.asarray(c["cam_to_world"]).reshape(4, 4)) for c in cams_doc]
    stage = json.loads((root / "stage.json").read_text())
    rig = LightRig(np.asarray(stage["positions"]), np.asarray(stage["intensities"]),
                   group_size=stage.get("group_size"))
    meta = json.loads((root / "capture.json").read_text())
    material = Material(tuple(meta["material"]["albedo"]), meta["material"]["specular"],
                        meta["material"]["shininess"])
    records = []
    with open(root / "manifest.jsonl") as f:
        for line in f:
            doc = json.loads(line)
            records.append(CaptureRecord(doc["frame"], doc["kind"], doc["camera"],
                                         doc["lights"], np.asarray(doc["intensities"]),
                                         doc["image"]))
    return CaptureDataset(root, meta["hand_seed"], poses, cameras, rig, records, material)
