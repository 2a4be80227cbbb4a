"""Skeleton, linear-blend skinning, pose interpolation, and the UV atlas.

Poses are joint-angle vectors: each joint owns an ordered list of canonical
rotation axes (intrinsic x/y/z) bound to indices of the theta vector, plus a
global root transform. Rotations are composed/decomposed with
scipy.spatial.transform; interpolation is shortest-arc quaternion slerp.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

_AXES = ("x", "y", "z")


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z)


def quat_slerp(qa: np.ndarray, qb: np.ndarray, t: float) -> np.ndarray:
    qa = qa / np.linalg.norm(qa)
    qb = qb / np.linalg.norm(qb)
    d = float(np.dot(qa, qb))
    if d < 0:  # antipodal: flip to the shortest arc
        qb = -qb
        d = -d
    if d > 1 - 1e-10:
        out = qa + t * (qb - qa)
        return out / np.linalg.norm(out)
    ang = np.arccos(np.clip(d, -1, 1))
    return (np.sin((1 - t) * ang) * qa + np.sin(t * ang) * qb) / np.sin(ang)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    return Rotation.from_quat(np.asarray(q)[[1, 2, 3, 0]]).as_matrix()


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(m).as_quat()[[3, 0, 1, 2]]


# ---------------------------------------------------------------------------
# domain types


@dataclass
class Joint:
    name: str
    parent: int                      # -1 for the root joint
    rest: np.ndarray                 # 4x4 local bind transform
    dofs: list[tuple[int, str]] = field(default_factory=list)  # (theta index, axis)


@dataclass
class Skeleton:
    joints: list[Joint]
    pose_dim: int
    skin_joints: np.ndarray          # (V, 4) int32, padded with 0
    skin_weights: np.ndarray         # (V, 4) float64, rows sum to 1

    def __post_init__(self):
        for i, j in enumerate(self.joints):
            if j.parent >= i:
                raise ValueError(f"joint {j.name!r}: parent index {j.parent} must be < {i}")
            for idx, ax in j.dofs:
                if not (0 <= idx < self.pose_dim):
                    raise ValueError(f"joint {j.name!r}: theta index {idx} out of range")
                if ax not in _AXES:
                    raise ValueError(f"joint {j.name!r}: axis must be one of {_AXES}")
        sums = self.skin_weights.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-6):
            bad = int(np.argmax(np.abs(sums - 1.0)))
            raise ValueError(f"skin weights of vertex {bad} sum to {sums[bad]}, expected 1")

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    def identity_pose(self) -> "Pose":
        return Pose(np.zeros(self.pose_dim), np.array([1.0, 0, 0, 0]), np.zeros(3))


@dataclass
class Pose:
    theta: np.ndarray                # (pose_dim,) radians
    root_quat: np.ndarray            # (4,) w,x,y,z
    root_trans: np.ndarray           # (3,) meters

    def copy(self) -> "Pose":
        return Pose(self.theta.copy(), self.root_quat.copy(), self.root_trans.copy())

    def root_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.root_quat)
        m[:3, 3] = self.root_trans
        return m


@dataclass
class CoarseMesh:
    vertices: np.ndarray             # (V, 3)
    faces: np.ndarray                # (F, 3) int32
    uv: np.ndarray                   # (F, 3, 2) per-corner, in [0, 1]^2
    normals: np.ndarray              # (V, 3) unit

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def compute_vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals; degenerate faces contribute nothing."""
    v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
    fn = np.cross(v1 - v0, v2 - v0)  # length = 2 * area
    normals = np.zeros_like(vertices)
    for i in range(3):
        np.add.at(normals, faces[:, i], fn)
    lens = np.linalg.norm(normals, axis=1)
    ok = lens > 1e-20
    normals[ok] /= lens[ok, None]
    normals[~ok] = (0.0, 0.0, 1.0)
    return normals


# ---------------------------------------------------------------------------
# pose <-> per-joint rotations


def _joint_rotation(joint: Joint, theta: np.ndarray) -> Rotation:
    if not joint.dofs:
        return Rotation.identity()
    seq = "".join(ax for _, ax in joint.dofs).upper()  # intrinsic composition
    angles = [theta[idx] for idx, _ in joint.dofs]
    if len(angles) == 1:  # a 1-element list would be read as a rotation stack
        return Rotation.from_euler(seq, angles[0])
    return Rotation.from_euler(seq, angles)


def _rotation_to_angles(joint: Joint, rot: Rotation) -> list[float]:
    """Project a rotation back onto the joint's ordered axes."""
    k = len(joint.dofs)
    if k == 0:
        return []
    seq = [ax for _, ax in joint.dofs]
    pad = [ax for ax in _AXES if ax not in seq]
    full = "".join(seq + pad[: 3 - k]).upper()
    angles = rot.as_euler(full)
    return [float(a) for a in angles[:k]]


def joint_world_transforms(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """(J, 4, 4) posed joint-to-world transforms, root transform included."""
    out = np.empty((skeleton.n_joints, 4, 4))
    for i, j in enumerate(skeleton.joints):
        local = j.rest.copy()
        local[:3, :3] = local[:3, :3] @ _joint_rotation(j, pose.theta).as_matrix()
        parent = out[j.parent] if j.parent >= 0 else pose.root_matrix()
        out[i] = parent @ local
    return out


def bind_world_transforms(skeleton: Skeleton) -> np.ndarray:
    out = np.empty((skeleton.n_joints, 4, 4))
    for i, j in enumerate(skeleton.joints):
        parent = out[j.parent] if j.parent >= 0 else np.eye(4)
        out[i] = parent @ j.rest
    return out


# ---------------------------------------------------------------------------
# operations


def lbs_skin(skeleton: Skeleton, rest: CoarseMesh, pose: Pose) -> CoarseMesh:
    """Skin the rest mesh: weight-blended joint transforms down the chain."""
    if pose.theta.shape != (skeleton.pose_dim,):
        raise ValueError(f"pose dim {pose.theta.shape} != skeleton pose dim {skeleton.pose_dim}")
    bind = bind_world_transforms(skeleton)
    posed = joint_world_transforms(skeleton, pose)
    skin_mats = np.einsum("jab,jbc->jac", posed, np.linalg.inv(bind))  # (J, 4, 4)

    v_h = np.concatenate([rest.vertices, np.ones((rest.n_vertices, 1))], axis=1)
    per_joint = np.einsum("jab,vb->jva", skin_mats, v_h)[:, :, :3]     # (J, V, 3)
    w = skeleton.skin_weights                                          # (V, 4)
    idx = skeleton.skin_joints                                         # (V, 4)
    vid = np.arange(rest.n_vertices)
    verts = np.zeros((rest.n_vertices, 3))
    for k in range(4):
        verts += w[:, k:k + 1] * per_joint[idx[:, k], vid]
    return CoarseMesh(verts, rest.faces, rest.uv, compute_vertex_normals(verts, rest.faces))


def slerp_pose(a: Pose, b: Pose, t: float, skeleton: Skeleton) -> Pose:
    """Shortest-arc per-joint rotation interpolation; root translation lerped."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    if a.theta.shape != b.theta.shape:
        raise ValueError("poses have different dimensions")
    if t == 0.0:
        return a.copy()
    if t == 1.0:
        return b.copy()
    theta = np.array(a.theta, dtype=np.float64, copy=True)
    for j in skeleton.joints:
        if not j.dofs:
            continue
        qa = _joint_rotation(j, a.theta).as_quat()[[3, 0, 1, 2]]
        qb = _joint_rotation(j, b.theta).as_quat()[[3, 0, 1, 2]]
        qi = quat_slerp(qa, qb, t)
        angles = _rotation_to_angles(j, Rotation.from_quat(qi[[1, 2, 3, 0]]))
        for (idx, _), ang in zip(j.dofs, angles):
            theta[idx] = ang
    quat = quat_slerp(a.root_quat, b.root_quat, t)
    trans = (1 - t) * a.root_trans + t * b.root_trans
    return Pose(theta, quat, trans)


@dataclass
class UvAtlas:
    resolution: int
    face_index: np.ndarray           # (R, R) int32, -1 where no chart covers
    bary: np.ndarray                 # (R, R, 3) float64

    @property
    def valid(self) -> np.ndarray:
        return self.face_index >= 0


def build_atlas(mesh: CoarseMesh, resolution: int) -> UvAtlas:
    """Assign each texel center to the UV triangle covering it.

    Texel (row, col) has center uv = ((col+.5)/R, (row+.5)/R); row tracks v,
    col tracks u. Charts are assumed non-overlapping; first face wins.
    """
    res = resolution
    face_index = np.full((res, res), -1, dtype=np.int32)
    bary = np.zeros((res, res, 3))
    centers = (np.arange(res) + 0.5) / res
    for f in range(len(mesh.faces)):
        tri = mesh.uv[f]             # (3, 2) u,v
        lo = np.floor(tri.min(axis=0) * res - 0.5).astype(int)
        hi = np.ceil(tri.max(axis=0) * res + 0.5).astype(int)
        c0, c1 = max(lo[0], 0), min(hi[0] + 1, res)
        r0, r1 = max(lo[1], 0), min(hi[1] + 1, res)
        if c0 >= c1 or r0 >= r1:
            continue
        uu, vv = np.meshgrid(centers[c0:c1], centers[r0:r1])
        b = _bary_2d(tri, uu, vv)
        inside = (b >= -1e-9).all(axis=-1) & (face_index[r0:r1, c0:c1] < 0)
        sub_f = face_index[r0:r1, c0:c1]
        sub_b = bary[r0:r1, c0:c1]
        sub_f[inside] = f
        sub_b[inside] = np.clip(b[inside], 0, 1)
        sub_b[inside] /= sub_b[inside].sum(axis=-1, keepdims=True)
    return UvAtlas(res, face_index, bary)


def _bary_2d(tri: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    (ax, ay), (bx, by), (cx, cy) = tri
    det = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
    if abs(det) < 1e-20:
        return np.full(u.shape + (3,), -1.0)
    l0 = ((by - cy) * (u - cx) + (cx - bx) * (v - cy)) / det
    l1 = ((cy - ay) * (u - cx) + (ax - cx) * (v - cy)) / det
    return np.stack([l0, l1, 1.0 - l0 - l1], axis=-1)


def rasterize_texels(mesh: CoarseMesh, atlas: UvAtlas, per_vertex: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric-blend per-vertex values onto the atlas texel grid.

    Returns (grid, valid_mask); invalid texels are filled with 0. Linear in
    per_vertex by construction.
    """
    if len(per_vertex) != mesh.n_vertices:
        raise ValueError(f"per_vertex has {len(per_vertex)} entries for {mesh.n_vertices} vertices")
    vals = np.asarray(per_vertex, dtype=np.float64)
    squeeze = vals.ndim == 1
    if squeeze:
        vals = vals[:, None]
    res = atlas.resolution
    out = np.zeros((res, res, vals.shape[1]))
    valid = atlas.valid
    fidx = atlas.face_index[valid]
    corners = mesh.faces[fidx]                     # (T, 3)
    b = atlas.bary[valid]                          # (T, 3)
    out[valid] = np.einsum("tc,tcd->td", b, vals[corners])
    return (out[:, :, 0] if squeeze else out), valid


# ---------------------------------------------------------------------------
# I/O: OBJ subset, skeleton JSON, pose streams


def read_obj(path) -> CoarseMesh:
    """OBJ subset: v, vt, vn, and triangular f with v/vt or v/vt/vn corners."""
    vs, vts, vns, faces, uvs, fvns = [], [], [], [], [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                vs.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                vts.append([float(x) for x in parts[1:3]])
            elif tag == "vn":
                vns.append([float(x) for x in parts[1:4]])
            elif tag == "f":
                if len(parts) != 4:
                    raise ValueError("only triangular faces are supported")
                vi, ti, ni = [], [], []
                for corner in parts[1:]:
                    fields = corner.split("/")
                    vi.append(int(fields[0]) - 1)
                    if len(fields) > 1 and fields[1]:
                        ti.append(int(fields[1]) - 1)
                    if len(fields) > 2 and fields[2]:
                        ni.append(int(fields[2]) - 1)
                faces.append(vi)
                uvs.append(ti if len(ti) == 3 else [0, 0, 0])
                fvns.append(ni)
    vertices = np.asarray(vs)
    faces_arr = np.asarray(faces, dtype=np.int32)
    if faces_arr.size and faces_arr.max() >= len(vertices):
        raise ValueError("face references a vertex index beyond the vertex list")
    if vts:
        vt_arr = np.asarray(vts)
        uv = vt_arr[np.asarray(uvs, dtype=np.int32)]
    else:
        uv = np.zeros((len(faces_arr), 3, 2))
    normals = compute_vertex_normals(vertices, faces_arr)
    return CoarseMesh(vertices, faces_arr, uv, normals)


def write_obj(path, mesh: CoarseMesh) -> None:
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        uv_index: dict[tuple[float, float], int] = {}
        corner_uv = np.zeros((len(mesh.faces), 3), dtype=np.int64)
        for fi, tri in enumerate(mesh.uv):
            for ci, (u, v) in enumerate(tri):
                key = (round(float(u), 9), round(float(v), 9))
                if key not in uv_index:
                    uv_index[key] = len(uv_index)
                    f.write(f"vt {key[0]:.9g} {key[1]:.9g}\n")
                corner_uv[fi, ci] = uv_index[key]
        for n in mesh.normals:
            f.write(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}\n")
        for fi, face in enumerate(mesh.faces):
            c = [f"{face[k] + 1}/{corner_uv[fi, k] + 1}/{face[k] + 1}" for k in range(3)]
            f.write("f " + " ".join(c) + "\n")


def save_skeleton(path, skeleton: Skeleton) -> None:
    doc = {
        "pose_dim": skeleton.pose_dim,
        "joints": [
            {
                "name": j.name,
                "parent": j.parent,
                "rest": j.rest.reshape(-1).tolist(),
                "dofs": [{"theta": idx, "axis": ax} for idx, ax in j.dofs],
            }
            for j in skeleton.joints
        ],
        "skin": {
            "joints": skeleton.skin_joints.tolist(),
            "weights": skeleton.skin_weights.tolist(),
        },
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_skeleton(path) -> Skeleton:
    with open(path) as f:
        doc = json.load(f)
    joints = [
        Joint(
            name=j["name"],
            parent=int(j["parent"]),
            rest=np.asarray(j["rest"], dtype=np.float64).reshape(4, 4),
            dofs=[(int(d["theta"]), d["axis"]) for d in j.get("dofs", [])],
        )
        for j in doc["joints"]
    ]
    return Skeleton(
        joints=joints,
        pose_dim=int(doc["pose_dim"]),
        skin_joints=np.asarray(doc["skin"]["joints"], dtype=np.int32),
        skin_weights=np.asarray(doc["skin"]["weights"], dtype=np.float64),
    )


POSE_STREAM_MAGIC = b"PPS1"


def save_pose_stream(path, poses: list[Pose]) -> None:
    """Little-endian float stream: per frame root quat (4), root trans (3), theta."""
    dim = len(poses[0].theta)
    with open(path, "wb") as f:
        f.write(POSE_STREAM_MAGIC)
        f.write(struct.pack("<II", dim, len(poses)))
        for p in poses:
            rec = np.concatenate([p.root_quat, p.root_trans, p.theta]).astype("<f4")
            f.write(rec.tobytes())


def load_pose_stream(path) -> list[Pose]:
    with open(path, "rb") as f:
        if f.read(4) != POSE_STREAM_MAGIC:
            raise ValueError("not a pose stream (bad magic)")
        dim, count = struct.unpack("<II", f.read(8))
        poses = []
        for _ in range(count):
            rec = np.frombuffer(f.read(4 * (7 + dim)), dtype="<f4").astype(np.float64)
            poses.append(Pose(rec[7:], rec[:4], rec[4:7]))
        return poses
