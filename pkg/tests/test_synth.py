import numpy as np
import pytest

from primlight.bvh import Bvh
from primlight.illum import EnvMap, LightRig
from primlight.primitives import place_primitives
from primlight.raymarch import Camera, VolumeTexture, march
from primlight.rig import CoarseMesh, build_atlas, compute_vertex_normals, lbs_skin, slerp_pose
from primlight.synth import (CaptureScript, HandParams, Material, generate_hand,
                             load_capture, opacity_from_sdf, reference_render,
                             render_scene, ring_cameras, script_poses,
                             simulate_capture, stage_rig)


@pytest.fixture(scope="module")
def hand():
    return generate_hand(seed=0)


def _inside_mesh(hand, points):
    """Per-capsule parity test against the mesh components (union)."""
    inside = np.zeros(len(points), dtype=bool)
    mesh = hand.rest_mesh
    for (v0i, v1i), (f0, f1) in zip(hand.segment_vertex_ranges, hand.segment_face_ranges):
        faces = mesh.faces[f0:f1]
        tris = mesh.vertices[faces]
        e1 = tris[:, 1] - tris[:, 0]
        e2 = tris[:, 2] - tris[:, 0]
        d = np.array([1.0, 0.0, 0.0])
        p = np.cross(d, e2)
        det = np.einsum("fi,fi->f", e1, p)
        ok = np.abs(det) > 1e-14
        for i, pt in enumerate(points):
            tv = pt - tris[:, 0]
            inv = np.where(ok, 1.0 / np.where(ok, det, 1), 0.0)
            u = np.einsum("fi,fi->f", tv, p) * inv
            q = np.cross(tv, e1)
            v = q[:, 0] * 1.0  # d . q with d = +x
            v = v * inv
            t = np.einsum("fi,fi->f", e2, q) * inv
            hits = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9)
            if hits.sum() % 2 == 1:
                inside[i] = True
    return inside


class TestGenerateHand:
    def test_deterministic(self):
        a = generate_hand(seed=3)
        b = generate_hand(seed=3)
        np.testing.assert_array_equal(a.rest_mesh.vertices, b.rest_mesh.vertices)
        np.testing.assert_array_equal(a.rest_mesh.faces, b.rest_mesh.faces)

    def test_seed_changes_geometry(self):
        a = generate_hand(seed=1)
        b = generate_hand(seed=2)
        assert np.abs(a.rest_mesh.vertices - b.rest_mesh.vertices).max() > 1e-6

    def test_vertex_budget(self, hand):
        assert 1000 <= hand.rest_mesh.n_vertices <= 4000

    def test_pose_dim_25(self, hand):
        assert hand.skeleton.pose_dim == 25

    def test_uv_charts_in_unit_square_disjoint(self, hand):
        uv = hand.rest_mesh.uv
        assert uv.min() >= 0 and uv.max() <= 1
        # charts must not overlap: each atlas texel belongs to one segment
        atlas = build_atlas(hand.rest_mesh, 64)
        owner = np.full((64, 64), -1)
        for si, (f0, f1) in enumerate(hand.segment_face_ranges):
            sel = (atlas.face_index >= f0) & (atlas.face_index < f1)
            assert np.all(owner[sel] == -1)
            owner[sel] = si

    def test_sdf_sign_matches_mesh(self, hand):
        rng = np.random.default_rng(0)
        lo, hi = hand.rest_mesh.bbox()
        pts = rng.uniform(lo - 0.01, hi + 0.01, (1500, 3))
        sd = hand.sdf(hand.identity_pose(), pts)
        inside = _inside_mesh(hand, pts)
        agree = (sd < 0) == inside
        assert agree.mean() >= 0.99

    def test_identity_pose_keeps_rest(self, hand):
        posed = lbs_skin(hand.skeleton, hand.rest_mesh, hand.identity_pose())
        np.testing.assert_allclose(posed.vertices, hand.rest_mesh.vertices, atol=1e-9)


class TestOpacityFromSdf:
    def test_far_outside_near_zero_inside_saturates(self, hand):
        pose = hand.identity_pose()
        mesh = lbs_skin(hand.skeleton, hand.rest_mesh, pose)
        atlas = build_atlas(mesh, 64)
        pset = place_primitives(mesh, atlas, w=8, S=8)
        opac = opacity_from_sdf(hand, pose, pset, sharpness=80.0)
        from primlight.primitives import all_voxel_positions
        pts = all_voxel_positions(pset).reshape(-1, 3)
        sd = hand.sdf(pose, pts).reshape(opac.shape)
        assert opac[sd > 0.01].max() < 1e-3 * 80
        assert opac[sd < -0.01].min() > 0.99 * 80

    def test_silhouette_iou(self, hand):
        pose = hand.identity_pose()
        mesh = lbs_skin(hand.skeleton, hand.rest_mesh, pose)
        atlas = build_atlas(mesh, 64)
        pset = place_primitives(mesh, atlas, w=8, S=8)
        opac = opacity_from_sdf(hand, pose, pset, sharpness=80.0)
        tex = VolumeTexture(np.ones((pset.count, 3, 8, 8, 8)), opac)
        bvh = Bvh(mesh)
        for cam in [Camera.look_at((0.07, 0.30, 0.18), (0.07, 0, 0), fov_deg=40,
                                   width=72, height=72),
                    Camera.look_at((0.25, -0.2, 0.1), (0.07, 0, 0), fov_deg=40,
                                   width=72, height=72)]:
            o, d = cam.rays()
            ref = np.isfinite(bvh.raycast_batch(o, d)[0]).reshape(72, 72)
            m = march((pset, tex), cam)[..., 3] > 0.5
            iou = (m & ref).sum() / (m | ref).sum()
            assert iou >= 0.9, f"IoU {iou:.3f}"

    def test_valid_volume_texture(self, hand):
        pose = hand.identity_pose()
        mesh = lbs_skin(hand.skeleton, hand.rest_mesh, pose)
        pset = place_primitives(mesh, build_atlas(mesh, 64), w=8, S=8)
        opac = opacity_from_sdf(hand, pose, pset, sharpness=80.0)
        tex = VolumeTexture(np.zeros((pset.count, 3, 8, 8, 8)), opac)
        vox = tex.voxel_opacity(pset)
        assert vox.min() >= 0 and vox.max() <= 1  # the [0,1] opacity view


class TestReferenceRender:
    def plate(self):
        verts = np.array([[-1, 0, -1], [1, 0, -1], [1, 0, 1], [-1, 0, 1]], dtype=np.float64)
        faces = np.array([[0, 2, 1], [0, 3, 2]], dtype=np.int32)  # normals +y
        return CoarseMesh(verts, faces, np.zeros((2, 3, 2)),
                          compute_vertex_normals(verts, faces))

    def test_black_rig_black_image(self, hand):
        rig = LightRig(np.array([[0, 1.0, 0]]), np.zeros(1))
        img = reference_render(hand, hand.identity_pose(),
                               Camera.look_at((0.07, 0.3, 0.2), (0.07, 0, 0),
                                              width=16, height=16), rig)
        np.testing.assert_array_equal(img[..., :3], 0)

    def test_lambert_closed_form(self):
        mesh = self.plate()
        cam = Camera.look_at((0, 1.5, 0.01), (0, 0, 0), fov_deg=20, width=8, height=8)
        ldir = np.array([0.3, 0.9, 0.1])
        ldir /= np.linalg.norm(ldir)
        mat = Material(albedo=(0.6, 0.5, 0.4), specular=0.0)
        img = render_scene(mesh, Bvh(mesh), cam, ("dir", ldir[None], np.array([2.0])), mat)
        cos = ldir[1]  # plate normal +y
        expected = np.array(mat.albedo) / np.pi * cos * 2.0
        center = img[4, 4, :3]
        np.testing.assert_allclose(center, expected, rtol=1e-9)

    def test_light_linearity(self, hand):
        pose = hand.identity_pose()
        cam = Camera.look_at((0.07, 0.3, 0.2), (0.07, 0, 0), width=24, height=24)
        rig = stage_rig(8, radius=1.0)
        r1 = LightRig(rig.positions[:4], rig.intensities[:4])
        r2 = LightRig(rig.positions[4:], rig.intensities[4:])
        both = LightRig(rig.positions, rig.intensities)
        a = reference_render(hand, pose, cam, r1)
        b = reference_render(hand, pose, cam, r2)
        ab = reference_render(hand, pose, cam, both)
        np.testing.assert_allclose(ab[..., :3], a[..., :3] + b[..., :3], atol=1e-5)

    def test_doubling_intensities_doubles_image(self, hand):
        pose = hand.identity_pose()
        cam = Camera.look_at((0.07, 0.3, 0.2), (0.07, 0, 0), width=16, height=16)
        rig = stage_rig(6, radius=1.0)
        twice = LightRig(rig.positions, 2 * rig.intensities)
        a = reference_render(hand, pose, cam, rig)
        b = reference_render(hand, pose, cam, twice)
        np.testing.assert_allclose(b[..., :3], 2 * a[..., :3], rtol=1e-12)

    def test_shadowed_point_gets_no_contribution(self):
        # a small plate floats above a big plate; light straight above
        big = self.plate()
        lift = np.array([0, 0.5, 0.0])
        verts = np.concatenate([big.vertices, big.vertices * 0.25 + lift])
        faces = np.concatenate([big.faces, big.faces + 4]).astype(np.int32)
        mesh = CoarseMesh(verts, faces, np.zeros((4, 3, 2)),
                          compute_vertex_normals(verts, faces))
        cam = Camera.look_at((0, 2.0, 0.01), (0, 0, 0), fov_deg=45, width=32, height=32)
        ldir = np.array([0.45, 0.85, 0.0])
        ldir /= np.linalg.norm(ldir)  # tilted so the shadow is not hidden behind the occluder
        img = render_scene(mesh, Bvh(mesh), cam, ("dir", ldir[None], np.array([1.0])))
        bvh = Bvh(mesh)
        o, d = cam.rays()
        ts, fs, _, _ = bvh.raycast_batch(o, d)
        hit = np.isfinite(ts) & (fs < 2)  # pixels hitting the lower plate
        pos = o[hit] + ts[hit, None] * d[hit]
        eps = 1e-5 * bvh.scene_scale
        shadowed = bvh.occluded_batch(pos + eps * np.array([0, 1.0, 0]),
                                      np.broadcast_to(ldir, pos.shape).copy(),
                                      t_min=eps)
        rgb = img[..., :3].reshape(-1, 3)[hit]
        assert shadowed.any() and not shadowed.all()
        np.testing.assert_array_equal(rgb[shadowed], 0.0)
        assert rgb[~shadowed].min() > 0

    def test_envmap_lighting(self, hand):
        env = EnvMap(np.full((4, 8, 3), 0.2))
        cam = Camera.look_at((0.07, 0.3, 0.2), (0.07, 0, 0), width=12, height=12)
        img = reference_render(hand, hand.identity_pose(), cam, env)
        assert img[..., :3].max() > 0


class TestCaptureProtocol:
    def test_script_validation(self):
        with pytest.raises(ValueError, match="between two fully-lit"):
            CaptureScript(n_frames=10, key_stride=4)

    def test_partial_poses_are_slerped(self, hand):
        script = CaptureScript(n_frames=9, key_stride=4, seed=5)
        poses = script_poses(hand, script)
        for i in (1, 2, 3, 5, 6, 7):
            k = i // 4
            ref = slerp_pose(poses[4 * k], poses[4 * (k + 1)], (i % 4) / 4, hand.skeleton)
            np.testing.assert_allclose(poses[i].theta, ref.theta, atol=1e-12)

    def test_simulate_capture_round_trip(self, hand, tmp_path):
        script = CaptureScript(n_frames=5, key_stride=2, image_size=(24, 24),
                               n_cameras=2, seed=7)
        rig = stage_rig(16, radius=1.0)
        ds = simulate_capture(hand, script, rig, tmp_path / "cap", hand_seed=0)
        partial = ds.partial_records()
        assert all(len(r.light_ids) == 5 for r in partial)  # L = 5 per group
        assert len(ds.records) == 5 * 2
        back = load_capture(tmp_path / "cap")
        assert len(back.records) == len(ds.records)
        assert back.rig.group_size == 5
        np.testing.assert_allclose(back.poses[3].theta, ds.poses[3].theta, atol=1e-6)
        img = back.load_image(back.records[0])
        assert img.shape == (24, 24, 3)

    def test_capture_determinism(self, hand, tmp_path):
        script = CaptureScript(n_frames=3, key_stride=2, image_size=(16, 16),
                               n_cameras=1, seed=9)
        rig = stage_rig(12, radius=1.0)
        a = simulate_capture(hand, script, rig, tmp_path / "a", hand_seed=0)
        b = simulate_capture(hand, script, rig, tmp_path / "b", hand_seed=0)
        for ra, rb in zip(a.records, b.records):
            ia = (tmp_path / "a" / ra.image).read_bytes()
            ib = (tmp_path / "b" / rb.image).read_bytes()
            assert ia == ib  # bitwise image equality

    def test_stage_rig_on_sphere(self):
        rig = stage_rig(64, radius=1.2)
        assert rig.count == 64
        np.testing.assert_allclose(np.linalg.norm(rig.positions, axis=1), 1.2, atol=1e-9)
