import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from primlight import primitives as P
from primlight import rig
from primlight.rig import CoarseMesh, build_atlas
from primlight.primitives import (PrimitiveSet, all_localized_directions,
                                  localized_directions, place_primitives,
                                  stack_uv, unstack_uv, voxel_positions)


def quad_mesh(scale: float = 1.0) -> CoarseMesh:
    verts = scale * np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=np.float64)
    faces = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32)
    uv = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=np.float64)[faces][:, :, :2].copy()
    return CoarseMesh(verts, faces, uv, rig.compute_vertex_normals(verts, faces))


def single_prim(center=(0, 0, 0), rot=np.eye(3), scale=(1, 1, 1), S=2) -> PrimitiveSet:
    return PrimitiveSet(np.array([center], dtype=np.float64), np.array([rot], dtype=np.float64),
                        np.array([scale], dtype=np.float64), w=1, S=S)


class TestPrimitiveSetInvariants:
    def test_count_must_match_w(self):
        with pytest.raises(ValueError, match="implies"):
            PrimitiveSet(np.zeros((3, 3)), np.tile(np.eye(3), (3, 1, 1)), np.ones((3, 3)), w=2, S=4)

    def test_rotation_orthonormality(self):
        bad = np.eye(3)
        bad[0, 0] = 1.5
        with pytest.raises(ValueError, match="orthonormal"):
            single_prim(rot=bad)

    def test_positive_scales(self):
        with pytest.raises(ValueError, match="positive"):
            single_prim(scale=(1, 0, 1))


class TestPlacePrimitives:
    def test_full_scale_count(self):
        # w=64 yields the full-scale N=4096 layout (no payload allocation here)
        mesh = quad_mesh()
        atlas = build_atlas(mesh, 64)
        pset = place_primitives(mesh, atlas, w=64, S=2)
        assert pset.count == 4096

    def test_planar_quad_cell_centers(self):
        mesh = quad_mesh()
        atlas = build_atlas(mesh, 32)
        pset = place_primitives(mesh, atlas, w=2, S=2)
        got = sorted(map(tuple, np.round(pset.centers[:, :2], 9)))
        expected = sorted([(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)])
        np.testing.assert_allclose(got, expected, atol=1e-9)
        np.testing.assert_allclose(pset.centers[:, 2], 0, atol=1e-12)

    def test_frame_equivariance_under_rotation(self):
        mesh = quad_mesh()
        atlas = build_atlas(mesh, 32)
        base = place_primitives(mesh, atlas, w=4, S=2)

        Q = Rotation.from_euler("XYZ", [0.3, -0.8, 1.4]).as_matrix()
        rotated_mesh = CoarseMesh(mesh.vertices @ Q.T, mesh.faces, mesh.uv,
                                  rig.compute_vertex_normals(mesh.vertices @ Q.T, mesh.faces))
        rot_set = place_primitives(rotated_mesh, build_atlas(rotated_mesh, 32), w=4, S=2)
        np.testing.assert_allclose(rot_set.centers, base.centers @ Q.T, atol=1e-4)
        np.testing.assert_allclose(rot_set.rotations, np.einsum("ij,njk->nik", Q, base.rotations), atol=1e-4)
        np.testing.assert_allclose(rot_set.scales, base.scales, atol=1e-9)

    def test_empty_atlas_errors(self):
        mesh = quad_mesh()
        atlas = build_atlas(mesh, 8)
        atlas.face_index[:] = -1
        with pytest.raises(ValueError, match="valid texels"):
            place_primitives(mesh, atlas, w=2)


class TestVoxelPositions:
    def test_s2_unit_cube(self):
        pset = single_prim(S=2)
        pts = voxel_positions(pset, 0).reshape(-1, 3)
        expected = {(sx * 0.5, sy * 0.5, sz * 0.5)
                    for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)}
        got = {tuple(np.round(p, 9)) for p in pts}
        assert got == expected

    def test_translation(self):
        a = voxel_positions(single_prim(S=3), 0)
        b = voxel_positions(single_prim(center=(1, 2, 3), S=3), 0)
        np.testing.assert_allclose(b, a + np.array([1, 2, 3]), atol=1e-12)

    def test_anisotropic_scale(self):
        a = voxel_positions(single_prim(S=2), 0)
        b = voxel_positions(single_prim(scale=(2, 1, 1), S=2), 0)
        np.testing.assert_allclose(b[..., 0], 2 * a[..., 0], atol=1e-12)
        np.testing.assert_allclose(b[..., 1:], a[..., 1:], atol=1e-12)

    def test_bad_index(self):
        with pytest.raises(IndexError):
            voxel_positions(single_prim(), 1)


class TestLocalizedDirections:
    def test_axis_aligned(self):
        pset = single_prim(S=1)  # single voxel at the origin
        dirs, deg = localized_directions(pset, 0, np.array([0, 0, 2.0]))
        assert not deg.any()
        np.testing.assert_allclose(dirs.reshape(3), [0, 0, 1], atol=1e-12)

    def test_rotated_frame(self):
        rot = Rotation.from_euler("Z", np.pi / 2).as_matrix()
        pset = single_prim(rot=rot, S=1)
        dirs, _ = localized_directions(pset, 0, np.array([0, 0, 2.0]))
        np.testing.assert_allclose(dirs.reshape(3), [0, 0, 1], atol=1e-12)
        dirs, _ = localized_directions(pset, 0, np.array([2.0, 0, 0]))
        np.testing.assert_allclose(dirs.reshape(3), [0, -1, 0], atol=1e-12)

    def test_degenerate_target_flagged(self):
        pset = single_prim(S=1)
        dirs, deg = localized_directions(pset, 0, np.array([0.0, 0, 0]))
        assert deg.all()
        np.testing.assert_array_equal(dirs, 0)

    def test_unit_norm(self, rng):
        pset = single_prim(scale=(0.5, 0.4, 0.3), S=4)
        dirs, deg = localized_directions(pset, 0, rng.standard_normal(3) * 3)
        norms = np.linalg.norm(dirs, axis=-1)
        np.testing.assert_allclose(norms[~deg], 1.0, atol=1e-6)

    def test_rigid_motion_invariance(self, rng):
        mesh = quad_mesh()
        atlas = build_atlas(mesh, 16)
        pset = place_primitives(mesh, atlas, w=2, S=3)
        target = np.array([0.3, 0.4, 2.0])
        for _ in range(5):
            Q = Rotation.from_quat(rng.standard_normal(4)).as_matrix()
            d = rng.standard_normal(3)
            moved = pset.transformed(Q, d)
            for k in range(pset.count):
                a, _ = localized_directions(pset, k, target)
                b, _ = localized_directions(moved, k, Q @ target + d)
                np.testing.assert_allclose(a, b, atol=1e-6)

    def test_all_matches_single(self, rng):
        mesh = quad_mesh()
        pset = place_primitives(mesh, build_atlas(mesh, 16), w=2, S=3)
        target = rng.standard_normal(3) * 2
        alldirs, alldeg = all_localized_directions(pset, target)
        for k in range(pset.count):
            d, g = localized_directions(pset, k, target)
            np.testing.assert_allclose(alldirs[k], d, atol=1e-12)
            np.testing.assert_array_equal(alldeg[k], g)


class TestStackUv:
    def test_round_trip_bitwise(self, rng):
        pset = place_primitives(quad_mesh(), build_atlas(quad_mesh(), 16), w=4, S=4)
        payload = rng.standard_normal((16, 3, 4, 4, 4)).astype(np.float32)
        stacked = stack_uv(pset, payload)
        assert stacked.shape == (12, 16, 16)
        back = unstack_uv(pset, stacked)
        np.testing.assert_array_equal(back, payload)

    def test_full_scale_view_map_shape(self):
        # shape math only: 3-channel payload at w=64, S=16
        w, S, c = 64, 16, 3
        assert (c * S, w * S, w * S) == (48, 1024, 1024)

    def test_single_voxel_lands_in_its_tile(self):
        pset = place_primitives(quad_mesh(), build_atlas(quad_mesh(), 16), w=2, S=2)
        payload = np.zeros((4, 1, 2, 2, 2), dtype=np.float32)
        k, iz, iy, ix = 3, 1, 0, 1  # prim row 1, col 1
        payload[k, 0, iz, iy, ix] = 5.0
        stacked = stack_uv(pset, payload)
        nz = np.argwhere(stacked != 0)
        assert len(nz) == 1
        c, r, q = nz[0]
        assert (c, r, q) == (0 * 2 + iz, 1 * 2 + iy, 1 * 2 + ix)

    def test_shape_mismatch(self):
        pset = place_primitives(quad_mesh(), build_atlas(quad_mesh(), 16), w=2, S=2)
        with pytest.raises(ValueError):
            stack_uv(pset, np.zeros((4, 1, 3, 3, 3)))
        with pytest.raises(ValueError):
            unstack_uv(pset, np.zeros((2, 4, 5)))


class TestSerialization:
    def test_checkpoint_container_round_trip(self, tmp_path):
        from primlight.tensor import load_checkpoint, save_checkpoint
        pset = place_primitives(quad_mesh(), build_atlas(quad_mesh(), 16), w=2, S=4)
        path = tmp_path / "prims.plt"
        save_checkpoint(path, pset.to_arrays())
        back = PrimitiveSet.from_arrays(load_checkpoint(path))
        assert back.w == 2 and back.S == 4
        np.testing.assert_allclose(back.centers, pset.centers, atol=1e-6)
        np.testing.assert_allclose(back.rotations, pset.rotations, atol=1e-6)

    def test_transformed_keeps_invariants(self, rng):
        mesh = quad_mesh()
        a = place_primitives(mesh, build_atlas(mesh, 16), w=2, S=4)
        Q = Rotation.from_euler("XYZ", rng.uniform(-1, 1, 3)).as_matrix()
        moved = a.transformed(Q, np.array([1.0, 2, 3]))
        np.testing.assert_allclose(moved.centers, a.centers @ Q.T + [1, 2, 3], atol=1e-12)
