import numpy as np
import pytest

from primlight import tensor as tz
from primlight.appearance import StudentConfig, StudentModel, TeacherConfig, TeacherModel
from primlight.synth import (CaptureScript, generate_hand, random_envmap,
                             simulate_capture, stage_rig)
from primlight.tensor import Tape, Tensor
from primlight.training import (FramePipeline, LossWeights, build_distill_set,
                                gamma_schedule, loss_neg, loss_total,
                                perceptual_proxy, pose_importance_sample,
                                student_eval_mse, teacher_eval_mse,
                                train_student, train_teacher)

from conftest import finite_diff, rel_err


@pytest.fixture(scope="module")
def hand():
    return generate_hand(seed=0)


@pytest.fixture(scope="module")
def capture(hand, tmp_path_factory):
    script = CaptureScript(n_frames=9, key_stride=4, image_size=(40, 40),
                           n_cameras=1, seed=2)
    rig = stage_rig(24, radius=1.0)
    return simulate_capture(hand, script, rig, tmp_path_factory.mktemp("cap"))


@pytest.fixture(scope="module")
def pipeline(hand, capture):
    return FramePipeline(hand, capture.cameras, w=8, S=8)


class TestLossNeg:
    def test_nonnegative_payload_zero(self):
        c = Tensor(np.ones((6, 4, 4)))
        assert loss_neg(c, t=1, t_s=10).item() == 0.0

    def test_single_negative_texel(self):
        # payload (3S, wS, wS): one entry at -2 with gamma=1 -> 4 / (N*S^3)
        data = np.zeros((6, 8, 8))
        data[2, 3, 4] = -2.0
        n_texels = data.size // 3
        out = loss_neg(Tensor(data), t=5, t_s=10)
        assert out.item() == pytest.approx(4.0 / n_texels)

    def test_gamma_schedule_shape(self):
        assert gamma_schedule(10, 5.0, 10) == 1.0
        assert gamma_schedule(3, 5.0, 10) == 1.0
        vals = [gamma_schedule(t, 5.0, 10) for t in range(1, 60, 3)]
        assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))

    def test_ts_positive_required(self):
        with pytest.raises(ValueError):
            gamma_schedule(1, 5.0, 0)


class TestPerceptualProxy:
    def test_identical_zero(self, rng):
        a = Tensor(rng.uniform(0, 1, (3, 16, 16)))
        assert perceptual_proxy(a, Tensor(a.data.copy())).item() == 0.0

    def test_symmetry(self, rng):
        a = rng.uniform(0, 1, (3, 12, 12))
        b = rng.uniform(0, 1, (3, 12, 12))
        ab = perceptual_proxy(Tensor(a), Tensor(b)).item()
        ba = perceptual_proxy(Tensor(b), Tensor(a)).item()
        assert ab == pytest.approx(ba, rel=1e-12)

    def test_single_pixel_difference_positive(self):
        a = np.zeros((3, 8, 8))
        b = a.copy()
        b[1, 4, 4] = 0.5
        assert perceptual_proxy(Tensor(a), Tensor(b)).item() > 0


class TestLossTotal:
    def test_perfect_render_zero(self, rng):
        gt = rng.uniform(0, 1, (8, 8, 3))
        mask = np.ones((8, 8))
        rendered = Tensor(np.ascontiguousarray(gt.transpose(2, 0, 1)))
        payload = Tensor(np.ones((6, 4, 4)))
        loss, parts = loss_total(rendered, gt, mask, payload, t=1,
                                 weights=LossWeights(t_s=10))
        assert loss.item() == 0.0

    def test_pure_mse_mode(self, rng):
        gt = rng.uniform(0, 1, (6, 6, 3))
        r = rng.uniform(0, 1, (3, 6, 6))
        mask = (rng.uniform(size=(6, 6)) > 0.4).astype(np.float64)
        loss, parts = loss_total(Tensor(r), gt, mask, Tensor(np.zeros((6, 2, 2))),
                                 t=1, weights=LossWeights(vgg=0, neg=0, t_s=10))
        expected = (((r.transpose(1, 2, 0) - gt) * mask[..., None]) ** 2).sum() / (3 * mask.sum())
        assert loss.item() == pytest.approx(expected, rel=1e-6)

    def test_size_mismatch(self, rng):
        with pytest.raises(ValueError, match="mismatch"):
            loss_total(Tensor(np.zeros((3, 4, 4))), np.zeros((5, 5, 3)),
                       np.ones((5, 5)), Tensor(np.zeros((3, 2, 2))), 1)

    def test_gradient_matches_fd(self, rng):
        gt = rng.uniform(0, 1, (5, 5, 3))
        mask = np.ones((5, 5))
        r0 = rng.uniform(-0.3, 1, (3, 5, 5))
        payload0 = rng.uniform(-0.5, 1, (6, 3, 3))
        weights = LossWeights(t_s=10)

        def value(rd, pd):
            l, _ = loss_total(Tensor(rd), gt, mask, Tensor(pd), t=3, weights=weights)
            return l.item()

        r = Tensor(r0.copy(), requires_grad=True)
        p = Tensor(payload0.copy(), requires_grad=True)
        with Tape():
            loss, _ = loss_total(r, gt, mask, p, t=3, weights=weights)
            loss.backward()
        fd_r = finite_diff(lambda x: value(x, payload0), r0, h=1e-5)
        fd_p = finite_diff(lambda x: value(r0, x), payload0, h=1e-5)
        assert rel_err(r.grad, fd_r) < 1e-3
        assert rel_err(p.grad, fd_p) < 1e-3


class TestPoseImportanceSampling:
    def test_uniform_duplicates_uniform_probability(self, hand, rng):
        pose = hand.random_pose(rng)
        picks = pose_importance_sample([pose.copy() for _ in range(6)], 4, hand,
                                       np.random.default_rng(0))
        assert len(picks) == 4
        assert len(set(picks.tolist())) == 4  # without replacement

    def test_outlier_oversampled(self, hand):
        rng = np.random.default_rng(4)
        base = hand.identity_pose()
        cluster = []
        for i in range(9):
            p = base.copy()
            p.theta = base.theta + 0.01 * np.sin(np.arange(25) + i)
            cluster.append(p)
        outlier = hand.random_pose(np.random.default_rng(8), 0.9)
        poses = cluster + [outlier]
        hits = 0
        trials = 200
        for t in range(trials):
            picks = pose_importance_sample(poses, 1, hand, np.random.default_rng(t))
            hits += int(picks[0] == 9)
        assert hits / trials > 1.5 / len(poses)  # well above uniform 0.1

    def test_oversample_warns(self, hand, rng):
        poses = [hand.random_pose(np.random.default_rng(i)) for i in range(3)]
        with pytest.warns(UserWarning, match="replacement"):
            picks = pose_importance_sample(poses, 5, hand, np.random.default_rng(0))
        assert len(picks) == 5

    def test_deterministic_under_seed(self, hand):
        poses = [hand.random_pose(np.random.default_rng(i)) for i in range(5)]
        a = pose_importance_sample(poses, 3, hand, np.random.default_rng(11))
        b = pose_importance_sample(poses, 3, hand, np.random.default_rng(11))
        np.testing.assert_array_equal(a, b)


@pytest.mark.slow
class TestTeacherTraining:
    def test_smoke_200_steps_halves_mse(self, hand, capture, pipeline, tmp_path):
        # desk-scale smoke: 200 steps on the 8-frame capture
        model = TeacherModel(TeacherConfig.desk(), rng=np.random.default_rng(0))
        recs = capture.partial_records()
        assert len({r.frame for r in recs}) >= 6
        init_mse = teacher_eval_mse(capture, pipeline, model, recs)
        train_teacher(capture, pipeline, model, steps=200, out_dir=tmp_path,
                      seed=0, log_every=50)
        final_mse = teacher_eval_mse(capture, pipeline, model, recs)
        assert final_mse <= 0.5 * init_mse, (init_mse, final_mse)

    def test_resume_reproduces_uninterrupted_run(self, hand, capture, pipeline, tmp_path):
        def fresh():
            return TeacherModel(TeacherConfig.desk(), rng=np.random.default_rng(1))

        straight = fresh()
        res_a = train_teacher(capture, pipeline, straight, steps=6,
                              out_dir=tmp_path / "a", seed=3, log_every=1)
        resumed = fresh()
        train_teacher(capture, pipeline, resumed, steps=5,
                      out_dir=tmp_path / "b", seed=3, log_every=1)
        res_b = train_teacher(capture, pipeline, resumed, steps=6, start_step=5,
                              out_dir=tmp_path / "b", seed=3, log_every=1)
        assert abs(res_a.final_loss - res_b.final_loss) < 1e-6


@pytest.mark.slow
class TestDistillation:
    def test_overfit_single_envmap(self, hand, capture, pipeline, tmp_path):
        # an untrained teacher is a perfectly good pseudo-GT source here: the
        # sanity check is that the student can reproduce the teacher's renders
        teacher = TeacherModel(TeacherConfig.desk(), rng=np.random.default_rng(0))
        env = random_envmap(4, 8, np.random.default_rng(3))
        envmaps = {"e0": env}
        dset = build_distill_set(capture, pipeline, teacher, frames=[1, 2],
                                 camera_ids=[0], envmaps=envmaps, test_env_ids=[],
                                 out_dir=tmp_path / "d")
        assert len(dset.records) == 2
        cfg = StudentConfig.desk(feature_res=32)
        student = StudentModel(cfg, rng=np.random.default_rng(1))
        res = train_student(capture, pipeline, student, dset, steps=150,
                            out_dir=tmp_path / "s", seed=0, log_every=50)
        train_floor = float(res.log_rows[-1]["mse"])
        eval_mse = student_eval_mse(capture, pipeline, student, dset, dset.records)
        assert eval_mse <= 2.0 * max(train_floor, 1e-8), (train_floor, eval_mse)

    def test_split_hygiene_enforced(self, hand, capture, pipeline, tmp_path):
        from primlight.training import DistillRecord, DistillSet
        env = random_envmap(8, 16, np.random.default_rng(0))
        dset = DistillSet(tmp_path, [DistillRecord(1, 0, "test_env", "x.pfm")],
                          {"test_env": env, "train_env": env}, ["train_env"])
        student = StudentModel(StudentConfig.desk(feature_res=32),
                               rng=np.random.default_rng(0))
        with pytest.raises(ValueError, match="test envmap"):
            train_student(capture, pipeline, student, dset, steps=1, out_dir=tmp_path)

    def test_envmap_render_equals_olat_aggregate(self, hand, capture, pipeline, tmp_path):
        """Teacher envmap path == b-weighted sum of its OLAT renders."""
        from primlight.illum import env_to_rig
        teacher = TeacherModel(TeacherConfig.desk(), rng=np.random.default_rng(2))
        env = random_envmap(4, 8, np.random.default_rng(1))
        rig = env_to_rig(env, pipeline.env_radius)
        fd = pipeline.frame(1, capture.poses[1])
        op = pipeline.render_operator(fd, 0)
        total_payload = None
        total_img = 0.0
        for m in range(rig.count):
            payload = pipeline.teacher_payload(teacher, fd, 0, rig.positions[m],
                                               cache=False).data
            wchan = np.repeat(rig.intensities[m], pipeline.S)[:, None, None]
            contrib = payload * wchan
            total_payload = contrib if total_payload is None else total_payload + contrib
            total_img = total_img + op.render_np_from_stacked(contrib)[..., :3]
        direct = op.render_np_from_stacked(total_payload)[..., :3]
        scale = max(np.abs(direct).max(), 1e-9)
        assert np.abs(direct - total_img).max() / scale < 1e-4
