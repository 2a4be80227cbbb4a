"""Desk-scale experiment orchestration: the visibility/specular ablation.

Trains the teacher with and without visibility conditioning on a synthetic
capture, distills three student variants (full, without specular features,
without visibility) from the full teacher, and evaluates on held-out poses
and envmaps. Mirrors the paper-style ablation as a trend check, not a
reproduction of absolute numbers.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .appearance import StudentConfig, StudentModel, TeacherConfig, TeacherModel
from .synth import CaptureScript, generate_hand, random_envmap, simulate_capture, stage_rig
from .training import (FramePipeline, build_distill_set, student_eval_mse,
                       teacher_eval_mse, train_student, train_teacher)


@dataclass
class AblationBudget:
    n_frames: int = 17
    key_stride: int = 4
    n_cameras: int = 2
    image_size: int = 48
    stage_lights: int = 64
    teacher_steps: int = 320
    student_steps: int = 280
    n_holdout_frames: int = 3
    train_envmaps: int = 6
    test_envmaps: int = 2
    env_rows: int = 8
    env_cols: int = 16
    distill_cameras: tuple[int, ...] = (0,)
    seed: int = 0


@dataclass
class AblationResult:
    teacher_mse: dict = field(default_factory=dict)      # with_vis / no_vis
    student_mse: dict = field(default_factory=dict)      # full / no_specular / no_visibility
    distill_mse: dict = field(default_factory=dict)      # train / heldout_env
    wall_clock_s: float = 0.0
    paths: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "teacher_mse": self.teacher_mse,
            "student_mse": self.student_mse,
            "distill_mse": self.distill_mse,
            "wall_clock_s": self.wall_clock_s,
        }, indent=1)


def run_desk_ablation(out_dir, budget: AblationBudget = AblationBudget(),
                      verbose: bool = True) -> AblationResult:
    t_start = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = print if verbose else (lambda *a, **k: None)
    b = budget

    hand = generate_hand(seed=b.seed)
    script = CaptureScript(n_frames=b.n_frames, key_stride=b.key_stride,
                           image_size=(b.image_size, b.image_size),
                           n_cameras=b.n_cameras, seed=b.seed)
    rig = stage_rig(b.stage_lights, radius=1.2)
    capture = simulate_capture(hand, script, rig, out / "capture", hand_seed=b.seed)
    log(f"[ablation] capture: {len(capture.records)} images")

    partial_frames = sorted({r.frame for r in capture.partial_records()})
    holdout_frames = partial_frames[-b.n_holdout_frames:]
    train_frames = [f for f in partial_frames if f not in holdout_frames]
    train_records = [r for r in capture.partial_records() if r.frame in train_frames]
    holdout_records = [r for r in capture.partial_records() if r.frame in holdout_frames]

    pipeline = FramePipeline(hand, capture.cameras, w=8, S=8)
    result = AblationResult()

    # --- teacher ablation -------------------------------------------------
    teachers = {}
    for variant, vis_mode in (("with_vis", "shadow"), ("no_vis", "ones")):
        model = TeacherModel(TeacherConfig.desk(), rng=np.random.default_rng(b.seed))
        res = train_teacher(capture, pipeline, model, steps=b.teacher_steps,
                            out_dir=out / f"teacher_{variant}", records=train_records,
                            vis_mode=vis_mode, seed=b.seed, log_every=40)
        mse = teacher_eval_mse(capture, pipeline, model, holdout_records, vis_mode)
        teachers[variant] = model
        result.teacher_mse[variant] = mse
        result.paths[f"teacher_{variant}"] = str(res.checkpoint)
        log(f"[ablation] teacher {variant}: held-out MSE {mse:.6f}")

    # --- distillation data from the full teacher --------------------------
    rng = np.random.default_rng(b.seed + 13)
    envmaps = {f"env{i:03d}": random_envmap(b.env_rows, b.env_cols, rng)
               for i in range(b.train_envmaps + b.test_envmaps)}
    test_ids = sorted(envmaps)[b.train_envmaps:]
    dset_all, eval_all = build_distill_set(
        capture, pipeline, teachers["with_vis"], train_frames + holdout_frames,
        list(b.distill_cameras), envmaps, test_ids, out / "distill",
        with_eval_set=True)
    train_set = _filter(dset_all, frames=train_frames)
    heldout_env_records = [r for r in eval_all.records if r.frame in train_frames]
    heldout_both_records = [r for r in eval_all.records if r.frame in holdout_frames]
    log(f"[ablation] distill: {len(train_set.records)} train records, "
        f"{len(heldout_both_records)} held-out records")

    # --- student variants --------------------------------------------------
    variants = {"full": (True, True), "no_specular": (True, False),
                "no_visibility": (False, True)}
    students = {}
    for name, (with_vis, use_spec) in variants.items():
        model = StudentModel(StudentConfig.desk(), rng=np.random.default_rng(b.seed + 1))
        res = train_student(capture, pipeline, model, train_set,
                            steps=b.student_steps, out_dir=out / f"student_{name}",
                            with_visibility=with_vis, use_specular=use_spec,
                            seed=b.seed, log_every=40)
        students[name] = model
        result.paths[f"student_{name}"] = str(res.checkpoint)
        mse = student_eval_mse(capture, pipeline, model, eval_all,
                               heldout_both_records, with_visibility=with_vis,
                               use_specular=use_spec)
        result.student_mse[name] = mse
        log(f"[ablation] student {name}: held-out pose+env MSE {mse:.6f}")

    # --- distillation sanity (envmap generalization of the full student) ---
    result.distill_mse["train"] = student_eval_mse(
        capture, pipeline, students["full"], train_set, train_set.records)
    result.distill_mse["heldout_env"] = student_eval_mse(
        capture, pipeline, students["full"], eval_all, heldout_env_records)
    result.wall_clock_s = time.time() - t_start
    (out / "ablation_results.json").write_text(result.to_json())
    log(f"[ablation] done in {result.wall_clock_s / 60:.1f} min")
    return result


def _filter(dset, frames):
    from .training import DistillSet
    recs = [r for r in dset.records if r.frame in frames]
    return DistillSet(dset.root, recs, dset.envmaps, dset.train_env_ids)


def curled_finger_pose(hand):
    """Index finger folded over the palm (the palm faces -y)."""
    pose = hand.identity_pose()
    pose.theta[9] = -1.2     # index base bend
    pose.theta[11] = -0.9    # index mid
    pose.theta[12] = -0.5    # index tip
    return pose


def shadow_drop_experiment(hand, pipeline, teacher, light=(0.07, -0.7, 0.55),
                           cam_eye=(0.02, -0.40, -0.18), frame_key="shadow-pose"):
    """Mean marched-image intensity inside the geometric shadow of the curled
    finger, with deep-shadow conditioning on vs off.

    The shadow region is computed analytically from the coarse mesh: palm-face
    pixels whose surface point is occluded toward the light. Returns
    (relative drop, n shadow pixels)."""
    from .raymarch import Camera
    pose = curled_finger_pose(hand)
    fd = pipeline.frame(frame_key, pose)
    camera = Camera.look_at(cam_eye, (0.07, 0.0, 0.0), fov_deg=38, width=56, height=56)
    pipeline.cameras = list(pipeline.cameras) + [camera]
    cam_idx = len(pipeline.cameras) - 1
    light = np.asarray(light, np.float64)

    # analytic shadow mask from the coarse mesh
    o, d = camera.rays()
    ts, fs, _, _ = fd.bvh.raycast_batch(o, d)
    hit = np.isfinite(ts)
    palm = np.zeros_like(hit)
    palm[hit] = np.isin(fs[hit], hand.palm_face_ids)
    pos = o + ts[:, None] * d
    eps = 1e-5 * fd.bvh.scene_scale
    shadow = np.zeros_like(hit)
    idx = np.nonzero(palm)[0]
    if len(idx):
        delta = light - pos[idx]
        dist = np.linalg.norm(delta, axis=1)
        ldir = delta / dist[:, None]
        shadow[idx] = fd.bvh.occluded_batch(pos[idx] + eps * ldir, ldir,
                                            t_min=eps, t_max=dist - 2 * eps)
    mask = shadow.reshape(camera.height, camera.width)

    imgs = {}
    for mode in ("shadow", "ones"):
        payload = pipeline.teacher_payload(teacher, fd, cam_idx, light,
                                           vis_mode=mode, cache=False)
        op = pipeline.render_operator(fd, cam_idx)
        imgs[mode] = op.render_np_from_stacked(payload.data)[..., :3]
    lit = imgs["ones"][mask].mean()
    shadowed = imgs["shadow"][mask].mean()
    drop = (lit - shadowed) / max(lit, 1e-9)
    return drop, int(mask.sum()), imgs
