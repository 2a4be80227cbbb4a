"""Losses, the per-frame rendering pipeline, teacher training on the
synthetic capture, and student distillation from teacher pseudo-ground-truth.

The total loss is lambda_mse * masked MSE + lambda_vgg * a multi-scale
gradient proxy (stand-in for the VGG feature loss; no pretrained network)
+ lambda_neg * the negative-intensity penalty with its decay schedule.
"""

from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tz
from .appearance import StudentModel, TeacherModel
from .bvh import Bvh
from .illum import (DEFAULT_SHININESS, EnvMap, LightRig, build_features,
                    env_to_rig, envmap_dirs, vertex_visibility)
from .imageio import read_pfm, write_pfm, write_png
from .primitives import all_localized_directions, place_primitives, stack_uv
from .raymarch import RenderOperator, deep_shadow, default_step
from .rig import Pose, build_atlas, lbs_skin
from .synth import CaptureDataset, ProceduralHand, opacity_from_sdf
from .tensor import Adam, Tape, Tensor


@dataclass
class LossWeights:
    mse: float = 1.0
    vgg: float = 1.0          # weight of the perceptual proxy
    neg: float = 0.01
    eta_neg: float = 5.0
    t_s: int = 100            # iteration where the negative penalty starts decaying

    def __post_init__(self):
        if min(self.mse, self.vgg, self.neg) < 0:
            raise ValueError("loss weights must be nonnegative")


def gamma_schedule(t: int, eta_neg: float, t_s: int) -> float:
    """Unit weight until t_s, exponential decay afterwards."""
    if t_s <= 0:
        raise ValueError("t_s must be positive")
    return float(np.exp(-eta_neg * max((t - t_s) / t_s, 0.0)))


def loss_neg(payload: Tensor, t: int, eta_neg: float = 5.0, t_s: int = 100) -> Tensor:
    """gamma/(N*S^3) * sum over texels of max(-C, 0)^2 (color channels summed)."""
    gamma = gamma_schedule(t, eta_neg, t_s)
    n_texels = payload.data.size // 3
    neg = tz.max_zero_neg(payload)
    return tz.scale(tz.sum_all(neg * neg), gamma / n_texels)


def perceptual_proxy(rendered: Tensor, gt: Tensor) -> Tensor:
    """Multi-scale L1 on a 3-level pyramid plus L1 on image gradients,
    level weights (1, 0.5, 0.25). Symmetric; zero iff the images agree."""
    total = None
    a, b = rendered, gt
    for weight in (1.0, 0.5, 0.25):
        diff = tz.mean_all(tz.abs_(a - b))
        gx = tz.mean_all(tz.abs_(tz.spatial_diff(a, 2) - tz.spatial_diff(b, 2)))
        gy = tz.mean_all(tz.abs_(tz.spatial_diff(a, 1) - tz.spatial_diff(b, 1)))
        term = tz.scale(diff + gx + gy, weight)
        total = term if total is None else total + term
        if min(a.shape[1] // 2, a.shape[2] // 2) < 2:
            break
        a = tz.resize_bilinear(a, a.shape[1] // 2, a.shape[2] // 2)
        b = tz.resize_bilinear(b, b.shape[1] // 2, b.shape[2] // 2)
    return total


def loss_total(rendered: Tensor, gt: np.ndarray, mask: np.ndarray, payload: Tensor,
               t: int, weights: LossWeights = LossWeights()):
    """Masked image loss against ground truth plus the payload penalty.

    `rendered` is a (3|4, H, W) tensor (alpha row ignored); `gt` is (H, W, 3);
    `mask` is (H, W) in [0, 1]. Returns (loss tensor, float parts)."""
    if rendered.shape[1:] != gt.shape[:2]:
        raise ValueError(f"rendered {rendered.shape} vs gt {gt.shape} size mismatch")
    rgb = tz.slice_channels(rendered, 0, 3) if rendered.shape[0] == 4 else rendered
    m = np.ascontiguousarray(mask, dtype=rgb.data.dtype)[None]
    gt_chw = np.ascontiguousarray(gt.transpose(2, 0, 1), dtype=rgb.data.dtype)
    mask_t = Tensor(m)
    gt_masked = Tensor(gt_chw * m)
    r_masked = rgb * mask_t
    denom = 3.0 * max(float(m.sum()), 1.0)
    diff = r_masked - gt_masked
    mse = tz.scale(tz.sum_all(diff * diff), 1.0 / denom)
    parts = {"mse": mse.item()}
    loss = tz.scale(mse, weights.mse)
    if weights.vgg > 0:
        proxy = perceptual_proxy(r_masked, gt_masked)
        parts["vgg_proxy"] = proxy.item()
        loss = loss + tz.scale(proxy, weights.vgg)
    else:
        parts["vgg_proxy"] = 0.0
    if weights.neg > 0:
        neg = loss_neg(payload, t, weights.eta_neg, weights.t_s)
        parts["neg"] = neg.item()
        loss = loss + tz.scale(neg, weights.neg)
    else:
        parts["neg"] = 0.0
    parts["gamma"] = gamma_schedule(t, weights.eta_neg, weights.t_s)
    parts["total"] = loss.item()
    return loss, parts


# ---------------------------------------------------------------------------
# per-frame scene pipeline with caching


@dataclass
class FrameData:
    pose: Pose
    mesh: object
    pset: object
    opacity: np.ndarray
    bvh: Bvh
    ops: dict = field(default_factory=dict)          # camera idx -> RenderOperator
    view_stacks: dict = field(default_factory=dict)  # camera idx -> (3S, wS, wS)
    light_stacks: dict = field(default_factory=dict)  # light key -> (F_l, V)
    vis_masks: dict = field(default_factory=dict)    # (rows, cols) -> (V, M) bool
    feature_cache: dict = field(default_factory=dict)


class FramePipeline:
    """Everything derived from (hand, pose): primitives, opacity, shadows,
    render operators, stacked decoder inputs, and illumination features."""

    def __init__(self, hand: ProceduralHand, cameras, w: int = 8, S: int = 8,
                 atlas_res: int = 64, feature_res: int = 32,
                 shell: float = 0.3, lateral_overlap: float = 1.0,
                 sharpness: float = 80.0, shininess=DEFAULT_SHININESS,
                 step: float | None = None, env_radius: float = 10.0,
                 atlas=None, feature_atlas=None):
        self.hand = hand
        self.cameras = list(cameras)
        self.w = w
        self.S = S
        self.shell = shell
        self.lateral_overlap = lateral_overlap
        self.sharpness = sharpness
        self.shininess = tuple(shininess)
        self.env_radius = env_radius
        self.atlas = atlas if atlas is not None else build_atlas(hand.rest_mesh, atlas_res)
        if feature_atlas is not None:
            self.feature_atlas = feature_atlas
        else:
            self.feature_atlas = (self.atlas if feature_res == self.atlas.resolution
                                  else build_atlas(hand.rest_mesh, feature_res))
        self.step = step
        self._frames: dict[int, FrameData] = {}

    def frame(self, key: int, pose: Pose) -> FrameData:
        fd = self._frames.get(key)
        if fd is None:
            mesh = lbs_skin(self.hand.skeleton, self.hand.rest_mesh, pose)
            pset = place_primitives(mesh, self.atlas, self.w, self.shell,
                                    self.lateral_overlap, self.S)
            opacity = opacity_from_sdf(self.hand, pose, pset, self.sharpness)
            fd = FrameData(pose, mesh, pset, opacity, Bvh(mesh))
            if self.step is None:
                self.step = default_step(pset)
            self._frames[key] = fd
        return fd

    def drop_frame(self, key: int) -> None:
        self._frames.pop(key, None)

    def render_operator(self, fd: FrameData, cam_idx: int) -> RenderOperator:
        if cam_idx not in fd.ops:
            fd.ops[cam_idx] = RenderOperator(fd.pset, fd.opacity,
                                             self.cameras[cam_idx], self.step)
        return fd.ops[cam_idx]

    def view_stack(self, fd: FrameData, cam_idx: int) -> np.ndarray:
        if cam_idx not in fd.view_stacks:
            dirs, _ = all_localized_directions(fd.pset, self.cameras[cam_idx].position)
            payload = np.ascontiguousarray(dirs.transpose(0, 4, 1, 2, 3))
            fd.view_stacks[cam_idx] = stack_uv(fd.pset, payload).astype(np.float32)
        return fd.view_stacks[cam_idx]

    def light_stack(self, fd: FrameData, light_pos, shadows: bool = True,
                    cache: bool = True):
        """(F_l, V) stacked inputs for one point light; V == 1 when shadows
        are disabled (the teacher's w/o-visibility ablation)."""
        key = (tuple(np.round(np.asarray(light_pos, np.float64), 9)), shadows)
        if key in fd.light_stacks:
            return fd.light_stacks[key]
        dirs, _ = all_localized_directions(fd.pset, np.asarray(light_pos, np.float64))
        fl = stack_uv(fd.pset, np.ascontiguousarray(dirs.transpose(0, 4, 1, 2, 3)))
        fl = fl.astype(np.float32)
        if shadows:
            sv = deep_shadow(fd.pset, fd.opacity, light_pos)
            v = stack_uv(fd.pset, sv.values[:, None]).astype(np.float32)
        else:
            S, w = self.S, self.w
            v = np.ones((S, w * S, w * S), np.float32)
        out = (fl, v)
        if cache:
            fd.light_stacks[key] = out
        return out

    def visibility_mask(self, fd: FrameData, rows: int, cols: int) -> np.ndarray:
        key = (rows, cols)
        if key not in fd.vis_masks:
            dirs = envmap_dirs((rows, cols))
            fd.vis_masks[key] = vertex_visibility(fd.mesh, fd.bvh, dirs)
        return fd.vis_masks[key]

    def features_chw(self, fd: FrameData, cam_idx: int, env: EnvMap, env_key,
                     with_visibility: bool = True) -> np.ndarray:
        key = (cam_idx, env_key, with_visibility)
        if key not in fd.feature_cache:
            vis = (self.visibility_mask(fd, env.rows, env.cols)
                   if with_visibility else None)
            fm = build_features(fd.mesh, self.feature_atlas, env,
                                self.cameras[cam_idx].position, self.shininess,
                                with_visibility=with_visibility, bvh=fd.bvh,
                                visibility=vis)
            fd.feature_cache[key] = fm.chw.astype(np.float32)
        return fd.feature_cache[key]

    def teacher_payload(self, model: TeacherModel, fd: FrameData, cam_idx: int,
                        light_pos, vis_mode: str = "shadow", cache: bool = True):
        fl, v = self.light_stack(fd, light_pos, shadows=vis_mode == "shadow",
                                 cache=cache)
        fv = self.view_stack(fd, cam_idx)
        return model.forward(fv, fl, v, fd.pose.theta)


# ---------------------------------------------------------------------------
# teacher training


@dataclass
class TrainResult:
    checkpoint: Path
    log_rows: list[dict]
    final_loss: float


def _write_log(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def _abort_dump(out_dir: Path, step: int, parts: dict, extra: dict) -> Path:
    dump = out_dir / f"diagnostics_step{step}.json"
    dump.write_text(json.dumps({"step": step, "parts": parts, **extra}, default=str))
    return dump


def train_teacher(capture: CaptureDataset, pipeline: FramePipeline,
                  model: TeacherModel, steps: int, out_dir,
                  weights: LossWeights | None = None, lr: float = 0.001,
                  batch_size: int = 1, vis_mode: str = "shadow",
                  records=None, seed: int = 0, checkpoint_every: int = 0,
                  log_every: int = 10, start_step: int = 0) -> TrainResult:
    """Per step: skin, place primitives, build per-light inputs (localized
    directions + deep shadow), run the teacher per light, aggregate by light
    intensity, render through the cached operator, apply the losses, Adam.

    With start_step > 0 the optimizer state is restored from the checkpoint
    directory, so a resumed run reproduces an uninterrupted one exactly."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = weights or LossWeights(t_s=max(1, steps // 5))
    recs = list(records if records is not None else capture.partial_records())
    if not recs:
        raise ValueError("no partially-lit records to train on")
    opt = Adam(model.params(), lr=lr)
    ckpt = out_dir / "teacher.plt"
    opt_path = out_dir / "teacher.opt.plt"
    if start_step > 0:
        opt.load_state_arrays(tz.load_checkpoint(opt_path))
    rows: list[dict] = []
    t0 = time.time()
    final = np.nan
    for step in range(start_step + 1, steps + 1):
        rng = np.random.default_rng((seed, step))
        opt.zero_grad()
        parts_acc: dict[str, float] = {}
        for _ in range(batch_size):
            rec = recs[rng.integers(len(recs))]
            fd = pipeline.frame(rec.frame, capture.poses[rec.frame])
            gt = capture.load_image(rec)
            mask = capture.load_mask(rec)
            op = pipeline.render_operator(fd, rec.camera)
            with Tape():
                payload = _teacher_group_payload(capture, pipeline, model, fd, rec, vis_mode)
                img = op.apply(payload)
                loss, parts = loss_total(img, gt, mask, payload, step, weights)
                if not np.isfinite(parts["total"]):
                    dump = _abort_dump(out_dir, step, parts,
                                       {"frame": rec.frame, "camera": rec.camera})
                    raise FloatingPointError(
                        f"non-finite loss at step {step}; diagnostics: {dump}")
                loss.backward()
            for k, v in parts.items():
                parts_acc[k] = parts_acc.get(k, 0.0) + v / batch_size
        opt.step()
        final = parts_acc["total"]
        if step % log_every == 0 or step == steps:
            rows.append({"iteration": step, **{k: f"{v:.6g}" for k, v in parts_acc.items()},
                         "wall_clock_s": f"{time.time() - t0:.2f}"})
        if checkpoint_every and step % checkpoint_every == 0:
            model.save(ckpt)
            tz.save_checkpoint(opt_path, opt.state_arrays())
    model.save(ckpt)
    tz.save_checkpoint(opt_path, opt.state_arrays())
    _write_log(out_dir / "teacher_log.csv", rows)
    return TrainResult(ckpt, rows, final)


def _teacher_group_payload(capture, pipeline, model, fd, rec, vis_mode):
    """Eq. 2 aggregation: sum_i b_i * C_i over the frame's light group."""
    total = None
    for lid, b in zip(rec.light_ids, rec.intensities):
        pos = capture.rig.positions[lid]
        payload = pipeline.teacher_payload(model, fd, rec.camera, pos, vis_mode)
        wchan = np.repeat(np.asarray(b, np.float64), pipeline.S)[:, None, None]
        term = payload * Tensor(wchan.astype(payload.data.dtype))
        total = term if total is None else total + term
    return total


def teacher_eval_mse(capture: CaptureDataset, pipeline: FramePipeline,
                     model: TeacherModel, records, vis_mode: str = "shadow") -> float:
    """Masked MSE of aggregated teacher renders against capture ground truth."""
    total = 0.0
    for rec in records:
        fd = pipeline.frame(rec.frame, capture.poses[rec.frame])
        op = pipeline.render_operator(fd, rec.camera)
        payload = _teacher_group_payload(capture, pipeline, model, fd, rec, vis_mode)
        img = op.render_np_from_stacked(payload.data)
        gt = capture.load_image(rec)
        mask = capture.load_mask(rec)[..., None]
        denom = 3.0 * max(mask.sum(), 1.0)
        total += float((((img[..., :3] - gt) * mask) ** 2).sum() / denom)
    return total / len(records)


# ---------------------------------------------------------------------------
# student distillation


@dataclass
class DistillRecord:
    frame: int
    camera: int
    envmap: str               # envmap id within the split
    image: str


@dataclass
class DistillSet:
    root: Path
    records: list[DistillRecord]
    envmaps: dict[str, EnvMap]
    train_env_ids: list[str]

    def load_image(self, rec: DistillRecord) -> np.ndarray:
        return read_pfm(self.root / rec.image)


def build_distill_set(capture: CaptureDataset, pipeline: FramePipeline,
                      teacher: TeacherModel, frames, camera_ids, envmaps: dict,
                      test_env_ids, out_dir, vis_mode: str = "shadow",
                      with_eval_set: bool = False):
    """Render teacher pseudo-ground-truth under each training envmap.

    Per (frame, camera) the teacher runs once per envmap texel (the OLAT
    payloads are shared across envmaps by light-transport linearity). With
    with_eval_set=True, pseudo-GT for the held-out test envmaps is rendered
    in the same pass and returned as a second, separate set used only for
    evaluation (the training set never references a test envmap)."""
    out = Path(out_dir)
    (out / "pseudo").mkdir(parents=True, exist_ok=True)
    test_ids = set(test_env_ids)
    train_ids = [k for k in envmaps if k not in test_ids]
    if not train_ids:
        raise ValueError("no training envmaps after removing the test split")
    render_ids = list(envmaps) if with_eval_set else train_ids
    rig = env_to_rig(envmaps[train_ids[0]], pipeline.env_radius)
    weights = {k: envmaps[k].flat() for k in render_ids}
    records = []
    eval_records = []
    for frame in frames:
        fd = pipeline.frame(frame, capture.poses[frame])
        sums = {(k, cam): None for k in render_ids for cam in camera_ids}
        for m in range(rig.count):
            # per-light inputs shared across cameras; dropped after the frame
            for cam in camera_ids:
                payload = pipeline.teacher_payload(teacher, fd, cam,
                                                   rig.positions[m], vis_mode,
                                                   cache=True).data
                for k in render_ids:
                    b = weights[k][m]
                    if not b.any():
                        continue
                    wchan = np.repeat(b, pipeline.S)[:, None, None]
                    contrib = payload * wchan
                    prev = sums[(k, cam)]
                    sums[(k, cam)] = contrib if prev is None else prev + contrib
        for cam in camera_ids:
            op = pipeline.render_operator(fd, cam)
            shape = (3 * pipeline.S, pipeline.w * pipeline.S, pipeline.w * pipeline.S)
            for k in render_ids:
                stacked = sums[(k, cam)]
                img = op.render_np_from_stacked(
                    stacked if stacked is not None else np.zeros(shape))
                name = f"pseudo/f{frame:04d}_c{cam:02d}_{k}.pfm"
                write_pfm(out / name, img[..., :3])
                rec = DistillRecord(frame, cam, k, name)
                (eval_records if k in test_ids else records).append(rec)
        fd.light_stacks.clear()
    dset = DistillSet(out, records, envmaps, train_ids)
    with open(out / "distill_manifest.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(vars(r)) + "\n")
    if with_eval_set:
        return dset, DistillSet(out, eval_records, envmaps, list(envmaps))
    return dset


def train_student(capture: CaptureDataset, pipeline: FramePipeline,
                  model: StudentModel, dset: DistillSet, steps: int, out_dir,
                  weights: LossWeights | None = None, lr: float = 0.001,
                  batch_size: int = 1, with_visibility: bool = True,
                  use_specular: bool = True, seed: int = 0,
                  log_every: int = 10, start_step: int = 0) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = weights or LossWeights(t_s=max(1, steps // 5))
    test_ids = set(dset.envmaps) - set(dset.train_env_ids)
    for rec in dset.records:
        if rec.envmap in test_ids:
            raise ValueError(f"distill set references test envmap {rec.envmap!r}")
    opt = Adam(model.params(), lr=lr)
    ckpt = out_dir / "student.plt"
    opt_path = out_dir / "student.opt.plt"
    if start_step > 0:
        opt.load_state_arrays(tz.load_checkpoint(opt_path))
    rows = []
    t0 = time.time()
    final = np.nan
    for step in range(start_step + 1, steps + 1):
        rng = np.random.default_rng((seed, step, 7))
        opt.zero_grad()
        parts_acc: dict[str, float] = {}
        for _ in range(batch_size):
            rec = dset.records[rng.integers(len(dset.records))]
            fd = pipeline.frame(rec.frame, capture.poses[rec.frame])
            feats = student_features(pipeline, fd, rec, dset, with_visibility,
                                     use_specular)
            gt = dset.load_image(rec)
            op = pipeline.render_operator(fd, rec.camera)
            mask = op.alpha > 0.5
            with Tape():
                payload = model.forward(feats, fd.pose.theta)
                img = op.apply(payload)
                loss, parts = loss_total(img, gt, mask, payload, step, weights)
                if not np.isfinite(parts["total"]):
                    dump = _abort_dump(out_dir, step, parts, {"record": vars(rec)})
                    raise FloatingPointError(
                        f"non-finite loss at step {step}; diagnostics: {dump}")
                loss.backward()
            for k, v in parts.items():
                parts_acc[k] = parts_acc.get(k, 0.0) + v / batch_size
        opt.step()
        final = parts_acc["total"]
        if step % log_every == 0 or step == steps:
            rows.append({"iteration": step, **{k: f"{v:.6g}" for k, v in parts_acc.items()},
                         "wall_clock_s": f"{time.time() - t0:.2f}"})
    model.save(ckpt)
    tz.save_checkpoint(opt_path, opt.state_arrays())
    _write_log(out_dir / "student_log.csv", rows)
    return TrainResult(ckpt, rows, final)


def student_features(pipeline: FramePipeline, fd: FrameData, rec: DistillRecord,
                     dset: DistillSet, with_visibility: bool, use_specular: bool):
    feats = pipeline.features_chw(fd, rec.camera, dset.envmaps[rec.envmap],
                                  rec.envmap, with_visibility)
    if not use_specular:
        feats = feats.copy()
        feats[3:] = 0.0  # drop the specular channels (w/o-specular ablation)
    return feats


def student_eval_mse(capture: CaptureDataset, pipeline: FramePipeline,
                     model: StudentModel, dset: DistillSet, records,
                     with_visibility: bool = True, use_specular: bool = True) -> float:
    total = 0.0
    for rec in records:
        fd = pipeline.frame(rec.frame, capture.poses[rec.frame])
        feats = student_features(pipeline, fd, rec, dset, with_visibility, use_specular)
        payload = model.forward(feats, fd.pose.theta)
        op = pipeline.render_operator(fd, rec.camera)
        img = op.render_np_from_stacked(payload.data)
        gt = dset.load_image(rec)
        mask = (op.alpha > 0.5)[..., None]
        denom = 3.0 * max(mask.sum(), 1.0)
        total += float((((img[..., :3] - gt) * mask) ** 2).sum() / denom)
    return total / len(records)


# ---------------------------------------------------------------------------
# pose importance sampling


def root_normalized_vertices(hand: ProceduralHand, pose: Pose,
                             stride: int = 50) -> np.ndarray:
    """Subset of skinned vertex positions with the root transform removed."""
    normalized = Pose(pose.theta, np.array([1.0, 0, 0, 0]), np.zeros(3))
    mesh = lbs_skin(hand.skeleton, hand.rest_mesh, normalized)
    return mesh.vertices[::stride].reshape(-1)


def pose_importance_sample(poses: list[Pose], count: int, hand: ProceduralHand,
                           rng: np.random.Generator, eps: float = 1e-8,
                           stride: int = 50) -> np.ndarray:
    """Sample pose indices with probability inversely proportional to a
    Gaussian-KDE density over root-normalized vertex vectors."""
    x = np.stack([root_normalized_vertices(hand, p, stride) for p in poses])
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    pos = d2[d2 > 0]
    h2 = float(np.median(pos)) if len(pos) else 1.0
    density = np.exp(-d2 / (2 * h2)).mean(axis=1)
    prob = 1.0 / (density + eps)
    prob = prob / prob.sum()
    n = len(poses)
    if count > n:
        warnings.warn(f"requested {count} samples from {n} poses; "
                      "sampling with replacement")
        return rng.choice(n, size=count, replace=True, p=prob)
    return rng.choice(n, size=count, replace=False, p=prob)
