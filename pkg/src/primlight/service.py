"""Local render service behind the interactive viewer.

One WebSocket connection = one render session holding pose, camera, and
illumination state. Control messages are JSON; frames come back as binary
messages: a 16-byte header (u32 little-endian width, height, format tag 1
= RGB8, request id) followed by 8-bit sRGB rows. Malformed messages yield
an {"error": ...} reply and leave the connection open.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse

from .appearance import StudentModel, TeacherModel
from .illum import EnvMap, envmap_dirs
from .imageio import tonemap
from .raymarch import Camera, VolumeTexture, march
from .rig import Pose
from .synth import generate_hand, load_capture, random_envmap
from .training import FramePipeline

FRAME_FORMAT_RGB8 = 1


def pack_frame(img: np.ndarray, request_id: int, ev: float = 0.0) -> bytes:
    """Binary frame: header (width, height, format, request id) + sRGB rows."""
    rgb = tonemap(img[..., :3], ev=ev)
    h, w = rgb.shape[:2]
    return struct.pack("<IIII", w, h, FRAME_FORMAT_RGB8, request_id) + rgb.tobytes()


@dataclass
class Orbit:
    azimuth: float = 0.6
    elevation: float = 0.45
    distance: float = 0.38
    fov_deg: float = 32.0
    target: tuple[float, float, float] = (0.07, 0.0, 0.0)
    width: int = 64
    height: int = 64

    def camera(self) -> Camera:
        t = np.asarray(self.target)
        eye = t + self.distance * np.array([
            np.sin(self.azimuth) * np.cos(self.elevation),
            np.sin(self.elevation),
            np.cos(self.azimuth) * np.cos(self.elevation)])
        return Camera.look_at(eye, t, fov_deg=self.fov_deg,
                              width=self.width, height=self.height)


class RenderContext:
    """Shared, read-only state: hand, atlases, checkpoints. Each session
    builds its own FramePipeline on top (model parameters are shared)."""

    def __init__(self, capture_dir, student_ckpt, teacher_ckpt=None,
                 envmap_dir=None):
        self.capture = load_capture(capture_dir)
        self.hand = generate_hand(seed=self.capture.hand_seed)
        self.student = StudentModel.load(student_ckpt) if student_ckpt else None
        self.teacher = TeacherModel.load(teacher_ckpt) if teacher_ckpt else None
        cfg = self.student.cfg if self.student else self.teacher.cfg
        self.w, self.S = cfg.w, cfg.S
        self.feature_res = self.student.cfg.feature_res if self.student else 32
        shared = FramePipeline(self.hand, [], w=self.w, S=self.S,
                               feature_res=self.feature_res)
        self._atlas = shared.atlas
        self._feature_atlas = shared.feature_atlas
        self.env_rows, self.env_cols = 16, 32
        self.envmap_dir = Path(envmap_dir) if envmap_dir else None

    def new_pipeline(self) -> FramePipeline:
        return FramePipeline(self.hand, [], w=self.w, S=self.S,
                             atlas=self._atlas, feature_atlas=self._feature_atlas)

    def manifest(self) -> dict:
        groups = [{"name": j.name, "indices": [idx for idx, _ in j.dofs],
                   "axes": [ax for _, ax in j.dofs]}
                  for j in self.hand.skeleton.joints if j.dofs]
        return {
            "pose_dim": self.hand.skeleton.pose_dim,
            "theta_lo": self.hand.theta_lo.tolist(),
            "theta_hi": self.hand.theta_hi.tolist(),
            "theta_groups": groups,
            "modes": (["envmap"] if self.student else [])
                     + (["point", "dir", "olat"] if self.teacher else []),
            "envmaps": sorted(p.name for p in self.envmap_dir.glob("*.pfm"))
                       if self.envmap_dir else [],
            "scale": {"w": self.w, "S": self.S},
            "image_size": [64, 64],
        }

    def load_envmap(self, value) -> EnvMap:
        if isinstance(value, dict) and "seed" in value:
            return random_envmap(self.env_rows, self.env_cols,
                                 np.random.default_rng(int(value["seed"])))
        if self.envmap_dir is None:
            raise ValueError("no envmap directory configured; use {'seed': n}")
        path = self.envmap_dir / str(value)
        if not path.exists() or path.suffix not in (".pfm", ".hdr"):
            raise ValueError(f"unknown envmap {value!r}")
        if path.suffix == ".hdr":
            return EnvMap.from_hdr(path, self.env_rows, self.env_cols)
        return EnvMap.from_pfm(path, self.env_rows, self.env_cols)


class Session:
    """Per-connection scene state plus the render entry point. Sessions are
    isolated: each owns its pipeline caches; only model parameters (frozen)
    and the precomputed atlases are shared."""

    MAX_POSE_CACHE = 4

    def __init__(self, ctx: RenderContext):
        self.ctx = ctx
        self.pipeline = ctx.new_pipeline()
        self.theta = np.zeros(ctx.hand.skeleton.pose_dim)
        self.orbit = Orbit()
        self.light_mode = "dir"
        self.light_value = [0.3, 1.0, 0.3]
        self.envmap: EnvMap | None = None
        self.last_stats: dict = {}
        self._pose_keys: list = []

    def handle(self, message: dict):
        """Apply one control op; returns ("json", doc) or ("frame", img, id)."""
        op = message.get("op")
        if op == "set_pose":
            theta = np.asarray(message["theta"], dtype=np.float64)
            if theta.shape != (len(self.theta),):
                raise ValueError(f"theta must have {len(self.theta)} entries")
            self.theta = theta
            return "json", {"ok": "set_pose"}
        if op == "set_camera":
            for k in ("azimuth", "elevation", "distance", "fov_deg", "width", "height"):
                if k in message:
                    setattr(self.orbit, k, type(getattr(self.orbit, k))(message[k]))
            if "target" in message:
                self.orbit.target = tuple(message["target"])
            self._invalidate_camera_caches()
            return "json", {"ok": "set_camera"}
        if op == "set_light":
            mode = message.get("mode")
            if mode not in ("point", "dir", "envmap", "olat"):
                raise ValueError(f"unknown light mode {mode!r}")
            if mode == "envmap":
                self.envmap = self.ctx.load_envmap(message.get("value"))
            self.light_mode = mode
            self.light_value = message.get("value")
            return "json", {"ok": "set_light"}
        if op == "frame":
            img = self.render()
            return "frame", img, int(message.get("id", 0))
        if op == "stats":
            return "json", self.last_stats or {"render_ms": None, "stage_ms": {}}
        raise ValueError(f"unknown op {op!r}")

    def _invalidate_camera_caches(self):
        for fd in self.pipeline._frames.values():
            fd.view_stacks.clear()
            fd.ops.clear()
            fd.feature_cache.clear()

    def _frame_data(self):
        key = self.theta.round(6).tobytes()
        if key not in self.pipeline._frames:
            if len(self._pose_keys) >= self.MAX_POSE_CACHE:
                self.pipeline.drop_frame(self._pose_keys.pop(0))
            self._pose_keys.append(key)
        pose = Pose(self.theta, np.array([1.0, 0, 0, 0]), np.zeros(3))
        return self.pipeline.frame(key, pose)

    def render(self) -> np.ndarray:
        ctx = self.ctx
        t_start = time.perf_counter()
        camera = self.orbit.camera()
        self.pipeline.cameras = [camera]
        stage_ms: dict[str, float] = {}
        fd = self._frame_data()
        if self.light_mode == "envmap":
            if ctx.student is None:
                raise ValueError("envmap mode needs a student checkpoint; "
                                 "run `primlight distill-student` first")
            env = self.envmap or random_envmap(ctx.env_rows, ctx.env_cols,
                                               np.random.default_rng(0))
            img, stage_ms = student_render_timed(self.pipeline, ctx.student, fd,
                                                 0, camera, env)
        else:
            if ctx.teacher is None:
                raise ValueError("point/dir/olat modes need a teacher checkpoint")
            pos = self._light_position()
            t0 = time.perf_counter()
            payload = self.pipeline.teacher_payload(ctx.teacher, fd, 0, pos,
                                                    cache=False)
            stage_ms["texture_decode"] = (time.perf_counter() - t0) * 1e3
            t0 = time.perf_counter()
            img = _march_stacked(self.pipeline, fd, payload.data, camera)
            stage_ms["ray_march"] = (time.perf_counter() - t0) * 1e3
        self.last_stats = {"render_ms": (time.perf_counter() - t_start) * 1e3,
                           "stage_ms": stage_ms}
        return img

    def _light_position(self) -> np.ndarray:
        if self.light_mode == "point":
            return np.asarray(self.light_value, np.float64)
        if self.light_mode == "dir":
            d = np.asarray(self.light_value, np.float64)
            return d / np.linalg.norm(d) * 50.0
        if self.light_mode == "olat":
            return self.ctx.capture.rig.positions[int(self.light_value)]
        raise ValueError(self.light_mode)


def _march_stacked(pipeline, fd, stacked, camera) -> np.ndarray:
    from .primitives import unstack_uv
    color = unstack_uv(fd.pset, np.asarray(stacked, np.float64))
    return march((fd.pset, VolumeTexture(color, fd.opacity)), camera, pipeline.step)


def student_render_timed(pipeline: FramePipeline, student: StudentModel, fd,
                         cam_idx: int, camera: Camera, env: EnvMap):
    """Instrumented student inference; stage names mirror the runtime
    breakdown report (joint decode, ray tracing, resampling, texture decode,
    ray marching)."""
    stage_ms = {}
    t0 = time.perf_counter()
    joint = student.joint.forward(fd.pose.theta)
    stage_ms["joint_decode"] = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    vis = pipeline.visibility_mask(fd, env.rows, env.cols)
    stage_ms["ray_tracing"] = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    from .illum import build_features
    fm = build_features(fd.mesh, pipeline.feature_atlas, env, camera.position,
                        pipeline.shininess, with_visibility=True, bvh=fd.bvh,
                        visibility=vis)
    feats = fm.chw.astype(np.float32)
    stage_ms["resampling"] = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    payload = student.forward(feats, fd.pose.theta, joint_out=joint)
    stage_ms["texture_decode"] = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    img = _march_stacked(pipeline, fd, payload.data, camera)
    stage_ms["ray_march"] = (time.perf_counter() - t0) * 1e3
    return img, stage_ms


def create_app(capture_dir, student_ckpt=None, teacher_ckpt=None,
               envmap_dir=None, static_dir=None):
    ctx = RenderContext(capture_dir, student_ckpt, teacher_ckpt, envmap_dir)
    app = FastAPI(title="primlight render service")
    app.state.ctx = ctx

    @app.get("/manifest")
    def manifest():
        return JSONResponse(ctx.manifest())

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        session = Session(ctx)
        while True:
            try:
                raw = await ws.receive_text()
            except WebSocketDisconnect:
                break
            try:
                result = session.handle(json.loads(raw))
            except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
                await ws.send_text(json.dumps({"error": str(exc)}))
                continue
            if result[0] == "json":
                await ws.send_text(json.dumps(result[1]))
            else:
                _, img, req_id = result
                await ws.send_bytes(pack_frame(img, req_id))

    if static_dir is not None and Path(static_dir).exists():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="viewer")
    return app
