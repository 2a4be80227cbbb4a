"""Teacher (OLAT) and student (envmap) texture decoders.

Channel plans follow the full-scale defaults at S=16: teacher U-Net encoder
(7S, 64, 64, 64) / decoder (128, 128, 128, 4S) with skip connections and a
64-channel joint encoding concatenated at the bottleneck; student
(76, 256, 256, 128, 128, 64, 64, 32, 3S), fully convolutional. At other
voxel resolutions the hidden widths scale by S/16 while the joint encoder
keeps its (16, 64) plan, so the student input stays 3 + 3*|shininess| + 64
channels. Hidden activation is leaky ReLU (slope 0.2), recorded in the
manifest. Down/upsampling is bilinear (factor 2 per stage).

Teacher head: C = sigmoid(shadow) * (relu(lam_s * T) + lam_b), the S shadow
channels gating the three color channels of their depth slice. Student
head: C = relu(lam_s * T) + lam_b.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tz
from .tensor import Tensor

LAMBDA_S = 25.0
LAMBDA_B = 100.0
ACT_SLOPE = 0.2
JOINT_PLAN = (16, 64)


def _scaled(widths: tuple[int, ...], s: int) -> tuple[int, ...]:
    return tuple(max(8, int(round(w * s / 16))) for w in widths)


@dataclass
class TeacherConfig:
    S: int = 16
    w: int = 64
    enc_channels: tuple[int, ...] = (64, 64, 64, 64)
    dec_channels: tuple[int, ...] = (128, 128, 128)   # final 4S layer implied
    theta_dim: int = 25
    lam_s: float = LAMBDA_S
    lam_b: float = LAMBDA_B
    act_slope: float = ACT_SLOPE
    joint_plan: tuple[int, int] = JOINT_PLAN

    def __post_init__(self):
        self.stages = len(self.enc_channels)
        if len(self.dec_channels) != self.stages - 1:
            raise ValueError("decoder needs stages-1 hidden widths plus the 4S output layer")
        if (self.w * self.S) % (2 ** self.stages) != 0:
            raise ValueError(f"map size {self.w * self.S} not divisible by 2^{self.stages}")

    @property
    def in_channels(self) -> int:
        return 7 * self.S  # 3 view-dir + 3 light-dir + 1 visibility, depth-stacked

    @property
    def out_channels(self) -> int:
        return 4 * self.S  # 3S texture + S shadow logits

    @property
    def map_size(self) -> int:
        return self.w * self.S

    @property
    def bottleneck_size(self) -> int:
        return self.map_size // (2 ** self.stages)

    @classmethod
    def paper(cls) -> "TeacherConfig":
        return cls()

    @classmethod
    def desk(cls, S: int = 8, w: int = 8) -> "TeacherConfig":
        return cls(S=S, w=w, enc_channels=_scaled((64,) * 4, S),
                   dec_channels=_scaled((128,) * 3, S))

    @classmethod
    def tiny(cls) -> "TeacherConfig":
        return cls(S=2, w=2, enc_channels=(8, 8), dec_channels=(8,))


@dataclass
class StudentConfig:
    S: int = 16
    w: int = 64
    feature_res: int = 128
    hidden: tuple[int, ...] = (256, 256, 128, 128, 64, 64, 32)
    n_shininess: int = 3
    theta_dim: int = 25
    lam_s: float = LAMBDA_S
    lam_b: float = LAMBDA_B
    act_slope: float = ACT_SLOPE
    joint_channels: int = 64
    joint_plan: tuple[int, int] = JOINT_PLAN

    def __post_init__(self):
        ratio = (self.w * self.S) // self.feature_res
        if self.feature_res * ratio != self.w * self.S or ratio & (ratio - 1):
            raise ValueError("w*S must be feature_res times a power of two")
        self.n_up = int(np.log2(ratio))
        if self.n_up > len(self.hidden):
            raise ValueError("more upsampling stages than layers")

    @property
    def in_channels(self) -> int:
        return 3 + 3 * self.n_shininess + self.joint_channels

    @property
    def out_channels(self) -> int:
        return 3 * self.S

    @classmethod
    def paper(cls) -> "StudentConfig":
        return cls()

    @classmethod
    def desk(cls, S: int = 8, w: int = 8, feature_res: int = 32) -> "StudentConfig":
        return cls(S=S, w=w, feature_res=feature_res,
                   hidden=_scaled((256, 256, 128, 128, 64, 64, 32), S))

    @classmethod
    def tiny(cls) -> "StudentConfig":
        return cls(S=2, w=2, feature_res=4, hidden=(8, 8))


# ---------------------------------------------------------------------------
# building blocks


def _conv_params(rng, name: str, c_in: int, c_out: int, dtype, slope: float):
    w = Tensor(tz.kaiming_uniform(rng, (c_out, c_in, 3, 3), fan_in=c_in * 9,
                                  slope=slope).astype(dtype),
               requires_grad=True, name=f"{name}.w")
    b = Tensor(np.zeros((c_out, 1, 1), dtype=dtype), requires_grad=True, name=f"{name}.b")
    return w, b


def _conv(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return tz.conv2d(x, w, stride=1, padding=1) + b


class JointEncoder:
    """Tile the pose vector across the grid, then a 2-layer CNN (16, 64)."""

    def __init__(self, theta_dim: int, out_hw: int, plan=JOINT_PLAN,
                 act_slope: float = ACT_SLOPE, rng=None, dtype=np.float32,
                 prefix: str = "joint"):
        rng = rng or np.random.default_rng(0)
        self.theta_dim = theta_dim
        self.out_hw = out_hw
        self.act_slope = act_slope
        hidden, out = plan
        self.w1, self.b1 = _conv_params(rng, f"{prefix}.c0", theta_dim, hidden, dtype, act_slope)
        self.w2, self.b2 = _conv_params(rng, f"{prefix}.c1", hidden, out, dtype, act_slope)

    def params(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.w1, self.b1, self.w2, self.b2)}

    def forward(self, theta: np.ndarray) -> Tensor:
        theta = np.asarray(theta)
        if theta.shape != (self.theta_dim,):
            raise ValueError(f"pose has dim {theta.shape}, encoder expects {self.theta_dim}")
        tiled = tz.tile_spatial(Tensor(theta.astype(self.w1.data.dtype)),
                                self.out_hw, self.out_hw)
        h = tz.leaky_relu(_conv(tiled, self.w1, self.b1), self.act_slope)
        return _conv(h, self.w2, self.b2)


def _down2(x: Tensor) -> Tensor:
    return tz.resize_bilinear(x, x.shape[1] // 2, x.shape[2] // 2)


def _up2(x: Tensor) -> Tensor:
    return tz.resize_bilinear(x, x.shape[1] * 2, x.shape[2] * 2)


class TeacherModel:
    """U-Net from stacked per-light inputs to an OLAT texture payload."""

    def __init__(self, cfg: TeacherConfig, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.joint = JointEncoder(cfg.theta_dim, cfg.bottleneck_size, cfg.joint_plan,
                                  cfg.act_slope, rng, dtype, prefix="jt")
        self.enc: list[tuple[Tensor, Tensor]] = []
        c = cfg.in_channels
        for i, width in enumerate(cfg.enc_channels):
            self.enc.append(_conv_params(rng, f"enc{i}", c, width, dtype, cfg.act_slope))
            c = width
        self.dec: list[tuple[Tensor, Tensor]] = []
        c = cfg.enc_channels[-1] + cfg.joint_plan[1]      # bottleneck + joint features
        dec_out = list(cfg.dec_channels) + [cfg.out_channels]
        for i, width in enumerate(dec_out):
            skip = cfg.enc_channels[-1 - i] if i < cfg.stages - 1 else 0
            self.dec.append(_conv_params(rng, f"dec{i}", c + skip, width, dtype, cfg.act_slope))
            c = width

    def params(self) -> dict[str, Tensor]:
        out = dict(self.joint.params())
        for w, b in self.enc + self.dec:
            out[w.name] = w
            out[b.name] = b
        return out

    def forward(self, view_dirs: np.ndarray, light_dirs: np.ndarray,
                visibility: np.ndarray, theta: np.ndarray) -> Tensor:
        """Inputs are UV-stacked maps: view/light dirs (3S, wS, wS), visibility
        (S, wS, wS). Returns the gated OLAT payload (3S, wS, wS)."""
        cfg = self.cfg
        dtype = self.enc[0][0].data.dtype
        x = np.concatenate([view_dirs, light_dirs, visibility], axis=0).astype(dtype)
        if x.shape != (cfg.in_channels, cfg.map_size, cfg.map_size):
            raise ValueError(f"teacher input shape {x.shape} != "
                             f"{(cfg.in_channels, cfg.map_size, cfg.map_size)}")
        h = Tensor(x)
        skips = []
        for w, b in self.enc:
            h = tz.leaky_relu(_conv(h, w, b), cfg.act_slope)
            skips.append(h)
            h = _down2(h)
        h = tz.concat([h, self.joint.forward(theta)], axis=0)
        for i, (w, b) in enumerate(self.dec):
            h = _up2(h)
            if i < cfg.stages - 1:
                h = tz.concat([h, skips[-1 - i]], axis=0)
            h = _conv(h, w, b)
            if i < len(self.dec) - 1:
                h = tz.leaky_relu(h, cfg.act_slope)
        return teacher_head(h, cfg)

    def save(self, path) -> None:
        save_model(path, self, "teacher")

    @classmethod
    def load(cls, path) -> "TeacherModel":
        return load_model(path, expected="teacher")


def teacher_head(raw: Tensor, cfg: TeacherConfig) -> Tensor:
    """Split 4S channels into texture/shadow and apply the gated head."""
    s3 = 3 * cfg.S
    texture = tz.slice_channels(raw, 0, s3)
    shadow = tz.slice_channels(raw, s3, 4 * cfg.S)
    gate = tz.sigmoid(shadow)
    gate3 = tz.concat([gate, gate, gate], axis=0)  # depth slice z gates channel c*S+z
    return gate3 * tz.scale_add(texture, cfg.lam_s, cfg.lam_b)


class StudentModel:
    """Fully convolutional decoder from illumination features to textures."""

    def __init__(self, cfg: StudentConfig, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.joint = JointEncoder(cfg.theta_dim, cfg.feature_res, cfg.joint_plan,
                                  cfg.act_slope, rng, dtype, prefix="jt")
        widths = list(cfg.hidden) + [cfg.out_channels]
        self.layers: list[tuple[Tensor, Tensor]] = []
        c = cfg.in_channels
        for i, width in enumerate(widths):
            self.layers.append(_conv_params(rng, f"dec{i}", c, width, dtype, cfg.act_slope))
            c = width
        # bilinear 2x upsamples sit before the last n_up conv layers
        self.up_before = set(range(len(widths) - cfg.n_up, len(widths)))

    def params(self) -> dict[str, Tensor]:
        out = dict(self.joint.params())
        for w, b in self.layers:
            out[w.name] = w
            out[b.name] = b
        return out

    def forward(self, features: np.ndarray, theta: np.ndarray,
                joint_out: Tensor | None = None) -> Tensor:
        cfg = self.cfg
        dtype = self.layers[0][0].data.dtype
        feats = np.asarray(features, dtype=dtype)
        want_c = 3 + 3 * cfg.n_shininess
        if feats.shape != (want_c, cfg.feature_res, cfg.feature_res):
            raise ValueError(f"feature shape {feats.shape} != "
                             f"{(want_c, cfg.feature_res, cfg.feature_res)}")
        if joint_out is None:
            joint_out = self.joint.forward(theta)
        h = tz.concat([Tensor(feats), joint_out], axis=0)
        for i, (w, b) in enumerate(self.layers):
            if i in self.up_before:
                h = _up2(h)
            h = _conv(h, w, b)
            if i < len(self.layers) - 1:
                h = tz.leaky_relu(h, cfg.act_slope)
        return tz.scale_add(h, cfg.lam_s, cfg.lam_b)

    def save(self, path) -> None:
        save_model(path, self, "student")

    @classmethod
    def load(cls, path) -> "StudentModel":
        return load_model(path, expected="student")


# ---------------------------------------------------------------------------
# checkpoints: PLT1 container for weights + JSON manifest for the config


def save_model(path, model, kind: str) -> None:
    path = Path(path)
    tz.save_checkpoint(path, {k: v.data for k, v in model.params().items()})
    manifest = {"kind": kind, "config": asdict(model.cfg)}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=1))


def load_model(path, expected: str | None = None):
    path = Path(path)
    manifest = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if expected is not None and manifest["kind"] != expected:
        raise ValueError(f"checkpoint is a {manifest['kind']!r} model, expected {expected!r}")
    cfg_doc = {k: tuple(v) if isinstance(v, list) else v for k, v in manifest["config"].items()}
    cfg_doc.pop("stages", None)
    cfg_doc.pop("n_up", None)
    cls = TeacherModel if manifest["kind"] == "teacher" else StudentModel
    cfg = (TeacherConfig if manifest["kind"] == "teacher" else StudentConfig)(**cfg_doc)
    model = cls(cfg)
    weights = tz.load_checkpoint(path)
    params = model.params()
    if set(weights) != set(params):
        raise ValueError("checkpoint parameter names do not match the model")
    for k, p in params.items():
        if weights[k].shape != p.data.shape:
            raise ValueError(f"parameter {k} has shape {weights[k].shape}, expected {p.data.shape}")
        p.data = weights[k].astype(p.data.dtype)
    return model
