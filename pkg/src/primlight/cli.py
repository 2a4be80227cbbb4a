"""Command-line entry points tying the pipeline together.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import imageio
from .appearance import StudentConfig, StudentModel, TeacherConfig, TeacherModel
from .config import MEMORY_CEILING_BYTES, PRESETS, configure_threads, default_seed
from .illum import EnvMap, env_to_rig
from .synth import (CaptureScript, Material, generate_hand, load_capture,
                    random_envmap, simulate_capture, stage_rig)
from .training import (FramePipeline, LossWeights, build_distill_set,
                       pose_importance_sample, train_student, train_teacher)


class ConfigError(click.ClickException):
    exit_code = 2


def _run(fn):
    """Map failures onto the documented exit codes."""
    try:
        fn()
    except ConfigError:
        raise
    except (FileNotFoundError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    except (FloatingPointError, ArithmeticError) as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        sys.exit(3)


def _preset(scale: str):
    preset = PRESETS[scale]
    if scale == "desk":
        estimate = preset.payload_bytes_estimate()
        if estimate > MEMORY_CEILING_BYTES:
            raise ConfigError(f"desk preset estimate {estimate} exceeds the "
                              f"{MEMORY_CEILING_BYTES} byte ceiling")
    return preset


def _guard_paper_scale(scale: str, acknowledged: bool):
    if scale != "paper":
        return
    p = PRESETS["paper"]
    click.echo(f"paper scale: N={p.N} primitives, S={p.S}, envmap M={p.M} "
               f"({p.env_rows}x{p.env_cols}), {p.stage_lights} stage lights")
    if not acknowledged:
        raise ConfigError("paper-scale training needs GPUs and weeks of compute; "
                          "pass --i-have-a-gpu-week to proceed anyway")


def _load_pipeline(capture_dir, scale: str, feature_res=None):
    preset = _preset(scale)
    capture = load_capture(capture_dir)
    hand = generate_hand(seed=capture.hand_seed)
    pipeline = FramePipeline(hand, capture.cameras, w=preset.w, S=preset.S,
                             atlas_res=preset.atlas_res,
                             feature_res=feature_res or preset.feature_res)
    return preset, capture, hand, pipeline


@click.group()
@click.option("--threads", type=int, default=None, help="worker thread budget")
def main(threads):
    """Relightable volumetric-primitive rendering pipeline."""
    configure_threads(threads)


@main.command("simulate-capture")
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--frames", default=25, show_default=True)
@click.option("--key-stride", default=4, show_default=True)
@click.option("--cameras", default=3, show_default=True)
@click.option("--image-size", default=64, show_default=True)
@click.option("--stage-lights", default=64, show_default=True)
@click.option("--seed", type=int, default=None)
def cmd_simulate_capture(out, frames, key_stride, cameras, image_size,
                         stage_lights, seed):
    """Generate the synthetic light-stage capture dataset."""
    def body():
        s = default_seed() if seed is None else seed
        hand = generate_hand(seed=s)
        script = CaptureScript(n_frames=frames, key_stride=key_stride,
                               image_size=(image_size, image_size),
                               n_cameras=cameras, seed=s)
        rig = stage_rig(stage_lights, radius=1.2)
        ds = simulate_capture(hand, script, rig, out, hand_seed=s)
        click.echo(f"wrote {len(ds.records)} images to {out}")
    _run(body)


@main.command("train-teacher")
@click.option("--capture", "capture_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--steps", default=200, show_default=True)
@click.option("--scale", type=click.Choice(["desk", "paper"]), default="desk", show_default=True)
@click.option("--batch-size", default=None, type=int, help="default: 2 (paper), 1 (desk)")
@click.option("--seed", type=int, default=None)
@click.option("--no-visibility", is_flag=True, help="ablation: feed V==1 instead of deep shadows")
@click.option("--resume", type=int, default=0, help="resume from this step")
@click.option("--i-have-a-gpu-week", "gpu_week", is_flag=True, hidden=True)
def cmd_train_teacher(capture_dir, out, steps, scale, batch_size, seed,
                      no_visibility, resume, gpu_week):
    """Train the OLAT teacher on the partially-lit capture frames."""
    def body():
        _guard_paper_scale(scale, gpu_week)
        s = default_seed() if seed is None else seed
        preset, capture, hand, pipeline = _load_pipeline(capture_dir, scale)
        cfg = (TeacherConfig.paper() if scale == "paper"
               else TeacherConfig.desk(S=preset.S, w=preset.w))
        if resume:
            model = TeacherModel.load(Path(out) / "teacher.plt")
        else:
            model = TeacherModel(cfg, rng=np.random.default_rng(s))
        bs = batch_size if batch_size is not None else (2 if scale == "paper" else 1)
        res = train_teacher(capture, pipeline, model, steps=steps, out_dir=out,
                            seed=s, batch_size=bs,
                            vis_mode="ones" if no_visibility else "shadow",
                            start_step=resume, checkpoint_every=max(1, steps // 4))
        click.echo(f"teacher checkpoint: {res.checkpoint} (final loss {res.final_loss:.6g})")
    _run(body)


@main.command("distill-student")
@click.option("--capture", "capture_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--teacher", "teacher_ckpt", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--steps", default=300, show_default=True)
@click.option("--scale", type=click.Choice(["desk", "paper"]), default="desk", show_default=True)
@click.option("--frames", "n_frames", default=8, show_default=True,
              help="poses picked by KDE importance sampling")
@click.option("--cameras", default="0", show_default=True, help="comma-separated camera ids")
@click.option("--train-envmaps", default=6, show_default=True)
@click.option("--test-envmaps", default=2, show_default=True)
@click.option("--envmap-size", default="8x16", show_default=True)
@click.option("--batch-size", default=None, type=int)
@click.option("--seed", type=int, default=None)
@click.option("--resume", type=int, default=0)
@click.option("--i-have-a-gpu-week", "gpu_week", is_flag=True, hidden=True)
def cmd_distill_student(capture_dir, teacher_ckpt, out, steps, scale, n_frames,
                        cameras, train_envmaps, test_envmaps, envmap_size,
                        batch_size, seed, resume, gpu_week):
    """Build teacher pseudo-ground-truth and train the envmap student."""
    def body():
        _guard_paper_scale(scale, gpu_week)
        s = default_seed() if seed is None else seed
        preset, capture, hand, pipeline = _load_pipeline(capture_dir, scale)
        teacher = TeacherModel.load(teacher_ckpt)
        rows, cols = (int(x) for x in envmap_size.split("x"))
        rng = np.random.default_rng(s)
        envmaps = {f"env{i:03d}": random_envmap(rows, cols, rng)
                   for i in range(train_envmaps + test_envmaps)}
        test_ids = sorted(envmaps)[train_envmaps:]
        out_path = Path(out)
        (out_path / "envmaps").mkdir(parents=True, exist_ok=True)
        for k, e in envmaps.items():
            imageio.write_pfm(out_path / "envmaps" / f"{k}.pfm", e.data)
        (out_path / "splits.json").write_text(json.dumps(
            {"train": sorted(envmaps)[:train_envmaps], "test": test_ids}))
        frame_pool = sorted({r.frame for r in capture.partial_records()})
        count = min(n_frames, len(frame_pool))
        picks = pose_importance_sample([capture.poses[f] for f in frame_pool],
                                       count, hand, np.random.default_rng(s))
        frames = [frame_pool[i] for i in picks]
        cam_ids = [int(c) for c in cameras.split(",")]
        dset = build_distill_set(capture, pipeline, teacher, frames, cam_ids,
                                 envmaps, test_ids, out_path)
        scfg = (StudentConfig.paper() if scale == "paper"
                else StudentConfig.desk(S=preset.S, w=preset.w,
                                        feature_res=preset.feature_res))
        if resume:
            student = StudentModel.load(out_path / "student.plt")
        else:
            student = StudentModel(scfg, rng=np.random.default_rng(s + 1))
        bs = batch_size if batch_size is not None else (4 if scale == "paper" else 1)
        res = train_student(capture, pipeline, student, dset, steps=steps,
                            out_dir=out_path, seed=s, batch_size=bs,
                            start_step=resume)
        click.echo(f"student checkpoint: {res.checkpoint} (final loss {res.final_loss:.6g})")
    _run(body)


@main.command("render")
@click.option("--capture", "capture_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--teacher", "teacher_ckpt", type=click.Path(exists=True, path_type=Path))
@click.option("--student", "student_ckpt", type=click.Path(path_type=Path))
@click.option("--mode", type=click.Choice(["olat", "point", "dir", "envmap"]), required=True)
@click.option("--light-index", type=int, default=0, help="olat: stage light index")
@click.option("--light-pos", default=None, help="point: x,y,z")
@click.option("--light-dir", default=None, help="dir: x,y,z")
@click.option("--envmap", "envmap_path", type=click.Path(path_type=Path), default=None)
@click.option("--intensity", default=1.0, show_default=True)
@click.option("--frame", default=0, show_default=True)
@click.option("--camera", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--ev", default=0.0, show_default=True, help="exposure for the PNG")
@click.option("--verify-linearity", is_flag=True,
              help="envmap mode via the teacher: assert envmap render == "
                   "intensity-weighted sum of OLAT renders")
@click.option("--scale", type=click.Choice(["desk", "paper"]), default="desk", show_default=True)
def cmd_render(capture_dir, teacher_ckpt, student_ckpt, mode, light_index,
               light_pos, light_dir, envmap_path, intensity, frame, camera,
               out, ev, verify_linearity, scale):
    """Render one frame: teacher path for olat/point/dir, student for envmap."""
    def body():
        preset, capture, hand, pipeline = _load_pipeline(capture_dir, scale)
        out_path = Path(out)
        out_path.mkdir(parents=True, exist_ok=True)
        fd = pipeline.frame(frame, capture.poses[frame])
        op = pipeline.render_operator(fd, camera)
        if mode == "envmap" and not verify_linearity:
            if student_ckpt is None or not Path(student_ckpt).exists():
                raise ConfigError("envmap mode needs a student checkpoint; "
                                  "run `primlight distill-student` first")
            student = StudentModel.load(student_ckpt)
            env = _read_envmap(envmap_path)
            feats = pipeline.features_chw(fd, camera, env, str(envmap_path), True)
            payload = student.forward(feats, fd.pose.theta)
            img = op.render_np_from_stacked(payload.data)
        else:
            if teacher_ckpt is None:
                raise ConfigError(f"{mode} mode needs --teacher")
            teacher = TeacherModel.load(teacher_ckpt)
            if mode == "olat":
                pos = capture.rig.positions[light_index]
                payload = pipeline.teacher_payload(teacher, fd, camera, pos).data
                payload = payload * intensity
            elif mode == "point":
                pos = np.array([float(x) for x in light_pos.split(",")])
                payload = pipeline.teacher_payload(teacher, fd, camera, pos).data * intensity
            elif mode == "dir":
                d = np.array([float(x) for x in light_dir.split(",")])
                pos = d / np.linalg.norm(d) * 60.0
                payload = pipeline.teacher_payload(teacher, fd, camera, pos).data * intensity
            else:  # envmap consistency mode through the teacher
                env = _read_envmap(envmap_path)
                rig = env_to_rig(env, pipeline.env_radius)
                total_payload = None
                img_sum = 0.0
                for m in range(rig.count):
                    p = pipeline.teacher_payload(teacher, fd, camera,
                                                 rig.positions[m], cache=False).data
                    wchan = np.repeat(rig.intensities[m], pipeline.S)[:, None, None]
                    contrib = p * wchan
                    total_payload = contrib if total_payload is None else total_payload + contrib
                    img_sum = img_sum + op.render_np_from_stacked(contrib)[..., :3]
                payload = total_payload
                direct = op.render_np_from_stacked(payload)
                scale_ref = max(np.abs(direct[..., :3]).max(), 1e-9)
                err = np.abs(direct[..., :3] - img_sum).max() / scale_ref
                click.echo(f"linearity check: max relative deviation {err:.3e}")
                if err > 1e-4:
                    raise FloatingPointError(f"linearity violated: {err:.3e} > 1e-4")
            img = op.render_np_from_stacked(payload)
        imageio.write_pfm(out_path / f"{mode}.pfm", img[..., :3])
        imageio.write_png(out_path / f"{mode}.png", img, ev=ev)
        click.echo(f"wrote {out_path / (mode + '.png')}")
    _run(body)


def _read_envmap(path):
    if path is None:
        raise ConfigError("--envmap is required for envmap mode")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"envmap {path} does not exist")
    loader = EnvMap.from_hdr if path.suffix == ".hdr" else EnvMap.from_pfm
    return loader(path, rows=None, cols=None)  # native resolution


@main.command("features")
@click.option("--capture", "capture_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--frame", default=0, show_default=True)
@click.option("--camera", default=0, show_default=True)
@click.option("--envmap", "envmap_path", type=click.Path(path_type=Path), default=None)
@click.option("--envmap-seed", type=int, default=None, help="synthetic envmap instead of a file")
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--scale", type=click.Choice(["desk", "paper"]), default="desk", show_default=True)
def cmd_features(capture_dir, frame, camera, envmap_path, envmap_seed, out, scale):
    """Write diffuse and per-shininess specular feature maps, with and
    without visibility (tonemapped PNG + raw PFM)."""
    def body():
        preset, capture, hand, pipeline = _load_pipeline(capture_dir, scale)
        if envmap_seed is not None:
            env = random_envmap(preset.env_rows, preset.env_cols,
                                np.random.default_rng(envmap_seed))
        else:
            env = _read_envmap(envmap_path)
        out_path = Path(out)
        out_path.mkdir(parents=True, exist_ok=True)
        fd = pipeline.frame(frame, capture.poses[frame])
        names = ["diffuse"] + [f"specular_{int(a)}" for a in pipeline.shininess]
        for vis in (True, False):
            feats = pipeline.features_chw(fd, camera, env, "cli", vis)
            tag = "with_vis" if vis else "no_vis"
            for i, name in enumerate(names):
                chans = feats[3 * i:3 * i + 3].transpose(1, 2, 0)
                imageio.write_pfm(out_path / f"{name}_{tag}.pfm", chans)
                imageio.write_png(out_path / f"{name}_{tag}.png",
                                  chans / max(chans.max(), 1e-9))
        click.echo(f"wrote {2 * len(names)} feature maps to {out_path}")
    _run(body)


@main.command("bench")
@click.option("--capture", "capture_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--student", "student_ckpt", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--runs", default=50, show_default=True)
@click.option("--frame", default=0, show_default=True)
@click.option("--seed", type=int, default=None)
def cmd_bench(capture_dir, student_ckpt, out, runs, frame, seed):
    """Per-stage wall-clock breakdown of student inference (mean +/- stddev)."""
    def body():
        from .service import student_render_timed
        preset, capture, hand, pipeline = _load_pipeline(capture_dir, "desk")
        student = StudentModel.load(student_ckpt)
        env = random_envmap(preset.env_rows, preset.env_cols,
                            np.random.default_rng(default_seed() if seed is None else seed))
        fd = pipeline.frame(frame, capture.poses[frame])
        camera = capture.cameras[0]
        stages = ["joint_decode", "ray_tracing", "resampling", "texture_decode", "ray_march"]
        samples = {k: [] for k in stages}
        totals = []
        for i in range(runs + 2):
            fd.vis_masks.clear()  # time the ray tracing honestly each run
            t0 = time.perf_counter()
            _, stage_ms = student_render_timed(pipeline, student, fd, 0, camera, env)
            total = (time.perf_counter() - t0) * 1e3
            if i < 2:
                continue  # warmup
            totals.append(total)
            for k in stages:
                samples[k].append(stage_ms[k])
        out_path = Path(out)
        out_path.mkdir(parents=True, exist_ok=True)
        rows = []
        click.echo(f"{'stage':<16}{'mean_ms':>10}{'std_ms':>10}")
        for k in stages:
            arr = np.asarray(samples[k])
            rows.append({"stage": k, "mean_ms": arr.mean(), "std_ms": arr.std()})
            click.echo(f"{k:<16}{arr.mean():>10.2f}{arr.std():>10.2f}")
        tot = np.asarray(totals)
        rows.append({"stage": "total", "mean_ms": tot.mean(), "std_ms": tot.std()})
        click.echo(f"{'total':<16}{tot.mean():>10.2f}{tot.std():>10.2f}")
        stage_sum = sum(r["mean_ms"] for r in rows[:-1])
        if not (tot.mean() >= max(r["mean_ms"] for r in rows[:-1])
                and tot.mean() <= stage_sum * 1.5 + 5.0):
            raise FloatingPointError("stage timings inconsistent with total")
        import csv
        with open(out_path / "bench.csv", "w", newline="") as f:
            wtr = csv.DictWriter(f, fieldnames=["stage", "mean_ms", "std_ms"])
            wtr.writeheader()
            wtr.writerows(rows)
        click.echo(f"wrote {out_path / 'bench.csv'}")
    _run(body)


@main.command("serve")
@click.option("--capture", "capture_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--student", "student_ckpt", type=click.Path(exists=True, path_type=Path))
@click.option("--teacher", "teacher_ckpt", type=click.Path(exists=True, path_type=Path))
@click.option("--envmap-dir", type=click.Path(path_type=Path), default=None)
@click.option("--static-dir", type=click.Path(path_type=Path), default=None,
              help="viewer bundle to serve at /")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8321, show_default=True)
def cmd_serve(capture_dir, student_ckpt, teacher_ckpt, envmap_dir, static_dir,
              host, port):
    """Long-running render service speaking the viewer wire protocol."""
    def body():
        if student_ckpt is None and teacher_ckpt is None:
            raise ConfigError("serve needs at least one of --student / --teacher")
        from .service import create_app
        import uvicorn
        app = create_app(capture_dir, student_ckpt, teacher_ckpt, envmap_dir,
                         static_dir)
        uvicorn.run(app, host=host, port=port, log_level="warning")
    _run(body)


if __name__ == "__main__":
    main()
