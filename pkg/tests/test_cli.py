import json
import struct

import numpy as np
import pytest
from click.testing import CliRunner

from primlight import imageio
from primlight.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Shared capture + tiny desk-scale checkpoints for CLI-level tests."""
    root = tmp_path_factory.mktemp("cliwork")
    runner = CliRunner()
    res = runner.invoke(main, ["simulate-capture", "--out", str(root / "cap"),
                               "--frames", "5", "--key-stride", "2",
                               "--cameras", "2", "--image-size", "32",
                               "--stage-lights", "16", "--seed", "0"])
    assert res.exit_code == 0, res.output
    res = runner.invoke(main, ["train-teacher", "--capture", str(root / "cap"),
                               "--out", str(root / "teacher"), "--steps", "4",
                               "--seed", "0"])
    assert res.exit_code == 0, res.output
    res = runner.invoke(main, ["distill-student", "--capture", str(root / "cap"),
                               "--teacher", str(root / "teacher" / "teacher.plt"),
                               "--out", str(root / "student"), "--steps", "4",
                               "--frames", "2", "--train-envmaps", "2",
                               "--test-envmaps", "1", "--envmap-size", "4x8",
                               "--seed", "0"])
    assert res.exit_code == 0, res.output
    return root


class TestTrainCommands:
    def test_checkpoints_written(self, workdir):
        assert (workdir / "teacher" / "teacher.plt").exists()
        assert (workdir / "teacher" / "teacher.plt.json").exists()
        assert (workdir / "teacher" / "teacher_log.csv").exists()
        assert (workdir / "student" / "student.plt").exists()
        assert (workdir / "student" / "splits.json").exists()

    def test_paper_scale_refused_without_flag(self, workdir):
        runner = CliRunner()
        res = runner.invoke(main, ["train-teacher", "--capture", str(workdir / "cap"),
                                   "--out", str(workdir / "nope"),
                                   "--scale", "paper"])
        assert res.exit_code == 2
        assert "N=4096" in res.output and "S=16" in res.output and "M=512" in res.output
        assert "--i-have-a-gpu-week" in res.output

    def test_distill_split_disjoint(self, workdir):
        splits = json.loads((workdir / "student" / "splits.json").read_text())
        assert set(splits["train"]).isdisjoint(splits["test"])
        manifest = (workdir / "student" / "distill_manifest.jsonl").read_text()
        for line in manifest.splitlines():
            assert json.loads(line)["envmap"] in splits["train"]


class TestRender:
    def test_olat_zero_intensity_black(self, workdir, tmp_path):
        runner = CliRunner()
        res = runner.invoke(main, ["render", "--capture", str(workdir / "cap"),
                                   "--teacher", str(workdir / "teacher" / "teacher.plt"),
                                   "--mode", "olat", "--light-index", "0",
                                   "--intensity", "0", "--frame", "1",
                                   "--out", str(tmp_path)])
        assert res.exit_code == 0, res.output
        img = imageio.read_pfm(tmp_path / "olat.pfm")
        np.testing.assert_array_equal(img, 0.0)

    def test_envmap_without_student_suggests_distill(self, workdir, tmp_path):
        runner = CliRunner()
        res = runner.invoke(main, ["render", "--capture", str(workdir / "cap"),
                                   "--mode", "envmap",
                                   "--envmap", str(workdir / "student" / "envmaps" / "env000.pfm"),
                                   "--out", str(tmp_path)])
        assert res.exit_code == 2
        assert "distill-student" in res.output

    def test_envmap_student_render(self, workdir, tmp_path):
        runner = CliRunner()
        res = runner.invoke(main, ["render", "--capture", str(workdir / "cap"),
                                   "--student", str(workdir / "student" / "student.plt"),
                                   "--mode", "envmap", "--frame", "1",
                                   "--envmap", str(workdir / "student" / "envmaps" / "env000.pfm"),
                                   "--out", str(tmp_path)])
        assert res.exit_code == 0, res.output
        assert (tmp_path / "envmap.png").exists()
        img = imageio.read_pfm(tmp_path / "envmap.pfm")
        assert img.max() > 0

    def test_verify_linearity(self, workdir, tmp_path):
        # tiny 2x4 envmap: the teacher consistency mode asserts Eq. 2 end to end
        env = np.abs(np.random.default_rng(0).standard_normal((2, 4, 3)))
        imageio.write_pfm(tmp_path / "tiny.pfm", env)
        runner = CliRunner()
        res = runner.invoke(main, ["render", "--capture", str(workdir / "cap"),
                                   "--teacher", str(workdir / "teacher" / "teacher.plt"),
                                   "--mode", "envmap", "--verify-linearity",
                                   "--envmap", str(tmp_path / "tiny.pfm"),
                                   "--frame", "1", "--out", str(tmp_path)])
        assert res.exit_code == 0, res.output
        assert "linearity check" in res.output

    def test_seeded_determinism(self, workdir, tmp_path):
        runner = CliRunner()
        outs = []
        for sub in ("a", "b"):
            res = runner.invoke(main, ["render", "--capture", str(workdir / "cap"),
                                       "--teacher", str(workdir / "teacher" / "teacher.plt"),
                                       "--mode", "point", "--light-pos", "0.2,0.8,0.3",
                                       "--frame", "1", "--out", str(tmp_path / sub)])
            assert res.exit_code == 0, res.output
            outs.append((tmp_path / sub / "point.pfm").read_bytes())
        assert outs[0] == outs[1]


class TestFeaturesCommand:
    def test_feature_maps_written(self, workdir, tmp_path):
        runner = CliRunner()
        res = runner.invoke(main, ["features", "--capture", str(workdir / "cap"),
                                   "--envmap-seed", "3", "--frame", "1",
                                   "--out", str(tmp_path)])
        assert res.exit_code == 0, res.output
        names = ["diffuse", "specular_16", "specular_32", "specular_64"]
        for n in names:
            for tag in ("with_vis", "no_vis"):
                assert (tmp_path / f"{n}_{tag}.pfm").exists()
                assert (tmp_path / f"{n}_{tag}.png").exists()

    def test_zero_envmap_black_features(self, workdir, tmp_path):
        zero = np.zeros((4, 8, 3))
        imageio.write_pfm(tmp_path / "zero.pfm", zero)
        runner = CliRunner()
        res = runner.invoke(main, ["features", "--capture", str(workdir / "cap"),
                                   "--envmap", str(tmp_path / "zero.pfm"),
                                   "--out", str(tmp_path / "f")])
        assert res.exit_code == 0, res.output
        img = imageio.read_pfm(tmp_path / "f" / "diffuse_with_vis.pfm")
        np.testing.assert_array_equal(img, 0.0)


class TestBench:
    def test_stage_breakdown(self, workdir, tmp_path):
        runner = CliRunner()
        res = runner.invoke(main, ["bench", "--capture", str(workdir / "cap"),
                                   "--student", str(workdir / "student" / "student.plt"),
                                   "--out", str(tmp_path), "--runs", "6"])
        assert res.exit_code == 0, res.output
        import csv
        with open(tmp_path / "bench.csv") as f:
            rows = list(csv.DictReader(f))
        stages = [r["stage"] for r in rows]
        assert stages == ["joint_decode", "ray_tracing", "resampling",
                          "texture_decode", "ray_march", "total"]
        total = float(rows[-1]["mean_ms"])
        assert total >= max(float(r["mean_ms"]) for r in rows[:-1])


class TestServe:
    @pytest.fixture()
    def client(self, workdir):
        from starlette.testclient import TestClient
        from primlight.service import create_app
        app = create_app(workdir / "cap",
                         student_ckpt=workdir / "student" / "student.plt",
                         teacher_ckpt=workdir / "teacher" / "teacher.plt",
                         envmap_dir=workdir / "student" / "envmaps")
        return TestClient(app)

    def _read_frame(self, ws):
        data = ws.receive_bytes()
        w, h, fmt, rid = struct.unpack("<IIII", data[:16])
        assert fmt == 1
        img = np.frombuffer(data[16:], np.uint8).reshape(h, w, 3)
        return img, rid

    def test_manifest(self, client):
        doc = client.get("/manifest").json()
        assert doc["pose_dim"] == 25
        assert "envmap" in doc["modes"] and "point" in doc["modes"]
        assert len(doc["theta_lo"]) == 25

    def test_scripted_session_light_moves(self, client):
        with client.websocket_connect("/ws") as ws:
            ws.send_text(json.dumps({"op": "set_light", "mode": "dir",
                                     "value": [1.0, 1.0, 0.0]}))
            assert "ok" in ws.receive_text()
            ws.send_text(json.dumps({"op": "frame", "id": 1}))
            img1, rid1 = self._read_frame(ws)
            ws.send_text(json.dumps({"op": "set_light", "mode": "dir",
                                     "value": [-1.0, 1.0, 0.0]}))
            ws.receive_text()
            ws.send_text(json.dumps({"op": "frame", "id": 2}))
            img2, rid2 = self._read_frame(ws)
            assert (rid1, rid2) == (1, 2)
            assert np.abs(img1.astype(int) - img2.astype(int)).sum() > 0
            ws.send_text(json.dumps({"op": "stats"}))
            stats = json.loads(ws.receive_text())
            assert "render_ms" in stats and "stage_ms" in stats

    def test_malformed_message_keeps_connection(self, client):
        with client.websocket_connect("/ws") as ws:
            ws.send_text("{not json")
            assert "error" in json.loads(ws.receive_text())
            ws.send_text(json.dumps({"op": "warp_drive"}))
            assert "error" in json.loads(ws.receive_text())
            ws.send_text(json.dumps({"op": "frame", "id": 9}))
            _, rid = self._read_frame(ws)
            assert rid == 9

    def test_sessions_are_isolated(self, client):
        with client.websocket_connect("/ws") as a, client.websocket_connect("/ws") as b:
            theta = [0.0] * 25
            theta[9] = -1.2  # curl the index finger in session b only
            b.send_text(json.dumps({"op": "set_pose", "theta": theta}))
            b.receive_text()
            a.send_text(json.dumps({"op": "frame", "id": 1}))
            img_a, _ = self._read_frame(a)
            b.send_text(json.dumps({"op": "frame", "id": 1}))
            img_b, _ = self._read_frame(b)
            # a's frame must equal a fresh rest-pose render, unaffected by b
            a.send_text(json.dumps({"op": "frame", "id": 2}))
            img_a2, _ = self._read_frame(a)
            np.testing.assert_array_equal(img_a, img_a2)
            assert np.abs(img_a.astype(int) - img_b.astype(int)).sum() > 0

    def test_deterministic_rest_frame(self, client):
        frames = []
        for _ in range(2):
            with client.websocket_connect("/ws") as ws:
                ws.send_text(json.dumps({"op": "frame", "id": 0}))
                frames.append(self._read_frame(ws)[0].tobytes())
        assert frames[0] == frames[1]
