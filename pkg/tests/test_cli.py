"""End-to-end command-line workflow, run in process."""

import csv
import json
import os

import numpy as np
import pytest

from helpers import SCENE_DIR
from stereoscene import cli, evalio

TINY = str(SCENE_DIR / "verify_tiny.scene")


@pytest.fixture(scope="module")
def datadir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["scene", "gen", TINY, str(out), "--seed", "3"]) == 0
    return out


class TestSceneGen:
    def test_writes_bundle(self, datadir, capsys):
        names = os.listdir(datadir)
        assert "rig.cfg" in names and "meta.json" in names
        assert "image_l_t.png" in names and "flow_fwd.png" in names

    def test_missing_spec_fails(self, tmp_path):
        assert cli.main(["scene", "gen", str(tmp_path / "no.scene"),
                         str(tmp_path / "out")]) == 1

    def test_bad_spec_fails(self, tmp_path):
        bad = tmp_path / "bad.scene"
        bad.write_text("sphere center=0,0,0\n")
        assert cli.main(["scene", "gen", str(bad), str(tmp_path / "out")]) == 1


class TestLossEval:
    def test_eval_prints_terms(self, datadir, capsys):
        assert cli.main(["loss", "eval", str(datadir), "--stage", "2"]) == 0
        out = capsys.readouterr().out
        assert "term p:" in out and "loss eval: total=" in out

    def test_single_term(self, datadir, capsys):
        assert cli.main(["loss", "eval", str(datadir), "--term", "sky"]) == 0
        out = capsys.readouterr().out
        assert "term sky:" in out and "term p:" not in out


def test_gradcheck_single_term(capsys):
    assert cli.main(["gradcheck", "--term", "occ", "--tol", "1e-4"]) == 0
    out = capsys.readouterr().out
    assert "gradcheck: pass" in out


class TestSolve:
    def test_smoke(self, datadir, tmp_path, capsys):
        cfg = tmp_path / "solver.cfg"
        cfg.write_text("levels=1\nsteps_per_level=4\nstage1_fraction=0.0\n")
        out = tmp_path / "solved"
        rc = cli.main(["solve", str(datadir), "--config", str(cfg),
                       "--perturb", "disp=0.3,seed=1", "--out", str(out)])
        assert rc == 0
        for name in ("D_l_t.png", "F_fwd.png", "xi.json", "trace.csv"):
            assert (out / name).exists()
        with open(out / "xi.json") as f:
            assert len(json.load(f)["xi"]) == 6
        with open(out / "trace.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 4
        assert {"level", "step", "total"} <= set(rows[0])


class TestMetrics:
    def test_disparity_roundtrip(self, datadir, tmp_path, capsys):
        rc = cli.main(["metrics", "disparity",
                       str(datadir / "disp_l_t.png"), str(datadir / "disp_l_t.png")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "D1-all 0.0000" in out

    def test_flow(self, datadir, capsys):
        rc = cli.main(["metrics", "flow",
                       str(datadir / "flow_fwd.png"), str(datadir / "flow_fwd.png")])
        assert rc == 0
        assert "EPE 0.0000" in capsys.readouterr().out

    def test_odometry_too_short_fails(self, tmp_path, capsys):
        poses = [np.hstack([np.eye(3), [[0], [0], [z]]]) for z in (0.0, 1.0)]
        path = tmp_path / "poses.txt"
        evalio.write_poses(poses, path)
        assert cli.main(["metrics", "odometry", str(path), str(path)]) == 1
        assert "undefined" in capsys.readouterr().out

    def test_shape_mismatch_fails(self, datadir, tmp_path):
        small = tmp_path / "small.png"
        evalio.write_kitti_disparity(np.full((4, 4), 1.0), small)
        assert cli.main(["metrics", "disparity", str(small),
                         str(datadir / "disp_l_t.png")]) == 1


def test_render_errormap(datadir, tmp_path, capsys):
    out = tmp_path / "err.png"
    rc = cli.main(["render", "errormap", str(datadir / "disp_l_t.png"),
                   str(datadir / "disp_l_t.png"), str(out)])
    assert rc == 0
    assert out.exists()
