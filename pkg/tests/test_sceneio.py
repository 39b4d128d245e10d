"""Scene spec parsing, ground-truth serialization and the loss-stack bridge."""

import math

import numpy as np
import pytest
import torch

from helpers import load_spec, truth
from stereoscene import sceneio
from stereoscene.scene import generate
from stereoscene.sceneio import (inputs_from_truth, parse_scene_file,
                                 perturb_variables, read_truth,
                                 variables_from_truth, write_truth)


def write_spec(tmp_path, text):
    path = tmp_path / "scene.txt"
    path.write_text(text)
    return path


GOOD = """\
# comment line
rig fx=50 fy=50 cx=31.5 cy=23.5 baseline=0.5 width=64 height=48
ego v=0.1,0,0.3 w=0,0.002,0
noise sigma=0.01
plane origin=0,1.5,0 u=1,0,0 v=0,0,1 extent=100,30 class=Road seed=3 scale=5 amp=0.2 octaves=2
box center=0,0,10 size=2,2,1 class=Vehicle instance=4 v=-0.4,0,0 seed=9
"""


class TestParse:
    def test_fields(self, tmp_path):
        spec = parse_scene_file(write_spec(tmp_path, GOOD))
        assert (spec.width, spec.height) == (64, 48)
        assert spec.rig.baseline == 0.5
        assert spec.noise_sigma == 0.01
        assert np.allclose(spec.ego.xi.numpy(), [0.1, 0, 0.3, 0, 0.002, 0])
        assert len(spec.planes) == 1 and len(spec.boxes) == 1
        p = spec.planes[0]
        assert p.class_name == "Road" and p.extent == (100.0, 30.0)
        assert p.texture_scale == 5.0 and p.octaves == 2
        b = spec.boxes[0]
        assert b.instance_id == 4
        assert np.allclose(b.motion.xi.numpy()[:3], [-0.4, 0, 0])

    def test_missing_rig(self, tmp_path):
        with pytest.raises(ValueError, match="rig"):
            parse_scene_file(write_spec(tmp_path, "ego v=0,0,0 w=0,0,0\n"))

    def test_unknown_directive(self, tmp_path):
        with pytest.raises(ValueError, match="unknown"):
            parse_scene_file(write_spec(tmp_path, GOOD + "sphere center=0,0,0\n"))

    def test_missing_field_reports_line(self, tmp_path):
        bad = "rig fx=50 fy=50 cx=31.5 cy=23.5 baseline=0.5 width=64 height=48\nplane u=1,0,0 v=0,0,1\n"
        with pytest.raises(ValueError, match=":2"):
            parse_scene_file(write_spec(tmp_path, bad))

    def test_repo_scenes_parse(self):
        for name in ("verify_box", "verify_occlusion", "verify_textured",
                     "verify_static", "verify_tiny", "verify_occl_fill"):
            spec = load_spec(name)
            assert spec.width > 0 and spec.height > 0


@pytest.fixture(scope="module")
def roundtrip(tmp_path_factory):
    gt = generate(load_spec("verify_tiny"), seed=5)
    outdir = tmp_path_factory.mktemp("truth")
    write_truth(gt, outdir)
    return gt, read_truth(outdir)


class TestTruthRoundtrip:
    def test_rig_and_xi(self, roundtrip):
        gt, back = roundtrip
        assert back.rig.baseline == gt.rig.baseline
        assert np.abs(back.xi - gt.xi).max() == 0.0

    def test_disparity_quantization(self, roundtrip):
        gt, back = roundtrip
        for frame in sceneio.FRAMES:
            assert np.abs(back.disp[frame] - gt.disp[frame]).max() <= 0.5 / 256

    def test_flow_quantization(self, roundtrip):
        gt, back = roundtrip
        assert np.abs(back.flow_fwd - gt.flow_fwd).max() <= 0.5 / 64
        assert np.abs(back.flow_bwd - gt.flow_bwd).max() <= 0.5 / 64

    def test_discrete_maps_exact(self, roundtrip):
        gt, back = roundtrip
        for frame in sceneio.FRAMES:
            assert (back.sem[frame] == gt.sem[frame]).all()
            assert (back.inst[frame] == gt.inst[frame]).all()
        for key in sceneio.OCC_KEYS:
            assert (back.occ[key] == gt.occ[key]).all()
        for d in ("fwd", "bwd"):
            assert (np.asarray(back.dyn[d]) == np.asarray(gt.dyn[d])).all()

    def test_images_and_features(self, roundtrip):
        gt, back = roundtrip
        assert np.abs(back.images["l_t"] - gt.images["l_t"]).max() <= 0.5 / 65535
        assert np.abs(back.f_seg["l_t"] - gt.f_seg["l_t"]).max() == 0.0

    def test_motions(self, roundtrip):
        gt, back = roundtrip
        for d in ("fwd", "bwd"):
            assert len(back.instance_motions[d]) == len(gt.instance_motions[d])
            for a, b in zip(gt.instance_motions[d], back.instance_motions[d]):
                assert a["instance_id"] == b["instance_id"]
                err = (a["apparent"].matrix() - b["apparent"].matrix()).abs().max()
                assert float(err) < 1e-12


class TestBridge:
    def test_variable_set(self):
        gt = truth("verify_tiny")
        v = variables_from_truth(gt)
        assert set(v) == {"D_l_t", "D_l_t1", "D_r_t", "F_fwd", "F_bwd",
                          "O_F_fwd", "O_F_bwd", "O_D_l", "O_D_r", "xi"}
        assert v["F_fwd"].shape == (24, 32, 2)
        assert v["xi"].shape == (6,)

    def test_inputs(self):
        gt = truth("verify_tiny")
        inputs = inputs_from_truth(gt)
        assert set(inputs.images) == set(sceneio.FRAMES)
        assert set(inputs.bundles) == set(sceneio.LOSS_FRAMES)
        assert inputs.rig is gt.rig


class TestPerturb:
    def setup_method(self):
        self.v = variables_from_truth(truth("verify_tiny"))

    def test_deterministic(self):
        a = perturb_variables(self.v, seed=4, disp_sigma=1.0, flow_sigma=1.0)
        b = perturb_variables(self.v, seed=4, disp_sigma=1.0, flow_sigma=1.0)
        for k in a:
            assert torch.equal(a[k], b[k])

    def test_disparity_clamped_positive(self):
        out = perturb_variables(self.v, seed=0, disp_sigma=50.0)
        assert float(out["D_l_t"].min()) >= 0.05

    def test_flow_region_mask(self):
        region = np.zeros((24, 32), dtype=bool)
        region[5:10, 5:10] = True
        out = perturb_variables(self.v, seed=0, flow_sigma=1.0,
                                flow_region=region)
        delta = (out["F_fwd"] - self.v["F_fwd"]).abs().sum(-1)
        assert (delta.numpy()[~region] == 0).all()
        assert delta.numpy()[region].max() > 0

    def test_twist_magnitudes(self):
        out = perturb_variables(self.v, seed=1, rot_deg=2.0, trans_frac=0.05)
        d = (out["xi"] - self.v["xi"]).numpy()
        assert abs(np.linalg.norm(d[3:]) - math.radians(2.0)) < 1e-12
        t0 = np.linalg.norm(self.v["xi"].numpy()[:3])
        assert abs(np.linalg.norm(d[:3]) - 0.05 * t0) < 1e-12

    def test_untouched_variables(self):
        out = perturb_variables(self.v, seed=0, disp_sigma=1.0)
        assert torch.equal(out["F_fwd"], self.v["F_fwd"])
        assert torch.equal(out["O_F_fwd"], self.v["O_F_fwd"])
