"""Rigid motion fitting, association and the 3D coupling losses."""

import itertools
import math

import numpy as np
import pytest
import torch

from stereoscene import rigid
from stereoscene.geom import (CameraIntrinsics, RigidTransform, StereoRig,
                              Twist, exp_se3, inverse)
from stereoscene.rigid import (FitFailure, InstanceMatch, associate_instances,
                               dynamic_mask, fit_instance_motion, focc_cost,
                               l3d_dyn_cost, l3d_rigid_cost, q_weights,
                               refit_with_quality, weighted_procrustes)
from stereoscene.warp import flow_map

RNG = np.random.default_rng(31)
RIG = StereoRig(CameraIntrinsics(100.0, 100.0, 95.5, 47.5), 0.54)


def random_transform(rng, rot_scale=0.5, t_scale=1.0):
    return exp_se3(Twist(rng.normal(size=3) * t_scale,
                         rng.normal(size=3) * rot_scale))


def rotation_angle_deg(Ra, Rb):
    tr = float(np.trace(Ra.T @ Rb))
    return math.degrees(math.acos(min(1.0, max(-1.0, (tr - 1) / 2))))


class TestProcrustes:
    def test_noiseless_exact_recovery(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            T = random_transform(rng)
            src = rng.uniform(-5, 5, size=(50, 3))
            tgt = T.apply(torch.as_tensor(src)).numpy()
            F = weighted_procrustes(src, tgt)
            assert np.abs(F.R.numpy() - T.R.numpy()).max() < 1e-9
            assert np.abs(F.t.numpy() - T.t.numpy()).max() < 1e-9

    def test_outliers_with_quality_reweighting(self):
        rng = np.random.default_rng(3)
        T = random_transform(rng, rot_scale=0.2, t_scale=0.5)
        src = rng.uniform(-5, 5, size=(100, 3))
        tgt = T.apply(torch.as_tensor(src)).numpy()
        bad = rng.choice(100, size=20, replace=False)
        tgt[bad] += rng.normal(size=(20, 3)) * 1.0
        F, Q, _ = refit_with_quality(src, tgt, iterations=3)
        assert rotation_angle_deg(F.R.numpy(), T.R.numpy()) < 0.5
        assert np.linalg.norm(F.t.numpy() - T.t.numpy()) < 0.02
        # the outliers get visibly smaller weights
        assert Q[bad].mean() < 0.5 * np.delete(Q, bad).mean()

    def test_weighted_zero_weight_ignores_points(self):
        rng = np.random.default_rng(4)
        T = random_transform(rng)
        src = rng.uniform(-2, 2, size=(10, 3))
        tgt = T.apply(torch.as_tensor(src)).numpy()
        src_b = np.vstack([src, rng.uniform(-2, 2, size=(3, 3))])
        tgt_b = np.vstack([tgt, rng.uniform(-9, 9, size=(3, 3))])
        w = np.array([1.0] * 10 + [0.0] * 3)
        F = weighted_procrustes(src_b, tgt_b, w)
        assert np.abs(F.matrix().numpy() - T.matrix().numpy()).max() < 1e-9

    def test_too_few_points(self):
        with pytest.raises(FitFailure):
            weighted_procrustes(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_collinear_degenerate(self):
        src = np.outer(np.arange(10.0), np.array([1.0, 0, 0]))
        with pytest.raises(FitFailure):
            weighted_procrustes(src, src)

    def test_reflection_guard(self):
        """A near-planar cloud with a mirrored target must still produce a
        proper rotation (det +1)."""
        rng = np.random.default_rng(5)
        src = rng.uniform(-1, 1, size=(30, 3))
        src[:, 2] *= 1e-3
        tgt = src.copy()
        tgt[:, 2] *= -1.0
        F = weighted_procrustes(src, tgt)
        assert abs(float(np.linalg.det(F.R.numpy())) - 1.0) < 1e-9


class TestAssociation:
    def brute_force_best(self, iou):
        if iou.shape[0] > iou.shape[1]:
            iou = iou.T
        n, m = iou.shape
        return max(sum(iou[i, c] for i, c in enumerate(cols))
                   for cols in itertools.permutations(range(m), n))

    def test_hungarian_equals_brute_force(self):
        from scipy.optimize import linear_sum_assignment
        for seed in range(200):
            rng = np.random.default_rng(seed)
            n, m = rng.integers(1, 7), rng.integers(1, 7)
            iou = rng.uniform(size=(n, m))
            rows, cols = linear_sum_assignment(-iou)
            got = iou[rows, cols].sum()
            assert abs(got - self.brute_force_best(iou)) < 1e-12

    def test_iou_threshold_rejects(self):
        h, w = 20, 30
        src = np.zeros((h, w), dtype=np.int32)
        tgt = np.zeros((h, w), dtype=np.int32)
        src[5:10, 5:15] = 1
        tgt[5:10, 11:21] = 1   # overlap 4/16 = 0.25 < 0.5 under zero flow
        flow = flow_map(torch.zeros(h, w, 2, dtype=torch.float64))
        assert associate_instances(src, tgt, flow) == []

    def test_flow_warp_aligns_masks(self):
        h, w = 20, 30
        src = np.zeros((h, w), dtype=np.int32)
        tgt = np.zeros((h, w), dtype=np.int32)
        src[5:10, 5:15] = 7
        tgt[5:10, 11:21] = 9
        f = torch.zeros(h, w, 2, dtype=torch.float64)
        f[..., 0] = -6.0  # target pixel x corresponds to source x - 6
        out = associate_instances(src, tgt, flow_map(f))
        assert len(out) == 1
        assert (out[0].source_id, out[0].target_id) == (7, 9)
        assert out[0].iou > 0.99


class TestInstanceMotion:
    def make_box_scene(self, translation):
        """Flat fronto-parallel 'box' square at z=10 moving by translation."""
        h, w = 40, 60
        inst = np.zeros((h, w), dtype=np.int32)
        inst[10:30, 20:40] = 1
        z = np.full((h, w), 10.0)
        xs, ys = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        fx = fy = 50.0
        cx, cy = 29.5, 19.5
        P_tgt = np.stack([(xs - cx) / fx * z, (ys - cy) / fy * z, z], axis=-1)
        # both grids carry the same pixel->point field; the flow encodes the
        # correspondence, so the warped source point is P_tgt shifted by -t
        du = fx * translation[0] / 10.0
        dv = fy * translation[1] / 10.0
        P_src = P_tgt.copy()
        flow = np.zeros((h, w, 2))
        flow[..., 0] = -du
        flow[..., 1] = -dv
        valid = np.ones((h, w), dtype=bool)
        return (inst, torch.as_tensor(P_src), valid,
                torch.as_tensor(P_tgt), valid, flow_map(torch.as_tensor(flow)))

    def test_translation_recovered_within_1cm(self):
        t = np.array([0.4, -0.1, 0.0])
        inst, P_src, sv, P_tgt, tv, flow = self.make_box_scene(t)
        match = InstanceMatch(1, 1, 1.0)
        m = fit_instance_motion(match, flow, P_src, sv, P_tgt, tv,
                                RigidTransform.identity(), inst, inst)
        assert np.linalg.norm(m.residual.t.numpy() - t) < 0.01
        assert rotation_angle_deg(m.residual.R.numpy(), np.eye(3)) < 0.1


def test_dynamic_mask_speed_threshold():
    inst = np.zeros((4, 4), dtype=np.int32)
    inst[:2] = 1
    inst[2:] = 2
    sem = np.full((4, 4), 10, dtype=np.int32)
    slow = rigid.InstanceMotion(1, RigidTransform(np.eye(3), [0.01, 0, 0]),
                                RigidTransform.identity(), 0.0)
    fast = rigid.InstanceMotion(2, RigidTransform(np.eye(3), [0.5, 0, 0]),
                                RigidTransform.identity(), 0.0)
    mask = dynamic_mask([slow, fast], inst, sem, dt=0.1)
    assert not mask[:2].any()   # 0.36 km/h
    assert mask[2:].all()       # 18 km/h


def test_dynamic_mask_nonrigid_class_always_dynamic():
    from stereoscene.semantic import PEDESTRIAN_RIDER
    sem = np.full((3, 3), PEDESTRIAN_RIDER, dtype=np.int32)
    mask = dynamic_mask([], np.zeros((3, 3), dtype=np.int32), sem)
    assert mask.all()


def test_l3d_rigid_zero_at_consistency():
    """A static fronto-parallel plane with zero flow and identity ego gives
    the Charbonnier floor exactly."""
    h, w = 10, 12
    z = torch.full((h, w), 8.0, dtype=torch.float64)
    xs, ys = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    P = torch.stack([torch.as_tensor(xs) * 0.1, torch.as_tensor(ys) * 0.1, z], dim=-1)
    valid = torch.ones(h, w, dtype=torch.bool)
    occ = torch.ones(h, w, dtype=torch.float64)
    dyn = torch.zeros(h, w, dtype=torch.bool)
    val = l3d_rigid_cost(P, valid, P, valid, flow_map(torch.zeros(h, w, 2, dtype=torch.float64)),
                         RigidTransform.identity(), occ, dyn, RIG)
    assert abs(float(val) - 1e-3) < 1e-12


def test_focc_static_pulls_toward_rigid_flow():
    h, w = 6, 6
    F = torch.zeros(h, w, 2, dtype=torch.float64, requires_grad=True)
    fr = torch.ones(h, w, 2, dtype=torch.float64)
    occ = torch.zeros(h, w, dtype=torch.float64)  # everything occluded
    dyn = torch.zeros(h, w, dtype=torch.bool)
    val = focc_cost(flow_map(F), fr, occ, dyn, [], gamma=0.1)
    val.backward()
    assert float(val.detach()) > 0
    assert (F.grad < 0).all()  # pushes F up toward fr = 1


def test_focc_rigid_valid_masks_static_term():
    h, w = 4, 4
    F = torch.zeros(h, w, 2, dtype=torch.float64)
    fr = torch.ones(h, w, 2, dtype=torch.float64) * 5.0
    occ = torch.zeros(h, w, dtype=torch.float64)
    dyn = torch.zeros(h, w, dtype=torch.bool)
    ok = torch.zeros(h, w, dtype=torch.float64)
    val = focc_cost(flow_map(F), fr, occ, dyn, [], gamma=0.1, rigid_valid=ok)
    assert float(val) == 0.0
