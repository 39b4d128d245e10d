"""Semantic losses against brute-force window oracles."""

import math

import numpy as np
import pytest
import torch

from stereoscene.geom import CameraIntrinsics, StereoRig
from stereoscene.semantic import (CLASS_ID, ClassWeights, FeatureBundle,
                                  RobustLossParams, border_regression,
                                  depth_occ_fill_cost, depth_occ_fill_loss,
                                  forward_gradients, region_ids, robust_rho,
                                  semantic_match_cost, sky_cost, wsps_cost,
                                  wsps_loss)
from stereoscene.warp import disparity_map, flow_map

RNG = np.random.default_rng(23)
RIG = StereoRig(CameraIntrinsics(100.0, 100.0, 95.5, 47.5), 0.54)


def rho_oracle(x, alpha=0.5, c=0.1):
    b = abs(alpha - 2.0)
    return (b / alpha) * ((x * x / (c * c * b) + 1.0) ** (alpha / 2.0) - 1.0)


class TestRobustRho:
    def test_zero_at_zero(self):
        assert float(robust_rho(torch.zeros(1, dtype=torch.float64))) == 0.0

    def test_matches_closed_form(self):
        x = torch.as_tensor(RNG.normal(size=50))
        ref = rho_oracle(x.numpy())
        assert np.abs(robust_rho(x).numpy() - ref).max() < 1e-12

    def test_even_and_monotone(self):
        x = torch.linspace(0, 5, 100, dtype=torch.float64)
        r = robust_rho(x)
        assert (robust_rho(-x) - r).abs().max() < 1e-14
        assert (r[1:] > r[:-1]).all()


class TestBorderRegression:
    def brute_force(self, inst, sigma):
        ids = np.asarray(inst)
        h, w = ids.shape
        border = []
        for r in range(h):
            for c in range(w):
                for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and ids[rr, cc] != ids[r, c]:
                        border.append((r, c))
                        break
        out = np.zeros((h, w))
        for r in range(h):
            for c in range(w):
                d = min(math.hypot(r - br, c - bc) for br, bc in border)
                out[r, c] = math.exp(-d / sigma)
        return out

    def test_matches_brute_force(self):
        inst = np.zeros((9, 12), dtype=np.int32)
        inst[3:6, 4:9] = 2
        got = border_regression(inst, sigma=5.0).numpy()
        ref = self.brute_force(inst, 5.0)
        assert np.abs(got - ref).max() < 1e-9

    def test_no_instances_all_zero(self):
        assert border_regression(np.zeros((5, 5))).abs().max() == 0


def test_class_weight_groups():
    w = ClassWeights()
    assert w.weights[CLASS_ID["Vehicle"]] == 8.0
    assert w.weights[CLASS_ID["Poles"]] == 0.1
    assert w.weights[CLASS_ID["Sky"]] == 1.0
    assert w.occluded == 8.0
    with pytest.raises(ValueError):
        ClassWeights({0: -1.0})


def wsps_oracle(values, sem, inst, depth, rig, radius, eta, occ=None):
    """Direct quadruple loop over centers, window offsets and channels."""
    weights = ClassWeights()
    grads = forward_gradients(torch.as_tensor(values)).numpy()
    region = region_ids(sem, inst).numpy()
    h, w = region.shape
    theta = (1.0 / (1.0 + depth**2 / (rig.baseline * rig.intrinsics.fx)))
    alpha = weights.lookup(sem).numpy().copy()
    if occ is not None:
        alpha = np.where(np.asarray(occ) > 0.5, alpha, weights.occluded)
    total = 0.0
    for r in range(h):
        for c in range(w):
            acc = 0.0
            count = 0
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    if dy == 0 and dx == 0:
                        continue
                    rr, cc = r + dy, c + dx
                    if not (0 <= rr < h and 0 <= cc < w):
                        continue
                    if region[rr, cc] != region[r, c]:
                        continue
                    count += 1
                    decay = math.exp(-math.hypot(dy, dx) / (eta * theta[r, c]))
                    acc += decay * rho_oracle(grads[rr, cc] - grads[r, c]).sum()
            if count:
                total += alpha[r, c] / count / (h * w) * acc
    return total


class TestWsps:
    def setup_method(self):
        self.h, self.w = 7, 8
        self.sem = np.zeros((self.h, self.w), dtype=np.int32)
        self.sem[:, 4:] = CLASS_ID["Building"]
        self.inst = np.zeros_like(self.sem)
        self.inst[2:5, 1:3] = 3
        self.depth = RNG.uniform(5.0, 30.0, size=(self.h, self.w))
        self.vals = RNG.uniform(2.0, 8.0, size=(self.h, self.w))

    def test_matches_brute_force(self):
        got = wsps_cost(disparity_map(torch.as_tensor(self.vals)), self.sem,
                        self.inst, torch.as_tensor(self.depth), RIG, radius=2)
        ref = wsps_oracle(self.vals, self.sem, self.inst, self.depth, RIG, 2, 10.0)
        assert abs(float(got) - ref) < 1e-10 * max(1.0, abs(ref))

    def test_occlusion_override_matches(self):
        occ = (RNG.uniform(size=(self.h, self.w)) > 0.4).astype(float)
        got = wsps_cost(disparity_map(torch.as_tensor(self.vals)), self.sem,
                        self.inst, torch.as_tensor(self.depth), RIG, radius=2,
                        occ=torch.as_tensor(occ))
        ref = wsps_oracle(self.vals, self.sem, self.inst, self.depth, RIG, 2,
                          10.0, occ=occ)
        assert abs(float(got) - ref) < 1e-10 * max(1.0, abs(ref))

    def test_gradient_matches_fd(self):
        vals = torch.as_tensor(self.vals)
        rep = wsps_loss(disparity_map(vals), self.sem, self.inst,
                        torch.as_tensor(self.depth), RIG, radius=2)
        g = rep.grad("map")
        eps = 1e-6
        for _ in range(10):
            r, c = RNG.integers(self.h), RNG.integers(self.w)
            vp = vals.clone(); vp[r, c] += eps
            vm = vals.clone(); vm[r, c] -= eps
            fp = float(wsps_cost(disparity_map(vp), self.sem, self.inst,
                                 torch.as_tensor(self.depth), RIG, radius=2))
            fm = float(wsps_cost(disparity_map(vm), self.sem, self.inst,
                                 torch.as_tensor(self.depth), RIG, radius=2))
            fd = (fp - fm) / (2 * eps)
            assert abs(fd - float(g[r, c])) < 1e-5 * max(1.0, abs(fd))

    def test_constant_map_zero_cost(self):
        const = torch.full((self.h, self.w), 4.0, dtype=torch.float64)
        got = wsps_cost(disparity_map(const), self.sem, self.inst,
                        torch.as_tensor(self.depth), RIG, radius=2)
        assert abs(float(got)) < 1e-14


class TestDepthOccFill:
    def setup_method(self):
        self.h, self.w = 6, 9
        self.sem = np.zeros((self.h, self.w), dtype=np.int32)
        self.inst = np.zeros_like(self.sem)
        self.d = RNG.uniform(4.0, 9.0, size=(self.h, self.w))
        self.occ = np.ones((self.h, self.w))
        self.occ[2:4, 3:6] = 0.0

    def test_no_occlusion_zero(self):
        got = depth_occ_fill_cost(disparity_map(torch.as_tensor(self.d)),
                                  self.sem, self.inst,
                                  torch.ones(self.h, self.w, dtype=torch.float64), RIG)
        assert float(got) == 0.0

    def test_visible_pixels_carry_no_gradient(self):
        rep = depth_occ_fill_loss(disparity_map(torch.as_tensor(self.d)),
                                  self.sem, self.inst,
                                  torch.as_tensor(self.occ), RIG, radius=3)
        g = rep.grad("map")
        assert g[self.occ > 0.5].abs().max() == 0
        assert g[self.occ < 0.5].abs().max() > 0

    def test_matches_brute_force(self):
        got = float(depth_occ_fill_cost(
            disparity_map(torch.as_tensor(self.d)), self.sem, self.inst,
            torch.as_tensor(self.occ), RIG, radius=3))
        weights = ClassWeights()
        eta = 10.0
        z = RIG.intrinsics.fx * RIG.baseline / self.d
        theta = 1.0 / (1.0 + z**2 / (RIG.baseline * RIG.intrinsics.fx))
        inv_decay = 1.0 / (eta * theta)
        total = 0.0
        n_occ = (self.occ < 0.5).sum()
        for r in range(self.h):
            for c in range(self.w):
                if self.occ[r, c] >= 0.5:
                    continue
                den = 0.0
                acc = 0.0
                for dy in range(-3, 4):
                    for dx in range(-3, 4):
                        if dy == 0 and dx == 0:
                            continue
                        rr, cc = r + dy, c + dx
                        if not (0 <= rr < self.h and 0 <= cc < self.w):
                            continue
                        if self.occ[rr, cc] < 0.5:
                            continue
                        decay = math.exp(-abs(dy) * inv_decay[r, c])
                        den += decay
                        acc += decay * rho_oracle(self.d[rr, cc] - self.d[r, c])
                if den > 0:
                    total += weights.weights[0] * acc / den / n_occ
        assert abs(got - total) < 1e-10 * max(1.0, abs(total))

    def test_gradient_matches_fd(self):
        d0 = torch.as_tensor(self.d)
        rep = depth_occ_fill_loss(disparity_map(d0), self.sem, self.inst,
                                  torch.as_tensor(self.occ), RIG, radius=3)
        g = rep.grad("map")
        eps = 1e-6
        for r, c in ((2, 3), (3, 5), (2, 5)):
            # finite differences against frozen neighbors: pin them at d0
            dp = d0.clone(); dp[r, c] += eps
            dm = d0.clone(); dm[r, c] -= eps
            fp = float(depth_occ_fill_cost(disparity_map(dp), self.sem, self.inst,
                                           torch.as_tensor(self.occ), RIG,
                                           radius=3, neighbor_values=d0))
            fm = float(depth_occ_fill_cost(disparity_map(dm), self.sem, self.inst,
                                           torch.as_tensor(self.occ), RIG,
                                           radius=3, neighbor_values=d0))
            fd = (fp - fm) / (2 * eps)
            assert abs(fd - float(g[r, c])) < 1e-6 * max(1.0, abs(fd))


class TestSky:
    def test_oracle(self):
        sem = np.zeros((4, 4), dtype=np.int32)
        sem[0] = CLASS_ID["Sky"]
        vals = torch.zeros(4, 4, 2, dtype=torch.float64)
        vals[0, :, 0] = 3.0
        got = float(sky_cost(flow_map(vals), sem))
        ref = math.sqrt(9.0 + 1e-6)
        assert abs(got - ref) < 1e-12

    def test_no_sky_zero(self):
        sem = np.zeros((4, 4), dtype=np.int32)
        assert float(sky_cost(flow_map(torch.ones(4, 4, 2, dtype=torch.float64)), sem)) == 0.0


def test_semantic_match_identity_floor():
    h, w = 6, 6
    bundle = FeatureBundle(torch.as_tensor(RNG.uniform(size=(h, w, 12))),
                           torch.as_tensor(RNG.uniform(size=(h, w))),
                           torch.as_tensor(RNG.uniform(size=(h, w, 3))))
    occ = torch.ones(h, w, dtype=torch.float64)
    val = semantic_match_cost(bundle, bundle,
                              flow_map(torch.zeros(h, w, 2, dtype=torch.float64)), occ)
    assert abs(float(val) - 3e-3) < 1e-12  # three charbonnier floors
