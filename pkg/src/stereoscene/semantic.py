"""Semantic inputs and semantics-driven losses: border regression, feature
matching, weighted semantic patch smoothing, depth occlusion filling and sky
regularization."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import distance_transform_edt

from .geom import StereoRig, as_tensor, depth_weight
from .photo import CHARBONNIER_EPS, charbonnier
from .report import LossReport, make_report
from .warp import DisplacementMap, sample

# 12-class palette; ids are contractual for the PNG serialization.
CLASSES = (
    "Road", "Sidewalk", "Building", "Construction", "Fence", "Poles",
    "Vegetation", "VariousTerrain", "Sky", "PedestrianRider", "Vehicle",
    "Background",
)
CLASS_ID = {name: i for i, name in enumerate(CLASSES)}
SKY = CLASS_ID["Sky"]
VEHICLE = CLASS_ID["Vehicle"]
PEDESTRIAN_RIDER = CLASS_ID["PedestrianRider"]

# Structural-variance groups for the smoothing weight alpha_c.
_LOW_WEIGHT = ("Construction", "Fence", "Poles", "Vegetation", "VariousTerrain",
               "PedestrianRider")
_HIGH_WEIGHT = ("Vehicle", "Road", "Sidewalk")

OCCLUDED_WEIGHT = 8.0


@dataclass(frozen=True)
class RobustLossParams:
    alpha: float = 0.5
    c: float = 0.1

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("scale c must be positive")


class ClassWeights:
    """Per-class smoothing weight alpha_c, with an occluded-pixel override."""

    def __init__(self, weights=None, occluded=OCCLUDED_WEIGHT):
        if weights is None:
            weights = {}
            for name in CLASSES:
                if name in _LOW_WEIGHT:
                    weights[CLASS_ID[name]] = 0.1
                elif name in _HIGH_WEIGHT:
                    weights[CLASS_ID[name]] = 8.0
                else:
                    weights[CLASS_ID[name]] = 1.0
        if any(w <= 0 for w in weights.values()) or occluded <= 0:
            raise ValueError("class weights must be positive")
        self.weights = dict(weights)
        self.occluded = occluded

    def lookup(self, sem):
        """Per-pixel weight tensor for an integer class map."""
        table = torch.zeros(len(CLASSES), dtype=torch.float64)
        for cid, wgt in self.weights.items():
            table[cid] = wgt
        return table[torch.as_tensor(np.asarray(sem), dtype=torch.long)]


@dataclass
class FeatureBundle:
    """Per-frame semantic features: softmax class scores, border regression
    map and mid-level features squeezed to [0, 1]."""

    class_scores: torch.Tensor  # HxWxNumClasses
    border: torch.Tensor        # HxW
    features: torch.Tensor      # HxWxC

    def __post_init__(self):
        self.class_scores = as_tensor(self.class_scores)
        self.border = as_tensor(self.border)
        self.features = as_tensor(self.features)


def robust_rho(x, params: RobustLossParams = RobustLossParams()):
    """General robust loss of Barron form for shape alpha != 0, 2."""
    x = as_tensor(x)
    a, c = params.alpha, params.c
    am2 = abs(a - 2.0)
    return (am2 / a) * (((x / c) ** 2 / am2 + 1.0) ** (a / 2.0) - 1.0)


def _rho_of(d, params):
    """robust_rho without autograd bookkeeping, with a fast alpha=1/2 path."""
    a, c = params.alpha, params.c
    am2 = abs(a - 2.0)
    y = d * d / (c * c * am2) + 1.0
    if a == 0.5:
        p = torch.sqrt(torch.sqrt(y))
    else:
        p = y ** (a / 2.0)
    return (am2 / a) * (p - 1.0)


def _rho_grad_of(d, params):
    """d robust_rho(d) / dd as an odd function of the signed residual."""
    a, c = params.alpha, params.c
    am2 = abs(a - 2.0)
    y = d * d / (c * c * am2) + 1.0
    if a == 0.5:
        p = torch.sqrt(torch.sqrt(y))  # y^(1/4); y^(a/2-1) = p / y
        fac = p / y
    else:
        fac = y ** (a / 2.0 - 1.0)
    return (d / (c * c)) * fac


class _WindowRobustSum(torch.autograd.Function):
    """sum_i w_i sum_k M_ik Omega_ik sum_ch rho(n[i+k] - g[i]).

    The window sum over hundreds of offsets is evaluated with an analytic
    backward pass; tracing it through autograd would retain one set of
    intermediates per offset. M restricts to same-region neighbors,
    Omega_ik = exp(-dist_k * inv_decay_i); w, inv_decay and region are
    constants. With live_neighbors the gradient also scatters onto n == g.
    """

    @staticmethod
    def forward(ctx, g, neighbor, center_w, inv_decay, region, nbr_region,
                offsets, dists, params, live_neighbors):
        h, w = g.shape[:2]
        r = max(max(abs(dy), abs(dx)) for dy, dx in offsets)
        with torch.no_grad():
            np_ = torch.nn.functional.pad(
                neighbor.permute(2, 0, 1), (r, r, r, r)).permute(1, 2, 0)
            regp = torch.nn.functional.pad(nbr_region, (r, r, r, r), value=-1)
            total = torch.zeros((), dtype=torch.float64)
            for (dy, dx), dist in zip(offsets, dists):
                m = regp[r + dy:r + dy + h, r + dx:r + dx + w] == region
                u = center_w * m * torch.exp(-dist * inv_decay)
                diff = np_[r + dy:r + dy + h, r + dx:r + dx + w] - g
                total += (u * _rho_of(diff, params).sum(dim=-1)).sum()
        ctx.save_for_backward(g, neighbor, center_w, inv_decay, region,
                              nbr_region)
        ctx.meta = (offsets, dists, params, live_neighbors, r)
        return total

    @staticmethod
    def backward(ctx, grad_out):
        (g, neighbor, center_w, inv_decay, region,
         nbr_region) = ctx.saved_tensors
        offsets, dists, params, live_neighbors, r = ctx.meta
        h, w = g.shape[:2]
        with torch.no_grad():
            np_ = torch.nn.functional.pad(
                neighbor.permute(2, 0, 1), (r, r, r, r)).permute(1, 2, 0)
            regp = torch.nn.functional.pad(nbr_region, (r, r, r, r), value=-1)
            grad_g = torch.zeros_like(g)
            grad_n = torch.zeros_like(neighbor) if live_neighbors else None
            pad_t = torch.zeros((h + 2 * r, w + 2 * r) + g.shape[2:],
                                dtype=torch.float64)
            for (dy, dx), dist in zip(offsets, dists):
                m = regp[r + dy:r + dy + h, r + dx:r + dx + w] == region
                u = center_w * m * torch.exp(-dist * inv_decay)
                diff = np_[r + dy:r + dy + h, r + dx:r + dx + w] - g
                t = u.unsqueeze(-1) * _rho_grad_of(diff, params)
                grad_g -= t
                if live_neighbors:
                    # scatter onto the neighbor position i + k
                    pad_t.zero_()
                    pad_t[r:r + h, r:r + w] = t
                    grad_n += pad_t[r - dy:r - dy + h, r - dx:r - dx + w]
            if live_neighbors:
                grad_g = grad_g + grad_n
            grad_g = grad_g * grad_out
        return (grad_g, None, None, None, None, None, None, None, None,
                None)


def _window_robust_sum(g, neighbor, center_w, inv_decay, region, offsets,
                       dists, params, live_neighbors, nbr_region=None):
    if nbr_region is None:
        nbr_region = region
    if live_neighbors:
        # a single differentiable input; the neighbor field is the same tensor
        return _WindowRobustSum.apply(g, g.detach(), center_w, inv_decay,
                                      region, nbr_region, offsets, dists,
                                      params, True)
    return _WindowRobustSum.apply(g, neighbor, center_w, inv_decay, region,
                                  nbr_region, offsets, dists, params, False)


def border_regression(inst, sigma=15.0):
    """Exponential of pixel distance to the nearest instance border.

    A border pixel is one whose 4-neighborhood contains a different instance
    id (id 0 counts as "no instance"). With no instances present the map is
    identically zero.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    ids = np.asarray(inst)
    if not (ids > 0).any():
        return torch.zeros(ids.shape, dtype=torch.float64)
    border = np.zeros(ids.shape, dtype=bool)
    border[:-1, :] |= ids[:-1, :] != ids[1:, :]
    border[1:, :] |= ids[1:, :] != ids[:-1, :]
    border[:, :-1] |= ids[:, :-1] != ids[:, 1:]
    border[:, 1:] |= ids[:, 1:] != ids[:, :-1]
    d = distance_transform_edt(~border)
    return torch.as_tensor(np.exp(-d / sigma), dtype=torch.float64)


def semantic_match_cost(target: FeatureBundle, src: FeatureBundle,
                        dmap: DisplacementMap, occ, eps=CHARBONNIER_EPS):
    occ = as_tensor(occ)
    total = as_tensor(0.0)
    pairs = (
        (target.class_scores, src.class_scores),
        (target.border, src.border),
        (target.features, src.features),
    )
    for tgt, source in pairs:
        if tgt.shape != source.shape:
            raise ValueError("semantic_match_loss: bundle shapes differ")
        warped, valid = sample(source, dmap)
        diff = charbonnier(tgt - warped, eps)
        if diff.ndim == 3:
            diff = diff.mean(dim=-1)
        weight = occ * valid.to(diff.dtype)
        total = total + (weight * diff).sum() / torch.clamp(weight.sum(), min=1.0)
    return total


def semantic_match_loss(target, src, dmap, occ) -> LossReport:
    vals = dmap.values.detach().clone().requires_grad_(True)
    value = semantic_match_cost(target, src, DisplacementMap(dmap.kind, vals, dmap.valid), occ)
    return make_report(value, {"map": vals})


def region_ids(sem, inst):
    """Combined smoothing-region id: instances refine their class."""
    s = torch.as_tensor(np.asarray(sem), dtype=torch.long)
    i = torch.as_tensor(np.asarray(inst), dtype=torch.long)
    return s * 1_000_000 + i


def _shift(t, dy, dx, fill=0.0):
    """Shifted copy so that out[y, x] = t[y + dy, x + dx]; fill outside."""
    h, w = t.shape[:2]
    out = torch.full_like(t, fill)
    ys0, ys1 = max(dy, 0), min(h + dy, h)
    xs0, xs1 = max(dx, 0), min(w + dx, w)
    if ys0 >= ys1 or xs0 >= xs1:
        return out
    out[ys0 - dy:ys1 - dy, xs0 - dx:xs1 - dx] = t[ys0:ys1, xs0:xs1]
    return out


def forward_gradients(values):
    """Forward differences per axis and channel; last row/col are zero.

    Returns HxWx(2*C) for HxWxC input (or HxWx2 for HxW input).
    """
    v = as_tensor(values)
    if v.ndim == 2:
        v = v.unsqueeze(-1)
    gx = torch.zeros_like(v)
    gy = torch.zeros_like(v)
    gx[:, :-1] = v[:, 1:] - v[:, :-1]
    gy[:-1, :] = v[1:, :] - v[:-1, :]
    return torch.cat([gx, gy], dim=-1)


def _window_offsets(radius):
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            yield dy, dx


def wsps_cost(dmap: DisplacementMap, sem, inst, depth, rig: StereoRig,
              weights: ClassWeights = None, rho: RobustLossParams = RobustLossParams(),
              eta=10.0, radius=12, occ=None):
    """Weighted semantic patch smoothing over same-class/instance windows."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    weights = weights or ClassWeights()
    grads = forward_gradients(dmap.values)
    region = region_ids(sem, inst)
    h, w = dmap.shape
    z = as_tensor(depth)
    theta = depth_weight(z, rig)

    alpha_c = weights.lookup(sem)
    if occ is not None:
        occ_t = as_tensor(occ)
        alpha_c = torch.where(occ_t > 0.5, alpha_c, torch.full_like(alpha_c, weights.occluded))

    # decay and class weights enter as constants: perturbing the maps must
    # move the loss only through the robust residuals
    inv_decay = (1.0 / (eta * theta)).detach()
    alpha_c = alpha_c.detach()
    offsets = list(_window_offsets(radius))
    dists = [math.hypot(dx, dy) for dy, dx in offsets]
    r = radius
    with torch.no_grad():
        regp = torch.nn.functional.pad(region, (r, r, r, r), value=-1)
        counts = torch.zeros((h, w), dtype=torch.float64)
        for dy, dx in offsets:
            counts += regp[r + dy:r + dy + h, r + dx:r + dx + w] == region
        center_w = alpha_c / torch.clamp(counts, min=1.0) / (h * w)
    return _window_robust_sum(grads, grads, center_w, inv_decay, region,
                              offsets, dists, rho, live_neighbors=True)


def wsps_loss(dmap, sem, inst, depth, rig, weights=None,
              rho=RobustLossParams(), eta=10.0, radius=12, occ=None) -> LossReport:
    vals = dmap.values.detach().clone().requires_grad_(True)
    value = wsps_cost(DisplacementMap(dmap.kind, vals, dmap.valid), sem, inst,
                      depth, rig, weights, rho, eta, radius, occ)
    return make_report(value, {"map": vals})


def depth_occ_fill_cost(disp: DisplacementMap, sem, inst, occ, rig: StereoRig,
                        weights: ClassWeights = None,
                        rho: RobustLossParams = RobustLossParams(),
                        eta=10.0, radius=12, neighbor_values=None):
    """Pull occluded disparities toward visible same-class evidence.

    Neighbor disparities enter as constants (one-sided guidance) so
    occlusions never corrupt visible estimates; pass neighbor_values to pin
    them at a reference point. The y-distance weighting reflects rectified
    stereo geometry.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    weights = weights or ClassWeights()
    d = disp.values
    if d.ndim != 2:
        raise ValueError("depth occlusion filling applies to disparity maps")
    region = region_ids(sem, inst)
    occ_t = as_tensor(occ)
    occluded = occ_t < 0.5
    if not occluded.any():
        return as_tensor(0.0)
    visible = ~occluded

    d_const = (d.detach() if neighbor_values is None
               else as_tensor(neighbor_values).detach())
    # decay weights come from the frozen reference field so the loss is live
    # only through the robust residuals at occluded centers
    z = rig.intrinsics.fx * rig.baseline / torch.clamp(d_const, min=1e-6)
    inv_decay = 1.0 / (eta * depth_weight(z, rig))

    # visible-only neighbors: give hidden pixels a private region id so the
    # same-region test additionally requires visibility
    offsets = list(_window_offsets(radius))
    dists = [float(abs(dy)) for dy, dx in offsets]
    h, w = d.shape
    r = radius
    with torch.no_grad():
        vis_region = torch.where(visible, region, torch.full_like(region, -2))
        regp = torch.nn.functional.pad(vis_region, (r, r, r, r), value=-1)
        den = torch.zeros((h, w), dtype=torch.float64)
        for (dy, dx), dist in zip(offsets, dists):
            m = regp[r + dy:r + dy + h, r + dx:r + dx + w] == region
            den += m * torch.exp(-dist * inv_decay)
        alpha_c = weights.lookup(sem)
        center_w = torch.where(occluded & (den > 0),
                               alpha_c / torch.clamp(den, min=1e-300),
                               torch.zeros_like(den)) / occluded.sum()
    return _window_robust_sum(d.unsqueeze(-1), d_const.unsqueeze(-1), center_w,
                              inv_decay, region, offsets, dists, rho,
                              live_neighbors=False, nbr_region=vis_region)


def depth_occ_fill_loss(disp, sem, inst, occ, rig, weights=None,
                        rho=RobustLossParams(), eta=10.0, radius=12) -> LossReport:
    vals = disp.values.detach().clone().requires_grad_(True)
    value = depth_occ_fill_cost(DisplacementMap(disp.kind, vals, disp.valid),
                                sem, inst, occ, rig, weights, rho, eta, radius)
    return make_report(value, {"map": vals})


def sky_cost(dmap: DisplacementMap, sem, eps=CHARBONNIER_EPS):
    """Mean Charbonnier-smoothed magnitude of the map over sky pixels."""
    sky = torch.as_tensor(np.asarray(sem), dtype=torch.long) == SKY
    if not sky.any():
        return as_tensor(0.0)
    v = dmap.values
    if v.ndim == 2:
        sq = v * v
    else:
        sq = (v * v).sum(dim=-1)
    mag = torch.sqrt(sq + eps * eps)
    return (mag * sky.to(mag.dtype)).sum() / sky.sum()


def sky_loss(dmap, sem) -> LossReport:
    vals = dmap.values.detach().clone().requires_grad_(True)
    value = sky_cost(DisplacementMap(dmap.kind, vals, dmap.valid), sem)
    return make_report(value, {"map": vals})
