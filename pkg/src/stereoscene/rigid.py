"""Rigid instance motion estimation, dynamic segmentation, 3D coupling losses
and rigid flow occlusion filling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .geom import (DTYPE, RigidTransform, StereoRig, as_tensor, compose,
                   depth_weight, inverse, pixel_grid, project)
from .photo import CHARBONNIER_EPS
from .report import LossReport, make_report
from .warp import DisplacementMap, flow_map, sample

IOU_ACCEPT = 0.5
SPEED_THRESHOLD_KMH = 15.0
FRAME_DT = 0.1  # 10 Hz capture
FOCC_GAMMA = 0.1

# Near-exact Euclidean norm; the tiny floor only guards the sqrt at zero.
_NORM_EPS_SQ = 1e-6  # millimetre-scale smoothing of the 3D residual norm


class FitFailure(RuntimeError):
    """Raised when a rigid fit is under-determined or degenerate."""


@dataclass(frozen=True)
class InstanceMatch:
    source_id: int
    target_id: int
    iou: float


@dataclass
class InstanceMotion:
    instance_id: int
    residual: RigidTransform   # motion left after ego compensation
    apparent: RigidTransform   # residual composed with ego-motion
    mean_quality: float


def weighted_procrustes(src, tgt, w=None) -> RigidTransform:
    """argmin_T sum w ||T src - tgt||^2 via weighted Kabsch alignment.

    Enforces a proper rotation through the determinant sign correction.
    Raises FitFailure for fewer than 3 points or a rank-deficient spread.
    """
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    n = src.shape[0]
    if n < 3 or tgt.shape[0] != n:
        raise FitFailure(f"need >= 3 matched points, got {n}")
    if w is None:
        w = np.ones(n)
    w = np.asarray(w, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise FitFailure("non-positive total weight")
    wn = w / total
    cs = wn @ src
    ct = wn @ tgt
    x = src - cs
    y = tgt - ct
    cov = (y * wn[:, None]).T @ x
    U, s, Vt = np.linalg.svd(cov)
    if s[1] < 1e-12 * max(s[0], 1e-300):
        raise FitFailure("degenerate point configuration (rank < 2)")
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, d])
    R = U @ D @ Vt
    t = ct - R @ cs
    return RigidTransform(R, t)


def q_weights(aligned, tgt):
    """Outlier down-weighting Q = exp(-(residual - median(residual)))."""
    aligned = np.asarray(aligned, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    e = np.linalg.norm(aligned - tgt, axis=-1)
    return np.exp(-(e - np.median(e)))


def refit_with_quality(src, tgt, iterations=2):
    """Unweighted fit followed by Q-reweighted refits; returns (T, Q, resid)."""
    T = weighted_procrustes(src, tgt)
    Q = np.ones(len(src))
    for _ in range(iterations - 1):
        aligned = T.apply(torch.as_tensor(src, dtype=DTYPE)).numpy()
        Q = q_weights(aligned, tgt)
        T = weighted_procrustes(src, tgt, Q)
    resid = np.linalg.norm(T.apply(torch.as_tensor(src, dtype=DTYPE)).numpy() - tgt, axis=-1)
    return T, Q, resid


def best_assignment(iou):
    """Row/column pairing maximizing total IoU (Hungarian method)."""
    iou = np.asarray(iou, dtype=np.float64)
    rows, cols = linear_sum_assignment(-iou)
    return list(zip(rows.tolist(), cols.tolist()))


def associate_instances(src_inst, tgt_inst, flow: DisplacementMap):
    """Match source to target instances by flow-warped mask IoU.

    Source masks are carried onto the target grid with nearest-neighbor
    lookups through the flow map; pairs below the IoU threshold are dropped.
    """
    src_ids = np.asarray(src_inst)
    tgt_ids = np.asarray(tgt_inst)
    h, w = src_ids.shape
    u = flow.values[..., 0].detach().numpy()
    v = flow.values[..., 1].detach().numpy()
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    qx = np.rint(xs + u).astype(int)
    qy = np.rint(ys + v).astype(int)
    inb = (qx >= 0) & (qx < w) & (qy >= 0) & (qy < h)
    warped = np.zeros_like(src_ids)
    warped[inb] = src_ids[qy[inb], qx[inb]]

    sids = sorted(set(np.unique(src_ids)) - {0})
    tids = sorted(set(np.unique(tgt_ids)) - {0})
    if not sids or not tids:
        return []
    iou = np.zeros((len(sids), len(tids)))
    for i, sid in enumerate(sids):
        wm = warped == sid
        for j, tid in enumerate(tids):
            tm = tgt_ids == tid
            union = (wm | tm).sum()
            if union:
                iou[i, j] = (wm & tm).sum() / union
    out = []
    for i, j in best_assignment(iou):
        if iou[i, j] >= IOU_ACCEPT:
            out.append(InstanceMatch(int(sids[i]), int(tids[j]), float(iou[i, j])))
    return out


def instance_correspondences(match: InstanceMatch, flow: DisplacementMap,
                             P_src, src_valid, P_tgt, tgt_valid,
                             src_inst, tgt_inst, strict=0.999):
    """Pixelwise matched 3D points for one instance pair.

    Returns (p_hat, p_tgt, pixel_mask) where p_hat is the flow-warped source
    cloud on the target grid. Only pixels fully inside both masks after the
    warp and valid in both clouds are used.
    """
    src_mask = torch.as_tensor(np.asarray(src_inst) == match.source_id, dtype=DTYPE)
    tgt_mask = torch.as_tensor(np.asarray(tgt_inst) == match.target_id)
    p_hat, warp_ok = sample(P_src, flow)
    mask_w, _ = sample(src_mask, flow)
    sv_w, _ = sample(torch.as_tensor(np.asarray(src_valid), dtype=DTYPE), flow)
    sel = (tgt_mask & warp_ok & torch.as_tensor(np.asarray(tgt_valid))
           & (mask_w >= strict) & (sv_w >= strict))
    return p_hat, sel


def fit_instance_motion(match: InstanceMatch, flow: DisplacementMap,
                        P_src, src_valid, P_tgt, tgt_valid,
                        T_ego: RigidTransform, src_inst, tgt_inst) -> InstanceMotion:
    """Residual SE(3) motion of one instance after ego compensation."""
    p_hat, sel = instance_correspondences(match, flow, P_src, src_valid,
                                          P_tgt, tgt_valid, src_inst, tgt_inst)
    if sel.sum().item() < 3:
        raise FitFailure(
            f"instance {match.target_id}: {int(sel.sum())} correspondences")
    aligned = T_ego.apply(p_hat.detach())[sel].numpy()
    tgt_pts = as_tensor(P_tgt).detach()[sel].numpy()
    T_res, _, resid = refit_with_quality(aligned, tgt_pts)
    return InstanceMotion(match.target_id, T_res, compose(T_res, T_ego),
                          float(resid.mean()))


def dynamic_mask(motions, inst, sem, dt=FRAME_DT, v_thresh=SPEED_THRESHOLD_KMH):
    """Binary map of independently moving pixels.

    An instance is dynamic when its residual translation implies a speed over
    v_thresh km/h; non-rigid classes are always dynamic.
    """
    from .semantic import PEDESTRIAN_RIDER

    if dt <= 0:
        raise ValueError("dt must be positive")
    inst_ids = np.asarray(inst)
    sem_ids = np.asarray(sem)
    mask = sem_ids == PEDESTRIAN_RIDER
    for m in motions:
        speed_kmh = float(torch.linalg.norm(m.residual.t)) / dt * 3.6
        if speed_kmh > v_thresh:
            mask = mask | (inst_ids == m.instance_id)
    return torch.as_tensor(mask)


def _smooth_norm(vec, eps=CHARBONNIER_EPS):
    return torch.sqrt((vec * vec).sum(dim=-1) + eps * eps)


def l3d_rigid_cost(P_src, src_valid, P_tgt, tgt_valid, flow: DisplacementMap,
                   T_ego: RigidTransform, occ, dyn, rig: StereoRig):
    """Depth-weighted 3D alignment of static, visible scene parts.

    Weighted mean of theta(Z) * O * (1 - C) * ||P_tgt - T_ego W(P_src, F)||.
    """
    P_tgt = as_tensor(P_tgt)
    p_hat, warp_ok = sample(as_tensor(P_src), flow)
    sv_w, _ = sample(torch.as_tensor(np.asarray(src_valid), dtype=DTYPE), flow)
    aligned = T_ego.apply(p_hat)
    resid = _smooth_norm(P_tgt - aligned)
    theta = depth_weight(torch.clamp(P_tgt[..., 2], min=1e-6), rig)
    occ = as_tensor(occ)
    stat = 1.0 - torch.as_tensor(np.asarray(dyn), dtype=DTYPE)
    ok = (warp_ok & torch.as_tensor(np.asarray(tgt_valid))).to(DTYPE) * (sv_w >= 0.999).to(DTYPE)
    weight = theta * occ * stat * ok
    return (weight * resid).sum() / torch.clamp(weight.sum(), min=1.0)


def l3d_rigid(P_src, src_valid, P_tgt, tgt_valid, flow, T_ego, occ, dyn, rig,
              variables=None) -> LossReport:
    variables = variables or {}
    value = l3d_rigid_cost(P_src, src_valid, P_tgt, tgt_valid, flow, T_ego, occ, dyn, rig)
    return make_report(value, variables)


def l3d_dyn_cost(motions, instance_points, rig: StereoRig, weight=None):
    """Sum over instances of theta(mean depth) * weighted mean of
    ||T_a p_hat - p_tgt|| over the instance's visible pixels.

    instance_points maps instance id -> (p_hat HxWx3, p_tgt HxWx3, sel mask);
    weight is an optional HxW visibility weight (occlusion times warp
    validity). Fitted transforms are constants; gradients flow through the
    clouds and the weight.
    """
    total = as_tensor(0.0)
    for m in motions:
        if m.instance_id not in instance_points:
            continue
        p_hat, p_tgt, sel = instance_points[m.instance_id]
        if sel.sum() == 0:
            continue
        T_a = RigidTransform(m.apparent.R.detach(), m.apparent.t.detach())
        resid = torch.sqrt(((T_a.apply(p_hat) - p_tgt) ** 2).sum(dim=-1)
                           + _NORM_EPS_SQ)
        w = sel.to(DTYPE) if weight is None else sel.to(DTYPE) * weight
        wsum = w.sum()
        if float(wsum.detach()) <= 0.0:
            continue
        z_mean = torch.clamp((p_tgt[..., 2] * w).sum() / wsum, min=1e-6)
        total = total + depth_weight(z_mean, rig) * (resid * w).sum() / wsum
    return total


def l3d_dyn(motions, instance_points, rig, weight=None, variables=None) -> LossReport:
    variables = variables or {}
    value = l3d_dyn_cost(motions, instance_points, rig, weight)
    return make_report(value, variables)


@dataclass
class InstanceFlowTarget:
    """Rigid-flow guidance for one dynamic instance on the target grid."""

    instance_id: int
    mask: torch.Tensor        # HxW bool, owning pixels
    rigid_flow: torch.Tensor  # HxWx2, from the apparent motion
    sigma: torch.Tensor       # HxW reconstruction-quality weight


def instance_flow_target(motion: InstanceMotion, p_hat, P_tgt, tgt_inst,
                         disp_tgt, rig: StereoRig) -> InstanceFlowTarget:
    """Build the per-instance rigid flow and quality map (all constants)."""
    from .geom import backproject_grid

    mask = torch.as_tensor(np.asarray(tgt_inst) == motion.instance_id)
    T_a = RigidTransform(motion.apparent.R.detach(), motion.apparent.t.detach())
    pts, ok = backproject_grid(as_tensor(disp_tgt).detach(), rig)
    # apparent maps warped source points onto target points; the flow target
    # runs the other way, pushing target points into the source view
    moved = inverse(T_a).apply(pts)
    pix, front = project(moved, rig.intrinsics)
    xs, ys = pixel_grid(*mask.shape)
    grid = torch.stack([xs, ys], dim=-1)
    fri = torch.where((ok & front).unsqueeze(-1), pix - grid, torch.zeros_like(pix))
    err = torch.linalg.norm(T_a.apply(as_tensor(p_hat).detach()) - as_tensor(P_tgt).detach(),
                            dim=-1)
    sigma = torch.exp(-err)
    return InstanceFlowTarget(motion.instance_id, mask, fri.detach(), sigma.detach())


def focc_cost(flow: DisplacementMap, rigid_flow_map, occ, dyn, targets,
              gamma=FOCC_GAMMA, eps=CHARBONNIER_EPS, rigid_valid=None):
    """Rigid-flow guidance for occluded pixels.

    Static occluded pixels are pulled toward the ego rigid flow (weight
    gamma); dynamic occluded pixels toward their instance's rigid flow,
    weighted by the reconstruction quality. All targets are constants; the
    gradient reaches only the flow map. Pixels without a valid rigid flow
    (sky) contribute nothing to the static term.
    """
    F = flow.values
    occ = as_tensor(occ)
    C = torch.as_tensor(np.asarray(dyn), dtype=DTYPE)
    hidden = 1.0 - occ
    fr = as_tensor(rigid_flow_map).detach()
    ok = (torch.ones_like(hidden) if rigid_valid is None
          else torch.as_tensor(np.asarray(rigid_valid), dtype=DTYPE))
    l1_static = torch.sqrt((F - fr) ** 2 + eps * eps).sum(dim=-1)
    cost = gamma * hidden * (1.0 - C) * ok * l1_static
    for t in targets:
        l1_dyn = torch.sqrt((F - t.rigid_flow) ** 2 + eps * eps).sum(dim=-1)
        cost = cost + hidden * C * t.mask.to(DTYPE) * t.sigma * l1_dyn
    return cost.sum() / torch.clamp(hidden.sum(), min=1.0)


def focc_loss(flow, rigid_flow_map, occ, dyn, targets, gamma=FOCC_GAMMA) -> LossReport:
    vals = flow.values.detach().clone().requires_grad_(True)
    value = focc_cost(DisplacementMap(flow.kind, vals, flow.valid),
                      rigid_flow_map, occ, dyn, targets, gamma)
    return make_report(value, {"flow": vals})
