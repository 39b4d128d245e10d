"""Total training objective over the two-frame stereo variable set, plus
finite-difference gradient verification.

The differentiable state consists of three disparity maps, the two temporal
flow maps, four predicted occlusion maps and the ego twist:

    D_l_t, D_l_t1, D_r_t : HxW disparities (left t, left t+1, right t)
    F_fwd, F_bwd         : HxWx2 flows (l_t -> l_t1 and back)
    O_F_fwd, O_F_bwd, O_D_l, O_D_r : HxW predicted occlusion maps
    xi                   : 6-vector ego twist (t -> t+1)

Reverse-mode accumulation (torch autograd over this fixed operation set)
produces every gradient in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import geom, occl, rigid, semantic, warp
from .geom import StereoRig, Twist, as_tensor, exp_se3, inverse
from .photo import PhotometricConfig, photometric_cost
from .report import LossReport, make_report
from .semantic import ClassWeights, FeatureBundle, RobustLossParams
from .warp import disparity_as_flow, disparity_map, flow_map

STAGE1_WEIGHTS = (10.0, 1.0, 0.001, 0.1, 0.0, 4.0, 0.0, 10.0)
STAGE2_WEIGHTS = (10.0, 1.0, 0.1, 0.1, 0.5, 4.0, 2.0, 10.0)

ALL_TERMS = ("p", "sm", "wsps", "sky", "docc", "l3d", "focc", "occ")
TERM_WEIGHT_INDEX = {name: i for i, name in enumerate(ALL_TERMS)}

VARIABLE_NAMES = ("D_l_t", "D_l_t1", "D_r_t", "F_fwd", "F_bwd",
                  "O_F_fwd", "O_F_bwd", "O_D_l", "O_D_r", "xi")


@dataclass
class TotalLossInputs:
    """Constant observations the objective is evaluated against."""

    images: dict          # 'l_t', 'r_t', 'l_t1', 'r_t1' -> HxW(C) image
    bundles: dict         # 'l_t', 'l_t1', 'r_t' -> FeatureBundle
    sem: dict             # frame -> HxW class ids
    inst: dict            # frame -> HxW instance ids
    rig: StereoRig
    dt: float = rigid.FRAME_DT
    photo_cfg: PhotometricConfig = field(default_factory=PhotometricConfig)
    rho: RobustLossParams = field(default_factory=RobustLossParams)
    class_weights: ClassWeights = field(default_factory=ClassWeights)
    eta: float = 10.0
    wsps_radius: int = 12
    focc_gamma: float = rigid.FOCC_GAMMA


@dataclass
class LossAux:
    """Piecewise-constant quantities refreshed outside the gradient step:
    forward-backward occlusion maps, fitted instance motions, dynamic masks
    and per-instance rigid-flow guidance."""

    fb_occ: dict = field(default_factory=dict)      # name -> HxW {0,1}
    motions: dict = field(default_factory=dict)     # 'fwd'/'bwd' -> [InstanceMotion]
    dyn: dict = field(default_factory=dict)         # 'fwd'/'bwd' -> HxW bool
    flow_targets: dict = field(default_factory=dict)
    docc_centers: dict = field(default_factory=dict)  # 'D_l_t'/'D_r_t' -> {0,1}
    docc_neighbors: dict = field(default_factory=dict)  # frozen neighbor disparities
    focc_rigid: dict = field(default_factory=dict)  # 'fwd'/'bwd' -> frozen ego flow
    wsps_depth: dict = field(default_factory=dict)  # frozen depth for decay weights


def _detached(variables):
    return {k: v.detach() for k, v in variables.items()}


def fb_occlusion_maps(variables):
    """The four forward-backward occlusion maps from the current state."""
    v = _detached(variables)
    f_th = occl.FbThresholds.for_flow()
    d_th = occl.FbThresholds.for_disparity()
    out = {
        "O_F_fwd": occl.fb_occlusion(flow_map(v["F_fwd"]), flow_map(v["F_bwd"]), f_th),
        "O_F_bwd": occl.fb_occlusion(flow_map(v["F_bwd"]), flow_map(v["F_fwd"]), f_th),
        "O_D_l": occl.fb_occlusion(disparity_map(v["D_l_t"]), disparity_map(v["D_r_t"]), d_th),
    }
    # Right-target disparity consistency runs through flow-form maps since
    # the correspondence is p + D there.
    fwd = disparity_as_flow(v["D_r_t"], sign=+1.0)
    bwd = disparity_as_flow(v["D_l_t"], sign=-1.0)
    out["O_D_r"] = occl.fb_occlusion(
        fwd, bwd, occl.FbThresholds(*occl.DISPARITY_THRESHOLDS, warp.FLOW))
    return out


def _direction_spec(direction):
    if direction == "fwd":
        return dict(flow="F_fwd", occ="O_F_fwd", d_tgt="D_l_t", d_src="D_l_t1",
                    tgt="l_t", src="l_t1", ego_sign=-1)
    return dict(flow="F_bwd", occ="O_F_bwd", d_tgt="D_l_t1", d_src="D_l_t",
                tgt="l_t1", src="l_t", ego_sign=+1)


def _ego_to_target(xi_vec, sign):
    """Transform mapping source-frame points into the target frame."""
    T = exp_se3(Twist.from_vector(xi_vec))
    return inverse(T) if sign < 0 else T


def prepare_aux(inputs: TotalLossInputs, variables, fit_motions=True) -> LossAux:
    """Refresh the stop-gradient context from the current variable values."""
    aux = LossAux()
    aux.fb_occ = fb_occlusion_maps(variables)
    aux.docc_centers = {"D_l_t": aux.fb_occ["O_D_l"], "D_r_t": aux.fb_occ["O_D_r"]}
    v = _detached(variables)
    aux.docc_neighbors = {name: v[name].clone() for name in ("D_l_t", "D_r_t")}
    aux.wsps_depth = {name: _depth_of(v, name, inputs.rig).clone()
                      for name in ("D_l_t", "D_l_t1", "D_r_t")}
    for direction in ("fwd", "bwd"):
        spec = _direction_spec(direction)
        T_rf = _ego_to_target(v["xi"], -spec["ego_sign"])
        fr, fr_ok = geom.rigid_flow(v[spec["d_tgt"]], T_rf, inputs.rig)
        aux.focc_rigid[direction] = (fr.detach().clone(), fr_ok.detach().clone())
    for direction in ("fwd", "bwd"):
        spec = _direction_spec(direction)
        aux.motions[direction] = []
        aux.flow_targets[direction] = []
        inst_tgt = inputs.inst[spec["tgt"]]
        inst_src = inputs.inst[spec["src"]]
        sem_tgt = inputs.sem[spec["tgt"]]
        flow = flow_map(v[spec["flow"]])
        aux.dyn[direction] = torch.zeros(flow.shape, dtype=torch.bool)
        if not fit_motions:
            aux.dyn[direction] = torch.as_tensor(
                np.asarray(sem_tgt) == semantic.PEDESTRIAN_RIDER)
            continue
        P_src, sv = geom.backproject_grid(v[spec["d_src"]], inputs.rig)
        P_tgt, tv = geom.backproject_grid(v[spec["d_tgt"]], inputs.rig)
        T_ego = _ego_to_target(v["xi"], spec["ego_sign"])
        matches = rigid.associate_instances(inst_src, inst_tgt, flow)
        motions = []
        for match in matches:
            try:
                motions.append(rigid.fit_instance_motion(
                    match, flow, P_src, sv, P_tgt, tv, T_ego, inst_src, inst_tgt))
            except rigid.FitFailure:
                continue
        aux.motions[direction] = motions
        dyn = rigid.dynamic_mask(motions, inst_tgt, sem_tgt, inputs.dt)
        aux.dyn[direction] = dyn
        p_hat, _ = warp.sample(P_src, flow)
        for m in motions:
            if not dyn[torch.as_tensor(np.asarray(inst_tgt) == m.instance_id)].any():
                continue
            aux.flow_targets[direction].append(rigid.instance_flow_target(
                m, p_hat, P_tgt, inst_tgt, v[spec["d_tgt"]], inputs.rig))
    return aux


def _m1_maps(inputs: TotalLossInputs, variables):
    """The M1 displacement-map set with its warp sources and occlusions.

    Yields (name, loss map, warp map, tgt frame, src frame, occ name,
    depth reference) tuples. The loss map carries the raw variable (used by
    smoothing/sky); the warp map realizes the sampling correspondence.
    """
    rig = inputs.rig
    T_fwd = exp_se3(Twist.from_vector(variables["xi"]))
    T_bwd = inverse(T_fwd)
    fr_fwd, ok_fwd = geom.rigid_flow(variables["D_l_t"], T_fwd, rig)
    fr_bwd, ok_bwd = geom.rigid_flow(variables["D_l_t1"], T_bwd, rig)

    f_fwd = flow_map(variables["F_fwd"])
    f_bwd = flow_map(variables["F_bwd"])
    d_l = disparity_map(variables["D_l_t"])
    d_r = disparity_map(variables["D_r_t"])
    entries = [
        ("F_fwd", f_fwd, f_fwd, "l_t", "l_t1", "O_F_fwd", "D_l_t"),
        ("F_bwd", f_bwd, f_bwd, "l_t1", "l_t", "O_F_bwd", "D_l_t1"),
        ("FR_fwd", flow_map(fr_fwd, ok_fwd), flow_map(fr_fwd, ok_fwd),
         "l_t", "l_t1", "O_F_fwd", "D_l_t"),
        ("FR_bwd", flow_map(fr_bwd, ok_bwd), flow_map(fr_bwd, ok_bwd),
         "l_t1", "l_t", "O_F_bwd", "D_l_t1"),
        ("D_l_t", d_l, d_l, "l_t", "r_t", "O_D_l", "D_l_t"),
        ("D_r_t", d_r, disparity_as_flow(variables["D_r_t"], sign=+1.0),
         "r_t", "l_t", "O_D_r", "D_r_t"),
    ]
    return entries


def _depth_of(variables, name, rig):
    return rig.intrinsics.fx * rig.baseline / torch.clamp(variables[name], min=1e-6)


def evaluate_terms(inputs: TotalLossInputs, variables, aux: LossAux,
                   terms=ALL_TERMS):
    """Every requested loss term as a differentiable scalar, by name."""
    rig = inputs.rig
    out = {}
    m1 = _m1_maps(inputs, variables)

    if "p" in terms:
        total = as_tensor(0.0)
        for name, _, wmap, tgt, src, occ_name, _ in m1:
            total = total + photometric_cost(
                inputs.images[tgt], inputs.images[src], wmap,
                variables[occ_name], inputs.photo_cfg)
        out["p"] = total
    if "sm" in terms:
        total = as_tensor(0.0)
        for name, _, wmap, tgt, src, occ_name, _ in m1:
            total = total + semantic.semantic_match_cost(
                inputs.bundles[tgt], inputs.bundles[src], wmap, variables[occ_name])
        out["sm"] = total
    if "wsps" in terms:
        total = as_tensor(0.0)
        for name, lmap, _, tgt, _, occ_name, depth_ref in m1:
            total = total + semantic.wsps_cost(
                lmap, inputs.sem[tgt], inputs.inst[tgt],
                aux.wsps_depth[depth_ref], rig,
                inputs.class_weights, inputs.rho, inputs.eta,
                inputs.wsps_radius, occ=aux.fb_occ[occ_name])
        out["wsps"] = total
    if "sky" in terms:
        total = as_tensor(0.0)
        for name, lmap, _, tgt, _, _, _ in m1:
            total = total + semantic.sky_cost(lmap, inputs.sem[tgt])
        out["sky"] = total
    if "docc" in terms:
        total = as_tensor(0.0)
        for name, frame in (("D_l_t", "l_t"), ("D_r_t", "r_t")):
            total = total + semantic.depth_occ_fill_cost(
                disparity_map(variables[name]), inputs.sem[frame],
                inputs.inst[frame], aux.docc_centers[name], rig,
                inputs.class_weights, inputs.rho, inputs.eta, inputs.wsps_radius,
                neighbor_values=aux.docc_neighbors[name])
        out["docc"] = total
    if "l3d" in terms:
        total = as_tensor(0.0)
        for direction in ("fwd", "bwd"):
            spec = _direction_spec(direction)
            P_src, sv = geom.backproject_grid(variables[spec["d_src"]], rig)
            P_tgt, tv = geom.backproject_grid(variables[spec["d_tgt"]], rig)
            T_ego = _ego_to_target(variables["xi"], spec["ego_sign"])
            flow = flow_map(variables[spec["flow"]])
            total = total + rigid.l3d_rigid_cost(
                P_src, sv, P_tgt, tv, flow, T_ego,
                variables[spec["occ"]], aux.dyn[direction], rig)
            motions = aux.motions.get(direction, [])
            if motions:
                p_hat, warp_ok = warp.sample(P_src, flow)
                sv_w, _ = warp.sample(sv.to(p_hat.dtype), flow)
                vis_w = (variables[spec["occ"]] * warp_ok.to(p_hat.dtype)
                         * (sv_w >= 0.999).to(p_hat.dtype))
                pts = {}
                for m in motions:
                    sel = (torch.as_tensor(np.asarray(inputs.inst[spec["tgt"]]))
                           == m.instance_id) & tv
                    pts[m.instance_id] = (p_hat, P_tgt, sel)
                total = total + rigid.l3d_dyn_cost(motions, pts, rig, weight=vis_w)
        out["l3d"] = total
    if "focc" in terms:
        total = as_tensor(0.0)
        for direction in ("fwd", "bwd"):
            spec = _direction_spec(direction)
            fr, fr_ok = aux.focc_rigid[direction]
            total = total + rigid.focc_cost(
                flow_map(variables[spec["flow"]]), fr,
                aux.fb_occ[spec["occ"]], aux.dyn[direction],
                aux.flow_targets.get(direction, []), inputs.focc_gamma,
                rigid_valid=fr_ok)
        out["focc"] = total
    if "occ" in terms:
        total = as_tensor(0.0)
        for name in ("O_F_fwd", "O_F_bwd", "O_D_l", "O_D_r"):
            total = total + occl.occlusion_cost(variables[name], aux.fb_occ[name])
        out["occ"] = total
    return out


def total_cost(inputs, variables, weights, aux=None, terms=ALL_TERMS):
    """Weighted sum of the requested terms; returns (scalar, per-term dict)."""
    weights = list(weights)
    if len(weights) != 8:
        raise ValueError("expected 8 term weights")
    if aux is None:
        aux = prepare_aux(inputs, variables)
    active = [t for t in terms if weights[TERM_WEIGHT_INDEX[t]] != 0.0]
    values = evaluate_terms(inputs, variables, aux, active)
    total = as_tensor(0.0)
    for name, val in values.items():
        if not torch.isfinite(val):
            raise FloatingPointError(f"loss term {name!r} is non-finite")
        total = total + weights[TERM_WEIGHT_INDEX[name]] * val
    return total, values


def evaluate_total(inputs, variables, weights, aux=None, terms=ALL_TERMS) -> LossReport:
    """One reverse-mode pass over the weighted objective."""
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in variables.items()}
    total, values = total_cost(inputs, leaves, weights, aux, terms)
    report = make_report(total, leaves)
    report.terms = {k: v.item() for k, v in values.items()}
    return report


def gradcheck(term_fn, variables, step=1e-4, tolerance=1e-4, n_coords=64, seed=0):
    """Compare the analytic gradient of term_fn against central differences.

    term_fn maps a dict of tensors to a scalar tensor. Checks at least
    n_coords randomly chosen coordinates per variable and reports the max
    relative error per variable (absolute error where the scale is tiny).
    """
    rng = np.random.default_rng(seed)
    leaves = {k: as_tensor(v).detach().clone().requires_grad_(True)
              for k, v in variables.items()}
    value = term_fn(leaves)
    if value.requires_grad:
        grads = torch.autograd.grad(value, list(leaves.values()), allow_unused=True)
    else:
        grads = [None] * len(leaves)
    grads = {k: (g if g is not None else torch.zeros_like(leaves[k]))
             for k, g in zip(leaves, grads)}

    base = {k: v.detach().clone() for k, v in leaves.items()}
    report = {}
    for name, tensor in base.items():
        n = tensor.numel()
        idx = rng.permutation(n)[: max(min(n, n_coords), 1)]
        worst = 0.0
        for i in idx:
            plus = {k: v.clone() for k, v in base.items()}
            minus = {k: v.clone() for k, v in base.items()}
            plus[name].view(-1)[i] += step
            minus[name].view(-1)[i] -= step
            fp = float(term_fn(plus))
            fm = float(term_fn(minus))
            fd = (fp - fm) / (2 * step)
            an = float(grads[name].view(-1)[i])
            scale = max(abs(fd), abs(an), 1e-3)
            err = abs(fd - an) / scale
            if not np.isfinite(fd) or not np.isfinite(an):
                err = float("inf")
            worst = max(worst, err)
        report[name] = worst
    return {"value": float(value.detach()), "max_rel_err": report,
            "ok": all(e < tolerance for e in report.values())}
