"""Coarse-to-fine variational optimizer over dense disparity/flow maps and
the ego twist, using the total loss with backtracking line search."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import losses
from .geom import CameraIntrinsics, StereoRig, as_tensor
from .losses import (STAGE1_WEIGHTS, STAGE2_WEIGHTS, LossAux, TotalLossInputs,
                     prepare_aux, total_cost)
from .photo import PhotometricConfig
from .semantic import FeatureBundle

MAP_VARIABLES = ("D_l_t", "D_l_t1", "D_r_t", "F_fwd", "F_bwd")
OCC_VARIABLES = ("O_F_fwd", "O_F_bwd", "O_D_l", "O_D_r")

# Which loss terms run on which pyramid level, keyed by distance from the
# finest level so shallow pyramids still get the full set at the top.
def default_level_terms(level, n_levels=5):
    depth = n_levels - level
    terms = {"p", "sm", "sky", "occ"}
    if depth <= 1:
        terms |= {"wsps", "docc"}
    if depth <= 0:
        terms |= {"l3d", "focc"}
    return terms


@dataclass
class SolverConfig:
    steps_per_level: int = 60
    stage1_fraction: float = 0.6
    stage1_weights: tuple = STAGE1_WEIGHTS
    stage2_weights: tuple = STAGE2_WEIGHTS
    occlusion_refresh: int = 25
    initial_step: float = 0.5
    min_step: float = 1e-10
    armijo_c: float = 1e-4
    wsps_radius: int = 6
    min_disparity: float = 0.05
    levels: int = 5
    twist_mode: str = "shared"   # 'shared' or 'residual' additive refinement
    optimize: tuple = MAP_VARIABLES + OCC_VARIABLES + ("xi",)


@dataclass
class PyramidState:
    """Per-level variable dictionaries, coarsest first, plus the shared twist."""

    levels: list

    @staticmethod
    def from_full_res(variables, n_levels=5):
        """Build a pyramid by downsampling full-resolution maps.

        Level k (1-based) lives at scale 1 / 2^(n_levels + 1 - k).
        """
        levels = []
        for k in range(1, n_levels + 1):
            factor = 2 ** (n_levels + 1 - k)
            lev = {}
            for name, val in variables.items():
                t = as_tensor(val)
                if name == "xi":
                    lev[name] = t.clone()
                elif name in OCC_VARIABLES:
                    lev[name] = downsample_avg(t, factor)
                else:
                    lev[name] = downsample_avg(t, factor) / factor
            levels.append(lev)
        return PyramidState(levels)


def downsample_avg(t, factor):
    """Block-average downsampling by an integer factor."""
    t = as_tensor(t)
    if factor == 1:
        return t.clone()
    h, w = t.shape[:2]
    hh, ww = h // factor, w // factor
    tt = t[: hh * factor, : ww * factor]
    if t.ndim == 2:
        return tt.reshape(hh, factor, ww, factor).mean(dim=(1, 3))
    c = t.shape[2]
    return tt.reshape(hh, factor, ww, factor, c).mean(dim=(1, 3))


def downsample_nearest(a, factor):
    a = np.asarray(a)
    return a[::factor, ::factor] if factor > 1 else a.copy()


def upsample_bilinear(t, out_h, out_w):
    t = as_tensor(t)
    squeeze = t.ndim == 2
    x = t.unsqueeze(-1) if squeeze else t
    x = x.permute(2, 0, 1).unsqueeze(0)
    up = torch.nn.functional.interpolate(x, size=(out_h, out_w), mode="bilinear",
                                         align_corners=False)
    up = up.squeeze(0).permute(1, 2, 0)
    return up.squeeze(-1) if squeeze else up


def upsample_state(level_vars, out_h, out_w):
    """Hand a solved level to the next finer one: sizes double and so do
    displacement magnitudes; the twist carries over."""
    out = {}
    for name, val in level_vars.items():
        if name == "xi":
            out[name] = val.clone()
        elif name in OCC_VARIABLES:
            out[name] = torch.clamp(upsample_bilinear(val, out_h, out_w), 0.0, 1.0)
        else:
            out[name] = upsample_bilinear(val, out_h, out_w) * 2.0
    return out


def scaled_rig(rig: StereoRig, factor):
    intr = rig.intrinsics
    # pixel centers: continuous coord c maps to (c + 0.5) / f - 0.5
    return StereoRig(
        CameraIntrinsics(intr.fx / factor, intr.fy / factor,
                         (intr.cx + 0.5) / factor - 0.5,
                         (intr.cy + 0.5) / factor - 0.5),
        rig.baseline,
    )


def downsample_inputs(inputs: TotalLossInputs, factor, wsps_radius):
    if factor == 1:
        return replace(inputs, wsps_radius=wsps_radius)
    images = {k: downsample_avg(v, factor) for k, v in inputs.images.items()}
    sem = {k: downsample_nearest(v, factor) for k, v in inputs.sem.items()}
    inst = {k: downsample_nearest(v, factor) for k, v in inputs.inst.items()}
    bundles = {}
    for k, b in inputs.bundles.items():
        bundles[k] = FeatureBundle(
            downsample_avg(b.class_scores, factor),
            downsample_avg(b.border, factor),
            downsample_avg(b.features, factor),
        )
    return replace(inputs, images=images, sem=sem, inst=inst, bundles=bundles,
                   rig=scaled_rig(inputs.rig, factor), wsps_radius=wsps_radius)


@dataclass
class SolveResult:
    state: PyramidState
    full_res: dict
    trace: list = field(default_factory=list)


def _project_feasible(variables, cfg):
    out = {}
    for name, val in variables.items():
        if name.startswith("D_"):
            out[name] = torch.clamp(val, min=cfg.min_disparity)
        elif name in OCC_VARIABLES:
            out[name] = torch.clamp(val, 0.0, 1.0)
        else:
            out[name] = val
    return out


def solve(inputs: TotalLossInputs, init: PyramidState, cfg: SolverConfig = None,
          progress=None):
    """Minimize the total loss coarse-to-fine; returns state plus trace.

    Gradient descent with per-variable inf-norm scaling and Armijo
    backtracking; occlusion maps and instance motions are refreshed every
    cfg.occlusion_refresh steps (motion fits on the finest level only).
    """
    cfg = cfg or SolverConfig()
    n = cfg.levels
    trace = []
    solved = []
    carried = None
    base_xi = None
    for li in range(n):
        level = li + 1
        factor = 2 ** (n + 1 - level)
        lv_inputs = downsample_inputs(inputs, factor, cfg.wsps_radius)
        h = lv_inputs.images["l_t"].shape[0]
        w = lv_inputs.images["l_t"].shape[1]
        if carried is None:
            variables = {k: v.clone() for k, v in init.levels[li].items()}
        else:
            variables = upsample_state(carried, h, w)
        if cfg.twist_mode == "residual":
            base_xi = variables["xi"].clone()
            variables["xi"] = torch.zeros_like(base_xi)
        variables = _project_feasible(variables, cfg)
        terms = default_level_terms(level, n)
        finest = level == n

        def level_cost(vars_dict, weights, aux):
            v = dict(vars_dict)
            if cfg.twist_mode == "residual":
                v["xi"] = v["xi"] + base_xi
            return total_cost(lv_inputs, v, weights, aux=aux, terms=terms)

        n1 = int(round(cfg.steps_per_level * cfg.stage1_fraction))
        schedule = [cfg.stage1_weights] * n1
        schedule += [cfg.stage2_weights] * (cfg.steps_per_level - n1)

        aux = None
        prev_weights = None
        previous = {}   # per-variable (value, gradient) for secant step lengths
        for step, weights in enumerate(schedule):
            refresh = aux is None or step % cfg.occlusion_refresh == 0
            if refresh:
                vv = dict(variables)
                if cfg.twist_mode == "residual":
                    vv["xi"] = vv["xi"] + base_xi
                aux = prepare_aux(lv_inputs, vv, fit_motions=finest)
            stage_changed = weights is not prev_weights
            if refresh or stage_changed:
                previous = {}   # objective changed; secant pairs are stale
            prev_weights = weights

            leaves = {k: v.detach().clone().requires_grad_(k in cfg.optimize)
                      for k, v in variables.items()}
            value, term_vals = level_cost(leaves, weights, aux)
            grads = torch.autograd.grad(
                value, [leaves[k] for k in cfg.optimize if leaves[k].requires_grad],
                allow_unused=True)
            grad_map = {}
            gi = 0
            for k in cfg.optimize:
                if leaves[k].requires_grad:
                    g = grads[gi]
                    gi += 1
                    grad_map[k] = torch.zeros_like(leaves[k]) if g is None else g

            # Per-variable adaptive step: Barzilai-Borwein secant estimate when
            # a previous (value, gradient) pair exists, otherwise an inf-norm
            # scaled first step; Armijo backtracking keeps the trace monotone.
            direction = {}
            for k, g in grad_map.items():
                gmax = float(g.abs().max())
                if gmax == 0.0:
                    continue
                step_len = cfg.initial_step / gmax
                if k in previous:
                    s = variables[k] - previous[k][0]
                    y = g - previous[k][1]
                    yy = float((y * y).sum())
                    if yy > 0:
                        bb = float((s * y).sum()) / yy
                        if bb > 0:
                            step_len = min(bb, 1e3)
                direction[k] = -step_len * g
            previous = {k: (variables[k].clone(), g.clone())
                        for k, g in grad_map.items()}
            gdotd = sum(float((grad_map[k] * d).sum()) for k, d in direction.items())
            f0 = float(value.detach())
            accepted = False
            a = 1.0
            while a >= cfg.min_step and direction:
                cand = {k: (v + a * direction[k] if k in direction else v.detach().clone())
                        for k, v in variables.items()}
                cand = _project_feasible(cand, cfg)
                with torch.no_grad():
                    f1, _ = level_cost(cand, weights, aux)
                if float(f1) <= f0 + cfg.armijo_c * a * gdotd:
                    variables = {k: v.detach() for k, v in cand.items()}
                    accepted = True
                    break
                a *= 0.5
            row = {"level": level, "step": step, "total": f0,
                   "accepted": accepted, "refresh": refresh or stage_changed,
                   "stage": 1 if weights is cfg.stage1_weights else 2}
            row.update({f"term_{k}": v.item() for k, v in term_vals.items()})
            trace.append(row)
            if progress:
                progress(row)

        if cfg.twist_mode == "residual":
            variables["xi"] = variables["xi"] + base_xi
        solved.append(variables)
        carried = variables

    full_h = inputs.images["l_t"].shape[0]
    full_w = inputs.images["l_t"].shape[1]
    full = upsample_state(carried, full_h, full_w)
    return SolveResult(PyramidState(solved), full, trace)
