"""Scene spec files, ground-truth bundle serialization and the bridge from a
ground-truth bundle to the loss-stack inputs."""

from __future__ import annotations

import json
import math
import os

import cv2
import numpy as np
import torch

from . import evalio, scene
from .geom import CameraIntrinsics, RigidTransform, StereoRig, Twist, as_tensor
from .losses import TotalLossInputs
from .scene import BoxSpec, GroundTruth, PlaneSpec, SceneSpec

FRAMES = ("l_t", "r_t", "l_t1", "r_t1")
LOSS_FRAMES = ("l_t", "l_t1", "r_t")
OCC_KEYS = ("F_fwd", "F_bwd", "D_l", "D_r")


# ---------------------------------------------------------------------------
# scene spec files: one directive per line, key=value fields

def _vec(text):
    return np.array([float(x) for x in text.split(",")])


def _fields(parts):
    out = {}
    for part in parts:
        key, _, val = part.partition("=")
        out[key] = val
    return out


def parse_scene_file(path) -> SceneSpec:
    """Plain-text scene grammar, one directive per line:

    rig fx= fy= cx= cy= baseline= width= height=
    ego v=x,y,z w=x,y,z
    noise sigma=
    plane origin=x,y,z u=x,y,z v=x,y,z extent=eu,ev class= seed= scale= amp=
    box center=x,y,z size=x,y,z yaw= class= instance= v=x,y,z w=x,y,z seed= scale= amp=
    """
    rig = None
    width = height = None
    ego = Twist([0, 0, 0], [0, 0, 0])
    planes, boxes = [], []
    noise = 0.0
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#")[0].strip()
            if not line:
                continue
            kind, *parts = line.split()
            fld = _fields(parts)
            try:
                if kind == "rig":
                    rig = StereoRig(
                        CameraIntrinsics(float(fld["fx"]), float(fld["fy"]),
                                         float(fld["cx"]), float(fld["cy"])),
                        float(fld["baseline"]))
                    width, height = int(fld["width"]), int(fld["height"])
                elif kind == "ego":
                    ego = Twist(_vec(fld["v"]), _vec(fld["w"]))
                elif kind == "noise":
                    noise = float(fld["sigma"])
                elif kind == "plane":
                    planes.append(PlaneSpec(
                        _vec(fld["origin"]), _vec(fld["u"]), _vec(fld["v"]),
                        extent=tuple(_vec(fld.get("extent", "1e6,1e6"))),
                        class_name=fld.get("class", "Background"),
                        seed=int(fld.get("seed", 1)),
                        texture_scale=float(fld.get("scale", 2.0)),
                        texture_amp=float(fld.get("amp", 0.5)),
                        octaves=int(fld.get("octaves", 3))))
                elif kind == "box":
                    boxes.append(BoxSpec(
                        _vec(fld["center"]), _vec(fld["size"]),
                        class_name=fld.get("class", "Vehicle"),
                        instance_id=int(fld.get("instance", len(boxes) + 1)),
                        yaw=float(fld.get("yaw", 0.0)),
                        motion=Twist(_vec(fld.get("v", "0,0,0")),
                                     _vec(fld.get("w", "0,0,0"))),
                        seed=int(fld.get("seed", 2)),
                        texture_scale=float(fld.get("scale", 0.8)),
                        texture_amp=float(fld.get("amp", 0.5)),
                        octaves=int(fld.get("octaves", 3))))
                else:
                    raise ValueError(f"unknown directive {kind!r}")
            except KeyError as e:
                raise ValueError(f"{path}:{ln}: missing field {e}") from None
    if rig is None:
        raise ValueError(f"{path}: missing rig directive")
    return SceneSpec(rig, width, height, ego, planes, boxes, noise)


# ---------------------------------------------------------------------------
# ground-truth bundle directory IO

def _write_png16(img01, path):
    arr = np.round(np.clip(np.asarray(img01), 0, 1) * 65535).astype(np.uint16)
    if not cv2.imwrite(str(path), arr):
        raise IOError(f"failed to write {path}")


def _read_png16(path):
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"failed to read {path}")
    return raw.astype(np.float64) / 65535.0


def _tf_to_list(T: RigidTransform):
    return T.matrix().numpy()[:3].tolist()


def _tf_from_list(rows):
    m = np.asarray(rows)
    return RigidTransform(m[:, :3], m[:, 3])


def write_truth(gt: GroundTruth, outdir):
    os.makedirs(outdir, exist_ok=True)
    p = lambda name: os.path.join(outdir, name)
    rig = gt.rig
    h, w = gt.images["l_t"].shape
    with open(p("rig.cfg"), "w") as f:
        f.write(f"fx={rig.intrinsics.fx}\nfy={rig.intrinsics.fy}\n"
                f"cx={rig.intrinsics.cx}\ncy={rig.intrinsics.cy}\n"
                f"baseline={rig.baseline}\nwidth={w}\nheight={h}\n")
    for frame in FRAMES:
        _write_png16(gt.images[frame], p(f"image_{frame}.png"))
        evalio.write_kitti_disparity(gt.disp[frame], p(f"disp_{frame}.png"))
        cv2.imwrite(p(f"sem_{frame}.png"), gt.sem[frame].astype(np.uint8))
        cv2.imwrite(p(f"inst_{frame}.png"), gt.inst[frame].astype(np.uint16))
        np.save(p(f"fseg_{frame}.npy"), gt.f_seg[frame])
    evalio.write_kitti_flow(gt.flow_fwd, p("flow_fwd.png"))
    evalio.write_kitti_flow(gt.flow_bwd, p("flow_bwd.png"))
    for key in OCC_KEYS:
        cv2.imwrite(p(f"occ_{key}.png"), (gt.occ[key] * 255).astype(np.uint8))
    for d in ("fwd", "bwd"):
        cv2.imwrite(p(f"dyn_{d}.png"),
                    (np.asarray(gt.dyn[d]) * 255).astype(np.uint8))
    meta = {
        "xi": list(map(float, gt.xi)),
        "motions": {
            d: [{"instance_id": m["instance_id"],
                 "residual": _tf_to_list(m["residual"]),
                 "apparent": _tf_to_list(m["apparent"])}
                for m in gt.instance_motions[d]]
            for d in ("fwd", "bwd")},
    }
    with open(p("meta.json"), "w") as f:
        json.dump(meta, f, indent=1)


def read_truth(datadir) -> GroundTruth:
    p = lambda name: os.path.join(datadir, name)
    from .geom import load_rig

    rig, width, height = load_rig(p("rig.cfg"))
    with open(p("meta.json")) as f:
        meta = json.load(f)
    xi = np.asarray(meta["xi"])
    spec = SceneSpec(rig, width, height, Twist(xi[:3], xi[3:]))

    images, disp, sem, inst, borders, f_seg = {}, {}, {}, {}, {}, {}
    for frame in FRAMES:
        images[frame] = _read_png16(p(f"image_{frame}.png"))
        disp[frame], _ = evalio.read_kitti_disparity(p(f"disp_{frame}.png"))
        sem[frame] = cv2.imread(p(f"sem_{frame}.png"), cv2.IMREAD_UNCHANGED).astype(np.int64)
        inst[frame] = cv2.imread(p(f"inst_{frame}.png"), cv2.IMREAD_UNCHANGED).astype(np.int64)
        from .semantic import border_regression
        borders[frame] = border_regression(inst[frame]).numpy()
        f_seg[frame] = np.load(p(f"fseg_{frame}.npy"))
    flow_fwd, _ = evalio.read_kitti_flow(p("flow_fwd.png"))
    flow_bwd, _ = evalio.read_kitti_flow(p("flow_bwd.png"))
    occ = {}
    for key in OCC_KEYS:
        occ[key] = (cv2.imread(p(f"occ_{key}.png"), cv2.IMREAD_UNCHANGED) > 127).astype(np.float64)
    dyn = {}
    for d in ("fwd", "bwd"):
        dyn[d] = torch.as_tensor(cv2.imread(p(f"dyn_{d}.png"), cv2.IMREAD_UNCHANGED) > 127)
    motions = {d: [{"instance_id": m["instance_id"],
                    "residual": _tf_from_list(m["residual"]),
                    "apparent": _tf_from_list(m["apparent"])}
                   for m in meta["motions"][d]]
               for d in ("fwd", "bwd")}
    return GroundTruth(spec=spec, images=images, disp=disp, flow_fwd=flow_fwd,
                       flow_bwd=flow_bwd, occ=occ, sem=sem, inst=inst,
                       borders=borders, f_seg=f_seg, xi=xi,
                       instance_motions=motions, dyn=dyn)


# ---------------------------------------------------------------------------
# bridge to the loss stack

def inputs_from_truth(gt: GroundTruth, **overrides) -> TotalLossInputs:
    return TotalLossInputs(
        images={f: as_tensor(gt.images[f]) for f in FRAMES},
        bundles={f: gt.bundle(f) for f in LOSS_FRAMES},
        sem={f: gt.sem[f] for f in LOSS_FRAMES},
        inst={f: gt.inst[f] for f in LOSS_FRAMES},
        rig=gt.rig,
        **overrides,
    )


def variables_from_truth(gt: GroundTruth) -> dict:
    """Variable set positioned exactly at ground truth."""
    return {
        "D_l_t": as_tensor(gt.disp["l_t"]),
        "D_l_t1": as_tensor(gt.disp["l_t1"]),
        "D_r_t": as_tensor(gt.disp["r_t"]),
        "F_fwd": as_tensor(gt.flow_fwd),
        "F_bwd": as_tensor(gt.flow_bwd),
        "O_F_fwd": as_tensor(gt.occ["F_fwd"]),
        "O_F_bwd": as_tensor(gt.occ["F_bwd"]),
        "O_D_l": as_tensor(gt.occ["D_l"]),
        "O_D_r": as_tensor(gt.occ["D_r"]),
        "xi": as_tensor(gt.xi),
    }


def perturb_variables(variables, seed=0, disp_sigma=0.0, flow_sigma=0.0,
                      rot_deg=0.0, trans_frac=0.0, flow_region=None):
    """Noise-perturbed copy of a variable set for recovery experiments."""
    rng = np.random.default_rng(seed)
    out = {k: v.clone() for k, v in variables.items()}
    if disp_sigma > 0:
        for name in ("D_l_t", "D_l_t1", "D_r_t"):
            noise = rng.normal(0.0, disp_sigma, out[name].shape)
            out[name] = torch.clamp(out[name] + torch.as_tensor(noise), min=0.05)
    if flow_sigma > 0:
        for name in ("F_fwd", "F_bwd"):
            noise = rng.normal(0.0, flow_sigma, out[name].shape)
            noise = torch.as_tensor(noise)
            if flow_region is not None:
                noise = noise * torch.as_tensor(np.asarray(flow_region))[..., None]
            out[name] = out[name] + noise
    if rot_deg > 0 or trans_frac > 0:
        xi = out["xi"].numpy().copy()
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        xi[3:] += axis * math.radians(rot_deg)
        tdir = rng.normal(size=3)
        tdir /= np.linalg.norm(tdir)
        xi[:3] += tdir * trans_frac * max(np.linalg.norm(xi[:3]), 1e-9)
        out["xi"] = torch.as_tensor(xi)
    return out
