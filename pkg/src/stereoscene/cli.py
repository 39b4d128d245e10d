"""Command-line entry points: scene generation, loss evaluation, gradient
verification, variational solving, metric computation and error rendering."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np
import torch

from . import evalio, losses, scene, sceneio, solver


def _cmd_scene_gen(args):
    spec = sceneio.parse_scene_file(args.spec)
    gt = scene.generate(spec, seed=args.seed)
    sceneio.write_truth(gt, args.outdir)
    n_dyn = int(np.asarray(gt.dyn["fwd"]).sum())
    print(f"scene gen: wrote {args.outdir} "
          f"({spec.width}x{spec.height}, {len(spec.boxes)} boxes, "
          f"{n_dyn} dynamic px)")
    return 0


def _cmd_loss_eval(args):
    gt = sceneio.read_truth(args.datadir)
    inputs = sceneio.inputs_from_truth(gt)
    variables = sceneio.variables_from_truth(gt)
    weights = losses.STAGE1_WEIGHTS if args.stage == 1 else losses.STAGE2_WEIGHTS
    terms = (args.term,) if args.term else losses.ALL_TERMS
    report = losses.evaluate_total(inputs, variables, weights, terms=terms)
    for name, val in sorted(report.terms.items()):
        print(f"term {name}: {val:.9g}")
    print(f"loss eval: total={report.value:.9g} stage={args.stage}")
    return 0


def _gradcheck_fixture():
    """Small fixed scene used for gradient verification."""
    from .geom import CameraIntrinsics, StereoRig, Twist

    rig = StereoRig(CameraIntrinsics(30.0, 30.0, 15.5, 11.5), 0.5)
    spec = scene.SceneSpec(
        rig, 32, 24, Twist([0.02, 0.0, 0.25], [0.0, 0.004, 0.0]),
        planes=[scene.PlaneSpec([0, 1.5, 0], [1, 0, 0], [0, 0, 1],
                                extent=(60, 60), class_name="Road", seed=3),
                scene.PlaneSpec([0, 8, 30], [1, 0, 0], [0, -1, 0],
                                extent=(60, 10), class_name="Building", seed=4)],
        boxes=[scene.BoxSpec([0.6, 0.9, 7.0], [1.4, 1.2, 2.2],
                             class_name="Vehicle", instance_id=1,
                             motion=Twist([0.0, 0.0, 0.6], [0, 0, 0]), seed=5)])
    return scene.generate(spec, seed=11)


def _cmd_gradcheck(args):
    gt = _gradcheck_fixture()
    inputs = sceneio.inputs_from_truth(gt)
    variables = sceneio.perturb_variables(
        sceneio.variables_from_truth(gt), seed=1, disp_sigma=0.1, flow_sigma=0.1)
    aux = losses.prepare_aux(inputs, variables)
    terms = (args.term,) if args.term else losses.ALL_TERMS
    weights = [1.0] * 8

    def fn(v):
        total, _ = losses.total_cost(inputs, v, weights, aux=aux, terms=terms)
        return total

    report = losses.gradcheck(fn, variables, tolerance=args.tol, seed=2)
    ok = True
    for name, err in sorted(report["max_rel_err"].items()):
        status = "ok" if err <= args.tol else "FAIL"
        ok &= err <= args.tol
        print(f"gradcheck {name}: max rel err {err:.3e} [{status}]")
    print(f"gradcheck: {'pass' if ok else 'fail'} "
          f"(terms={','.join(terms)}, tol={args.tol:g})")
    return 0 if ok else 1


def _parse_kv(text):
    out = {}
    if not text:
        return out
    for part in text.split(","):
        key, _, val = part.partition("=")
        out[key.strip()] = val.strip()
    return out


def _cmd_solve(args):
    gt = sceneio.read_truth(args.datadir)
    inputs = sceneio.inputs_from_truth(gt)
    variables = sceneio.variables_from_truth(gt)
    if args.perturb:
        kv = _parse_kv(args.perturb)
        variables = sceneio.perturb_variables(
            variables, seed=int(kv.get("seed", 0)),
            disp_sigma=float(kv.get("disp", 0)),
            flow_sigma=float(kv.get("flow", 0)),
            rot_deg=float(kv.get("rot", 0)),
            trans_frac=float(kv.get("trans", 0)))
    cfg = solver.SolverConfig()
    if args.config:
        with open(args.config) as f:
            for line in f:
                line = line.split("#")[0].strip()
                if not line:
                    continue
                key, _, val = line.partition("=")
                key = key.strip()
                cur = getattr(cfg, key)
                if isinstance(cur, bool):
                    parsed = val.strip().lower() in ("1", "true", "yes")
                elif isinstance(cur, int):
                    parsed = int(val)
                elif isinstance(cur, float):
                    parsed = float(val)
                elif isinstance(cur, tuple):
                    parsed = tuple(x.strip() for x in val.split(","))
                    if key.endswith("weights"):
                        parsed = tuple(float(x) for x in parsed)
                else:
                    parsed = val.strip()
                setattr(cfg, key, parsed)
    init = solver.PyramidState.from_full_res(variables, n_levels=cfg.levels)
    result = solver.solve(inputs, init, cfg)

    os.makedirs(args.out, exist_ok=True)
    full = result.full_res
    for name in ("D_l_t", "D_l_t1", "D_r_t"):
        d = full[name].numpy()
        evalio.write_kitti_disparity(np.clip(d, 1 / 256.0, 255.999),
                                     os.path.join(args.out, f"{name}.png"))
    for name in ("F_fwd", "F_bwd"):
        evalio.write_kitti_flow(np.clip(full[name].numpy(), -511.99, 511.98),
                                os.path.join(args.out, f"{name}.png"))
    with open(os.path.join(args.out, "xi.json"), "w") as f:
        json.dump({"xi": full["xi"].tolist()}, f)
    rows = result.trace
    with open(os.path.join(args.out, "trace.csv"), "w", newline="") as f:
        keys = sorted({k for r in rows for k in r}, key=lambda k: (k != "level", k))
        wr = csv.DictWriter(f, fieldnames=keys)
        wr.writeheader()
        wr.writerows(rows)
    print(f"solve: {len(rows)} steps, final total "
          f"{rows[-1]['total']:.6g}, wrote {args.out}")
    return 0


def _cmd_metrics(args):
    try:
        if args.kind == "odometry":
            est = evalio.read_poses(args.est)
            gt = evalio.read_poses(args.gt)
            t_err, r_err = evalio.odometry_metrics(est, gt)
            print(f"metrics odometry: t_err {t_err:.4f} % r_err {r_err:.6f} deg/100m")
        elif args.kind == "disparity":
            est, _ = evalio.read_kitti_disparity(args.est)
            gt, valid = evalio.read_kitti_disparity(args.gt)
            rep = evalio.d1_error(est, gt, valid)
            print(f"metrics disparity: D1-bg {rep.d1['bg']:.4f} "
                  f"D1-fg {rep.d1['fg']:.4f} D1-all {rep.d1['all']:.4f} %")
        else:
            est, _ = evalio.read_kitti_flow(args.est)
            gt, valid = evalio.read_kitti_flow(args.gt)
            rep = evalio.flow_metrics(est, gt, valid)
            print(f"metrics flow: EPE {rep.epe:.4f} px "
                  f"F1-all {rep.f1['all']:.4f} %")
    except evalio.UndefinedMetric as e:
        print(f"metrics {args.kind}: undefined ({e})")
        return 1
    return 0


def _cmd_render(args):
    est, _ = evalio.read_kitti_disparity(args.est)
    gt, valid = evalio.read_kitti_disparity(args.gt)
    err = np.abs(est - gt) * valid
    outlier = (err > evalio.OUTLIER_ABS) & (err > evalio.OUTLIER_REL * np.abs(gt)) & valid
    evalio.render_errormap(err, outlier, args.out)
    print(f"render errormap: wrote {args.out}")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="stereoscene")
    sub = ap.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("scene", help="synthetic scene generation")
    ss = s.add_subparsers(dest="sub", required=True)
    g = ss.add_parser("gen", help="render a scene spec to a data directory")
    g.add_argument("spec")
    g.add_argument("outdir")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=_cmd_scene_gen)

    s = sub.add_parser("loss", help="objective evaluation")
    ss = s.add_subparsers(dest="sub", required=True)
    e = ss.add_parser("eval", help="evaluate the total loss on a data directory")
    e.add_argument("datadir")
    e.add_argument("--stage", type=int, choices=(1, 2), default=2)
    e.add_argument("--term", choices=losses.ALL_TERMS)
    e.set_defaults(fn=_cmd_loss_eval)

    g = sub.add_parser("gradcheck", help="verify analytic gradients against "
                                         "central finite differences")
    g.add_argument("--term", choices=losses.ALL_TERMS)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(fn=_cmd_gradcheck)

    v = sub.add_parser("solve", help="coarse-to-fine minimization")
    v.add_argument("datadir")
    v.add_argument("--config", help="key=value overrides of solver settings")
    v.add_argument("--perturb", help="disp=,flow=,rot=,trans=,seed= noise spec")
    v.add_argument("--out", default="solve_out")
    v.set_defaults(fn=_cmd_solve)

    m = sub.add_parser("metrics", help="benchmark-protocol error metrics")
    m.add_argument("kind", choices=("disparity", "flow", "odometry"))
    m.add_argument("est")
    m.add_argument("gt")
    m.set_defaults(fn=_cmd_metrics)

    r = sub.add_parser("render", help="diagnostic images")
    rr = r.add_subparsers(dest="sub", required=True)
    e = rr.add_parser("errormap", help="color-coded disparity error image")
    e.add_argument("est")
    e.add_argument("gt")
    e.add_argument("out")
    e.set_defaults(fn=_cmd_render)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, IOError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
