"""KITTI-protocol metrics and bit-exact file formats."""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from .geom import RigidTransform

OUTLIER_ABS = 3.0
OUTLIER_REL = 0.05
ODO_LENGTHS = tuple(range(100, 801, 100))


class UndefinedMetric(RuntimeError):
    """No valid ground-truth pixels (or path too short) to evaluate."""


@dataclass
class MetricReport:
    d1: dict = None          # {'bg','fg','all'} in percent
    f1: dict = None
    epe: float = None
    t_err: float = None      # percent
    r_err: float = None      # deg per 100 m
    counts: dict = None


def _split_rates(outlier, valid, fg):
    fg = np.asarray(fg, dtype=bool)
    out = {}
    counts = {}
    for name, mask in (("bg", valid & ~fg), ("fg", valid & fg), ("all", valid)):
        n = int(mask.sum())
        counts[name] = n
        out[name] = 100.0 * float(outlier[mask].sum()) / n if n else float("nan")
    return out, counts


def d1_error(est, gt, gt_valid, fg_mask=None) -> MetricReport:
    """KITTI D1: outlier iff |err| > 3 px and |err| > 5% of ground truth."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(gt_valid, dtype=bool)
    if est.shape != gt.shape:
        raise ValueError("d1_error: shapes differ")
    if not valid.any():
        raise UndefinedMetric("no valid ground-truth disparities")
    if fg_mask is None:
        fg_mask = np.zeros_like(valid)
    err = np.abs(est - gt)
    outlier = (err > OUTLIER_ABS) & (err > OUTLIER_REL * np.abs(gt))
    rates, counts = _split_rates(outlier, valid, fg_mask)
    return MetricReport(d1=rates, counts=counts)


def flow_metrics(est, gt, gt_valid, fg_mask=None) -> MetricReport:
    """Mean endpoint error plus the KITTI F1 outlier rate."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(gt_valid, dtype=bool)
    if est.shape != gt.shape:
        raise ValueError("flow_metrics: shapes differ")
    if not valid.any():
        raise UndefinedMetric("no valid ground-truth flow")
    if fg_mask is None:
        fg_mask = np.zeros_like(valid)
    epe = np.linalg.norm(est - gt, axis=-1)
    mag = np.linalg.norm(gt, axis=-1)
    outlier = (epe > OUTLIER_ABS) & (epe > OUTLIER_REL * mag)
    rates, counts = _split_rates(outlier, valid, fg_mask)
    return MetricReport(f1=rates, epe=float(epe[valid].mean()), counts=counts)


def _pose_mats(poses):
    out = []
    for p in poses:
        if isinstance(p, RigidTransform):
            out.append(p.matrix().numpy())
        else:
            m = np.asarray(p, dtype=np.float64)
            if m.shape == (3, 4):
                m = np.vstack([m, [0, 0, 0, 1]])
            out.append(m)
    return out


def odometry_metrics(est_poses, gt_poses, lengths=ODO_LENGTHS):
    """KITTI odometry drift: average relative-pose error over fixed-length
    subsequences (windows advance every pose); returns (t_err %, r_err
    deg/100 m)."""
    est = _pose_mats(est_poses)
    gt = _pose_mats(gt_poses)
    if len(est) != len(gt):
        raise ValueError("pose sequences differ in length")
    n = len(gt)
    dist = [0.0]
    for i in range(1, n):
        dist.append(dist[-1] + float(np.linalg.norm(gt[i][:3, 3] - gt[i - 1][:3, 3])))
    if dist[-1] < min(lengths):
        raise UndefinedMetric(f"path length {dist[-1]:.1f} m < {min(lengths)} m")

    t_errs, r_errs = [], []
    for first in range(n):
        for length in lengths:
            target = dist[first] + length
            last = None
            for j in range(first, n):
                if dist[j] > target:
                    last = j
                    break
            if last is None:
                continue
            dgt = np.linalg.inv(gt[first]) @ gt[last]
            dest = np.linalg.inv(est[first]) @ est[last]
            err = np.linalg.inv(dest) @ dgt
            r = err[:3, :3]
            angle = math.acos(max(min((np.trace(r) - 1.0) / 2.0, 1.0), -1.0))
            t = float(np.linalg.norm(err[:3, 3]))
            # normalize by the distance actually traveled in the window so a
            # pure scale drift of s reads exactly as 100*s percent
            traveled = dist[last] - dist[first]
            t_errs.append(t / traveled)
            r_errs.append(angle / traveled)
    if not t_errs:
        raise UndefinedMetric("no complete subsequence windows")
    return 100.0 * float(np.mean(t_errs)), float(np.mean(r_errs)) * 180.0 / math.pi * 100.0


# ---------------------------------------------------------------------------
# KITTI 16-bit PNG formats

def write_kitti_disparity(disp, path, valid=None):
    """16-bit single-channel PNG: stored = round(d * 256), 0 = invalid."""
    d = np.asarray(disp, dtype=np.float64)
    if valid is None:
        valid = np.ones(d.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if (d[valid] < 0).any() or (d[valid] >= 256).any():
        raise ValueError("disparity out of the representable range [0, 256)")
    stored = np.round(d * 256.0).astype(np.uint16)
    stored[~valid] = 0
    if not cv2.imwrite(str(path), stored):
        raise IOError(f"failed to write {path}")


def read_kitti_disparity(path):
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"failed to read {path}")
    valid = raw > 0
    return raw.astype(np.float64) / 256.0, valid


def write_kitti_flow(flow, path, valid=None):
    """16-bit 3-channel PNG: stored = round(c * 64 + 2^15) per component,
    third channel is the validity flag."""
    f = np.asarray(flow, dtype=np.float64)
    if valid is None:
        valid = np.ones(f.shape[:2], dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if (f[valid] < -512).any() or (f[valid] >= 512).any():
        raise ValueError("flow out of the representable range [-512, 512)")
    u = np.round(f[..., 0] * 64.0 + 2 ** 15).astype(np.uint16)
    v = np.round(f[..., 1] * 64.0 + 2 ** 15).astype(np.uint16)
    ok = valid.astype(np.uint16)
    u[~valid] = 0
    v[~valid] = 0
    # cv2 stores BGR; stack so the logical channel order is (u, v, valid)
    img = np.stack([ok, v, u], axis=-1)
    if not cv2.imwrite(str(path), img):
        raise IOError(f"failed to write {path}")


def read_kitti_flow(path):
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None or raw.ndim != 3:
        raise IOError(f"failed to read {path}")
    valid = raw[..., 0] > 0
    u = (raw[..., 2].astype(np.float64) - 2 ** 15) / 64.0
    v = (raw[..., 1].astype(np.float64) - 2 ** 15) / 64.0
    flow = np.stack([u, v], axis=-1)
    flow[~valid] = 0.0
    return flow, valid


def write_poses(poses, path):
    """KITTI odometry text format: rows of flattened 3x4 matrices."""
    mats = _pose_mats(poses)
    with open(path, "w") as f:
        for m in mats:
            f.write(" ".join(f"{x:.12e}" for x in m[:3].reshape(-1)) + "\n")


def read_poses(path):
    out = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            vals = np.array([float(x) for x in line.split()]).reshape(3, 4)
            out.append(RigidTransform(vals[:, :3], vals[:, 3]))
    return out


def render_errormap(err, outlier, path):
    """Color-coded error image: blue (0) to red (high), outliers saturated."""
    err = np.asarray(err, dtype=np.float64)
    scaled = np.clip(err / 5.0, 0.0, 1.0)
    img = np.zeros(err.shape + (3,), dtype=np.uint8)
    img[..., 2] = (scaled * 255).astype(np.uint8)        # red rises with error
    img[..., 0] = ((1 - scaled) * 255).astype(np.uint8)  # blue falls
    img[np.asarray(outlier, dtype=bool)] = (0, 255, 255)
    if not cv2.imwrite(str(path), img):
        raise IOError(f"failed to write {path}")
