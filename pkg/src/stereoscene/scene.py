"""Synthetic ray-cast stereo scene generator.

Produces two consecutive stereo frames of a world made of textured planes and
rigid boxes, together with ground truth for every quantity the loss stack
consumes: disparities, flows, occlusion maps, semantics, instances, border
maps, feature fields, the ego twist and per-instance motions.

Ray directions are kept unnormalized with unit z so the ray parameter equals
camera depth; intersections are analytic, so there is no z-fighting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import semantic
from .geom import RigidTransform, StereoRig, Twist, compose, exp_se3, inverse
from .semantic import CLASS_ID, FeatureBundle, border_regression

SKY_DEPTH = 1.0e4
ZBUF_TOL = 1e-3           # 1 mm visibility tolerance
STENCIL_GAP_REL = 0.02    # relative inverse-depth mismatch marking a
                          # corrupted bilinear stencil


# ---------------------------------------------------------------------------
# deterministic value noise

def _mix(h):
    h = h.copy()
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xC4CEB9FE1A85EC53)
    h ^= h >> np.uint64(33)
    return h


def _lattice01(ix, iy, iz, seed):
    h = (ix.astype(np.int64).astype(np.uint64) * np.uint64(0x9E3779B185EBCA87)
         ^ iy.astype(np.int64).astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
         ^ iz.astype(np.int64).astype(np.uint64) * np.uint64(0x165667B19E3779F9)
         ^ np.uint64(seed * 0x27D4EB2F165667C5 % (1 << 64)))
    return _mix(h).astype(np.float64) / float(2 ** 64)


def _smoothstep(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def value_noise3(pts, seed, scale=1.0):
    """Smooth deterministic noise in [0,1] over 3D points (...,3)."""
    p = np.asarray(pts, dtype=np.float64) / scale
    p0 = np.floor(p)
    f = _smoothstep(p - p0)
    ix, iy, iz = p0[..., 0], p0[..., 1], p0[..., 2]
    out = np.zeros(p.shape[:-1])
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                w = ((f[..., 0] if dx else 1 - f[..., 0])
                     * (f[..., 1] if dy else 1 - f[..., 1])
                     * (f[..., 2] if dz else 1 - f[..., 2]))
                out += w * _lattice01(ix + dx, iy + dy, iz + dz, seed)
    return out


def fractal_noise3(pts, seed, scale=1.0, octaves=3, gain=0.5):
    total = np.zeros(np.asarray(pts).shape[:-1])
    amp, norm = 1.0, 0.0
    for o in range(octaves):
        total += amp * value_noise3(pts, seed + 101 * o, scale / (2 ** o))
        norm += amp
        amp *= gain
    return total / norm


# ---------------------------------------------------------------------------
# scene description

@dataclass
class PlaneSpec:
    origin: np.ndarray            # a point on the plane
    u: np.ndarray                 # in-plane axes (define texture coordinates)
    v: np.ndarray
    extent: tuple = (1e6, 1e6)    # half-extents along u, v
    class_name: str = "Background"
    seed: int = 1
    texture_scale: float = 2.0
    texture_amp: float = 0.5      # near-zero models a low-texture surface
    octaves: int = 3              # 1 = band-limited smooth texture

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.normal = np.cross(self.u, self.v)
        self.normal /= np.linalg.norm(self.normal)


@dataclass
class BoxSpec:
    center: np.ndarray            # box center in world at time t
    size: np.ndarray              # full extents along box axes
    class_name: str = "Vehicle"
    instance_id: int = 1
    yaw: float = 0.0              # rotation about +y at time t
    motion: Twist = None          # world-frame twist applied between frames
    seed: int = 2
    texture_scale: float = 0.8
    texture_amp: float = 0.5
    octaves: int = 3

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)
        if self.motion is None:
            self.motion = Twist([0.0, 0.0, 0.0], [0.0, 0.0, 0.0])

    def pose(self):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        R = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        return RigidTransform(R, self.center)

    def delta(self):
        """World-frame rigid motion between t and t+1."""
        return exp_se3(self.motion)


@dataclass
class SceneSpec:
    rig: StereoRig
    width: int
    height: int
    ego: Twist
    planes: list = field(default_factory=list)
    boxes: list = field(default_factory=list)
    noise_sigma: float = 0.0

    def ego_transform(self):
        """T mapping camera-t coordinates to camera-(t+1) coordinates."""
        return exp_se3(self.ego)


# ---------------------------------------------------------------------------
# ray casting

class _View:
    """Ray-cast result for one camera at one timestep."""

    def __init__(self, depth, surf, body_pts, class_ids, inst_ids, world_pts):
        self.depth = depth          # HxW camera-frame z
        self.surf = surf            # HxW surface index, -1 = sky
        self.body_pts = body_pts    # HxWx3 body-frame (texture) coordinates
        self.class_ids = class_ids  # HxW
        self.inst_ids = inst_ids    # HxW
        self.world_pts = world_pts  # HxWx3 world position at this timestep


def _np_transform(T: RigidTransform):
    return T.R.detach().numpy(), T.t.detach().numpy()


def _cast(spec: SceneSpec, cam_pose: RigidTransform, time_idx, dirs_world=None,
          origin=None):
    """Cast rays for every pixel (or explicit world directions).

    cam_pose maps camera coordinates to world coordinates; the returned depth
    is the ray parameter of unit-z camera rays, i.e. camera-frame depth.
    """
    intr = spec.rig.intrinsics
    Rc, tc = _np_transform(cam_pose)
    if dirs_world is None:
        ys, xs = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
        d_cam = np.stack([(xs - intr.cx) / intr.fx, (ys - intr.cy) / intr.fy,
                          np.ones_like(xs)], axis=-1)
        dirs_world = d_cam @ Rc.T
    if origin is None:
        origin = tc
    shape = dirs_world.shape[:-1]

    best_t = np.full(shape, np.inf)
    surf = np.full(shape, -1, dtype=np.int64)
    body = np.zeros(shape + (3,))

    surfaces = list(spec.planes) + list(spec.boxes)
    for si, s in enumerate(surfaces):
        if isinstance(s, PlaneSpec):
            denom = dirs_world @ s.normal
            num = (s.origin - origin) @ s.normal
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
            hit_pts = origin + t[..., None] * dirs_world
            rel = hit_pts - s.origin
            a = rel @ s.u / (s.u @ s.u)
            b = rel @ s.v / (s.v @ s.v)
            ok = (t > 1e-6) & (np.abs(a) <= s.extent[0]) & (np.abs(b) <= s.extent[1])
            t = np.where(ok, t, np.inf)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            surf = np.where(closer, si, surf)
            body[closer] = hit_pts[closer]
        else:
            pose = s.pose()
            if time_idx == 1:
                pose = compose(s.delta(), pose)
            Rb, tb = _np_transform(pose)
            o_b = (origin - tb) @ Rb
            d_b = dirs_world @ Rb
            half = s.size / 2.0
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = np.where(np.abs(d_b) > 1e-15, 1.0 / d_b, np.inf)
            t1 = (-half - o_b) * inv
            t2 = (half - o_b) * inv
            tmin = np.minimum(t1, t2).max(axis=-1)
            tmax = np.maximum(t1, t2).min(axis=-1)
            ok = (tmax >= tmin) & (tmax > 1e-6)
            t = np.where(ok, np.where(tmin > 1e-6, tmin, np.inf), np.inf)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            surf = np.where(closer, si, surf)
            with np.errstate(invalid="ignore"):
                hit_b = o_b + t[..., None] * d_b
            body[closer] = hit_b[closer]

    depth = np.where(np.isfinite(best_t), best_t, SKY_DEPTH)
    world = origin + depth[..., None] * dirs_world

    class_ids = np.full(shape, CLASS_ID["Sky"], dtype=np.int64)
    inst_ids = np.zeros(shape, dtype=np.int64)
    for si, s in enumerate(surfaces):
        m = surf == si
        class_ids[m] = CLASS_ID[s.class_name]
        if isinstance(s, BoxSpec):
            inst_ids[m] = s.instance_id
    # sky rays keep a far point as their body coordinate
    body[surf < 0] = world[surf < 0]
    return _View(depth, surf, body, class_ids, inst_ids, world)


# camera poses -------------------------------------------------------------

def _camera_poses(spec: SceneSpec):
    T_ego = spec.ego_transform()
    left_t = RigidTransform.identity()
    shift = RigidTransform(np.eye(3), np.array([spec.rig.baseline, 0.0, 0.0]))
    right_t = shift
    left_t1 = inverse(T_ego)
    right_t1 = compose(left_t1, shift)
    return {("l", 0): left_t, ("r", 0): right_t,
            ("l", 1): left_t1, ("r", 1): right_t1}


def _advance_world(spec: SceneSpec, view: _View, time_a, time_b):
    """World positions of view A's surface points at time B."""
    if time_a == time_b:
        return view.world_pts.copy()
    out = view.world_pts.copy()
    surfaces = list(spec.planes) + list(spec.boxes)
    for si, s in enumerate(surfaces):
        if not isinstance(s, BoxSpec):
            continue
        m = view.surf == si
        if not m.any():
            continue
        pose_a = s.pose() if time_a == 0 else compose(s.delta(), s.pose())
        pose_b = s.pose() if time_b == 0 else compose(s.delta(), s.pose())
        move = compose(pose_b, inverse(pose_a))
        Rm, tm = _np_transform(move)
        out[m] = view.world_pts[m] @ Rm.T + tm
    return out


def correspondence(spec: SceneSpec, view_a: _View, pose_b: RigidTransform,
                   time_a, time_b):
    """Pixel correspondence of view A's points seen from camera B.

    Returns (pix_b HxWx2, z_b HxW camera-B depth of the corresponded point).
    """
    intr = spec.rig.intrinsics
    world_b = _advance_world(spec, view_a, time_a, time_b)
    Rb, tb = _np_transform(pose_b)
    cam_b = (world_b - tb) @ Rb
    z = cam_b[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = intr.fx * cam_b[..., 0] / z + intr.cx
        py = intr.fy * cam_b[..., 1] / z + intr.cy
    return np.stack([px, py], axis=-1), z


def analytic_occlusion(spec: SceneSpec, view_a: _View, pose_b: RigidTransform,
                       time_a, time_b, view_b: _View = None):
    """Matchability of view A's pixels in view B (1 = visible).

    A pixel is occluded when its corresponded point is not the nearest
    surface along the view-B ray (1 mm tolerance), falls outside the image,
    or its bilinear stencil in view B straddles a depth discontinuity (the
    interpolated correspondence is then meaningless). The discontinuity test
    interpolates inverse depth, which is exactly affine in pixel coordinates
    on any planar face, so it only fires across true surface boundaries.
    """
    intr = spec.rig.intrinsics
    h, w = view_a.depth.shape
    pix, z = correspondence(spec, view_a, pose_b, time_a, time_b)
    px, py = pix[..., 0], pix[..., 1]
    inside = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1) & (z > 0)

    Rb, tb = _np_transform(pose_b)
    d_cam = np.stack([(px - intr.cx) / intr.fx, (py - intr.cy) / intr.fy,
                      np.ones_like(px)], axis=-1)
    probe = _cast(spec, pose_b, time_b, dirs_world=d_cam @ Rb.T, origin=tb)
    nearest = probe.depth
    sky_to_sky = (view_a.surf < 0) & (probe.surf < 0)
    visible = inside & ((z <= nearest + ZBUF_TOL) | sky_to_sky)

    if view_b is not None:
        x0 = np.clip(np.floor(px).astype(int), 0, w - 2)
        y0 = np.clip(np.floor(py).astype(int), 0, h - 2)
        fx, fy = px - x0, py - y0
        inv = 1.0 / view_b.depth
        interp = ((1 - fy) * ((1 - fx) * inv[y0, x0] + fx * inv[y0, x0 + 1])
                  + fy * ((1 - fx) * inv[y0 + 1, x0] + fx * inv[y0 + 1, x0 + 1]))
        inv_z = np.where(z > 0, 1.0 / np.maximum(z, 1e-9), 0.0)
        corrupt = np.abs(interp - inv_z) > STENCIL_GAP_REL * np.maximum(
            inv_z, 1.0 / SKY_DEPTH)
        visible = visible & ~(inside & corrupt)
    return visible.astype(np.float64)


# ---------------------------------------------------------------------------
# ground truth bundle

@dataclass
class GroundTruth:
    spec: SceneSpec
    images: dict
    disp: dict
    flow_fwd: np.ndarray
    flow_bwd: np.ndarray
    occ: dict
    sem: dict
    inst: dict
    borders: dict
    f_seg: dict
    xi: np.ndarray
    instance_motions: dict
    dyn: dict

    def bundle(self, frame) -> FeatureBundle:
        sem_map = self.sem[frame]
        scores = np.zeros(sem_map.shape + (len(semantic.CLASSES),))
        ys, xs = np.mgrid[0:sem_map.shape[0], 0:sem_map.shape[1]]
        scores[ys, xs, sem_map] = 1.0
        return FeatureBundle(scores, self.borders[frame], self.f_seg[frame])

    @property
    def rig(self):
        return self.spec.rig


def _render_image(spec: SceneSpec, view: _View, rng):
    surfaces = list(spec.planes) + list(spec.boxes)
    img = np.full(view.depth.shape, 0.5)
    for si, s in enumerate(surfaces):
        m = view.surf == si
        if not m.any():
            continue
        tex = fractal_noise3(view.body_pts[m], s.seed, s.texture_scale,
                             octaves=s.octaves)
        img[m] = 0.5 + s.texture_amp * (tex - 0.5)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def _feature_field(spec: SceneSpec, view: _View, channels=3, seed_base=7777):
    out = np.zeros(view.depth.shape + (channels,))
    for c in range(channels):
        out[..., c] = fractal_noise3(view.body_pts, seed_base + 13 * c, 3.0,
                                     octaves=2)
    return np.clip(out, 0.0, 1.0)


def _true_motions(spec: SceneSpec):
    """Per-instance residual and apparent motions for both directions."""
    T_ego = spec.ego_transform()
    out = {"fwd": [], "bwd": []}
    for box in spec.boxes:
        delta = box.delta()
        # target t: residual maps ego-aligned t+1 points back onto t points
        res_fwd = inverse(delta)
        out["fwd"].append({
            "instance_id": box.instance_id,
            "residual": res_fwd,
            "apparent": compose(res_fwd, inverse(T_ego)),
        })
        out["bwd"].append({
            "instance_id": box.instance_id,
            "residual": delta,
            "apparent": compose(delta, T_ego),
        })
    return out


def _dynamic_gt(spec: SceneSpec, view: _View, dt):
    mask = view.class_ids == semantic.PEDESTRIAN_RIDER
    for box in spec.boxes:
        delta = box.delta()
        speed = float(np.linalg.norm(delta.t.numpy())) / dt * 3.6
        if speed > rigid_speed_threshold() or box.class_name == "PedestrianRider":
            mask = mask | (view.inst_ids == box.instance_id)
    return mask


def rigid_speed_threshold():
    from .rigid import SPEED_THRESHOLD_KMH
    return SPEED_THRESHOLD_KMH


def generate(spec: SceneSpec, seed=0, dt=0.1) -> GroundTruth:
    """Render both cameras at both timesteps and emit all ground truth."""
    rng = np.random.default_rng(seed)
    poses = _camera_poses(spec)
    views = {key: _cast(spec, pose, key[1]) for key, pose in poses.items()}
    for key, view in views.items():
        if (view.depth <= 1e-4).any():
            raise ValueError(f"camera {key} intersects scene geometry")

    frames = {"l_t": ("l", 0), "r_t": ("r", 0), "l_t1": ("l", 1), "r_t1": ("r", 1)}
    images = {f: _render_image(spec, views[k], rng) for f, k in frames.items()}
    disp = {f: spec.rig.intrinsics.fx * spec.rig.baseline / views[k].depth
            for f, k in frames.items()}
    sem = {f: views[k].class_ids for f, k in frames.items()}
    inst = {f: views[k].inst_ids for f, k in frames.items()}
    borders = {f: border_regression(inst[f]).numpy() for f in frames}
    f_seg = {f: _feature_field(spec, views[k]) for f, k in frames.items()}

    grid = np.stack(np.meshgrid(np.arange(spec.width, dtype=np.float64),
                                np.arange(spec.height, dtype=np.float64)), axis=-1)
    lt, lt1 = views[("l", 0)], views[("l", 1)]
    # sky rays carry a real far point, so their flow is the true (small)
    # correspondence shift rather than an arbitrary zero
    pix_f, _ = correspondence(spec, lt, poses[("l", 1)], 0, 1)
    flow_fwd = pix_f - grid
    pix_b, _ = correspondence(spec, lt1, poses[("l", 0)], 1, 0)
    flow_bwd = pix_b - grid

    occ = {
        "F_fwd": analytic_occlusion(spec, lt, poses[("l", 1)], 0, 1, lt1),
        "F_bwd": analytic_occlusion(spec, lt1, poses[("l", 0)], 1, 0, lt),
        "D_l": analytic_occlusion(spec, lt, poses[("r", 0)], 0, 0, views[("r", 0)]),
        "D_r": analytic_occlusion(spec, views[("r", 0)], poses[("l", 0)], 0, 0, lt),
    }

    dyn = {"fwd": _dynamic_gt(spec, lt, dt), "bwd": _dynamic_gt(spec, lt1, dt)}

    return GroundTruth(
        spec=spec, images=images, disp=disp, flow_fwd=flow_fwd,
        flow_bwd=flow_bwd, occ=occ, sem=sem, inst=inst, borders=borders,
        f_seg=f_seg, xi=spec.ego.xi.numpy(), instance_motions=_true_motions(spec),
        dyn=dyn,
    )


def analytic_flow(spec: SceneSpec, view: _View, pose_b, time_a, time_b):
    """Exact flow of every pixel of view A toward camera B."""
    grid = np.stack(np.meshgrid(np.arange(view.depth.shape[1], dtype=np.float64),
                                np.arange(view.depth.shape[0], dtype=np.float64)),
                    axis=-1)
    pix, _ = correspondence(spec, view, pose_b, time_a, time_b)
    return pix - grid


def cast_views(spec: SceneSpec):
    """All four camera views plus their poses (for tests and tools)."""
    poses = _camera_poses(spec)
    return {k: _cast(spec, p, k[1]) for k, p in poses.items()}, poses
