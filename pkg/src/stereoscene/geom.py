"""Camera model, rigid-body transforms, projections and rigid flow synthesis.

All numerical work happens in torch float64 so that downstream losses can
differentiate through every operation (including the twist -> transform map).
Inputs may be numpy arrays or lists; they are converted on entry.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

DTYPE = torch.float64

# Points closer to the image plane than this are treated as behind the camera.
EPS_Z = 1e-6

# Below this rotation magnitude the closed-form Rodrigues coefficients are
# replaced by their second-order Taylor expansions. The crossover must sit
# well above sqrt(eps): at 1e-8 the (1 - cos) / theta^2 coefficient loses
# every significant digit and the translation column degrades to ~1e-9.
SMALL_ANGLE = 1e-4


class NonPositiveDisparityError(ValueError):
    pass


def as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def K(self):
        return torch.tensor(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=DTYPE,
        )


@dataclass(frozen=True)
class StereoRig:
    intrinsics: CameraIntrinsics
    baseline: float

    def __post_init__(self):
        if self.baseline <= 0:
            raise ValueError("baseline must be positive")


@dataclass
class Twist:
    """se(3) exponential coordinates (v, w): linear then angular part."""

    v: torch.Tensor
    w: torch.Tensor

    def __init__(self, v, w):
        self.v = as_tensor(v).reshape(3)
        self.w = as_tensor(w).reshape(3)

    @property
    def xi(self):
        return torch.cat([self.v, self.w])

    @staticmethod
    def from_vector(xi):
        xi = as_tensor(xi).reshape(6)
        t = Twist.__new__(Twist)
        t.v = xi[:3]
        t.w = xi[3:]
        return t


@dataclass
class RigidTransform:
    R: torch.Tensor
    t: torch.Tensor

    def __init__(self, R, t):
        self.R = as_tensor(R).reshape(3, 3)
        self.t = as_tensor(t).reshape(3)

    @staticmethod
    def identity():
        return RigidTransform(torch.eye(3, dtype=DTYPE), torch.zeros(3, dtype=DTYPE))

    def apply(self, points):
        """Transform points of shape (..., 3)."""
        pts = as_tensor(points)
        return pts @ self.R.transpose(0, 1) + self.t

    def matrix(self):
        M = torch.eye(4, dtype=DTYPE)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def check_valid(self, tol=1e-9):
        err = (self.R.T @ self.R - torch.eye(3, dtype=DTYPE)).abs().max().item()
        det = torch.det(self.R).item()
        return err < tol and abs(det - 1.0) < tol


def skew(w):
    w = as_tensor(w).reshape(3)
    O = torch.zeros((), dtype=DTYPE)
    return torch.stack(
        [
            torch.stack([O, -w[2], w[1]]),
            torch.stack([w[2], O, -w[0]]),
            torch.stack([-w[1], w[0], O]),
        ]
    )


def exp_se3(xi: Twist) -> RigidTransform:
    """Exponential map se(3) -> SE(3), differentiable in the twist.

    Uses the closed-form Rodrigues coefficients with a second-order Taylor
    branch below SMALL_ANGLE to avoid cancellation near the identity.
    """
    v, w = xi.v, xi.w
    theta_sq = (w * w).sum()
    # Tiny floor keeps sqrt's backward finite when w == 0 (0 * inf -> NaN).
    theta = torch.sqrt(torch.clamp(theta_sq, min=1e-300))
    small = theta < SMALL_ANGLE
    # Safe denominator so both branches stay finite under autograd.
    th = torch.where(small, torch.ones_like(theta), theta)

    A = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(th) / th)
    B = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(th)) / (th * th))
    C = torch.where(small, 1.0 / 6.0 - theta_sq / 120.0, (th - torch.sin(th)) / (th ** 3))

    K = skew(w)
    K2 = K @ K
    I = torch.eye(3, dtype=DTYPE)
    R = I + A * K + B * K2
    V = I + B * K + C * K2
    return RigidTransform(R, V @ v)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return RigidTransform(a.R @ b.R, a.R @ b.t + a.t)


def inverse(a: RigidTransform) -> RigidTransform:
    Rt = a.R.transpose(0, 1)
    return RigidTransform(Rt, -(Rt @ a.t))


def disparity_to_depth(d, rig: StereoRig):
    d = as_tensor(d)
    if (d <= 0).any():
        raise NonPositiveDisparityError("disparity must be positive")
    return rig.intrinsics.fx * rig.baseline / d


def depth_to_disparity(z, rig: StereoRig):
    z = as_tensor(z)
    return rig.intrinsics.fx * rig.baseline / z


def backproject(px, py, intr: CameraIntrinsics, Z):
    """Back-project pixel coordinates at depth Z; returns (points, valid).

    points has shape broadcast(px, py, Z) x 3; valid marks Z > 0.
    """
    px, py, Z = as_tensor(px), as_tensor(py), as_tensor(Z)
    x = (px - intr.cx) / intr.fx * Z
    y = (py - intr.cy) / intr.fy * Z
    pts = torch.stack(torch.broadcast_tensors(x, y, Z), dim=-1)
    return pts, Z > 0


def project(points, intr: CameraIntrinsics, eps_z=EPS_Z):
    """Perspective projection of (..., 3) points; returns (pixels, valid)."""
    pts = as_tensor(points)
    z = pts[..., 2]
    valid = z > eps_z
    zs = torch.where(valid, z, torch.ones_like(z))
    px = intr.fx * pts[..., 0] / zs + intr.cx
    py = intr.fy * pts[..., 1] / zs + intr.cy
    return torch.stack([px, py], dim=-1), valid


def pixel_grid(h, w):
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=DTYPE), torch.arange(w, dtype=DTYPE), indexing="ij"
    )
    return xs, ys


MAX_SCENE_DEPTH = 1000.0  # beyond this a "surface" is treated as sky


def backproject_grid(disp, rig: StereoRig, valid=None, max_depth=MAX_SCENE_DEPTH):
    """Point cloud from a dense disparity map; returns (HxWx3 points, valid).

    Pixels whose depth exceeds max_depth (sky) are flagged invalid: their 3D
    positions are numerically meaningless and poison any interpolation.
    """
    disp = as_tensor(disp)
    h, w = disp.shape
    pos = disp > rig.intrinsics.fx * rig.baseline / max_depth
    if valid is not None:
        pos = pos & valid
    d_safe = torch.where(pos, disp, torch.ones_like(disp))
    Z = rig.intrinsics.fx * rig.baseline / d_safe
    xs, ys = pixel_grid(h, w)
    pts, _ = backproject(xs, ys, rig.intrinsics, Z)
    return pts, pos


def rigid_flow(disp, T: RigidTransform, rig: StereoRig, valid=None):
    """Flow induced by transform T over the scene described by disparity.

    Returns (HxWx2 flow, valid); pixels that land behind the camera or carry
    non-positive disparity are invalid and get zero flow.
    """
    pts, ok = backproject_grid(disp, rig, valid)
    moved = T.apply(pts)
    pix, in_front = project(moved, rig.intrinsics)
    xs, ys = pixel_grid(*disp.shape)
    grid = torch.stack([xs, ys], dim=-1)
    good = ok & in_front
    flow = torch.where(good.unsqueeze(-1), pix - grid, torch.zeros_like(pix))
    return flow, good


def depth_weight(z, rig: StereoRig):
    """Confidence weight theta(z) = 1 / (1 + z^2 / (b * fx))."""
    z = as_tensor(z)
    return 1.0 / (1.0 + z * z / (rig.baseline * rig.intrinsics.fx))


def load_rig(path):
    """Read fx, fy, cx, cy, baseline, width, height from key=value text."""
    vals = {}
    with open(path) as f:
        for line in f:
            line = line.split("#")[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            vals[key.strip()] = float(val)
    intr = CameraIntrinsics(vals["fx"], vals["fy"], vals["cx"], vals["cy"])
    rig = StereoRig(intr, vals["baseline"])
    return rig, int(vals["width"]), int(vals["height"])
