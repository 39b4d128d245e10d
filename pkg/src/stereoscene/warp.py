"""Differentiable bilinear image synthesis indexed by flow or disparity maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .geom import DTYPE, as_tensor, pixel_grid

FLOW = "flow"
DISPARITY = "disparity"


@dataclass
class DisplacementMap:
    """Dense displacement field: 2-channel flow or 1-channel disparity.

    values: HxWx2 (flow) or HxW (disparity) tensor in pixels.
    valid:  HxW bool mask; invalid pixels are excluded from every loss.
    """

    kind: str
    values: torch.Tensor
    valid: torch.Tensor = field(default=None)

    def __post_init__(self):
        self.values = as_tensor(self.values)
        if self.kind == FLOW:
            if self.values.ndim != 3 or self.values.shape[-1] != 2:
                raise ValueError("flow map must be HxWx2")
        elif self.kind == DISPARITY:
            if self.values.ndim != 2:
                raise ValueError("disparity map must be HxW")
        else:
            raise ValueError(f"unknown map kind {self.kind!r}")
        if self.valid is None:
            self.valid = torch.ones(self.shape, dtype=torch.bool)
        else:
            self.valid = torch.as_tensor(self.valid, dtype=torch.bool)

    @property
    def shape(self):
        return self.values.shape[:2]

    def sample_coords(self):
        """Absolute source coordinates addressed by this map."""
        h, w = self.shape
        xs, ys = pixel_grid(h, w)
        if self.kind == FLOW:
            return xs + self.values[..., 0], ys + self.values[..., 1]
        return xs - self.values, ys

    def detach(self):
        return DisplacementMap(self.kind, self.values.detach(), self.valid)


def flow_map(values, valid=None):
    return DisplacementMap(FLOW, values, valid)


def disparity_map(values, valid=None):
    return DisplacementMap(DISPARITY, values, valid)


def disparity_as_flow(disp, sign=-1.0, valid=None):
    """Re-express a disparity map as a flow map with horizontal component
    sign * disp. sign=-1 matches left-target sampling (p - D); sign=+1 is
    used when the target is the right image."""
    d = as_tensor(disp)
    u = sign * d
    return flow_map(torch.stack([u, torch.zeros_like(d)], dim=-1), valid)


def _gather(img, iy, ix):
    h, w = img.shape[:2]
    flat = img.reshape(h * w, -1)
    return flat[iy * w + ix]


def sample(src, dmap: DisplacementMap):
    """Bilinearly sample src (HxW or HxWxC) at the map's source coordinates.

    Returns (warped image, valid mask). Samples outside [0, W-1] x [0, H-1]
    produce zeros and are flagged invalid, as are samples taken at pixels the
    map itself marks invalid.
    """
    img = as_tensor(src)
    squeeze = img.ndim == 2
    if squeeze:
        img = img.unsqueeze(-1)
    h, w = img.shape[:2]
    if dmap.shape != (h, w):
        raise ValueError("image and displacement map dimensions differ")

    xs, ys = dmap.sample_coords()
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    valid = inside & dmap.valid

    # floor-based stencil: at integer coordinates the derivative is the
    # right-sided difference by construction.
    xsc = torch.clamp(xs, 0.0, float(w - 1))
    ysc = torch.clamp(ys, 0.0, float(h - 1))
    x0 = torch.clamp(torch.floor(xsc), max=w - 2).long() if w > 1 else torch.zeros_like(xsc).long()
    y0 = torch.clamp(torch.floor(ysc), max=h - 2).long() if h > 1 else torch.zeros_like(ysc).long()
    x1 = torch.clamp(x0 + 1, max=w - 1)
    y1 = torch.clamp(y0 + 1, max=h - 1)

    wx = xsc - x0.to(DTYPE)
    wy = ysc - y0.to(DTYPE)

    v00 = _gather(img, y0, x0)
    v01 = _gather(img, y0, x1)
    v10 = _gather(img, y1, x0)
    v11 = _gather(img, y1, x1)

    top = v00 + (v01 - v00) * wx.unsqueeze(-1)
    bot = v10 + (v11 - v10) * wx.unsqueeze(-1)
    out = top + (bot - top) * wy.unsqueeze(-1)
    out = torch.where(valid.unsqueeze(-1), out, torch.zeros_like(out))
    if squeeze:
        out = out.squeeze(-1)
    return out, valid


def sample_grad(src, dmap: DisplacementMap, upstream, wrt_src=False):
    """Gradient of sum(upstream * sample(src, map)) w.r.t. the map values.

    Uses the analytic bilinear derivative (via autograd over the sampling
    expression). Returns the map gradient, or (map_grad, src_grad) when
    wrt_src is set.
    """
    vals = dmap.values.detach().clone().requires_grad_(True)
    img = as_tensor(src)
    if wrt_src:
        img = img.detach().clone().requires_grad_(True)
    out, _ = sample(img, DisplacementMap(dmap.kind, vals, dmap.valid))
    up = as_tensor(upstream)
    loss = (out * up).sum()
    loss.backward()
    if wrt_src:
        return vals.grad, img.grad
    return vals.grad
