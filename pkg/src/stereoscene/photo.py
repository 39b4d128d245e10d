"""Photometric matching loss: Charbonnier L1 plus structural dissimilarity."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .geom import as_tensor
from .report import LossReport, make_report
from .warp import DisplacementMap, sample

CHARBONNIER_EPS = 1e-3


@dataclass(frozen=True)
class PhotometricConfig:
    alpha_p: float = 0.6
    beta_p: float = 0.4
    ssim_window: int = 3
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2
    charbonnier_eps: float = CHARBONNIER_EPS

    def __post_init__(self):
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be an odd integer >= 3")


def charbonnier(x, eps=CHARBONNIER_EPS):
    return torch.sqrt(x * x + eps * eps)


def _box_mean(img, win):
    """Windowed mean with the window shrunk at the image border."""
    h, w = img.shape[:2]
    r = win // 2
    x = img.movedim(-1, 0).unsqueeze(1)  # C,1,H,W
    ones = torch.ones(1, 1, h, w, dtype=img.dtype)
    kernel = torch.ones(1, 1, win, win, dtype=img.dtype)
    sums = torch.nn.functional.conv2d(x, kernel, padding=r)
    counts = torch.nn.functional.conv2d(ones, kernel, padding=r)
    return (sums / counts).squeeze(1).movedim(0, -1)


def _erode_weight(weight, win):
    """Window-minimum of a weight map, zero wherever the window leaves the
    image. Used so structural comparisons never straddle pixels that carry
    no matchable content (borders, invalid or occluded samples)."""
    r = win // 2
    x = torch.nn.functional.pad(-weight.unsqueeze(0).unsqueeze(0),
                                (r, r, r, r), value=0.0)
    return -torch.nn.functional.max_pool2d(x, win, stride=1)[0, 0]


def ssim(a, b, cfg: PhotometricConfig = PhotometricConfig()):
    """Per-pixel SSIM map (HxWxC) with a uniform box window."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError("ssim: image shapes differ")
    squeeze = a.ndim == 2
    if squeeze:
        a, b = a.unsqueeze(-1), b.unsqueeze(-1)
    win = cfg.ssim_window
    mu_a = _box_mean(a, win)
    mu_b = _box_mean(b, win)
    var_a = _box_mean(a * a, win) - mu_a * mu_a
    var_b = _box_mean(b * b, win) - mu_b * mu_b
    cov = _box_mean(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + cfg.ssim_c1) * (2 * cov + cfg.ssim_c2)
    den = (mu_a * mu_a + mu_b * mu_b + cfg.ssim_c1) * (var_a + var_b + cfg.ssim_c2)
    out = num / den
    return out.squeeze(-1) if squeeze else out


def photometric_cost(target, src, dmap: DisplacementMap, occ,
                     cfg: PhotometricConfig = PhotometricConfig()):
    """Occlusion-weighted photometric cost as a differentiable scalar."""
    target, src = as_tensor(target), as_tensor(src)
    if target.shape != src.shape:
        raise ValueError("photometric_loss: image shapes differ")
    occ = as_tensor(occ)
    warped, valid = sample(src, dmap)
    if target.ndim == 2:
        target = target.unsqueeze(-1)
        warped = warped.unsqueeze(-1)
    l1 = charbonnier(target - warped, cfg.charbonnier_eps).mean(dim=-1)
    dssim = ((1.0 - ssim(target, warped, cfg)) / 2.0).mean(dim=-1)
    weight = occ * valid.to(target.dtype)
    # A structural window is only comparable when every pixel in it is
    # matchable; erode the weight so dssim never reads zeroed or occluded
    # samples at borders and disocclusions.
    w_struct = _erode_weight(weight, cfg.ssim_window)
    cost = cfg.alpha_p * l1 * weight + cfg.beta_p * dssim * w_struct
    denom = torch.clamp(weight.sum(), min=1.0)
    return cost.sum() / denom


def photometric_loss(target, src, dmap: DisplacementMap, occ,
                     cfg: PhotometricConfig = PhotometricConfig()) -> LossReport:
    vals = dmap.values.detach().clone().requires_grad_(True)
    value = photometric_cost(target, src, DisplacementMap(dmap.kind, vals, dmap.valid), occ, cfg)
    return make_report(value, {"map": vals})
