"""Forward-backward occlusion estimation and the occlusion supervision loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .geom import as_tensor
from .report import LossReport, make_report
from .warp import DISPARITY, FLOW, DisplacementMap, sample

# Threshold constants for the consistency test, per map kind.
FLOW_THRESHOLDS = (0.5, 2e-3)
DISPARITY_THRESHOLDS = (1.0, 4e-2)


@dataclass(frozen=True)
class FbThresholds:
    alpha: float
    beta: float
    kind: str

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("thresholds must be positive")
        if self.kind not in (FLOW, DISPARITY):
            raise ValueError(f"unknown kind {self.kind!r}")

    @staticmethod
    def for_flow():
        return FbThresholds(*FLOW_THRESHOLDS, FLOW)

    @staticmethod
    def for_disparity():
        return FbThresholds(*DISPARITY_THRESHOLDS, DISPARITY)


def fb_occlusion(fwd: DisplacementMap, bwd: DisplacementMap, th: FbThresholds):
    """Binary matchability map from forward-backward consistency.

    The backward map lives on the source frame and is aligned onto the target
    grid by warping it with the forward map. A consistent flow pair satisfies
    fwd + warped_bwd ~ 0; a consistent disparity pair satisfies
    fwd - warped_bwd ~ 0. A pixel is matchable iff
    ||delta||^2 < alpha + beta * (||fwd||^2 + ||warped_bwd||^2);
    invalid warp samples are occluded.
    """
    if fwd.shape != bwd.shape:
        raise ValueError("fb_occlusion: map shapes differ")
    if fwd.kind != bwd.kind:
        raise ValueError("fb_occlusion: map kinds differ")
    warped, valid = sample(bwd.values, fwd)
    f = fwd.values
    if fwd.kind == FLOW:
        delta = f + warped
        sq = lambda x: (x * x).sum(dim=-1)
    else:
        delta = f - warped
        sq = lambda x: x * x
    matchable = sq(delta) < th.alpha + th.beta * (sq(f) + sq(warped))
    out = (matchable & valid & fwd.valid).to(f.dtype)
    return out


def occlusion_cost(predicted, fb):
    predicted, fb = as_tensor(predicted), as_tensor(fb)
    if predicted.shape != fb.shape:
        raise ValueError("occlusion_loss: shapes differ")
    diff = predicted - fb
    return (diff * diff).mean()


def occlusion_loss(predicted, fb) -> LossReport:
    pred = as_tensor(predicted).detach().clone().requires_grad_(True)
    value = occlusion_cost(pred, fb)
    return make_report(value, {"predicted": pred})
