"""Scalar loss values bundled with gradients w.r.t. named variables."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass
class LossReport:
    value: float
    grads: dict = field(default_factory=dict)

    def grad(self, name):
        return self.grads[name]


def make_report(value: torch.Tensor, variables: dict) -> LossReport:
    """Differentiate a scalar loss tensor w.r.t. leaf variables.

    variables maps name -> tensor with requires_grad set. Variables the loss
    does not depend on get a zero gradient of matching shape.
    """
    if not torch.isfinite(value):
        raise FloatingPointError(f"non-finite loss value {value.item()}")
    names = list(variables)
    tensors = [variables[n] for n in names]
    if value.requires_grad and tensors:
        grads = torch.autograd.grad(value, tensors, allow_unused=True, retain_graph=False)
    else:
        grads = [None] * len(tensors)
    out = {}
    for name, t, g in zip(names, tensors, grads):
        out[name] = torch.zeros_like(t) if g is None else g
    return LossReport(value.item(), out)


def leaf(x) -> torch.Tensor:
    """Detached copy marked as a differentiation root."""
    return torch.as_tensor(x, dtype=torch.float64).detach().clone().requires_grad_(True)
