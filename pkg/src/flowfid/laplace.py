"""The L1 loss family: plain L1, Laplace NLL with a predicted scale, and the
machine-checked identity between the scaled Laplace NLL and a one-layer flow.

All constants are kept (never dropped as "up to a constant"), so the two
code paths agree bitwise:

    laplace_nll(y, g, b) = sum |y - g| / b + sum log b + D log 2
    one_layer_flow_nll   = -log p_z((y - g)/b) - logdet(1/b diag)

and with b = 1 both reduce to l1_loss(y, g) + D log 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, ShapeError, Tensor
from .layers import ScaleBias
from .network import LOG_TWO, FlowNetwork


@dataclass
class LaplaceHead:
    """Predicted mean and log-scale of a per-pixel Laplace model."""

    g: Tensor
    a: Tensor  # log-scale; b = exp(a) > 0 by construction

    @property
    def b(self) -> Tensor:
        return ad.exp(self.a)


def l1_loss(y: Tensor, g: Tensor) -> Tensor:
    """Sum of absolute differences. Gradient w.r.t. g is -sign(y - g) with
    the engine's sign(0) = 0 convention."""
    if y.shape != g.shape:
        raise ShapeError(f"l1_loss shapes differ: {y.shape} vs {g.shape}")
    return ad.abs_(y - g).sum()


def laplace_nll(y: Tensor, g: Tensor, b: Tensor) -> Tensor:
    """Full Laplace negative log-likelihood including the D log 2 normalizer."""
    if y.shape != g.shape:
        raise ShapeError(f"laplace_nll shapes differ: {y.shape} vs {g.shape}")
    b = ad.as_tensor(b)
    if np.any(b.data <= 0.0):
        raise DomainError("laplace scale must be strictly positive")
    abs_term = ad.abs_((y - g) / b).sum()
    return (abs_term + float(y.size) * LOG_TWO) + ad.log(b).sum()


def one_layer_flow_nll(y: Tensor, head: LaplaceHead) -> Tensor:
    """Score y under the one-layer flow z = (y - g)/b with a standard Laplace
    prior, using the generic flow machinery. Numerically identical to
    :func:`laplace_nll`."""
    flow = FlowNetwork([("scale_bias", ScaleBias(head.g, head.b), 0)], prior="laplace")
    return flow.encode(y).nll.sum()


def adaptive_variance_head(encoder_output: Tensor) -> LaplaceHead:
    """Split a 2C-channel prediction into mean (first half) and log-scale
    (second half)."""
    c = encoder_output.shape[1]
    if c % 2:
        raise ShapeError(f"adaptive head needs an even channel count, got {c}")
    g = ad.slice_channels(encoder_output, 0, c // 2)
    a = ad.slice_channels(encoder_output, c // 2, c)
    return LaplaceHead(g=g, a=a)


def scaled_l1_objective(y: Tensor, head: LaplaceHead) -> Tensor:
    """Adaptive-variance training loss: the full Laplace NLL of the head."""
    return laplace_nll(y, head.g, head.b)
