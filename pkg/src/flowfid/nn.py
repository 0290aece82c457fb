"""Small trainable building blocks (convolutions, linear head) on the tape."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d:
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        ksize: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int | None = None,
        zero_init: bool = False,
    ):
        self.stride = stride
        self.padding = ksize // 2 if padding is None else padding
        fan_in = in_ch * ksize * ksize
        if zero_init:
            w = np.zeros((out_ch, in_ch, ksize, ksize))
        else:
            w = he_normal(rng, (out_ch, in_ch, ksize, ksize), fan_in)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, padding=self.padding, stride=self.stride)

    def named_parameters(self, prefix: str):
        return [(prefix + "/w", self.w), (prefix + "/b", self.b)]


class Linear:
    def __init__(self, in_f: int, out_f: int, rng: np.random.Generator, zero_init: bool = False):
        if zero_init:
            w = np.zeros((in_f, out_f))
        else:
            w = he_normal(rng, (in_f, out_f), in_f)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_f), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.w, self.b)

    def named_parameters(self, prefix: str):
        return [(prefix + "/w", self.w), (prefix + "/b", self.b)]


class CondConvNet:
    """3-layer conv module that predicts (scale logits, bias) from its input.

    Layout: 3x3 conv, ReLU, 1x1 conv, ReLU, 3x3 conv. The final conv starts
    at zero weights with the scale-logit half of its bias set to
    ``scale_logit_init`` so a freshly built layer is close to the identity.
    """

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        hidden: int,
        rng: np.random.Generator,
        scale_logit_init: float = 4.0,
    ):
        self.c1 = Conv2d(in_ch, hidden, 3, rng)
        self.c2 = Conv2d(hidden, hidden, 1, rng)
        self.c3 = Conv2d(hidden, out_ch, 3, rng, zero_init=True)
        self.c3.b.data[: out_ch // 2] = scale_logit_init

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.relu(self.c1(x))
        h = ad.relu(self.c2(h))
        return self.c3(h)

    def named_parameters(self, prefix: str):
        return (
            self.c1.named_parameters(prefix + "/c1")
            + self.c2.named_parameters(prefix + "/c2")
            + self.c3.named_parameters(prefix + "/c3")
        )
