"""LR-image conditioning network, SR predictor head for the L1 baseline, the
reduced discriminator, and the adversarial objective.

The encoder is a small residual conv stack; the outputs of designated blocks
are concatenated into the conditioning features and resized (nearest
replication up, strided selection down) to the grid of every flow level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import Conv2d, Linear


@dataclass
class EncoderConfig:
    width: int = 32
    blocks: int = 4
    taps: tuple = (1, 2, 3, 4)  # 1-based residual block indices to concatenate

    @property
    def cond_channels(self) -> int:
        return len(self.taps) * self.width


@dataclass
class LrEmbedding:
    """Conditioning feature pyramid, one tensor per flow level (level l has
    the spatial size HR / 2^(l+1))."""

    levels: list
    source: tuple


class ResBlock:
    def __init__(self, width: int, rng: np.random.Generator):
        self.c1 = Conv2d(width, width, 3, rng)
        self.c2 = Conv2d(width, width, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.c2(ad.relu(self.c1(x)))

    def named_parameters(self, prefix: str):
        return self.c1.named_parameters(prefix + "/c1") + self.c2.named_parameters(prefix + "/c2")


class LrEncoder:
    """Residual-block LR embedding network E(x)."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, in_ch: int = 3):
        if any(t < 1 or t > cfg.blocks for t in cfg.taps):
            raise ValueError(f"tap indices {cfg.taps} outside 1..{cfg.blocks}")
        self.cfg = cfg
        self.conv_in = Conv2d(in_ch, cfg.width, 3, rng)
        self.blocks = [ResBlock(cfg.width, rng) for _ in range(cfg.blocks)]

    def features(self, x: Tensor) -> Tensor:
        """Concatenated tap outputs at the LR grid; channel count is
        len(taps) * width."""
        h = ad.relu(self.conv_in(x))
        taps = []
        for i, blk in enumerate(self.blocks, start=1):
            h = blk(h)
            if i in self.cfg.taps:
                taps.append(h)
        return ad.concat_channels(taps)

    def embed(self, x: Tensor, level_grids) -> LrEmbedding:
        """Resize the concatenated features to each flow level's grid."""
        feats = self.features(x)
        levels = [ad.nearest_resize(feats, gh, gw) for gh, gw in level_grids]
        return LrEmbedding(levels=levels, source=tuple(self.cfg.taps))

    def named_parameters(self, prefix: str = "encoder"):
        out = self.conv_in.named_parameters(prefix + "/conv_in")
        for i, blk in enumerate(self.blocks):
            out.extend(blk.named_parameters(f"{prefix}/block{i}"))
        return out


def level_grids(hr_h: int, hr_w: int, levels: int):
    """Spatial grid of each flow level: level l runs at HR / 2^(l+1)."""
    grids = []
    h, w = hr_h, hr_w
    for _ in range(levels):
        if h % 2 or w % 2:
            raise ShapeError(f"HR extents {hr_h}x{hr_w} not divisible by 2^{levels}")
        h, w = h // 2, w // 2
        grids.append((h, w))
    return grids


class SrPredictor:
    """Deterministic SR network g(x) for the L1 family: encoder features,
    nearest upsampling to the HR grid, and a two-conv head. With
    ``predict_scale`` the head emits 2C channels (mean plus log-scale)."""

    def __init__(
        self,
        cfg: EncoderConfig,
        scale: int,
        rng: np.random.Generator,
        out_ch: int = 3,
        predict_scale: bool = False,
    ):
        self.scale = scale
        self.encoder = LrEncoder(cfg, rng)
        self.out_ch = out_ch * (2 if predict_scale else 1)
        self.head1 = Conv2d(cfg.cond_channels, cfg.width, 3, rng)
        self.head2 = Conv2d(cfg.width, self.out_ch, 3, rng, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        feats = self.encoder.features(x)
        up = ad.nearest_resize(feats, x.shape[2] * self.scale, x.shape[3] * self.scale)
        return self.head2(ad.relu(self.head1(up)))

    def named_parameters(self, prefix: str = "sr"):
        return (
            self.encoder.named_parameters(prefix + "/encoder")
            + self.head1.named_parameters(prefix + "/head1")
            + self.head2.named_parameters(prefix + "/head2")
        )


class Discriminator:
    """Strided conv classifier with a reduced base width (default 16),
    global average pooling and a zero-initialized linear head, so a fresh
    discriminator outputs probability exactly 0.5."""

    def __init__(self, rng: np.random.Generator, width: int = 16, in_ch: int = 3):
        w = width
        self.conv_in = Conv2d(in_ch, w, 3, rng)
        self.stages = [
            Conv2d(w, 2 * w, 3, rng, stride=2),
            Conv2d(2 * w, 4 * w, 3, rng, stride=2),
            Conv2d(4 * w, 4 * w, 3, rng, stride=2),
            Conv2d(4 * w, 4 * w, 3, rng, stride=2),
        ]
        self.head = Linear(4 * w, 1, rng, zero_init=True)

    def logits(self, img: Tensor) -> Tensor:
        h = ad.leaky_relu(self.conv_in(img))
        for st in self.stages:
            h = ad.leaky_relu(st(h))
        pooled = h.mean(axes=(2, 3))
        return self.head(pooled).reshape((img.shape[0],))

    def __call__(self, img: Tensor) -> Tensor:
        """One probability per image."""
        return ad.sigmoid(self.logits(img))

    def named_parameters(self, prefix: str = "disc"):
        out = self.conv_in.named_parameters(prefix + "/conv_in")
        for i, st in enumerate(self.stages):
            out.extend(st.named_parameters(f"{prefix}/stage{i}"))
        out.extend(self.head.named_parameters(prefix + "/head"))
        return out


def adversarial_losses(real: Tensor, fake: Tensor, disc: Discriminator, mode: str = "plain"):
    """Generator and discriminator objectives.

    plain:  L_adv = log(1 - d(fake)) + log(d(real)), averaged over the batch.
    The generator minimizes L_adv (discriminator frozen); the discriminator
    minimizes -L_adv against a detached fake. Log terms are evaluated from
    logits via softplus, so saturated probabilities never hit log(0).

    relativistic: ESRGAN-style relativistic average formulation, enabled by
    flag; with equal mean logits every term equals log 0.5.
    """
    if mode == "plain":
        lf = disc.logits(fake)
        lr_ = disc.logits(real)
        # log(1 - sigmoid(x)) = -softplus(x), log(sigmoid(x)) = -softplus(-x)
        gen_loss = (-ad.softplus(lf) - ad.softplus(-lr_)).mean()
        lf_d = disc.logits(fake.detach())
        disc_loss = (ad.softplus(lf_d) + ad.softplus(-lr_)).mean()
        return gen_loss, disc_loss
    if mode == "relativistic":
        lf = disc.logits(fake)
        lr_ = disc.logits(real)
        rel_rf = lr_ - lf.mean()
        rel_fr = lf - lr_.mean()
        # generator: real should look *less* real than fake
        gen_loss = (ad.softplus(rel_rf) + ad.softplus(-rel_fr)).mean()
        lf_d = disc.logits(fake.detach())
        d_rf = lr_ - lf_d.mean()
        d_fr = lf_d - lr_.mean()
        disc_loss = (ad.softplus(-d_rf) + ad.softplus(d_fr)).mean()
        return gen_loss, disc_loss
    raise ValueError(f"unknown adversarial mode {mode!r}")


def adversarial_value(real_p: np.ndarray, fake_p: np.ndarray) -> float:
    """Plain L_adv value from probabilities, for logging and tests."""
    return float(np.mean(np.log(1.0 - fake_p) + np.log(real_p)))
