"""Invertible layer zoo.

Each layer offers an exact encode map ``forward(h, logdet, cond)`` returning
the transformed activation plus the updated per-item log-determinant
accumulator (in nats), and an exact decode map ``inverse(h, cond)``.
Log-determinants accumulate additively across layers; permutation layers
(squeeze, orthonormal mixing) contribute exactly zero.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, ShapeError, Tensor
from .nn import CondConvNet

# bound on the raw scale logits so log s stays finite when the flow is run
# in the decode direction during adversarial training
SCALE_LOGIT_BOUND = 15.0


def effective_scale(s_tilde: Tensor) -> Tensor:
    """Reparametrized multiplier s = 1 / sigmoid(s_tilde), always > 1."""
    return 1.0 / ad.sigmoid(ad.clamp(s_tilde, -SCALE_LOGIT_BOUND, SCALE_LOGIT_BOUND))


class ActNorm:
    """Learned per-channel affine out = scale * h + bias.

    The first forward batch triggers data-dependent initialization that
    gives the layer's output zero mean and unit variance per channel on
    that batch.
    """

    def __init__(self, channels: int):
        self.channels = channels
        self.scale = Tensor(np.ones((1, channels, 1, 1)), requires_grad=True)
        self.bias = Tensor(np.zeros((1, channels, 1, 1)), requires_grad=True)
        self.initialized = False

    def initialize_from(self, h: Tensor) -> None:
        mean = h.data.mean(axis=(0, 2, 3), keepdims=True)
        std = h.data.std(axis=(0, 2, 3), keepdims=True)
        if np.any(std == 0.0):
            raise DomainError("actnorm init on a batch with a constant channel")
        self.scale.data = 1.0 / std
        self.bias.data = -mean / std
        self.initialized = True

    def _check_scale(self):
        if np.any(self.scale.data == 0.0):
            raise DomainError("actnorm scale contains zero")

    def forward(self, h: Tensor, logdet: Tensor, cond=None):
        if not self.initialized:
            self.initialize_from(h)
        self._check_scale()
        out = h * self.scale + self.bias
        hw = h.shape[2] * h.shape[3]
        ld = float(hw) * ad.log(ad.abs_(self.scale)).sum()
        return out, logdet + ld

    def inverse(self, h: Tensor, cond=None) -> Tensor:
        self._check_scale()
        return (h - self.bias) / self.scale

    def named_parameters(self, prefix: str):
        return [(prefix + "/scale", self.scale), (prefix + "/bias", self.bias)]

    def named_constants(self, prefix: str):
        return [(prefix + "/initialized", np.float64(1.0 if self.initialized else 0.0))]

    def load_constant(self, name: str, value: np.ndarray):
        if name.endswith("/initialized"):
            self.initialized = bool(float(value))


class OrthoMix:
    """Constant orthonormal per-pixel channel mixing, sampled once per run.

    |det Q| = 1, so the log-determinant contribution is identically zero.
    Never trained; the matrix is stored in checkpoints.
    """

    def __init__(self, channels: int, rng: np.random.Generator | None = None, q: np.ndarray | None = None):
        if q is None:
            if rng is None:
                raise ValueError("OrthoMix needs either a generator or an explicit matrix")
            q = haar_orthonormal(channels, rng)
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (channels, channels):
            raise ShapeError(f"mixing matrix must be {channels}x{channels}, got {q.shape}")
        err = np.abs(q.T @ q - np.eye(channels)).max()
        if err > 1e-12:
            raise ShapeError(f"mixing matrix is not orthonormal (|Q^T Q - I| = {err:.3e})")
        self.q = q

    def forward(self, h: Tensor, logdet: Tensor, cond=None):
        return ad.mix_channels(h, self.q), logdet

    def inverse(self, h: Tensor, cond=None) -> Tensor:
        return ad.mix_channels(h, self.q.T)

    def named_parameters(self, prefix: str):
        return []

    def named_constants(self, prefix: str):
        return [(prefix + "/q", self.q)]

    def load_constant(self, name: str, value: np.ndarray):
        if name.endswith("/q"):
            self.q = np.asarray(value, dtype=np.float64)


def haar_orthonormal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal matrix distributed uniformly over the orthogonal group."""
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    d = np.sign(np.diag(r))
    d[d == 0.0] = 1.0
    return q * d


class ConditionalAffineCoupling:
    """Affine coupling: the first channel half plus the conditioning features
    predict an elementwise (scale, bias) for the second half.

    The multiplier is s = 1/sigmoid(s_tilde), so s > 1 for any finite logit
    and the layer stays well-conditioned in both running directions. The
    inverse recomputes (s, t) from the untouched first half.
    """

    def __init__(self, channels: int, cond_channels: int, hidden: int, rng: np.random.Generator):
        if channels % 2:
            raise ShapeError(f"coupling needs an even channel count, got {channels}")
        self.channels = channels
        self.half = channels // 2
        self.net = CondConvNet(self.half + cond_channels, channels, hidden, rng)

    def _params(self, h1: Tensor, cond: Tensor):
        raw = self.net(ad.concat_channels([h1, cond]))
        s_tilde = ad.slice_channels(raw, 0, self.half)
        t = ad.slice_channels(raw, self.half, self.channels)
        return effective_scale(s_tilde), t

    def forward(self, h: Tensor, logdet: Tensor, cond: Tensor):
        h1 = ad.slice_channels(h, 0, self.half)
        h2 = ad.slice_channels(h, self.half, self.channels)
        s, t = self._params(h1, cond)
        out = ad.concat_channels([h1, h2 * s + t])
        return out, logdet + ad.log(s).sum(axes=(1, 2, 3))

    def inverse(self, h: Tensor, cond: Tensor) -> Tensor:
        h1 = ad.slice_channels(h, 0, self.half)
        h2 = ad.slice_channels(h, self.half, self.channels)
        s, t = self._params(h1, cond)
        return ad.concat_channels([h1, (h2 - t) / s])

    def named_parameters(self, prefix: str):
        return self.net.named_parameters(prefix + "/net")

    def named_constants(self, prefix: str):
        return []


class AffineInjector:
    """Elementwise affine transform of all channels whose (scale, bias) depend
    only on the conditioning, making the inverse exact by construction."""

    def __init__(self, channels: int, cond_channels: int, hidden: int, rng: np.random.Generator):
        self.channels = channels
        self.net = CondConvNet(cond_channels, 2 * channels, hidden, rng)

    def _params(self, cond: Tensor):
        raw = self.net(cond)
        s_tilde = ad.slice_channels(raw, 0, self.channels)
        t = ad.slice_channels(raw, self.channels, 2 * self.channels)
        return effective_scale(s_tilde), t

    def forward(self, h: Tensor, logdet: Tensor, cond: Tensor):
        s, t = self._params(cond)
        if s.shape != h.shape:
            raise ShapeError(f"injector maps {s.shape} do not match activation {h.shape}")
        return h * s + t, logdet + ad.log(s).sum(axes=(1, 2, 3))

    def inverse(self, h: Tensor, cond: Tensor) -> Tensor:
        s, t = self._params(cond)
        if s.shape != h.shape:
            raise ShapeError(f"injector maps {s.shape} do not match activation {h.shape}")
        return (h - t) / s

    def named_parameters(self, prefix: str):
        return self.net.named_parameters(prefix + "/net")

    def named_constants(self, prefix: str):
        return []


class Squeeze:
    """Fixed 2x2 space-to-depth; a permutation, so logdet is unchanged."""

    def forward(self, h: Tensor, logdet: Tensor, cond=None):
        return ad.squeeze2x2(h), logdet

    def inverse(self, h: Tensor, cond=None) -> Tensor:
        return ad.unsqueeze2x2(h)

    def named_parameters(self, prefix: str):
        return []

    def named_constants(self, prefix: str):
        return []


class Split:
    """Route the second channel half straight to the latent; the first half
    continues through the remaining layers."""

    def apply(self, h: Tensor):
        c = h.shape[1]
        if c % 2:
            raise ShapeError(f"split needs an even channel count, got {c}")
        return ad.slice_channels(h, 0, c // 2), ad.slice_channels(h, c // 2, c)

    def invert(self, kept: Tensor, emitted: Tensor) -> Tensor:
        return ad.concat_channels([kept, emitted])

    def named_parameters(self, prefix: str):
        return []

    def named_constants(self, prefix: str):
        return []


class ScaleBias:
    """One-layer flow z = (y - g) / b for given image-shaped tensors g, b > 0.

    The Jacobian is diagonal with entries 1/b, so the encode-direction
    log-determinant is -sum(log b) per item.
    """

    def __init__(self, g: Tensor, b: Tensor):
        if np.any(b.data <= 0.0):
            raise DomainError("scale must be strictly positive")
        self.g = g
        self.b = b

    def forward(self, h: Tensor, logdet: Tensor, cond=None):
        z = (h - self.g) / self.b
        return z, logdet - ad.log(self.b).sum(axes=tuple(range(1, self.b.ndim)))

    def inverse(self, h: Tensor, cond=None) -> Tensor:
        return h * self.b + self.g

    def named_parameters(self, prefix: str):
        return []

    def named_constants(self, prefix: str):
        return []
