"""Image ingestion, bicubic degradation, and synthetic dataset generation.

The downsampler follows the MATLAB imresize convention: Keys cubic kernel
with a = -0.5, kernel support widened by the scale factor (antialiasing),
weights renormalized to sum to one per output pixel, edge replication at the
borders, and sample-center alignment (source coordinate (i + 0.5)*scale - 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image


class DataError(Exception):
    pass


def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys interpolating cubic: value 1 at 0, zero at other integer offsets."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = np.zeros_like(x)
    m1 = x <= 1.0
    out[m1] = (a + 2.0) * x[m1] ** 3 - (a + 3.0) * x[m1] ** 2 + 1.0
    m2 = (x > 1.0) & (x < 2.0)
    out[m2] = a * x[m2] ** 3 - 5.0 * a * x[m2] ** 2 + 8.0 * a * x[m2] - 4.0 * a
    return out


def downsample_weights(n_in: int, scale: int) -> np.ndarray:
    """Dense (n_in/scale, n_in) one-axis downsampling matrix.

    Antialiased: the kernel is stretched by the scale factor and every row is
    renormalized, so each row sums to 1 within float precision. Out-of-range
    taps are clamped to the edge (replication).
    """
    if n_in % scale:
        raise DataError(f"extent {n_in} not divisible by scale {scale}")
    n_out = n_in // scale
    s = float(scale)
    support = 2.0 * s
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        u = (i + 0.5) * s - 0.5
        lo = int(np.floor(u - support)) + 1
        hi = int(np.floor(u + support))
        taps = np.arange(lo, hi + 1)
        vals = cubic_kernel((u - taps) / s) / s
        cols = np.clip(taps, 0, n_in - 1)
        np.add.at(w[i], cols, vals)
        w[i] /= w[i].sum()
    return w


def bicubic_downsample(img: np.ndarray, scale: int) -> np.ndarray:
    """Separable antialiased bicubic downsampling of (..., H, W) arrays."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2], img.shape[-1]
    wr = downsample_weights(h, scale)
    wc = downsample_weights(w, scale)
    return np.einsum("oh,...hw,pw->...op", wr, img, wc)


@dataclass
class ImagePair:
    """HR/LR pair; the LR is always constructed by the named kernel."""

    hr: np.ndarray  # (C, H, W) in [0, 1]
    lr: np.ndarray  # (C, H/scale, W/scale)
    scale: int
    kernel: str = "bicubic"


@dataclass
class Dataset:
    pairs: list
    seed: int

    def __len__(self):
        return len(self.pairs)

    def patch_batch(self, rng: np.random.Generator, batch: int, patch: int):
        """Deterministic scale-aligned HR/LR patch batch, keyed by the rng."""
        hrs, lrs = [], []
        for _ in range(batch):
            pair = self.pairs[int(rng.integers(0, len(self.pairs)))]
            c, h, w = pair.hr.shape
            s = pair.scale
            max_oy = (h - patch) // s
            max_ox = (w - patch) // s
            oy = int(rng.integers(0, max_oy + 1)) * s
            ox = int(rng.integers(0, max_ox + 1)) * s
            hrs.append(pair.hr[:, oy : oy + patch, ox : ox + patch])
            lrs.append(pair.lr[:, oy // s : (oy + patch) // s, ox // s : (ox + patch) // s])
        return np.stack(hrs), np.stack(lrs)


def _synthetic_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """Procedural HR image: smooth gradient + band-limited texture + hard edges."""
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    img = np.zeros((3, size, size))
    for c in range(3):
        g = rng.uniform(-1, 1) * xx + rng.uniform(-1, 1) * yy + rng.uniform(0.2, 0.8)
        tex = np.zeros_like(xx)
        for _ in range(4):
            fx, fy = rng.uniform(2, 12, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            tex += rng.uniform(0.02, 0.12) * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        img[c] = g + tex
    # a few shared hard edges (half-planes and a rectangle)
    for _ in range(2):
        nx, ny = rng.normal(size=2)
        off = rng.uniform(0.2, 0.8)
        mask = (nx * xx + ny * yy) > off * (nx + ny)
        img += rng.uniform(-0.25, 0.25) * mask
    x0, y0 = rng.integers(0, size // 2, size=2)
    dx, dy = rng.integers(size // 8, size // 2, size=2)
    img[:, y0 : y0 + dy, x0 : x0 + dx] += rng.uniform(-0.2, 0.2)
    return np.clip(img, 0.0, 1.0)


def make_synthetic_dataset(n: int, size: int, seed: int, scale: int = 4) -> Dataset:
    """Deterministic stand-in training corpus; every pair satisfies
    lr = bicubic_downsample(hr, scale) by construction."""
    rng = np.random.Generator(np.random.PCG64(seed))
    pairs = []
    for _ in range(n):
        hr = _synthetic_image(size, rng)
        pairs.append(ImagePair(hr=hr, lr=bicubic_downsample(hr, scale), scale=scale))
    return Dataset(pairs=pairs, seed=seed)


def load_png(path) -> np.ndarray:
    """8-bit RGB PNG to a (3, H, W) array in [0, 1]; grayscale is promoted,
    alpha is rejected."""
    img = Image.open(path)
    if img.mode in ("RGBA", "LA", "PA"):
        raise DataError(f"{path}: alpha channel not supported")
    if img.mode == "L":
        img = img.convert("RGB")
    if img.mode != "RGB":
        raise DataError(f"{path}: unsupported mode {img.mode}")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_png(path, arr: np.ndarray, config_text: str | None = None) -> None:
    """Clip to [0, 1], quantize with round-half-to-even, write 8-bit RGB."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataError(f"expected (3, H, W), got {arr.shape}")
    q = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    img = Image.fromarray(q.transpose(1, 2, 0), mode="RGB")
    pnginfo = None
    if config_text is not None:
        from PIL import PngImagePlugin

        pnginfo = PngImagePlugin.PngInfo()
        pnginfo.add_text("flowfid_config", config_text)
    img.save(path, format="PNG", pnginfo=pnginfo)
