"""Seeded synthetic Bayer corpora and a loader for directories of raw containers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rawio import BayerImage, Pattern, read_raw_container


@dataclass(frozen=True)
class CorpusSpec:
    kind: str  # constant | uniform | smooth | correlated | mixed
    n_images: int = 32
    size: int = 128  # mosaic height and width
    bit_depth: int = 8
    container_bit_depth: int = 16
    noise_gain: float = 0.02  # shot-noise variance per unit of signal, in samples at 8 bits
    correlation_noise: float = 0.01  # g1 = r + N(0, this) in normalized units
    seed: int = 0
    block: int = 16  # side, in plane samples, of the constant blocks of the "constant" kind


def _smooth_field(rng, h, w) -> np.ndarray:
    """Random low-order 2-D polynomial on [0, 1]^2, rescaled into [0.05, 0.95]."""
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    c = rng.normal(size=6)
    f = c[0] + c[1] * xx + c[2] * yy + c[3] * xx * yy + c[4] * xx**2 + c[5] * yy**2
    f = (f - f.min()) / max(f.max() - f.min(), 1e-12)
    lo = rng.uniform(0.05, 0.3)
    hi = rng.uniform(0.7, 0.95)
    return lo + (hi - lo) * f


def shot_noise_sigma(signal: np.ndarray, depth: int, gain: float) -> np.ndarray:
    """Std of the additive noise in samples; the gain is defined at 8 bits and scales with the depth."""
    scale = 2.0 ** (depth - 8)
    return np.sqrt(gain * np.maximum(signal, 0.0) * scale)


def smooth_image(rng, size: int, depth: int, gain: float) -> np.ndarray:
    top = (1 << depth) - 1
    planes = []
    base = _smooth_field(rng, size // 2, size // 2)
    for _ in range(4):
        tint = rng.uniform(0.8, 1.0)
        s = base * tint * top
        noisy = s + rng.normal(size=s.shape) * shot_noise_sigma(s, depth, gain)
        planes.append(np.clip(np.rint(noisy), 0, top))
    return _mosaic(np.stack(planes))


def constant_blocks(rng, size: int, block: int, top: int) -> np.ndarray:
    """Mosaic tiled by blocks that hold one value on all four channels."""
    h = size // 2
    n = -(-h // block)
    values = rng.integers(0, top + 1, (n, n))
    plane = np.kron(values, np.ones((block, block), dtype=np.int64))[:h, :h]
    return _mosaic(np.stack([plane] * 4))


def _mosaic(planes: np.ndarray) -> np.ndarray:
    """RGGB planes -> RGGB mosaic."""
    _, h, w = planes.shape
    out = np.empty((2 * h, 2 * w), dtype=np.uint16)
    out[0::2, 0::2] = planes[0]
    out[0::2, 1::2] = planes[1]
    out[1::2, 0::2] = planes[2]
    out[1::2, 1::2] = planes[3]
    return out


def make_synthetic_corpus(spec: CorpusSpec) -> list[BayerImage]:
    rng = np.random.default_rng(spec.seed)
    b = spec.bit_depth
    top = (1 << b) - 1
    out = []
    for i in range(spec.n_images):
        depth = b
        if spec.kind == "constant":
            s = constant_blocks(rng, spec.size, spec.block, top)
        elif spec.kind == "uniform":
            s = rng.integers(0, top + 1, (spec.size, spec.size)).astype(np.uint16)
        elif spec.kind == "smooth":
            s = smooth_image(rng, spec.size, b, spec.noise_gain)
        elif spec.kind == "correlated":
            h = spec.size // 2
            r = rng.uniform(0, 1, (h, h))
            g1 = np.clip(r + rng.normal(0, spec.correlation_noise, r.shape), 0, 1)
            g2 = rng.uniform(0, 1, (h, h))
            bl = rng.uniform(0, 1, (h, h))
            s = _mosaic(np.rint(np.stack([r, g1, g2, bl]) * top))
        elif spec.kind == "mixed":
            # alternate 8-bit and 14-bit statistics at equal normalized noise
            depth = 8 if i % 2 == 0 else 14
            s = smooth_image(rng, spec.size, depth, spec.noise_gain)
        else:
            raise ValueError(f"unknown corpus kind {spec.kind!r}")
        cd = max(spec.container_bit_depth, depth)
        out.append(BayerImage(s.astype(np.uint16), Pattern.RGGB, cd))
    return out


def smooth_entropy_estimate(spec: CorpusSpec, n_samples: int = 4096) -> float:
    """Per-sample differential entropy (bits) of the generator's noise, a lower bound on its bpp."""
    rng = np.random.default_rng(spec.seed + 7919)
    s = rng.uniform(0.05, 0.95, n_samples) * ((1 << spec.bit_depth) - 1)
    sigma = np.maximum(shot_noise_sigma(s, spec.bit_depth, spec.noise_gain), 1e-3)
    # a unit-bin Gaussian has entropy ~ 0.5 log2(2 pi e sigma^2) when sigma >~ 1
    h = 0.5 * np.log2(2 * math.pi * math.e * sigma**2)
    return float(np.maximum(h, 0.0).mean())


def load_corpus_dir(path) -> list[BayerImage]:
    """Every ``*.rwb`` raw container in a directory, sorted by name."""
    files = sorted(Path(path).glob("*.rwb"))
    if not files:
        raise FileNotFoundError(f"no .rwb raw containers in {path}")
    return [read_raw_container(f) for f in files]
