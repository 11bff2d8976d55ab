"""Image-quality metrics: SSIM, MS-SSIM and the Frechet distance between feature Gaussians.

All metrics work on numpy arrays in float64 and are not differentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, FormatError, NumericalError, ShapeError
from .serialization import read_tensor_file
from .tensor import Tensor, philox

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MIN_WINDOW = 3


def _np(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    def window_side(self, h: int, w: int) -> int:
        """Configured side, shrunk to the largest odd value that fits the image."""
        side = min(self.window, h, w)
        if side % 2 == 0:
            side -= 1
        if side < MIN_WINDOW:
            raise ArgumentError(f"image {h}x{w} is smaller than the minimum {MIN_WINDOW}x{MIN_WINDOW} window")
        return side


def gaussian_window(side: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(side, dtype=np.float64) - (side - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _blur(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' filtering over the last two axes
    out = sliding_window_view(img, len(g), axis=-1) @ g
    return sliding_window_view(out, len(g), axis=-2) @ g


def _ssim_maps(a: np.ndarray, b: np.ndarray, g: np.ndarray, cfg: SsimConfig):
    mu_a, mu_b = _blur(a, g), _blur(b, g)
    var_a = _blur(a * a, g) - mu_a ** 2
    var_b = _blur(b * b, g) - mu_b ** 2
    cov = _blur(a * b, g) - mu_a * mu_b
    c1, c2 = cfg.c1, cfg.c2
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    luminance = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    return luminance * cs, cs


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3):
        raise ShapeError(f"expected (C, h, w) images, got {a.shape}")


def ssim(a, b, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean SSIM over every window position and channel of one image pair."""
    a, b = _np(a), _np(b)
    _check_pair(a, b)
    side = cfg.window_side(*a.shape[-2:])
    smap, _ = _ssim_maps(a, b, gaussian_window(side, cfg.sigma), cfg)
    return float(smap.mean())


def ms_ssim_scales(h: int, w: int, cfg: SsimConfig = SsimConfig()) -> int:
    """Most dyadic scales (up to 5) whose smallest level still fits the window."""
    side = cfg.window_side(h, w)
    m = 1
    while m < len(MS_SSIM_WEIGHTS) and min(h, w) // 2 ** m >= side:
        m += 1
    return m


def ms_ssim_weights(scales: int) -> np.ndarray:
    w = np.array(MS_SSIM_WEIGHTS[:scales], dtype=np.float64)
    return w / w.sum()


def _pool2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2] // 2, x.shape[-1] // 2
    x = x[..., :2 * h, :2 * w]
    return x.reshape(x.shape[:-2] + (h, 2, w, 2)).mean(axis=(-3, -1))


def ms_ssim(a, b, cfg: SsimConfig = SsimConfig(), scales: Optional[int] = None) -> float:
    """Multi-scale SSIM with renormalized weights and 2x2 average-pool downsampling.

    Contrast-structure terms of the coarser scales and the final SSIM are
    clipped at zero before exponentiation. A single scale returns plain SSIM.
    """
    a, b = _np(a), _np(b)
    _check_pair(a, b)
    h, w = a.shape[-2:]
    side = cfg.window_side(h, w)
    if scales is None:
        scales = ms_ssim_scales(h, w, cfg)
    elif not 1 <= scales <= len(MS_SSIM_WEIGHTS) or min(h, w) // 2 ** (scales - 1) < side:
        raise ArgumentError(f"{scales} scales do not fit a {h}x{w} image with window {side}")
    if scales == 1:
        return ssim(a, b, cfg)
    g = gaussian_window(side, cfg.sigma)
    weights = ms_ssim_weights(scales)
    terms = []
    for level in range(scales):
        smap, cs = _ssim_maps(a, b, g, cfg)
        if level == scales - 1:
            terms.append(smap.mean())
        else:
            terms.append(cs.mean())
            a, b = _pool2(a), _pool2(b)
    terms = np.maximum(np.array(terms), 0.0)
    return float(np.prod(terms ** weights))


def _fsum_mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def mean_ssim(a_set, b_set, cfg: SsimConfig = SsimConfig()) -> float:
    return _fsum_mean(ssim(a, b, cfg) for a, b in zip(_np(a_set), _np(b_set)))


def mean_ms_ssim(a_set, b_set, cfg: SsimConfig = SsimConfig()) -> float:
    return _fsum_mean(ms_ssim(a, b, cfg) for a, b in zip(_np(a_set), _np(b_set)))


# ---------------------------------------------------------------- Frechet distance


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def gaussian_stats(features) -> GaussianStats:
    """Sample mean and unbiased (N - 1) covariance, symmetrized."""
    x = _np(features)
    if x.ndim != 2:
        raise ShapeError(f"features must be (N, d), got {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise ArgumentError("need at least 2 feature vectors")
    mu = x.mean(axis=0)
    centered = x - mu
    cov = centered.T @ centered / (n - 1)
    return GaussianStats(mu, (cov + cov.T) / 2, n)


def _clipped_eigh(m: np.ndarray, what: str):
    vals, vecs = np.linalg.eigh(m)
    tol = 1e-7 * max(1.0, float(vals.max(initial=0.0)))
    if vals.size and vals.min() < -tol:
        raise NumericalError(f"{what} is not positive semidefinite (eigenvalue {vals.min():.3g})")
    return np.clip(vals, 0.0, None), vecs


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = _clipped_eigh(m, "covariance")
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(s1: GaussianStats, s2: GaussianStats) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)."""
    if s1.dim != s2.dim:
        raise ShapeError(f"feature dimensions differ: {s1.dim} vs {s2.dim}")
    root1 = psd_sqrt(s1.cov)
    psd_sqrt(s2.cov)  # validates the second covariance
    inner = root1 @ s2.cov @ root1
    vals, _ = _clipped_eigh((inner + inner.T) / 2, "covariance product")
    diff = s1.mean - s2.mean
    d = float(diff @ diff + np.trace(s1.cov) + np.trace(s2.cov) - 2 * np.sqrt(vals).sum())
    if d < -1e-6:
        raise NumericalError(f"negative Frechet distance {d:.3g}")
    return max(d, 0.0)


# ---------------------------------------------------------------- embedders

RAW_POOL, RAND_PROJ, EXTERNAL = "raw_pool", "rand_proj", "external"
POOL_SIDE = 8
PROJ_DIM = 256


@dataclass(frozen=True)
class Embedder:
    """Feature extractor for the Frechet distance.

    ``raw_pool`` average-pools to 8x8 and flattens (d = 192); ``rand_proj`` applies a
    seeded Gaussian projection of the centred pixels followed by tanh (d = 256);
    ``external`` reads precomputed features from a raw tensor file.
    """

    kind: str = RAW_POOL
    seed: int = 0
    path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in (RAW_POOL, RAND_PROJ, EXTERNAL):
            raise ArgumentError(f"unknown embedder kind {self.kind!r}")
        if self.kind == EXTERNAL and not self.path:
            raise ArgumentError("external embedder needs a feature file path")

    @classmethod
    def parse(cls, spec: str) -> "Embedder":
        """``raw_pool``, ``rand_proj:SEED`` or ``external:PATH``."""
        kind, _, arg = spec.partition(":")
        if kind == RAW_POOL and not arg:
            return cls(RAW_POOL)
        if kind == RAND_PROJ:
            try:
                return cls(RAND_PROJ, seed=int(arg or 0))
            except ValueError as exc:
                raise ArgumentError(f"bad rand_proj seed in {spec!r}") from exc
        if kind == EXTERNAL:
            return cls(EXTERNAL, path=arg)
        raise ArgumentError(f"unknown embedder spec {spec!r}")

    def __str__(self):
        if self.kind == RAND_PROJ:
            return f"{RAND_PROJ}:{self.seed}"
        if self.kind == EXTERNAL:
            return f"{EXTERNAL}:{self.path}"
        return RAW_POOL


def embed(images, e: Embedder = Embedder()) -> np.ndarray:
    x = _np(images)
    if x.ndim != 4:
        raise ShapeError(f"expected (N, C, h, w) images, got {x.shape}")
    n, c, h, w = x.shape
    if e.kind == RAW_POOL:
        if h % POOL_SIDE or w % POOL_SIDE:
            raise ShapeError(f"raw_pool needs extents divisible by {POOL_SIDE}, got {h}x{w}")
        fh, fw = h // POOL_SIDE, w // POOL_SIDE
        pooled = x.reshape(n, c, POOL_SIDE, fh, POOL_SIDE, fw).mean(axis=(3, 5))
        return pooled.reshape(n, -1)
    if e.kind == RAND_PROJ:
        flat = x.reshape(n, -1) - 0.5
        proj = philox(e.seed).standard_normal((flat.shape[1], PROJ_DIM)) / math.sqrt(flat.shape[1])
        return np.tanh(flat @ proj)
    _, feats = read_tensor_file(e.path)
    if feats.ndim != 2 or feats.shape[0] != n:
        raise FormatError(f"{e.path}: features {feats.shape} do not match {n} images")
    return feats.astype(np.float64)


def fid_from_features(f1, f2) -> float:
    return frechet_distance(gaussian_stats(f1), gaussian_stats(f2))


@dataclass
class MetricReport:
    mse: float
    ssim: float
    ms_ssim: float
    frechet: float


def reconstruction_report(originals, reconstructions, embedder: Embedder = Embedder(),
                          recon_embedder: Optional[Embedder] = None,
                          cfg: SsimConfig = SsimConfig()) -> MetricReport:
    """Mean MSE/SSIM/MS-SSIM over pairs and the Frechet distance between the two sets.

    ``recon_embedder`` defaults to ``embedder``; external features need one file per set.
    """
    a, b = _np(originals), _np(reconstructions)
    if a.shape != b.shape:
        raise ShapeError(f"image sets differ: {a.shape} vs {b.shape}")
    mse = _fsum_mean(np.mean((a - b) ** 2, axis=(1, 2, 3)))
    fa = embed(a, embedder)
    fb = embed(b, recon_embedder or embedder)
    if fa.shape[1] != fb.shape[1]:
        raise ShapeError(f"embedders disagree on feature size: {fa.shape[1]} vs {fb.shape[1]}")
    return MetricReport(mse, mean_ssim(a, b, cfg), mean_ms_ssim(a, b, cfg), fid_from_features(fa, fb))
