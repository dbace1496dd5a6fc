"""Generation-quality metrics: Fréchet distance over feature statistics,
multi-scale SSIM, and a perceptual distance over a pluggable embedder.

Scores are only comparable within one embedder; the desk-scale default
embedder is the toy denoiser's frozen encoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import ndimage

# canonical multi-scale weights and window from the MS-SSIM literature
MS_SSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

EIGEN_CLAMP_TOL = 1e-8


@dataclass
class FeatureStats:
    mean: np.ndarray       # (d,)
    covariance: np.ndarray  # (d, d), unbiased
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d):
            raise ValueError(f"covariance shape {self.covariance.shape} != ({d}, {d})")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-10):
            raise ValueError("covariance must be symmetric")
        if self.count < 2:
            raise ValueError("need at least two samples")


def feature_stats(features: np.ndarray) -> FeatureStats:
    """Sample mean and unbiased covariance of a (n, d) feature set."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError(f"need a (n>=2, d) feature array, got shape {f.shape}")
    mu = f.mean(axis=0)
    centered = f - mu
    cov = centered.T @ centered / (f.shape[0] - 1)
    cov = (cov + cov.T) / 2.0
    return FeatureStats(mu, cov, f.shape[0])


def _psd_sqrt(matrix: np.ndarray, context: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh((matrix + matrix.T) / 2.0)
    if vals.min() < -EIGEN_CLAMP_TOL:
        raise ValueError(
            f"{context}: eigenvalue {vals.min():.3e} below clamp tolerance -{EIGEN_CLAMP_TOL:.0e}; "
            "covariances are not PSD"
        )
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The matrix square root is taken through eigendecompositions of symmetric
    PSD matrices (sqrt(S_a) S_b sqrt(S_a) shares its spectrum with S_a S_b);
    eigenvalues below -1e-8 reject, small negatives clamp to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    sqrt_a = _psd_sqrt(a.covariance, "sqrt of first covariance")
    inner = sqrt_a @ b.covariance @ sqrt_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if vals.min() < -EIGEN_CLAMP_TOL:
        raise ValueError(
            f"covariance product: eigenvalue {vals.min():.3e} below clamp tolerance -{EIGEN_CLAMP_TOL:.0e}"
        )
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    return float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * tr_sqrt)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    # separable gaussian, valid region only
    out = ndimage.correlate1d(img, window, axis=0, mode="constant")
    out = ndimage.correlate1d(out, window, axis=1, mode="constant")
    r = len(window) // 2
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def _ssim_and_cs(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> tuple[float, float]:
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    win = _gaussian_window()
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a ** 2
    var_b = _filter_valid(b * b, win) - mu_b ** 2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    cs_map = (2.0 * cov + c2) / (var_a + var_b + c2)
    ssim_map = ((2.0 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)) * cs_map
    return float(ssim_map.mean()), float(cs_map.mean())


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:h, :w]
    return (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2]) / 4.0


def max_feasible_levels(height: int, width: int, window: int = SSIM_WINDOW) -> int:
    levels = 0
    side = min(height, width)
    while side >= window:
        levels += 1
        side //= 2
    return levels


def ms_ssim(img_a: np.ndarray, img_b: np.ndarray, levels: int = 5, data_range: float = 1.0) -> float:
    """Multi-scale SSIM in [0, 1] with the canonical per-level weights.

    Accepts (H, W) or (H, W, C) arrays; channels are averaged per level.
    Negative contrast-structure terms clamp to zero so the value stays in
    [0, 1]. levels=1 reduces to single-scale SSIM.
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if not 1 <= levels <= len(MS_SSIM_WEIGHTS):
        raise ValueError(f"levels must be in [1, {len(MS_SSIM_WEIGHTS)}]")
    feasible = max_feasible_levels(a.shape[0], a.shape[1])
    if levels > feasible:
        raise ValueError(
            f"image {a.shape[1]}x{a.shape[0]} supports at most {feasible} levels "
            f"with a {SSIM_WINDOW}-tap window, requested {levels}"
        )
    weights = MS_SSIM_WEIGHTS[:levels] / MS_SSIM_WEIGHTS[:levels].sum()
    value = 1.0
    for level in range(levels):
        ssim_vals, cs_vals = [], []
        for c in range(a.shape[2]):
            s, cs = _ssim_and_cs(a[:, :, c], b[:, :, c], data_range)
            ssim_vals.append(s)
            cs_vals.append(cs)
        term = np.mean(ssim_vals) if level == levels - 1 else np.mean(cs_vals)
        value *= max(term, 0.0) ** weights[level]
        if level < levels - 1:
            a = np.stack([_downsample2(a[:, :, c]) for c in range(a.shape[2])], axis=2)
            b = np.stack([_downsample2(b[:, :, c]) for c in range(b.shape[2])], axis=2)
    return float(value)


# --- perceptual distance ------------------------------------------------------

class FeatureEmbedder:
    """Interface: features() for perceptual distance, vector() for Fréchet."""

    identifier = "abstract"

    def features(self, image: np.ndarray) -> list[np.ndarray]:
        raise NotImplementedError

    def vector(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def perceptual_distance(img_a: np.ndarray, img_b: np.ndarray, embedder: FeatureEmbedder) -> float:
    """Mean squared distance between unit-normalized per-layer features."""
    if np.asarray(img_a).shape != np.asarray(img_b).shape:
        raise ValueError("images must share a shape")
    feats_a = embedder.features(img_a)
    feats_b = embedder.features(img_b)
    dists = []
    for fa, fb in zip(feats_a, feats_b):
        na = fa / (np.linalg.norm(fa, axis=0, keepdims=True) + 1e-10)
        nb = fb / (np.linalg.norm(fb, axis=0, keepdims=True) + 1e-10)
        dists.append(((na - nb) ** 2).sum(axis=0).mean())
    return float(np.mean(dists))


class DenoiserFeatureEmbedder(FeatureEmbedder):
    """Reference embedder: frozen toy-denoiser encoder features of the image latent."""

    identifier = "toy-denoiser-encoder"

    def __init__(self, denoiser, codec, tau: int = 10):
        self.denoiser = denoiser
        self.codec = codec
        self.tau = tau

    @torch.no_grad()
    def features(self, image: np.ndarray) -> list[np.ndarray]:
        z = torch.from_numpy(self.codec.encode(image))[None]
        feats = self.denoiser.encoder_features(z, self.tau)
        return [f[0].numpy().astype(np.float64) for f in feats]

    def vector(self, image: np.ndarray) -> np.ndarray:
        return np.concatenate([f.mean(axis=(1, 2)) for f in self.features(image)])


# --- evaluation protocol --------------------------------------------------------

@dataclass
class MetricReport:
    frechet: float
    perceptual: float
    ms_ssim: float
    embedder_id: str
    num_pairs: int
    num_generated: int

    def format_table(self) -> str:
        header = f"{'FID (down)':>12}  {'perceptual (down)':>18}  {'MS-SSIM (up)':>13}  embedder"
        row = (
            f"{self.frechet:>12.4f}  {self.perceptual:>18.6f}  {self.ms_ssim:>13.4f}  "
            f"{self.embedder_id}"
        )
        return header + "\n" + row + "\n"


def table3_protocol(
    generator: Callable[[object, int], np.ndarray],
    labels: Sequence,
    real_images: Sequence[np.ndarray],
    images_per_label: int = 10,
    *,
    embedder: FeatureEmbedder,
    real_set: Sequence[np.ndarray] | None = None,
    ms_ssim_levels: int = 3,
) -> MetricReport:
    """Paired-average MS-SSIM and perceptual distance plus pooled-set Fréchet.

    generator(label, index) must return an image; each generated image pairs
    with its label's real image. The Fréchet score compares the pooled
    generated set against real_set (defaults to the paired real images).
    """
    if len(labels) == 0:
        raise ValueError("need at least one label")
    if len(real_images) != len(labels):
        raise ValueError(f"need one paired real image per label ({len(labels)} labels, {len(real_images)} images)")
    real_set = real_images if real_set is None else real_set
    gen_vectors, pair_ms, pair_lpips = [], [], []
    for label, real in zip(labels, real_images):
        for i in range(images_per_label):
            img = generator(label, i)
            gen_vectors.append(embedder.vector(img))
            pair_ms.append(ms_ssim(img, real, levels=ms_ssim_levels))
            pair_lpips.append(perceptual_distance(img, real, embedder))
    real_vectors = [embedder.vector(img) for img in real_set]
    fid = frechet_distance(feature_stats(np.stack(gen_vectors)), feature_stats(np.stack(real_vectors)))
    return MetricReport(
        frechet=fid,
        perceptual=float(np.mean(pair_lpips)),
        ms_ssim=float(np.mean(pair_ms)),
        embedder_id=embedder.identifier,
        num_pairs=len(pair_ms),
        num_generated=len(gen_vectors),
    )
