"""Quantitative evaluation: Fréchet feature distance and mask quality.

The Fréchet score summarizes spatially pooled deep features as Gaussians and
measures how far two image sets sit from each other. With the bundled frozen
extractor it supports before/after and ablation comparisons on one machine;
the absolute numbers are not comparable to Inception-based scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import features
from . import tensor as T
from .tensor import DimensionError

COV_SHRINKAGE = 1e-6


@dataclass(frozen=True)
class FeatureGaussian:
    """Mean and shrunk covariance of pooled features, plus the sample count."""

    mean: np.ndarray
    cov: np.ndarray
    count: int


def fit_feature_gaussian(
    images: list[np.ndarray],
    extractor: features.FeatureExtractor,
    stage: str = "stage4",
) -> FeatureGaussian:
    """Fit a Gaussian to spatial-mean pooled stage features of an image set.

    Covariance uses the unbiased estimator plus COV_SHRINKAGE on the diagonal,
    so it stays positive semi-definite for tiny or degenerate sets.
    """
    if not images:
        raise ValueError("cannot fit a feature distribution to zero images")
    batch = T.Tensor(np.stack(images))
    pyr = features.extract(batch, extractor, stop_gradient=True)
    if stage not in pyr:
        raise ValueError(f"unknown stage {stage!r}; have {sorted(pyr)}")
    pooled = pyr[stage].data.astype(np.float64).mean(axis=(2, 3))
    mu = pooled.mean(axis=0)
    d = pooled.shape[1]
    if pooled.shape[0] < 2:
        cov = np.zeros((d, d))
    else:
        cov = np.cov(pooled, rowvar=False, ddof=1)
    cov = cov + COV_SHRINKAGE * np.eye(d)
    cov = (cov + cov.T) / 2.0
    return FeatureGaussian(mu, cov, pooled.shape[0])


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(matrix)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: FeatureGaussian, b: FeatureGaussian) -> float:
    """||mu_a - mu_b||^2 + Tr(C_a + C_b - 2 (C_a^1/2 C_b C_a^1/2)^1/2).

    The cross term goes through a symmetric eigendecomposition; small negative
    eigenvalues from rounding are clamped to zero, so the result is >= 0.
    """
    if a.mean.shape != b.mean.shape:
        raise DimensionError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    ca = (a.cov + a.cov.T) / 2.0
    cb = (b.cov + b.cov.T) / 2.0
    root = _psd_sqrt(ca)
    inner = root @ cb @ root
    inner = (inner + inner.T) / 2.0
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0.0, None)).sum()
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * cross)
    return max(value, 0.0)


def nearest_downsample(truth: np.ndarray, height: int, width: int) -> np.ndarray:
    """Pick the sample whose center falls on each coarse cell (nearest rule)."""
    th, tw = truth.shape
    if th == height and tw == width:
        return truth
    if th < height or tw < width:
        raise DimensionError(f"truth {truth.shape} is smaller than target {(height, width)}")
    rows = np.minimum((np.arange(height) + 0.5) * th / height, th - 1).astype(np.int64)
    cols = np.minimum((np.arange(width) + 0.5) * tw / width, tw - 1).astype(np.int64)
    return truth[np.ix_(rows, cols)]


def mask_metrics(mask: np.ndarray, truth: np.ndarray, threshold: float = 0.5) -> tuple[float, float]:
    """(iou, separation) of a soft background mask against ground truth.

    iou compares the binarized foreground (1 - mask > threshold) with the true
    sprite pixels; an all-empty union counts as a perfect match. separation is
    mean(mask on true background) - mean(mask on true foreground): positive
    means the mask actually tells the two regions apart. Either region being
    empty pins separation to 0.
    """
    if mask.ndim != 2:
        raise DimensionError(f"expected an (H, W) mask, got {mask.shape}")
    truth_ds = nearest_downsample(truth, *mask.shape) > 0.5
    fg_pred = (1.0 - mask) > threshold
    inter = np.logical_and(fg_pred, truth_ds).sum()
    union = np.logical_or(fg_pred, truth_ds).sum()
    iou = float(inter / union) if union else 1.0
    if truth_ds.all() or not truth_ds.any():
        separation = 0.0
    else:
        separation = float(mask[~truth_ds].mean() - mask[truth_ds].mean())
    return iou, separation
