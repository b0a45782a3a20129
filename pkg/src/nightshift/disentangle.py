"""Background/foreground feature disentanglement via element-wise similarity.

A generated image's feature pyramid is compared against a reference-background
pyramid one spatial location at a time: the Pearson correlation between the
two channel vectors scores how background-like that location is. A sigmoid
turns scores into soft masks, the masks split each feature map into a
background part and a foreground remainder, and the least background-like
locations supply hard negatives for the contrastive loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T

# Stabilizer added to the Pearson denominator.
SIM_EPSILON = 1e-8


@dataclass(frozen=True)
class MaskParams:
    """Sigmoid mapping from similarity scores to soft background masks.

    gamma sets how decisive the transition is, midpoint is the score mapped
    to 0.5, threshold binarizes for visualization and IoU only; losses always
    consume the soft mask.
    """

    gamma: float = 10.0
    midpoint: float = 0.5
    threshold: float = 0.5


def elesim(feat: T.Tensor, ref: T.Tensor) -> T.Tensor:
    """Per-location Pearson correlation across channels, (B,C,H,W) -> (B,1,H,W).

    Each channel vector is centered by its own mean. Gradients flow into feat
    only; ref acts as a fixed anchor. Internals run in float64 so the scores
    hold up under the 1e-6 oracle comparisons regardless of the active dtype.
    """
    if feat.shape != ref.shape:
        raise T.DimensionError(f"shape mismatch: {feat.shape} vs {ref.shape}")
    if feat.shape[1] < 2:
        raise T.DimensionError("correlation across channels needs at least 2 channels")
    a = feat.data.astype(np.float64)
    b = ref.data.astype(np.float64)
    ca = a - a.mean(axis=1, keepdims=True)
    cb = b - b.mean(axis=1, keepdims=True)
    num = (ca * cb).sum(axis=1, keepdims=True)
    va = (ca * ca).sum(axis=1, keepdims=True)
    vb = (cb * cb).sum(axis=1, keepdims=True)
    root = np.sqrt(va * vb)
    den = root + SIM_EPSILON
    scores = (num / den).astype(feat.dtype)

    def back(g):
        gq = g.astype(np.float64) / den
        # d num/d a_k = cb_k and d va/d a_k = 2 ca_k: the centering terms drop
        # because cb and ca are themselves zero-mean along channels.
        safe_root = np.maximum(root, np.finfo(np.float64).tiny)
        grad = gq * cb - (gq * num / den) * (vb / safe_root) * ca
        return (grad.astype(g.dtype),)

    return T.from_op(scores, (feat,), back)


def to_mask(scores: T.Tensor, params: MaskParams = MaskParams()) -> T.Tensor:
    """Soft background mask sigmoid(gamma * (scores - midpoint)), in (0, 1)."""
    if params.gamma <= 0:
        raise ValueError(f"gamma must be positive, got {params.gamma}")
    shift = T.Tensor(np.full((1, 1, 1, 1), params.midpoint))
    return T.sigmoid(T.scale(T.sub(scores, shift), params.gamma))


def binarize(mask: T.Tensor, threshold: float = 0.5) -> np.ndarray:
    """Hard mask for visualization and IoU: 1 exactly where mask > threshold."""
    return (mask.data > threshold).astype(mask.dtype)


def split_features(feat: T.Tensor, mask: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
    """Split into (background, foreground) so the two parts re-add to feat.

    back is mask * feat and fore its remainder. The background is recomputed
    as feat - fore, which costs at most one ulp against the raw product but
    makes the partition exact in float arithmetic. Gradients reach feat
    through both branches and the mask through the product.
    """
    b, c, h, w = feat.shape
    if mask.shape != (b, 1, h, w):
        raise T.DimensionError(f"mask {mask.shape} does not broadcast over features {feat.shape}")
    fore = T.sub(feat, T.mul(mask, feat))
    back = T.sub(feat, fore)
    return back, fore


def hard_negatives(scores: T.Tensor, count: int) -> np.ndarray:
    """Flat row-major indices of the `count` most background-like locations.

    The contrastive loss wants negatives whose background split genuinely
    carries background content, so selection takes the locations with scores
    nearest 1. Ranking uses the raw scores; the sigmoid is monotone, so the
    ordering matches the mask's but is immune to its saturation ties. Ties
    break toward lower row-major index, and each batch row of the (B, count)
    result comes back sorted row-major. Deterministic.
    """
    b, c, h, w = scores.shape
    if c != 1:
        raise T.DimensionError(f"expected a single-channel score map, got {scores.shape}")
    if count <= 0:
        raise ValueError(f"need a positive selection count, got {count}")
    if count > h * w:
        raise ValueError(f"cannot select {count} of {h * w} locations")
    flat = scores.data.reshape(b, h * w)
    order = np.argsort(-flat, axis=1, kind="stable")[:, :count]
    return np.sort(order, axis=1)


def default_negative_count(height: int, width: int) -> int:
    """A quarter of the locations, capped at 64; never collapses to a tiny set."""
    return min(64, math.ceil(0.25 * height * width))
