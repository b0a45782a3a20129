"""Training objectives: masked background L1, foreground InfoNCE, LSGAN terms.

All losses are means over elements rather than sums, so their magnitudes do
not depend on image resolution. Contrastive logits are log-sum-exp shifted by
detached maxima, which keeps the term finite for any temperature.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import disentangle
from . import tensor as T
from .features import DEFAULT_LOSS_STAGES

TEMPERATURE = 0.07

CSV_HEADER = "iter,l_back,l_fore,l_adv_g,l_adv_d,total_g,total_d"


class TrainingAbort(RuntimeError):
    """A loss term went non-finite; carries the offending term's name."""


@dataclass(frozen=True)
class LossWeights:
    adversarial: float = 1.0
    background: float = 1.0
    foreground: float = 1.0


@dataclass
class LossReport:
    """Scalar snapshot of one training step's objectives."""

    l_back: float
    l_fore: float
    l_adv_g: float
    l_adv_d: float
    total_g: float
    total_d: float
    back_stages: dict[str, float] = field(default_factory=dict)
    fore_stages: dict[str, float] = field(default_factory=dict)
    weights: LossWeights = LossWeights()
    tau: float = TEMPERATURE
    fore_empty: bool = False

    def csv_row(self, iteration: int) -> str:
        vals = (self.l_back, self.l_fore, self.l_adv_g, self.l_adv_d, self.total_g, self.total_d)
        return f"{iteration}," + ",".join(f"{v:.8g}" for v in vals)


def background_loss(
    gen_pyr: dict[str, T.Tensor],
    ref_pyr: dict[str, T.Tensor],
    masks: dict[str, T.Tensor],
    stages: tuple[str, ...] = DEFAULT_LOSS_STAGES,
) -> tuple[T.Tensor, dict[str, float]]:
    """Mean absolute difference of mask-weighted features, summed over stages.

    One mask set weights both pyramids, so only background-agreeing regions
    contribute. Gradients reach the generator through the features and, when
    the masks are tape-attached, through the masks as well.
    """
    per_stage: dict[str, float] = {}
    total: T.Tensor | None = None
    for stage in stages:
        for name, pyr in (("generated", gen_pyr), ("reference", ref_pyr), ("mask", masks)):
            if stage not in pyr:
                raise ValueError(f"stage {stage!r} missing from {name} inputs")
        term = T.mean(T.mul(masks[stage], T.absolute(T.sub(gen_pyr[stage], ref_pyr[stage]))))
        per_stage[stage] = term.item()
        total = term if total is None else T.add(total, term)
    if total is None:
        total = T.Tensor(np.zeros((1, 1, 1, 1)))
    return total, per_stage


def _unit_channels(v: T.Tensor) -> T.Tensor:
    # Norm over the channel axis; div's epsilon guards true zero vectors.
    sq = T.scale(T.channel_mean(T.mul(v, v)), float(v.shape[1]))
    return T.div(v, T.sqrt(sq), eps=1e-8)


def _channel_dot(a: T.Tensor, b: T.Tensor) -> T.Tensor:
    return T.scale(T.channel_mean(T.mul(a, b)), float(a.shape[1]))


def info_nce_terms(pos: T.Tensor, neg: T.Tensor) -> T.Tensor:
    """Per-anchor -log(exp(pos) / (exp(pos) + sum exp(neg))), shared negatives.

    pos is (B,1,1,K) anchor logits, neg is (B,1,1,Kn) negative logits. Both are
    shifted by detached per-batch maxima before exponentiation, so the result
    stays finite for logits of any magnitude. The shifted denominator is >= 1,
    which keeps the log exact (no epsilon needed).
    """
    if pos.shape[0] != neg.shape[0] or pos.shape[1:3] != (1, 1) or neg.shape[1:3] != (1, 1):
        raise T.DimensionError(f"logit shapes must be (B,1,1,K); got {pos.shape} and {neg.shape}")
    kn = neg.shape[3]
    neg_hi = neg.data.max(axis=3, keepdims=True)
    anchor_hi = np.maximum(pos.data, neg_hi)
    neg_sum = T.scale(T.spatial_mean(T.exp(T.sub(neg, T.Tensor(neg_hi)))), float(kn))
    rescaled = T.mul(T.Tensor(np.exp(neg_hi - anchor_hi)), neg_sum)
    denom = T.add(T.exp(T.sub(pos, T.Tensor(anchor_hi))), rescaled)
    return T.add(T.sub(T.Tensor(anchor_hi), pos), T.log(denom, eps=0.0))


def foreground_contrastive_loss(
    gen_pyr: dict[str, T.Tensor],
    night_pyr: dict[str, T.Tensor],
    masks: dict[str, T.Tensor],
    negatives: dict[str, np.ndarray],
    tau: float = TEMPERATURE,
    stages: tuple[str, ...] = DEFAULT_LOSS_STAGES,
    threshold: float = 0.5,
) -> tuple[T.Tensor, dict[str, float], bool]:
    """Contrastive pull between generated and source foreground features.

    Anchors are the locations the binarized mask calls foreground (mask value
    at most `threshold`). At each anchor the positive logit is the dot
    product of the unit-normalized foreground vectors of the two pyramids
    over tau; the negative logits are the background-pair dots over tau at
    the supplied hard-negative locations, shared across a sample's anchors.
    Each anchor contributes -log(exp(pos) / (exp(pos) + sum exp(neg))); the
    stage value is the mean over every anchor in the batch, and stages sum.
    The term falls as the generated image keeps the source's content where
    the mask sees foreground while its background diverges from the source.
    Returns the loss, per-stage values, and a flag that is True when some
    stage had no anchors (that stage contributes 0 and a warning is emitted).
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    per_stage: dict[str, float] = {}
    total: T.Tensor | None = None
    empty = False
    for stage in stages:
        if stage not in negatives:
            raise ValueError(f"stage {stage!r} missing from negative indices")
        idx = np.asarray(negatives[stage], dtype=np.int64)
        if idx.ndim != 2 or idx.shape[1] == 0:
            raise ValueError(f"need at least one negative location per sample, got index shape {idx.shape}")
        mask = masks[stage]
        picked = mask.data <= threshold
        if not picked.any():
            warnings.warn(f"no foreground locations selected for {stage}; its term is 0", RuntimeWarning)
            per_stage[stage] = 0.0
            empty = True
            continue
        back_g, fore_g = disentangle.split_features(gen_pyr[stage], mask)
        back_n, fore_n = disentangle.split_features(night_pyr[stage], mask)
        pos = T.scale(_channel_dot(_unit_channels(fore_g), _unit_channels(fore_n)), 1.0 / tau)
        neg = T.scale(
            _channel_dot(
                _unit_channels(T.gather_locations(back_g, idx)),
                _unit_channels(T.gather_locations(back_n, idx)),
            ),
            1.0 / tau,
        )
        # One detached shift per sample keeps both exponentials finite; the
        # shifted denominator is > 0, so the log needs no epsilon.
        neg_hi = neg.data.max(axis=3, keepdims=True)
        pos_hi = np.where(picked, pos.data, -np.inf).max(axis=(2, 3), keepdims=True)
        hi = np.maximum(neg_hi, pos_hi)
        neg_sum = T.scale(T.spatial_mean(T.exp(T.sub(neg, T.Tensor(hi)))), float(idx.shape[1]))
        shifted = T.sub(pos, T.Tensor(hi))
        term_map = T.sub(T.log(T.add(T.exp(shifted), neg_sum), eps=0.0), shifted)
        anchor_ind = T.Tensor(picked.astype(mask.data.dtype))
        term = T.scale(T.mean(T.mul(term_map, anchor_ind)), term_map.data.size / float(picked.sum()))
        per_stage[stage] = term.item()
        total = term if total is None else T.add(total, term)
    if total is None:
        total = T.Tensor(np.zeros((1, 1, 1, 1)))
    return total, per_stage, empty


def lsgan_generator_loss(d_fake: T.Tensor) -> T.Tensor:
    """mean((D(fake) - 1)^2): pushes generated patches toward the real label."""
    diff = T.sub(d_fake, 1.0)
    return T.mean(T.mul(diff, diff))


def lsgan_discriminator_loss(d_real: T.Tensor, d_fake: T.Tensor) -> T.Tensor:
    """mean((D(real) - 1)^2) + mean(D(fake)^2). Callers detach the fake batch."""
    diff = T.sub(d_real, 1.0)
    return T.add(T.mean(T.mul(diff, diff)), T.mean(T.mul(d_fake, d_fake)))


def adversarial_loss(d_real: T.Tensor | None, d_fake: T.Tensor, side: str) -> T.Tensor:
    if side == "generator":
        return lsgan_generator_loss(d_fake)
    if side == "discriminator":
        if d_real is None:
            raise ValueError("discriminator side needs real-batch outputs")
        return lsgan_discriminator_loss(d_real, d_fake)
    raise ValueError(f"side must be 'generator' or 'discriminator', got {side!r}")


def combine_losses(
    l_back: T.Tensor,
    l_fore: T.Tensor,
    l_adv_g: T.Tensor,
    l_adv_d: T.Tensor,
    weights: LossWeights = LossWeights(),
) -> tuple[T.Tensor, T.Tensor]:
    """Weighted totals for the two optimization sides.

    Aborts training on any non-finite part, naming it, so a divergence is
    reported at the step it happens instead of surfacing as NaN weights later.
    """
    parts = {"l_back": l_back, "l_fore": l_fore, "l_adv_g": l_adv_g, "l_adv_d": l_adv_d}
    for name, part in parts.items():
        if not math.isfinite(part.item()):
            raise TrainingAbort(f"{name} is not finite: {part.item()}")
    total_g = T.add(
        T.add(T.scale(l_adv_g, weights.adversarial), T.scale(l_back, weights.background)),
        T.scale(l_fore, weights.foreground),
    )
    total_d = T.scale(l_adv_d, weights.adversarial)
    return total_g, total_d
