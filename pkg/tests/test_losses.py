"""Loss-term oracles: brute-force float64 references with pinned tolerances."""

import numpy as np
import pytest

from nightshift import disentangle as D, losses as L, tensor as T

from helpers import check_gradients


def _rand(shape, seed, lo=-1.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, shape).astype(np.float32)


def _pyr(shape, seed):
    return {"stage3": T.Tensor(_rand(shape, seed)), "stage4": T.Tensor(_rand(shape, seed + 1))}


def _masks(shape, seed):
    b, _, h, w = shape
    return {k: T.Tensor(_rand((b, 1, h, w), seed + i, 0.1, 0.9)) for i, k in enumerate(("stage3", "stage4"))}


class TestBackgroundLoss:
    def test_identical_features_zero(self):
        pyr = _pyr((1, 4, 6, 6), 0)
        masks = _masks((1, 4, 6, 6), 50)
        loss, per_stage = L.background_loss(pyr, pyr, masks, stages=("stage3", "stage4"))
        assert loss.item() == 0.0
        assert per_stage == {"stage3": 0.0, "stage4": 0.0}

    def test_zero_mask_annihilates(self):
        gen, ref = _pyr((1, 4, 6, 6), 1), _pyr((1, 4, 6, 6), 2)
        zeros = {k: T.Tensor(np.zeros((1, 1, 6, 6), np.float32)) for k in gen}
        loss, _ = L.background_loss(gen, ref, zeros, stages=("stage3", "stage4"))
        assert loss.item() == 0.0

    def test_constant_offset_under_full_mask(self):
        ref = _pyr((1, 4, 6, 6), 3)
        gen = {k: T.Tensor(ref[k].data + 0.5) for k in ref}
        ones = {k: T.Tensor(np.ones((1, 1, 6, 6), np.float32)) for k in ref}
        loss, per_stage = L.background_loss(gen, ref, ones, stages=("stage3", "stage4"))
        assert abs(per_stage["stage3"] - 0.5) < 1e-6
        assert abs(per_stage["stage4"] - 0.5) < 1e-6
        assert abs(loss.item() - 1.0) < 1e-6

    def test_brute_force_oracle(self):
        gen, ref = _pyr((2, 5, 7, 7), 4), _pyr((2, 5, 7, 7), 5)
        masks = _masks((2, 5, 7, 7), 60)
        loss, _ = L.background_loss(gen, ref, masks, stages=("stage3", "stage4"))
        want = sum(
            float(np.mean(masks[k].data.astype(np.float64) * np.abs(gen[k].data.astype(np.float64) - ref[k].data.astype(np.float64))))
            for k in ("stage3", "stage4")
        )
        assert abs(loss.item() - want) < 1e-6

    def test_missing_stage_rejected(self):
        gen, ref = _pyr((1, 4, 6, 6), 6), _pyr((1, 4, 6, 6), 7)
        masks = _masks((1, 4, 6, 6), 70)
        with pytest.raises(ValueError, match="stage4"):
            L.background_loss({"stage3": gen["stage3"]}, ref, masks, stages=("stage3", "stage4"))

    def test_gradcheck_through_masks(self):
        ref = np.random.default_rng(8).uniform(-1, 1, (1, 4, 4, 4))

        def build(inputs):
            gen = inputs[0]
            ref_t = T.Tensor(ref)
            mask = D.to_mask(D.elesim(gen, ref_t))
            loss, _ = L.background_loss({"s": gen}, {"s": ref_t}, {"s": mask}, stages=("s",))
            return loss

        check_gradients(build, [(1, 4, 4, 4)], seed=9)


class TestInfoNCE:
    def test_equal_logits_give_ln2(self):
        pos = T.Tensor(np.full((1, 1, 1, 1), 0.3, np.float32))
        neg = T.Tensor(np.full((1, 1, 1, 1), 0.3, np.float32))
        got = L.info_nce_terms(pos, neg).item()
        assert abs(got - np.log(2.0)) < 1e-6

    def test_saturated_positive_vanishes(self):
        pos = T.Tensor(np.full((1, 1, 1, 1), 100.0, np.float32))
        neg = T.Tensor(np.full((1, 1, 1, 1), -100.0, np.float32))
        assert L.info_nce_terms(pos, neg).item() < 1e-6

    def test_extreme_logits_stay_finite(self):
        pos = T.Tensor(_rand((2, 1, 1, 5), 10, -100, 100))
        neg = T.Tensor(_rand((2, 1, 1, 9), 11, -100, 100))
        out = L.info_nce_terms(pos, neg)
        assert np.isfinite(out.data).all()

    def test_brute_force_oracle(self):
        with T.use_dtype(np.float64):
            p = np.random.default_rng(12).uniform(-14, 14, (2, 1, 1, 6))
            n = np.random.default_rng(13).uniform(-14, 14, (2, 1, 1, 8))
            got = L.info_nce_terms(T.Tensor(p), T.Tensor(n)).data
        want = np.empty_like(p)
        for b in range(2):
            den = np.exp(n[b, 0, 0]).sum()
            for k in range(6):
                e = np.exp(p[b, 0, 0, k])
                want[b, 0, 0, k] = -np.log(e / (e + den))
        assert np.max(np.abs(got - want)) < 1e-6

    def test_gradcheck(self):
        def build(inputs):
            return L.info_nce_terms(inputs[0], inputs[1])

        check_gradients(build, [(1, 1, 1, 4), (1, 1, 1, 6)], seed=14)


def _fore_oracle(gen, night, masks, negatives, tau, stages, threshold=0.5):
    """Independent float64 recomputation of the contrastive term."""
    total = 0.0
    for stage in stages:
        g = gen[stage].data.astype(np.float64)
        n = night[stage].data.astype(np.float64)
        m = masks[stage].data.astype(np.float64)
        idx = negatives[stage]
        b, c, h, w = g.shape

        def unit(v):
            return v / (np.sqrt((v * v).sum(axis=0, keepdims=True)) + 1e-8)

        per = []
        for bi in range(b):
            bg = (m[bi] * g[bi]).reshape(c, h * w)[:, idx[bi]]
            bn = (m[bi] * n[bi]).reshape(c, h * w)[:, idx[bi]]
            den = np.exp((unit(bg) * unit(bn)).sum(axis=0) / tau).sum()
            anchors = np.flatnonzero(m[bi, 0].reshape(-1) <= threshold)
            fg = ((1 - m[bi]) * g[bi]).reshape(c, h * w)[:, anchors]
            fn = ((1 - m[bi]) * n[bi]).reshape(c, h * w)[:, anchors]
            pos = (unit(fg) * unit(fn)).sum(axis=0) / tau
            per.extend(-np.log(np.exp(p) / (np.exp(p) + den)) for p in pos)
        total += float(np.mean(per)) if per else 0.0
    return total


class TestForegroundLoss:
    def test_single_anchor_equal_negative_gives_ln2(self):
        feat_g = T.Tensor(_rand((1, 4, 4, 4), 20))
        feat_n = T.Tensor(_rand((1, 4, 4, 4), 21))
        # one anchor sharing the negative's location: both splits normalize
        # to the same unit vector there, so the two logits tie
        mask = np.full((1, 1, 4, 4), 0.9, np.float32)
        mask[0, 0, 1, 1] = 0.3
        idx = np.array([[5]])
        loss, per_stage, empty = L.foreground_contrastive_loss(
            {"s": feat_g}, {"s": feat_n}, {"s": T.Tensor(mask)}, {"s": idx}, stages=("s",)
        )
        assert not empty
        assert abs(loss.item() - np.log(2.0)) < 1e-6
        assert abs(per_stage["s"] - np.log(2.0)) < 1e-6

    def test_brute_force_oracle_float64(self):
        with T.use_dtype(np.float64):
            gen = {k: T.Tensor(_rand((2, 6, 8, 8), 22 + i)) for i, k in enumerate(("stage3", "stage4"))}
            night = {k: T.Tensor(_rand((2, 6, 8, 8), 32 + i)) for i, k in enumerate(("stage3", "stage4"))}
            masks = {k: T.Tensor(_rand((2, 1, 8, 8), 42 + i, 0.05, 0.95)) for i, k in enumerate(("stage3", "stage4"))}
            negatives = {k: np.stack([np.arange(10) * 3, np.arange(10) * 5]) for k in gen}
            loss, _, _ = L.foreground_contrastive_loss(gen, night, masks, negatives, tau=0.07, stages=("stage3", "stage4"))
            want = _fore_oracle(gen, night, masks, negatives, 0.07, ("stage3", "stage4"))
        assert abs(loss.item() - want) < 1e-6

    def test_float32_close_to_oracle(self):
        gen = {"s": T.Tensor(_rand((1, 8, 8, 8), 50))}
        night = {"s": T.Tensor(_rand((1, 8, 8, 8), 51))}
        masks = {"s": T.Tensor(_rand((1, 1, 8, 8), 52, 0.1, 0.9))}
        negatives = {"s": np.arange(12).reshape(1, 12) * 5}
        loss, _, _ = L.foreground_contrastive_loss(gen, night, masks, negatives, stages=("s",))
        want = _fore_oracle(gen, night, masks, negatives, L.TEMPERATURE, ("s",))
        assert abs(loss.item() - want) < 2e-5

    def test_scaling_both_pyramids_invariant(self):
        gen = {"s": T.Tensor(_rand((1, 6, 6, 6), 53))}
        night = {"s": T.Tensor(_rand((1, 6, 6, 6), 54))}
        masks = {"s": T.Tensor(_rand((1, 1, 6, 6), 55, 0.2, 0.8))}
        negatives = {"s": np.arange(8).reshape(1, 8) * 4}
        base, _, _ = L.foreground_contrastive_loss(gen, night, masks, negatives, stages=("s",))
        for c in (0.25, 3.7):
            gen_c = {"s": T.Tensor(gen["s"].data * np.float32(c))}
            night_c = {"s": T.Tensor(night["s"].data * np.float32(c))}
            moved, _, _ = L.foreground_contrastive_loss(gen_c, night_c, masks, negatives, stages=("s",))
            assert abs(moved.item() - base.item()) < 1e-5

    def test_no_foreground_warns_and_returns_zero(self):
        gen = {"s": T.Tensor(_rand((1, 4, 4, 4), 56))}
        masks = {"s": T.Tensor(np.full((1, 1, 4, 4), 0.9, np.float32))}
        with pytest.warns(RuntimeWarning):
            loss, per_stage, empty = L.foreground_contrastive_loss(
                gen, gen, masks, {"s": np.array([[3]])}, stages=("s",)
            )
        assert empty
        assert loss.item() == 0.0
        assert per_stage["s"] == 0.0

    def test_empty_negative_set_rejected(self):
        gen = {"s": T.Tensor(_rand((1, 4, 4, 4), 58))}
        masks = {"s": T.Tensor(np.full((1, 1, 4, 4), 0.3, np.float32))}
        with pytest.raises(ValueError, match="negative"):
            L.foreground_contrastive_loss(gen, gen, masks, {"s": np.zeros((1, 0), np.int64)}, stages=("s",))

    def test_bad_temperature_rejected(self):
        with pytest.raises(ValueError):
            L.foreground_contrastive_loss({}, {}, {}, {}, tau=0.0, stages=())

    def test_missing_negative_stage_rejected(self):
        gen = {"s": T.Tensor(_rand((1, 4, 4, 4), 57))}
        masks = {"s": T.Tensor(np.full((1, 1, 4, 4), 0.5, np.float32))}
        with pytest.raises(ValueError, match="negative"):
            L.foreground_contrastive_loss(gen, gen, masks, {}, stages=("s",))

    def test_nonnegative(self):
        for seed in range(4):
            gen = {"s": T.Tensor(_rand((1, 4, 6, 6), 60 + seed))}
            night = {"s": T.Tensor(_rand((1, 4, 6, 6), 70 + seed))}
            masks = {"s": T.Tensor(_rand((1, 1, 6, 6), 80 + seed, 0.1, 0.9))}
            negatives = {"s": np.arange(6).reshape(1, 6)}
            loss, _, _ = L.foreground_contrastive_loss(gen, night, masks, negatives, stages=("s",))
            assert loss.item() >= 0.0

    def test_gradcheck(self):
        mask = np.random.default_rng(90).uniform(0.2, 0.8, (1, 1, 4, 4))
        idx = np.array([[1, 7, 11]])

        def build(inputs):
            gen, night = inputs
            loss, _, _ = L.foreground_contrastive_loss(
                {"s": gen}, {"s": night}, {"s": T.Tensor(mask)}, {"s": idx}, stages=("s",)
            )
            return loss

        check_gradients(build, [(1, 4, 4, 4), (1, 4, 4, 4)], seed=91)


class TestAdversarial:
    def test_perfect_fool_zero_generator_loss(self):
        ones = T.Tensor(np.ones((2, 1, 4, 4), np.float32))
        assert L.lsgan_generator_loss(ones).item() == 0.0

    def test_perfect_split_zero_discriminator_loss(self):
        ones = T.Tensor(np.ones((2, 1, 4, 4), np.float32))
        zeros = T.Tensor(np.zeros((2, 1, 4, 4), np.float32))
        assert L.lsgan_discriminator_loss(ones, zeros).item() == 0.0

    def test_half_output_quarter_loss(self):
        half = T.Tensor(np.full((1, 1, 4, 4), 0.5, np.float32))
        assert abs(L.lsgan_generator_loss(half).item() - 0.25) < 1e-7

    def test_brute_force_oracle(self):
        real = T.Tensor(_rand((2, 1, 4, 4), 100))
        fake = T.Tensor(_rand((2, 1, 4, 4), 101))
        g = L.adversarial_loss(None, fake, "generator").item()
        d = L.adversarial_loss(real, fake, "discriminator").item()
        r64, f64 = real.data.astype(np.float64), fake.data.astype(np.float64)
        assert abs(g - np.mean((f64 - 1) ** 2)) < 1e-6
        assert abs(d - (np.mean((r64 - 1) ** 2) + np.mean(f64**2))) < 1e-6

    def test_side_validation(self):
        fake = T.Tensor(np.zeros((1, 1, 2, 2), np.float32))
        with pytest.raises(ValueError):
            L.adversarial_loss(None, fake, "both")
        with pytest.raises(ValueError):
            L.adversarial_loss(None, fake, "discriminator")

    def test_gradcheck(self):
        def build(inputs):
            return L.lsgan_generator_loss(inputs[0])

        check_gradients(build, [(1, 1, 3, 3)], seed=102)


class TestCombine:
    @staticmethod
    def _scalar(v):
        return T.Tensor(np.full((1, 1, 1, 1), v, np.float32))

    def test_unit_weights_sum(self):
        total_g, total_d = L.combine_losses(
            self._scalar(2.0), self._scalar(3.0), self._scalar(1.0), self._scalar(0.5)
        )
        assert abs(total_g.item() - 6.0) < 1e-6
        assert abs(total_d.item() - 0.5) < 1e-6

    def test_weights_respected(self):
        w = L.LossWeights(adversarial=2.0, background=0.0, foreground=0.5)
        total_g, total_d = L.combine_losses(
            self._scalar(10.0), self._scalar(4.0), self._scalar(1.0), self._scalar(3.0), weights=w
        )
        assert abs(total_g.item() - (2.0 * 1.0 + 0.0 * 10.0 + 0.5 * 4.0)) < 1e-6
        assert abs(total_d.item() - 6.0) < 1e-6

    def test_nonfinite_part_aborts_with_name(self):
        bad = self._scalar(np.nan)
        with pytest.raises(L.TrainingAbort, match="l_fore"):
            L.combine_losses(self._scalar(1.0), bad, self._scalar(1.0), self._scalar(1.0))

    def test_totals_flow_gradients(self):
        parts = [T.Tensor(np.full((1, 1, 1, 1), v, np.float32), requires_grad=True) for v in (1.0, 2.0, 3.0, 4.0)]
        total_g, _ = L.combine_losses(*parts)
        T.backward(total_g)
        assert parts[0].grad is not None and parts[1].grad is not None and parts[2].grad is not None


class TestReport:
    def test_csv_row_shape(self):
        rep = L.LossReport(0.1, 0.2, 0.3, 0.4, 0.6, 0.4)
        row = rep.csv_row(7)
        fields = row.split(",")
        assert fields[0] == "7"
        assert len(fields) == len(L.CSV_HEADER.split(","))
        assert float(fields[1]) == pytest.approx(0.1)
