"""Loss tests: frozen-value examples, finite-difference gradient oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from falconseg import geometry, losses
from falconseg.errors import EmptyBatchError, ShapeMismatchError
from falconseg.losses import LossConfig, LossValue


# ---------------------------------------------------------------- oracles

def central_fd(f, x, h=1e-4):
    """Central finite-difference gradient of scalar f at array x."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2.0 * h)
        it.iternext()
    return g


def max_rel_err(analytic, fd):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-8)
    return float(np.max(np.abs(analytic - fd) / denom))


def random_instance(seed, shape=(8, 8), lo=0.05, hi=0.95):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(lo, hi, shape)
    gt = (rng.random(shape) < 0.4).astype(np.uint8)
    return pred, gt


# ---------------------------------------------------------------- dice

class TestDice:
    def test_perfect_binary_is_near_zero(self):
        gt = np.zeros((6, 6), np.uint8)
        gt[1:4, 2:5] = 1
        d = losses.dice_loss(gt.astype(float), gt)
        s = gt.sum()
        assert 0.0 <= d <= 1e-6 / (2 * s)  # epsilon-slack only

    def test_all_zero_pred_is_one(self):
        gt = np.zeros((5, 5), np.uint8)
        gt[2, 2] = 1
        assert losses.dice_loss(np.zeros((5, 5)), gt) == 1.0

    def test_uniform_half_algebraic(self):
        # pred 0.5 everywhere, gt covers half of n pixels:
        # 1 - (n/2) / (0.75 n + eps) -> 1/3
        gt = np.zeros((8, 8), np.uint8)
        gt[:4, :] = 1
        d = losses.dice_loss(np.full((8, 8), 0.5), gt)
        assert abs(d - 1.0 / 3.0) < 1e-6

    def test_gradient_vs_fd(self):
        worst = 0.0
        for seed in range(20):
            pred, gt = random_instance(seed)
            if not gt.any():
                continue
            _, g = losses.dice_loss_and_grad(pred, gt)
            fd = central_fd(lambda p: losses.dice_loss(p, gt), pred)
            worst = max(worst, max_rel_err(g, fd))
        assert worst < 1e-4

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_range(self, seed):
        pred, gt = random_instance(seed, lo=0.0, hi=1.0)
        d = losses.dice_loss(pred, gt)
        assert 0.0 <= d <= 1.0 + 1e-6


# ---------------------------------------------------------------- bce

class TestBce:
    def test_perfect_binary_tiny(self):
        gt = np.zeros((4, 4), np.uint8)
        gt[1:3, 1:3] = 1
        assert losses.bce_loss(gt.astype(float), gt) <= -np.log(1 - 1e-7) + 1e-12

    def test_uniform_half_is_log2_any_gt(self):
        for seed in (0, 1, 2):
            _, gt = random_instance(seed, (5, 7))
            b = losses.bce_loss(np.full((5, 7), 0.5), gt)
            assert abs(b - np.log(2.0)) < 1e-12

    def test_matches_scalar_loop(self):
        pred, gt = random_instance(11, (4, 4))
        total = 0.0
        for i in range(4):
            for j in range(4):
                p = min(max(pred[i, j], 1e-7), 1 - 1e-7)
                y = gt[i, j]
                total += -(y * np.log(p) + (1 - y) * np.log(1 - p))
        assert abs(losses.bce_loss(pred, gt) - total / 16) < 1e-12

    def test_gradient_vs_fd(self):
        worst = 0.0
        for seed in range(20):
            pred, gt = random_instance(seed + 100)
            _, g = losses.bce_loss_and_grad(pred, gt)
            fd = central_fd(lambda p: losses.bce_loss(p, gt), pred)
            worst = max(worst, max_rel_err(g, fd))
        assert worst < 1e-4

    def test_nonnegative(self):
        for seed in range(30):
            pred, gt = random_instance(seed, lo=0.0, hi=1.0)
            assert losses.bce_loss(pred, gt) >= 0.0


# ---------------------------------------------------------------- hausdorff

class TestHausdorffLoss:
    def test_perfect_prediction_near_zero(self):
        gt = np.zeros((8, 8), np.uint8)
        gt[2:6, 3:7] = 1
        lv = losses.hausdorff_loss(gt.astype(float), gt)
        assert lv.component("hd_term") == 0.0
        assert lv.total < 1e-5

    def test_uniform_half_single_pixel_frozen_value(self):
        # gt = single pixel at (2,2) on 5x5, pred uniform 0.5, a=1, lambda1=0:
        # binarized pred is all-ones so its distance map vanishes, leaving
        # 0.5 * sum(d_gt) / 25
        gt = np.zeros((5, 5), np.uint8)
        gt[2, 2] = 1
        d_sum = 0.0
        for i in range(5):
            for j in range(5):
                d_sum += np.hypot(i - 2, j - 2)
        cfg = LossConfig(a=1.0, lambda1=0.0)
        lv = losses.hausdorff_loss(np.full((5, 5), 0.5), gt, cfg)
        assert abs(lv.total - 0.5 * d_sum / 25.0) < 1e-12
        assert lv.component("dice_term") != 0.0  # recorded even when unweighted

    def test_both_empty_flagged_zero(self):
        lv, grad = losses.hausdorff_loss_and_grad(
            np.full((6, 6), 0.2), np.zeros((6, 6), np.uint8)
        )
        assert lv.total == 0.0
        assert lv.flags == ("both_empty",)
        assert np.all(grad == 0.0)

    def test_empty_gt_nonempty_pred_uses_sentinel(self):
        pred = np.full((4, 4), 0.9)
        gt = np.zeros((4, 4), np.uint8)
        cfg = LossConfig(a=1.0, lambda1=0.0)
        lv = losses.hausdorff_loss(pred, gt, cfg)
        assert abs(lv.total - 0.9 * np.sqrt(32.0)) < 1e-12

    def test_gradient_vs_fd_frozen_maps(self):
        worst = 0.0
        cfg = LossConfig()
        for seed in range(20):
            pred, gt = random_instance(seed + 200)
            if not gt.any():
                continue
            d_gt = geometry.distance_transform(gt)
            d_pred = geometry.distance_transform(
                (pred >= cfg.prob_threshold).astype(np.uint8)
            )
            _, g = losses.hausdorff_loss_and_grad(pred, gt, cfg, d_gt, d_pred)
            fd = central_fd(
                lambda p: losses.hausdorff_loss(p, gt, cfg, d_gt, d_pred).total, pred
            )
            worst = max(worst, max_rel_err(g, fd))
        assert worst < 1e-4

    def test_moving_mass_farther_never_decreases_hd_term(self):
        gt = np.zeros((9, 9), np.uint8)
        gt[4, 4] = 1
        d = geometry.distance_transform(gt)
        cfg = LossConfig(lambda1=0.0)
        rng = np.random.default_rng(5)
        cells = [(i, j) for i in range(9) for j in range(9)]
        flat = sorted(cells, key=lambda c: d[c])
        for k in range(25):
            # stay below the binarization threshold so the frozen d_pred
            # term is identical for both predictions
            base = rng.uniform(0.0, 0.4, (9, 9))
            near, far = flat[1 + k % 10], flat[-1 - k % 10]
            moved = base.copy()
            amt = min(base[near], 0.49 - base[far], 0.3)
            moved[near] -= amt
            moved[far] += amt
            lo = losses.hausdorff_loss(base, gt, cfg).component("hd_term")
            hi = losses.hausdorff_loss(moved, gt, cfg).component("hd_term")
            assert hi >= lo - 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            losses.hausdorff_loss(np.zeros((3, 3)), np.zeros((4, 4), np.uint8))


# ---------------------------------------------------------------- adversarial

class TestAdversarial:
    def test_fooled_discriminator_near_zero(self):
        assert losses.adv_generator_loss([1 - 1e-7] * 4) < 2e-7

    def test_single_half_is_log2(self):
        assert abs(losses.adv_generator_loss([0.5]) - np.log(2.0)) < 1e-12

    def test_quarter_three_quarter(self):
        want = (-np.log(0.25) - np.log(0.75)) / 2.0
        assert abs(losses.adv_generator_loss([0.25, 0.75]) - want) < 1e-12

    def test_empty_raises(self):
        with pytest.raises(EmptyBatchError):
            losses.adv_generator_loss([])
        with pytest.raises(EmptyBatchError):
            losses.disc_loss([], [0.5])
        with pytest.raises(EmptyBatchError):
            losses.disc_loss([0.5], [])

    def test_perfect_discriminator_near_zero(self):
        assert losses.disc_loss([1 - 1e-7] * 3, [1e-7] * 3) < 1e-6

    def test_uninformative_is_two_log2(self):
        assert abs(losses.disc_loss([0.5], [0.5, 0.5]) - 2 * np.log(2.0)) < 1e-12

    def test_frozen_example(self):
        want = -np.log(0.9) - np.log(0.8)
        assert abs(losses.disc_loss([0.9], [0.2]) - want) < 1e-12

    def test_generator_gradient_vs_fd(self):
        worst = 0.0
        for seed in range(20):
            s = np.random.default_rng(seed + 300).uniform(0.05, 0.95, 7)
            _, g = losses.adv_generator_loss_and_grad(s)
            fd = central_fd(lambda x: losses.adv_generator_loss(x), s)
            worst = max(worst, max_rel_err(g, fd))
        assert worst < 1e-4

    def test_disc_gradient_vs_fd(self):
        worst = 0.0
        for seed in range(20):
            rng = np.random.default_rng(seed + 400)
            r = rng.uniform(0.05, 0.95, 5)
            f = rng.uniform(0.05, 0.95, 6)
            _, gr, gf = losses.disc_loss_and_grad(r, f)
            fdr = central_fd(lambda x: losses.disc_loss(x, f), r)
            fdf = central_fd(lambda x: losses.disc_loss(r, x), f)
            worst = max(worst, max_rel_err(gr, fdr), max_rel_err(gf, fdf))
        assert worst < 1e-4

    def test_disc_gradients_push_max_min_directions(self):
        # minimizing disc_loss must push real scores up and fake scores down
        _, gr, gf = losses.disc_loss_and_grad([0.3, 0.6], [0.4, 0.7])
        assert np.all(gr < 0)  # -grad ascent direction raises real scores
        assert np.all(gf > 0)

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            s = rng.uniform(0.01, 0.99, 5)
            assert losses.adv_generator_loss(s) >= 0.0
            assert losses.disc_loss(s, rng.uniform(0.01, 0.99, 4)) >= 0.0


# ---------------------------------------------------------------- combined

class TestCombined:
    def test_lambda2_zero_equals_hausdorff(self):
        pred, gt = random_instance(9)
        cfg = LossConfig(lambda2=0.0)
        a = losses.combined_seg_loss(pred, gt, [0.5], cfg)
        b = losses.hausdorff_loss(pred, gt, cfg)
        assert a == b

    def test_all_weights_zero_perfect_pred(self):
        gt = np.zeros((6, 6), np.uint8)
        gt[2:4, 2:4] = 1
        cfg = LossConfig(lambda1=0.0, lambda2=0.0)
        lv = losses.combined_seg_loss(gt.astype(float), gt, None, cfg)
        assert lv.total == 0.0

    def test_components_recombine(self):
        for seed in range(10):
            pred, gt = random_instance(seed + 500)
            scores = np.random.default_rng(seed).uniform(0.1, 0.9, 4)
            cfg = LossConfig()
            lv = losses.combined_seg_loss(pred, gt, scores, cfg)
            want = (
                lv.component("hd_term")
                + cfg.lambda1 * lv.component("dice_term")
                + cfg.lambda2 * lv.component("adv_term")
            )
            assert abs(lv.total - want) < 1e-9
            assert abs(lv.component("adv_term") - losses.adv_generator_loss(scores)) < 1e-12

    def test_grad_split(self):
        pred, gt = random_instance(31)
        scores = np.array([0.3, 0.8])
        lv, gp, gs = losses.combined_seg_loss_and_grad(pred, gt, scores)
        lv0, gp0 = losses.hausdorff_loss_and_grad(pred, gt)
        assert np.array_equal(gp, gp0)
        _, gs_raw = losses.adv_generator_loss_and_grad(scores)
        assert np.allclose(gs, 0.1 * gs_raw)


# ---------------------------------------------------------------- config

class TestLossConfig:
    def test_defaults(self):
        cfg = LossConfig()
        assert (cfg.a, cfg.lambda1, cfg.lambda2) == (0.2, 0.9, 0.1)
        assert cfg.prob_threshold == 0.5
        assert cfg.epsilon == 1e-6

    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            LossConfig(a=0.0)
        with pytest.raises(ValueError):
            LossConfig(lambda1=-0.1)
        with pytest.raises(ValueError):
            LossConfig(prob_threshold=1.0)

    def test_probmap_validation(self):
        with pytest.raises(ValueError):
            losses.bce_loss(np.full((3, 3), 1.5), np.ones((3, 3), np.uint8))
