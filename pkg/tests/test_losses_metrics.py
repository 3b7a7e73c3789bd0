import math

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from hogformer.gradcheck import finite_diff_check
from hogformer.losses import LossWeights, hog_loss, pearson_loss, rec_loss, total_loss
from hogformer.metrics import MetricReport, psnr, ssim
from hogformer.optim import Adam, CosineSchedule, OptimState, adam_step
from hogformer.tensor import ConfigurationError, InputValidationError, Parameter, Tensor


def P(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestRecLoss:
    def test_examples(self, rng):
        gt = rng.random((2, 3, 8, 8))
        assert rec_loss(gt, gt).item() == 0.0
        assert rec_loss(gt + 0.5, gt).item() == pytest.approx(0.5)

    def test_gradient_sign(self, rng):
        gt = rng.random((1, 3, 4, 4))
        pred = P(gt + rng.choice([-0.2, 0.3], gt.shape))
        rec_loss(pred, gt).backward()
        np.testing.assert_allclose(pred.grad, np.sign(pred.data - gt) / gt.size)

    def test_shape_mismatch(self):
        with pytest.raises(InputValidationError):
            rec_loss(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


class TestPearson:
    def test_affine_invariance(self, rng):
        gt = rng.random((2, 3, 8, 8))
        assert pearson_loss(2.5 * gt + 0.3, gt).item() == pytest.approx(0.0, abs=1e-6)

    def test_negation(self, rng):
        gt = rng.random((1, 3, 8, 8))
        gt = gt - gt.mean(axis=(-2, -1), keepdims=True)
        assert pearson_loss(-gt, gt).item() == pytest.approx(2.0, abs=1e-6)

    def test_constant_channel_costs_one(self, rng):
        gt = rng.random((1, 3, 8, 8))
        pred = gt.copy()
        pred[0, 1] = 0.4
        # channels 0 and 2 are perfect, channel 1 takes the guard path
        assert pearson_loss(pred, gt).item() == pytest.approx(1.0 / 3.0, abs=1e-6)

    def test_gradcheck(self, rng, f64):
        gt = Tensor(rng.random((1, 3, 16, 16)))
        assert finite_diff_check(lambda p: pearson_loss(p, gt), [P(rng.random((1, 3, 16, 16)))]) < 1e-4


class TestHogLoss:
    def test_zero_at_target(self, rng):
        gt = rng.random((3, 16, 16))
        assert hog_loss(gt, gt).item() == 0.0

    def test_non_negative(self, rng):
        for _ in range(5):
            assert hog_loss(rng.random((3, 16, 16)), rng.random((3, 16, 16))).item() >= 0.0

    def test_gradcheck(self, rng, f64):
        gt = Tensor(rng.random((16, 16)))
        assert finite_diff_check(lambda p: hog_loss(p, gt), [P(rng.random((16, 16)))]) < 1e-4

    def test_target_carries_no_gradient(self, rng):
        pred, gt = P(rng.random((3, 8, 8))), P(rng.random((3, 8, 8)))
        hog_loss(pred, gt).backward()
        assert gt.grad is None and pred.grad is not None


class TestTotalLoss:
    def test_zero_at_target_with_finite_gradient(self, rng):
        gt = rng.random((1, 3, 16, 16))
        pred = P(gt)
        terms = total_loss(pred, gt, LossWeights(0.7, 2.0))
        assert terms.rec.item() == 0.0 and terms.hog.item() == 0.0
        # rho = var / (var + 1e-8) here, so the correlation term keeps ~eps/var
        assert terms.total.item() == pytest.approx(0.0, abs=1e-6)
        terms.total.backward()
        assert np.all(np.isfinite(pred.grad))

    def test_weight_collapse(self, rng):
        pred, gt = rng.random((1, 3, 16, 16)), rng.random((1, 3, 16, 16))
        terms = total_loss(pred, gt, LossWeights(0, 0))
        assert terms.total.item() == rec_loss(pred, gt).item()
        assert terms.hog.item() > 0  # still logged

    def test_exact_weighted_sum(self, rng):
        pred, gt = rng.random((1, 3, 16, 16)), rng.random((1, 3, 16, 16))
        t = total_loss(pred, gt, LossWeights(0.5, 3.0))
        assert t.total.item() == pytest.approx(t.rec.item() + 0.5 * t.cor.item() + 3.0 * t.hog.item())

    def test_defaults(self):
        assert LossWeights() == LossWeights(1.0, 1.0)

    def test_negative_weight(self, rng):
        with pytest.raises(ConfigurationError):
            total_loss(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)), LossWeights(-1, 1))


class TestPSNR:
    def test_mse_1e4_is_40db(self):
        gt = np.zeros((3, 10, 10))
        assert psnr(gt + 0.01, gt) == pytest.approx(40.0, abs=0.01)

    def test_identical_capped(self, rng):
        x = rng.random((3, 8, 8))
        assert psnr(x, x) == 100.0

    def test_shape_mismatch(self):
        with pytest.raises(InputValidationError):
            psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


class TestSSIM:
    def test_identical(self, rng):
        x = rng.random((3, 32, 32))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_symmetric(self, rng):
        a, b = rng.random((3, 24, 24)), rng.random((3, 24, 24))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-9

    def test_matches_reference_implementation(self, rng):
        a = rng.random((3, 40, 36))
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
        ref = structural_similarity(
            a, b, channel_axis=0, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
        )
        assert ssim(a, b) == pytest.approx(ref, abs=1e-9)

    def test_too_small(self):
        with pytest.raises(InputValidationError):
            ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


def test_metric_report_json(rng):
    rep = MetricReport()
    x = rng.random((3, 16, 16))
    rep.add("a", x, x)
    rep.add("b", np.clip(x + 0.01, 0, 1), x)
    js = rep.to_json()
    assert js["count"] == 2 and js["images"][0] == {"id": "a", "psnr": 100.0, "ssim": 1.0}
    assert js["mean_psnr"] == pytest.approx((100.0 + rep.psnr[1]) / 2)


class TestAdam:
    def test_first_step(self):
        out, state = adam_step({"w": np.array([0.5])}, {"w": np.array([1.0])}, OptimState(), lr=1e-3)
        assert out["w"][0] - 0.5 == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-9)
        assert state.step == 1

    def test_zero_grad_no_change(self):
        out, _ = adam_step({"w": np.array([0.5, -2.0])}, {"w": np.zeros(2)}, OptimState(), lr=1e-3)
        np.testing.assert_array_equal(out["w"], [0.5, -2.0])

    def test_nan_names_parameter(self):
        with pytest.raises(FloatingPointError, match="enc.w"):
            adam_step({"enc.w": np.zeros(2)}, {"enc.w": np.array([0.0, np.nan])}, OptimState(), lr=1e-3)
        p = Parameter(np.zeros(2))
        p.grad = np.array([np.inf, 0.0])
        with pytest.raises(FloatingPointError, match="head.weight"):
            Adam([("head.weight", p)]).step(1e-3)

    def test_class_matches_functional(self, rng):
        w0 = rng.standard_normal(4)
        p = Parameter(w0.copy())
        opt = Adam([("w", p)])
        params, state = {"w": w0.copy()}, OptimState()
        for _ in range(5):
            g = rng.standard_normal(4)
            p.grad = g
            opt.step(1e-2)
            params, state = adam_step(params, {"w": g}, state, 1e-2)
        np.testing.assert_allclose(p.data, params["w"], rtol=1e-12)

    def test_deterministic(self):
        def run():
            r = np.random.default_rng(0)
            params, state = {"w": np.ones(3)}, OptimState()
            for _ in range(10):
                params, state = adam_step(params, {"w": r.standard_normal(3)}, state, 1e-2)
            return params["w"]

        np.testing.assert_array_equal(run(), run())


def test_cosine_schedule():
    s = CosineSchedule(3e-4, 100, 1e-5)
    assert s.lr(1) == 3e-4
    assert s.lr(51) == pytest.approx(1e-5 + 0.5 * (3e-4 - 1e-5))
    assert s.lr(101) == pytest.approx(1e-5)
    assert all(s.lr(i) >= s.lr(i + 1) for i in range(1, 100))
    assert not math.isnan(CosineSchedule(1e-3, 1).lr(1))
