import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from accar import tensor as T
from accar.losses import (LossWeights, _beta_nll_terms, beta_nll, contrast_invariance, diffusion_reg, lncc,
                          lncc_map, registration_loss)
from accar.tensor import ShapeError, Tensor, gradient_check


def textured(seed, shape=(16, 16)):
    return np.random.default_rng(seed).random(shape)


class TestLNCC:
    def test_self_correlation(self):
        x = textured(0)
        assert lncc(x, x).item() == pytest.approx(1.0, abs=1e-5)

    def test_positive_affine_invariance(self):
        x = textured(1)
        assert lncc(x, 2 * x + 0.1).item() == pytest.approx(1.0, abs=1e-5)

    def test_negative_map_still_correlated(self):
        x = textured(2)
        # squared correlation ignores the sign
        assert lncc(x, 1 - x).item() == pytest.approx(1.0, abs=1e-5)

    def test_single_window_against_patch_statistics(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((3, 3)), rng.random((3, 3))
        got = lncc_map(a, b, window=3, eps=0.0).data[0, 1, 1]
        cov = np.mean((a - a.mean()) * (b - b.mean()))
        expected = cov ** 2 / (a.var() * b.var())
        assert got == pytest.approx(expected, rel=1e-12)

    def test_border_windows_are_truncated(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((5, 5)), rng.random((5, 5))
        got = lncc_map(a, b, window=3, eps=0.0).data[0, 0, 0]
        pa, pb = a[:2, :2], b[:2, :2]
        cov = np.mean((pa - pa.mean()) * (pb - pb.mean()))
        assert got == pytest.approx(cov ** 2 / (pa.var() * pb.var()), rel=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 5.0), st.floats(-2.0, 2.0))
    def test_range_and_invariance(self, seed, scale, shift):
        rng = np.random.default_rng(seed)
        a, b = rng.random((12, 12)), rng.random((12, 12))
        v = lncc(a, b, 5).item()
        assert 0.0 <= v <= 1.0
        assert lncc(a, scale * b + shift, 5).item() == pytest.approx(v, abs=1e-4)

    def test_gradient(self):
        rng = np.random.default_rng(5)
        b = Tensor(rng.random((10, 10)))
        assert gradient_check(lambda a: lncc(a, b, 5), rng.random((10, 10))) < 1e-5

    def test_window_too_large(self):
        with pytest.raises(ValueError):
            lncc(np.zeros((5, 5)), np.zeros((5, 5)), 7)


class TestDiffusion:
    def test_zero(self):
        assert diffusion_reg(np.zeros((2, 6, 6))).item() == 0.0

    def test_translation(self):
        u = np.zeros((2, 6, 6))
        u[0], u[1] = 1.5, -0.7
        assert diffusion_reg(u).item() == 0.0

    def test_linear_x_field(self):
        y, x = np.mgrid[0:6, 0:6].astype(float)
        u = np.stack([x, np.zeros_like(x)])
        # oracle: every horizontal forward difference of u_x is 1, everything else 0
        dx = np.diff(u, axis=2)
        dy = np.diff(u, axis=1)
        oracle = (dx ** 2).sum(axis=0).mean() + (dy ** 2).sum(axis=0).mean()
        assert oracle == 1.0
        assert diffusion_reg(u).item() == pytest.approx(1.0)

    def test_gradient(self):
        assert gradient_check(diffusion_reg, np.random.default_rng(6).normal(size=(2, 5, 5))) < 1e-6

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
    def test_translation_invariant(self, seed, tx, ty):
        u = np.random.default_rng(seed).normal(size=(2, 6, 6))
        shifted = u + np.array([tx, ty])[:, None, None]
        assert diffusion_reg(shifted).item() == pytest.approx(diffusion_reg(u).item(), rel=1e-9, abs=1e-12)


class TestBetaNLL:
    def test_unit_variance_is_mse(self):
        rng = np.random.default_rng(7)
        w, f = rng.random((6, 6)), rng.random((6, 6))
        got = beta_nll(w, f, np.zeros((1, 6, 6)), 0.5).item()
        assert got == pytest.approx(np.mean((w - f) ** 2), rel=1e-14)

    def test_single_pixel(self):
        got = beta_nll(np.array([[2.0]]), np.array([[0.0]]), np.full((1, 1, 1), math.log(4.0)), 0.5).item()
        assert got == pytest.approx(2 * (4 / 4 + math.log(4)), rel=1e-12)
        assert got == pytest.approx(4.7726, abs=1e-4)

    def test_gradient_only_reaches_log_var(self):
        rng = np.random.default_rng(8)
        w = Tensor(rng.random((1, 4, 4)), requires_grad=True)
        lv = Tensor(rng.normal(size=(1, 4, 4)), requires_grad=True)
        beta_nll(w, rng.random((1, 4, 4)), lv, 0.5).backward()
        assert w.grad is None
        assert lv.grad is not None and np.all(np.isfinite(lv.grad))

    def test_log_var_gradient_matches_fd(self):
        rng = np.random.default_rng(9)
        w, f = rng.random((1, 4, 4)), rng.random((1, 4, 4))
        # the σ^{2β} weight is a stop-gradient: compare with the frozen-weight composite
        lv0 = rng.normal(size=(1, 4, 4))
        weight = Tensor(np.exp(0.5 * lv0))
        r2 = Tensor((w - f) ** 2)
        frozen = lambda lv: T.reduce_mean(weight * (r2 * T.exp(-lv) + lv))
        lv = Tensor(lv0, requires_grad=True)
        beta_nll(w, f, lv, 0.5).backward()
        num = T.numerical_gradient(frozen, lv0)
        np.testing.assert_allclose(lv.grad, num, rtol=1e-6, atol=1e-10)

    def test_beta_one_mean_gradient_independent_of_variance(self):
        # with β=1 the gradient w.r.t. the prediction equals the plain MSE gradient
        residual = np.array([[[0.3, -1.2]]])
        grads = []
        for lv in (-3.0, 0.0, 2.5):
            r = Tensor(residual, requires_grad=True)
            _beta_nll_terms(r, Tensor(np.full((1, 1, 2), lv)), 1.0).backward()
            grads.append(r.grad)
        for g in grads:
            np.testing.assert_allclose(g, 2 * residual / 2, rtol=1e-12)

    def test_non_finite(self):
        with pytest.raises(FloatingPointError):
            beta_nll(np.zeros((2, 2)), np.zeros((2, 2)), np.full((1, 2, 2), np.nan))


class TestContrastInvariance:
    def test_identical_pairs(self):
        h = np.random.default_rng(10).normal(size=(3, 4, 4))
        g = np.random.default_rng(11).normal(size=(3, 4, 4))
        assert contrast_invariance(h, h, g, g).item() == 0.0

    def test_mean_of_ones(self):
        h = np.random.default_rng(12).normal(size=(3, 4, 4))
        eye = (Tensor(np.eye(3)[:, :, None, None]), Tensor(np.zeros(3)))
        assert contrast_invariance(h + 1, h, h, h, eye).item() == pytest.approx(1.0)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        hs = [rng.normal(size=(2, 3, 3)) for _ in range(4)]
        proj = (Tensor(rng.normal(size=(4, 2, 1, 1))), Tensor(rng.normal(size=4)))
        assert contrast_invariance(*hs, proj).item() >= 0

    def test_gradient_through_projection(self):
        rng = np.random.default_rng(13)
        hs = [Tensor(rng.normal(size=(2, 3, 3))) for _ in range(3)]
        b = Tensor(np.zeros(3))
        assert gradient_check(lambda w: contrast_invariance(hs[0], hs[1], hs[2], hs[1], (w, b)),
                              rng.normal(size=(3, 2, 1, 1))) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            contrast_invariance(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), np.zeros((2, 2, 3)))


class TestRegistrationLoss:
    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda1, w.lambda2, w.lambda3, w.beta) == (0.3, 0.2, 0.8, 0.5)

    def test_reduces_to_mse_plus_diffusion(self):
        rng = np.random.default_rng(14)
        m, f = rng.random((8, 8)), rng.random((8, 8))
        u = rng.normal(scale=0.5, size=(2, 8, 8))
        w = LossWeights(0.3, 0.0, 0.0, 0.5)
        from accar.warp import apply_displacement
        expected = np.mean((apply_displacement(m, u).data - f) ** 2) + 0.3 * diffusion_reg(u).item()
        got = registration_loss(m, f, u, np.zeros((1, 8, 8)), None, w).item()
        assert got == pytest.approx(expected, rel=1e-12)

    def test_aligned_pair_only_lncc_reward(self):
        x = textured(15)
        h = np.random.default_rng(16).normal(size=(2, 2, 2))
        got = registration_loss(x, x, np.zeros((2, 16, 16)), np.zeros((1, 16, 16)), (h, h, h, h), LossWeights())
        assert got.item() == pytest.approx(-0.8, abs=1e-5)

    def test_variance_weighting(self):
        rng = np.random.default_rng(17)
        m, f = rng.random((6, 6)), rng.random((6, 6))
        lv = rng.normal(size=(1, 6, 6))
        w = LossWeights(0.0, 0.0, 0.0, 0.5)
        got = registration_loss(m, f, np.zeros((2, 6, 6)), lv, None, w).item()
        # β = 0.5 gives a similarity weight of 1/σ
        assert got == pytest.approx(np.mean(np.exp(-0.5 * lv[0]) * (m - f) ** 2), rel=1e-12)

    def test_no_gradient_into_log_var(self):
        rng = np.random.default_rng(18)
        lv = Tensor(rng.normal(size=(1, 6, 6)), requires_grad=True)
        u = Tensor(rng.normal(scale=0.3, size=(2, 6, 6)), requires_grad=True)
        registration_loss(rng.random((6, 6)), rng.random((6, 6)), u, lv, None, LossWeights(), lncc_window=3).backward()
        assert lv.grad is None
        assert u.grad is not None

    def test_gradient_wrt_flow(self):
        rng = np.random.default_rng(19)
        m, f = rng.random((8, 8)), rng.random((8, 8))
        lv = rng.normal(size=(1, 8, 8))
        u0 = rng.normal(scale=0.4, size=(2, 8, 8)) + 0.23
        fn = lambda u: registration_loss(m, f, u, lv, None, LossWeights(), lncc_window=3)
        assert gradient_check(fn, u0) < 1e-4
