from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import relative_error
from ppg_uq import losses as L
from ppg_uq import tensor as T
from ppg_uq.rng import RngStream
from ppg_uq.tensor import Tensor

HALF_LN_2PI = 0.5 * math.log(2 * math.pi)


def _cls_out(f, sigma2, requires_grad=False):
    return L.ClassifierHeadOutput(Tensor(f, requires_grad), Tensor(sigma2, requires_grad))


class TestGaussianNll:
    def test_standard_normal_at_zero(self):
        assert L.gaussian_nll(0.0, 1.0, 0.0).item() == pytest.approx(HALF_LN_2PI, abs=1e-7)

    def test_residual_term_vanishes_at_mean(self):
        for s2 in (0.1, 1.0, 30.0):
            assert L.gaussian_nll(2.0, s2, 2.0).item() == pytest.approx(0.5 * math.log(2 * math.pi * s2), rel=1e-6)

    @pytest.mark.parametrize("bad", [0.0, -1.0])
    def test_nonpositive_variance_rejected(self, bad):
        with pytest.raises(ValueError):
            L.gaussian_nll(0.0, bad, 1.0)

    def test_variance_gradient_matches_fd(self):
        # d/ds2 [0.5 ln s2 + (y-mu)^2 / (2 s2)] at (0, 1, 2) = 0.5 - 4/2 = -1.5
        with T.precision(np.float64):
            s2 = Tensor([1.0], requires_grad=True)
            L.gaussian_nll(Tensor([0.0]), s2, Tensor([2.0])).sum().backward()
            h = 1e-4
            fd = (L.gaussian_nll(0.0, 1.0 + h, 2.0).item() - L.gaussian_nll(0.0, 1.0 - h, 2.0).item()) / (2 * h)
        assert abs(s2.grad[0] - fd) < 1e-4
        assert s2.grad[0] == pytest.approx(-1.5)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0.05, 20), st.floats(-10, 10))
    def test_convex_in_mean(self, a, b, s2, y):
        with T.precision(np.float64):
            mid = L.gaussian_nll((a + b) / 2, s2, y).item()
            avg = 0.5 * (L.gaussian_nll(a, s2, y).item() + L.gaussian_nll(b, s2, y).item())
        assert mid <= avg + 1e-9


class TestBpJointLoss:
    def test_both_heads_at_truth(self):
        out = L.RegressionHeadOutput(Tensor([[120.0, 80.0]]), Tensor([[1.0, 1.0]]))
        assert L.bp_joint_loss(out, [120.0], [80.0]).item() == pytest.approx(2 * HALF_LN_2PI, rel=1e-6)

    def test_sum_of_heads(self):
        g = np.random.default_rng(0)
        mu, s2 = g.normal(100, 20, (5, 2)), g.uniform(1, 50, (5, 2))
        ys, yd = g.normal(110, 15, 5), g.normal(70, 10, 5)
        with T.precision(np.float64):
            out = L.RegressionHeadOutput(Tensor(mu), Tensor(s2))
            joint = L.bp_joint_loss(out, ys, yd, reduction="none").data
            sep = L.gaussian_nll(mu[:, 0], s2[:, 0], ys).data + L.gaussian_nll(mu[:, 1], s2[:, 1], yd).data
        np.testing.assert_allclose(joint, sep, rtol=1e-12)

    def test_batch_mean_by_hand(self):
        mu = np.array([[100.0, 60.0], [120.0, 80.0], [140.0, 90.0]])
        s2 = np.array([[4.0, 1.0], [9.0, 4.0], [16.0, 25.0]])
        ys, yd = np.array([102.0, 117.0, 140.0]), np.array([61.0, 80.0, 95.0])
        by_hand = []
        for i in range(3):
            tot = 0.0
            for h, y in ((0, ys[i]), (1, yd[i])):
                tot += 0.5 * math.log(2 * math.pi * s2[i, h]) + (y - mu[i, h]) ** 2 / (2 * s2[i, h])
            by_hand.append(tot)
        with T.precision(np.float64):
            got = L.bp_joint_loss(L.RegressionHeadOutput(Tensor(mu), Tensor(s2)), ys, yd).item()
        assert got == pytest.approx(sum(by_hand) / 3, rel=1e-12)


class TestMcSoftmaxNll:
    def test_degenerate_noise_is_cross_entropy(self):
        g = np.random.default_rng(1)
        f = g.standard_normal((6, 2))
        y = g.integers(0, 2, 6)
        with T.precision(np.float64):
            loss = L.mc_softmax_nll(_cls_out(f, np.full((6, 2), 1e-30)), y, 1, RngStream(0, "logit-noise")).item()
        logp = f - np.log(np.exp(f).sum(axis=1, keepdims=True))
        assert loss == pytest.approx(-logp[np.arange(6), y].mean(), abs=1e-6)

    def test_zero_logits_zero_sigma_is_ln2(self):
        loss = L.mc_softmax_nll(_cls_out([[0.0, 0.0]], [[0.0, 0.0]]), [0], 5, RngStream(0, "logit-noise"))
        assert loss.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_one_hot_labels_accepted(self):
        eps = np.zeros((2, 3, 2))
        out = _cls_out([[1.0, 0.0], [0.0, 2.0]], np.ones((2, 2)))
        a = L.mc_softmax_nll(out, [0, 1], 3, eps=eps).item()
        b = L.mc_softmax_nll(out, [[1, 0], [0, 1]], 3, eps=eps).item()
        assert a == b

    def test_t_below_one_rejected(self):
        with pytest.raises(ValueError):
            L.mc_softmax_nll(_cls_out([[0.0, 0.0]], [[1.0, 1.0]]), [0], 0, RngStream(0, "logit-noise"))

    def test_high_t_matches_brute_force(self):
        f, sigma = np.array([1.0, 0.0]), np.array([2.0, 2.0])
        p_bar = L.mc_softmax_probs(f[None], (sigma**2)[None], 10**5, RngStream(5, "logit-noise"))[0]
        # brute-force oracle: 10^7 draws from an unrelated generator, chunked
        g = np.random.default_rng(12345)
        acc, acc2, n = np.zeros(2), np.zeros(2), 0
        for _ in range(10):
            x = f + sigma * g.standard_normal((10**6, 2))
            p = np.exp(x - x.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            acc += p.sum(axis=0)
            acc2 += (p**2).sum(axis=0)
            n += len(p)
        ref = acc / n
        sd = np.sqrt(acc2 / n - ref**2)
        # standard error of the 10^5-sample estimate dominates
        assert np.all(np.abs(p_bar - ref) < 3 * sd / math.sqrt(10**5) + 3 * sd / math.sqrt(n))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 50), st.floats(-20, 20), st.floats(-20, 20), st.floats(1e-4, 25), st.floats(1e-4, 25))
    def test_p_bar_is_probability_vector(self, t_samples, f0, f1, s0, s1):
        p = L.mc_softmax_probs(np.array([[f0, f1]]), np.array([[s0, s1]]), t_samples, RngStream(1, "logit-noise"))
        assert np.all(p >= 0) and abs(p.sum() - 1.0) < 1e-6

    def test_shift_invariance_with_shared_noise(self):
        g = np.random.default_rng(2)
        f, s2, y = g.standard_normal((4, 2)), g.uniform(0.1, 3, (4, 2)), np.array([0, 1, 1, 0])
        eps = g.standard_normal((4, 7, 2))
        with T.precision(np.float64):
            a = L.mc_softmax_nll(_cls_out(f, s2), y, 7, eps=eps).item()
            b = L.mc_softmax_nll(_cls_out(f + 3.7, s2), y, 7, eps=eps).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_reparameterised_gradients_match_fd(self):
        g = np.random.default_rng(3)
        f0, s0, y = g.standard_normal((3, 2)), g.uniform(0.2, 2, (3, 2)), np.array([1, 0, 1])
        eps = g.standard_normal((3, 9, 2))
        worst = 0.0
        with T.precision(np.float64):
            f, s2 = Tensor(f0, True), Tensor(s0, True)
            L.mc_softmax_nll(L.ClassifierHeadOutput(f, s2), y, 9, eps=eps).backward()
            for leaf in (f, s2):
                for idx in np.ndindex(leaf.shape):
                    old = leaf.data[idx]
                    vals = []
                    for d in (1e-3, -1e-3):
                        leaf.data[idx] = old + d
                        vals.append(L.mc_softmax_nll(L.ClassifierHeadOutput(f, s2), y, 9, eps=eps).item())
                    leaf.data[idx] = old
                    worst = max(worst, relative_error(leaf.grad[idx], (vals[0] - vals[1]) / 2e-3, floor=1e-6))
        assert worst < 2e-2

    def test_probability_floor_keeps_loss_finite(self):
        out = _cls_out([[500.0, -500.0]], [[1e-8, 1e-8]])
        loss = L.mc_softmax_nll(out, [1], 2, RngStream(0, "logit-noise")).item()
        assert math.isfinite(loss) and loss == pytest.approx(-math.log(L.PROB_FLOOR), rel=1e-3)

    def test_variance_heads_are_exponentiated(self):
        out = L.split_classifier_output(Tensor([[1.0, 2.0, -3.0, 0.0]]))
        np.testing.assert_allclose(out.f.data, [[1.0, 2.0]])
        np.testing.assert_allclose(out.sigma2.data, [[math.exp(-3.0), 1.0]], rtol=1e-6)
