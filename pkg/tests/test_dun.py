import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dunbias import dun, numerics as nx
from dunbias.dun import DepthPosterior, GaussianMixture, TrainSchedule
from dunbias.network import NetworkConfig

from conftest import check_grad


def tiny_model(rng, depth=3, width=8, d_in=2, prior="uniform"):
    return dun.create(NetworkConfig(input_dim=d_in, width=width, n_hidden=depth), rng, prior=prior)


def toy_data(rng, n=20, d_in=2):
    x = rng.normal(size=(n, d_in))
    y = np.sin(x[:, 0]) + 0.5 * x[:, 1] + 0.1 * rng.normal(size=n)
    return x, y


class TestDepthPosterior:
    def test_normalization_enforced(self):
        with pytest.raises(ValueError):
            DepthPosterior(np.log([0.5, 0.6]))

    def test_priors(self):
        assert np.allclose(DepthPosterior.uniform(4).probs, 0.25)
        p = DepthPosterior.shallow(3).probs
        np.testing.assert_allclose(p, np.array([1, 0.75, 0.5625]) / 2.3125)

    def test_expected_depth(self):
        assert DepthPosterior(np.log([0.25, 0.25, 0.5])).expected_depth() == pytest.approx(1.25)


class TestPerDepthLogLik:
    def test_matches_manual(self, rng):
        model = tiny_model(rng)
        x, y = toy_data(rng, 6)
        ll = dun.per_depth_log_lik(model, x, y).data
        from dunbias.network import forward_all_depths

        outs = forward_all_depths(model.params, x).means_matrix().data
        lv = float(model.params.log_noise_var.data)
        manual = np.array([[-nx.gaussian_nll(y[n], outs[n, i], lv) for i in range(4)] for n in range(6)])
        np.testing.assert_allclose(ll, manual, rtol=1e-13)

    def test_identical_predictions_identical_columns(self, rng):
        model = tiny_model(rng)
        for blk in model.params.hidden:
            blk.weight.data[:] = 0.0
            blk.bn.beta.data[:] = -1.0
        x, y = toy_data(rng, 5)
        ll = dun.per_depth_log_lik(model, x, y).data
        assert np.all(ll == ll[:, :1])

    def test_gradient(self, rng):
        model = tiny_model(rng, depth=2, width=6)
        x, y = toy_data(rng, 5)
        params = model.params.parameters()
        assert check_grad(lambda: nx.tsum(dun.per_depth_log_lik(model, x, y, mode="train")), params) < 1e-4

    def test_empty_batch(self, rng):
        with pytest.raises(ValueError):
            dun.per_depth_log_lik(tiny_model(rng), np.zeros((0, 2)), np.zeros(0))


class TestExactInference:
    def test_hand_mll_and_posterior(self):
        ll = np.log([0.2, 0.6])
        prior = np.log([0.5, 0.5])
        assert dun.mll_from_loglik(ll, prior) == pytest.approx(math.log(0.4), abs=1e-15)
        np.testing.assert_allclose(dun.posterior_from_loglik(ll, prior).probs, [0.25, 0.75], rtol=0, atol=1e-15)

    def test_single_depth(self):
        assert dun.mll_from_loglik([-12.5], [0.0]) == -12.5

    def test_uniform_equal_likelihoods(self):
        np.testing.assert_allclose(dun.posterior_from_loglik([-3.0] * 4, np.log(np.full(4, 0.25))).probs, 0.25)

    @settings(max_examples=50)
    @given(st.lists(st.floats(-1e5, 0, allow_nan=False), min_size=1, max_size=12))
    def test_log_space_normalization(self, ll):
        ll = np.array(ll)
        prior = np.log(np.full(ll.size, 1 / ll.size))
        post = dun.posterior_from_loglik(ll, prior)
        assert abs(post.probs.sum() - 1) < 1e-12
        assert dun.mll_from_loglik(ll, prior) >= np.max(prior + ll) - 1e-9
        # ordering follows the per-depth likelihoods under a uniform prior
        for i in range(ll.size):
            for j in range(ll.size):
                if ll[i] > ll[j] + 1e-6:
                    assert post.log_probs[i] > post.log_probs[j]

    def test_concentrates_on_generating_depth(self):
        gen = np.random.default_rng(11)
        teacher = tiny_model(gen, depth=3, width=10)
        x = gen.normal(size=(200, 2))
        from dunbias.network import forward_all_depths

        y = forward_all_depths(teacher.params, x).means_matrix().data[:, 2] + 0.05 * gen.normal(size=200)
        teacher.params.log_noise_var.data = np.array(math.log(0.05**2))
        post = dun.exact_posterior(teacher, x, y)
        assert post.probs.argmax() == 2 and post.probs[2] > 0.99


class TestElbo:
    def _setup(self, rng):
        model = tiny_model(rng)
        x, y = toy_data(rng)
        return model, x, y

    def test_tight_at_exact_posterior(self, rng):
        model, x, y = self._setup(rng)
        post = dun.exact_posterior(model, x, y)
        model.logits.data = post.log_probs.copy()
        assert dun.elbo(model, x, y).item() == pytest.approx(dun.marginal_log_lik(model, x, y), abs=1e-9)

    def test_perturbed_is_smaller(self, rng):
        model, x, y = self._setup(rng)
        mll = dun.marginal_log_lik(model, x, y)
        post = dun.exact_posterior(model, x, y)
        for k in range(20):
            model.logits.data = post.log_probs + rng.normal(scale=0.5, size=4)
            assert dun.elbo(model, x, y).item() < mll - 1e-6

    def test_kl_zero_at_prior(self, rng):
        model, _, _ = self._setup(rng)
        kl = dun.kl_categorical(nx.log_softmax(model.logits), model.prior.log_probs)
        assert kl.item() == pytest.approx(0.0, abs=1e-15)

    def test_zero_weights_gives_minus_kl(self, rng):
        model, x, y = self._setup(rng)
        model.logits.data = np.array([0.3, -1.0, 2.0, 0.0])
        kl = dun.kl_categorical(nx.log_softmax(model.logits), model.prior.log_probs).item()
        assert dun.elbo(model, x, y, weights=np.zeros(len(y))).item() == pytest.approx(-kl, abs=1e-14)

    def test_unit_weights_bitwise(self, rng):
        model, x, y = self._setup(rng)
        assert dun.elbo(model, x, y).item() == dun.elbo(model, x, y, weights=np.ones(len(y))).item()

    def test_weight_mismatch(self, rng):
        model, x, y = self._setup(rng)
        with pytest.raises(ValueError):
            dun.elbo(model, x, y, weights=np.ones(3))

    def test_gradient(self, rng):
        model = tiny_model(rng, depth=3, width=6)
        x, y = toy_data(rng, 6)
        w = rng.uniform(0.2, 2.0, 6)
        model.logits.data = rng.normal(size=4)
        assert check_grad(lambda: dun.elbo(model, x, y, w, mode="train"), model.parameters()) < 1e-4


class TestTrain:
    def test_constant_target(self):
        gen = np.random.default_rng(0)
        x = gen.normal(size=(40, 2))
        y = np.full(40, 1.5)
        model = tiny_model(gen)
        dun.train(model, (x, y), (x, y), schedule=TrainSchedule(iterations=400, learning_rate=1e-2))
        assert abs(dun.predict(model, x).mean().mean() - 1.5) < 0.2

    def test_checkpoint_is_best(self):
        gen = np.random.default_rng(1)
        x, y = toy_data(gen, 30)
        xv, yv = toy_data(gen, 15)
        model = tiny_model(gen)
        dun.train(model, (x, y), (xv, yv), schedule=TrainSchedule(iterations=60, learning_rate=1e-2))
        vals = [v for _, _, v in model.checkpoint_log]
        final_val = vals[-1]
        assert dun.elbo(model, xv, yv).item() == pytest.approx(max(vals), abs=1e-9)
        assert max(vals) >= final_val

    def test_unit_lure_weights_same_trajectory(self):
        def run(weights):
            gen = np.random.default_rng(4)
            x, y = toy_data(gen, 25)
            model = tiny_model(gen)
            dun.train(model, (x, y), (x, y), weights=weights, schedule=TrainSchedule(iterations=30))
            return model.params.state_arrays(), model.logits.data.tobytes()

        a, la = run(None)
        b, lb = run(np.ones(25))
        assert la == lb and all(np.array_equal(a[k], b[k]) for k in a)

    def test_divergence_reports_iteration(self):
        gen = np.random.default_rng(0)
        x, y = toy_data(gen, 10)
        model = tiny_model(gen)
        with pytest.raises(dun.TrainingError) as err:
            with np.errstate(all="ignore"):
                dun.train(model, (x, 1e200 * y), (x, y), schedule=TrainSchedule(iterations=5))
        assert err.value.iteration >= 1


class TestPredict:
    def test_point_mass_equals_single_gaussian(self, rng):
        model = tiny_model(rng)
        model.logits.data = np.log(np.array([1e-300, 1.0, 1e-300, 1e-300]))
        model.logits.data -= nx.log_sum_exp(model.logits.data)
        x, y = toy_data(rng, 5)
        from dunbias.network import forward_all_depths

        mu = forward_all_depths(model.params, x).means_matrix().data[:, 1]
        lv = float(model.params.log_noise_var.data)
        expect = np.mean([nx.gaussian_nll(y[i], mu[i], lv) for i in range(5)])
        assert dun.test_nll(model, x, y) == pytest.approx(expect, rel=1e-12)
        from dunbias import acquisition

        np.testing.assert_allclose(acquisition.bald_dun(model, x), 0.0, atol=1e-12)

    def test_moment_matching(self):
        mix = GaussianMixture(np.array([[-1.0, 1.0], [0.0, 3.0]]), 0.5, np.array([0.25, 0.75]))
        np.testing.assert_allclose(mix.mean(), [0.5, 2.25])
        np.testing.assert_allclose(mix.var(), [0.5 + 0.75, 0.5 + 0.25 * 0.75 * 9])
        assert np.all(mix.var() >= mix.variance)

    def test_density_integrates_to_one(self):
        mix = GaussianMixture(np.array([[-1.0, 0.5, 2.0]]), 0.3, np.array([0.2, 0.5, 0.3]))
        grid = np.linspace(-10, 12, 20001)
        dens = np.exp(GaussianMixture(np.repeat(mix.means, grid.size, 0), 0.3, mix.weights).log_density(grid))
        assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-8)

    def test_hand_evaluation(self):
        means = np.array([[0.0, 1.0], [2.0, -1.0], [0.5, 0.5], [-3.0, 3.0], [1.0, 1.5]])
        y = np.array([0.2, 0.0, 0.5, 0.1, 2.0])
        w, var = np.array([0.3, 0.7]), 0.8
        import mpmath

        mpmath.mp.dps = 40
        total = mpmath.mpf(0)
        for i in range(5):
            dens = sum(
                mpmath.mpf(w[k]) * mpmath.npdf(mpmath.mpf(y[i]), mpmath.mpf(means[i, k]), mpmath.sqrt(mpmath.mpf(var)))
                for k in range(2)
            )
            total -= mpmath.log(dens)
        expect = float(total / 5)
        assert dun.mixture_test_nll(GaussianMixture(means, var, w), y) == pytest.approx(expect, rel=1e-13)

    def test_permutation_invariance(self, rng):
        means = rng.normal(size=(6, 4))
        w = nx.softmax(rng.normal(size=4))
        y = rng.normal(size=6)
        perm = [2, 0, 3, 1]
        a = dun.mixture_test_nll(GaussianMixture(means, 0.7, w), y)
        b = dun.mixture_test_nll(GaussianMixture(means[:, perm], 0.7, w[perm]), y)
        assert a == pytest.approx(b, rel=1e-14)
