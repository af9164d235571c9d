import math

import numpy as np
import pytest

from fedbens import curvature as cv
from fedbens.nn import ModelSpec, logits
from fedbens.oracles import (
    CombinationError,
    GaussianPosterior,
    OracleScaleError,
    blr_local_posterior,
    blr_pooled_posterior,
    combine_gaussians_prop1,
    dense_expand,
    dense_gaussian_log_pdf,
    dense_ggn,
    grid_search_2d,
    logit_jacobian,
)
from fedbens.posterior import ClientPosterior, GlobalObjective, LaplaceComponent, global_grad, global_neg_log_posterior
from fedbens.federation import optimize_mode

from conftest import random_net
from helpers import blr_instance


class TestBLR:
    def test_scalar_case(self):
        post = blr_local_posterior(np.array([[1.0]]), np.array([1.0]), 1.0, cv.PriorSpec(1.0))
        np.testing.assert_allclose(post.precision, [[2.0]])
        np.testing.assert_allclose(post.mean, [0.5])

    def test_strong_prior_shrinks_to_zero(self, rng):
        X, y = rng.standard_normal((10, 3)), rng.standard_normal(10)
        assert np.abs(blr_local_posterior(X, y, 1.0, cv.PriorSpec(1e-12)).mean).max() < 1e-10

    def test_matches_gradient_descent_ridge(self, rng):
        X, y = rng.standard_normal((40, 5)), rng.standard_normal(40)
        noise, prior = 0.5, cv.PriorSpec(2.0)
        post = blr_local_posterior(X, y, noise, prior)
        H = X.T @ X / noise + prior.precision * np.eye(5)
        step = 1.0 / np.linalg.eigvalsh(H).max()
        w = np.zeros(5)
        for _ in range(20000):
            w -= step * (H @ w - X.T @ y / noise)
        assert np.abs(w - post.mean).max() < 1e-8


class TestPriorCorrectedProduct:
    def test_single_client_identity(self):
        prior, _, locals_ = blr_instance(1, d=4, C=1)
        out = combine_gaussians_prop1(locals_, prior)
        np.testing.assert_allclose(out.mean, locals_[0].mean, rtol=1e-12)
        np.testing.assert_allclose(out.precision, locals_[0].precision, rtol=1e-14)

    def test_equals_pooled(self):
        prior, data, locals_ = blr_instance(2, d=5, C=2, n_c=1)
        comb = combine_gaussians_prop1(locals_, prior)
        pooled = blr_pooled_posterior(data, 0.1, prior)
        np.testing.assert_allclose(comb.precision, pooled.precision, rtol=1e-10)
        np.testing.assert_allclose(comb.mean, pooled.mean, rtol=1e-10, atol=1e-12)

    def test_identical_locals(self, rng):
        A = rng.standard_normal((3, 3))
        P = A @ A.T + 20 * np.eye(3)
        g = GaussianPosterior(rng.standard_normal(3), P)
        out = combine_gaussians_prop1([g, g], cv.PriorSpec(0.1))
        np.testing.assert_allclose(out.precision, 2 * P - 10 * np.eye(3), rtol=1e-14)

    def test_pooled_is_order_independent(self):
        prior, data, _ = blr_instance(3, d=4, C=3)
        a = blr_pooled_posterior(data, 0.1, prior)
        b = blr_pooled_posterior(data[::-1], 0.1, prior)
        np.testing.assert_allclose(a.mean, b.mean, rtol=1e-12)

    def test_non_pd_rejected(self):
        g = GaussianPosterior(np.zeros(2), np.eye(2))
        with pytest.raises(CombinationError):
            combine_gaussians_prop1([g, g, g], cv.PriorSpec(0.1))


class TestDenseHelpers:
    def test_expand_diagonal(self):
        np.testing.assert_array_equal(dense_expand(cv.Diagonal(np.array([1.0, 2.0]))), np.diag([1.0, 2.0]))

    def test_log_pdf_at_mean(self, rng):
        A = rng.standard_normal((4, 4))
        P = A @ A.T + np.eye(4)
        m = rng.standard_normal(4)
        assert dense_gaussian_log_pdf(m, P, m) == pytest.approx(0.5 * np.linalg.slogdet(P)[1] - 2 * math.log(2 * math.pi), rel=1e-13)

    def test_jacobian_against_finite_differences(self, rng):
        spec, params, x, _ = random_net(rng, (3, 4, 2), "tanh", n=1)
        J = logit_jacobian(params, spec, x[0])
        h = 1e-6
        for j in range(0, spec.n_params, 5):
            e = np.zeros(spec.n_params)
            e[j] = h
            fd = (logits(params + e, spec, x)[0] - logits(params - e, spec, x)[0]) / (2 * h)
            np.testing.assert_allclose(J[:, j], fd, atol=1e-8)

    def test_ggn_is_psd(self, rng):
        spec, params, x, _ = random_net(rng, (3, 4, 3), "relu", n=5)
        G = dense_ggn(params, spec, x)
        assert np.linalg.eigvalsh(G).min() > -1e-12

    def test_scale_guard(self):
        spec = ModelSpec((30, 10))
        with pytest.raises(OracleScaleError):
            dense_ggn(np.zeros(spec.n_params), spec, np.zeros((1, 30)))


class TestGridSearch:
    def test_origin(self):
        w, v = grid_search_2d(lambda w: float(w @ w), ((-1, 1), (-1, 1)), 101)
        np.testing.assert_array_equal(w, [0.0, 0.0])
        assert v == 0.0

    def test_grid_spacing_bound(self):
        c = np.array([0.3, -0.2])
        w, _ = grid_search_2d(lambda w: float((w - c) @ (w - c)), ((-1, 1), (-1, 1)), 1001)
        assert np.abs(w - c).max() <= 2 / 1000

    def test_resolution_guard(self):
        with pytest.raises(ValueError):
            grid_search_2d(lambda w: 0.0, ((0, 1), (0, 1)), 5)

    def test_bimodal_toy_agrees_with_adam(self):
        # two clients in 2-D, each a two-component mixture; the product has a dominant mode
        def comp(m, p):
            return LaplaceComponent(np.array(m, float), cv.Diagonal(np.array(p, float)))

        clients = [
            ClientPosterior([comp([1.0, 1.0], [4, 4]), comp([-1.0, 0.5], [4, 4])], client_id=0),
            ClientPosterior([comp([1.2, 0.8], [3, 5]), comp([0.0, -1.5], [4, 4])], client_id=1),
        ]
        obj = GlobalObjective(clients, cv.PriorSpec(10.0))
        w_grid, _ = grid_search_2d(lambda w: global_neg_log_posterior(obj, w), ((-3, 3), (-3, 3)), 301)
        w_adam, _ = optimize_mode(obj, w_grid + 0.1, steps=3000, lr=1e-2, eval_every=1)
        assert np.abs(global_grad(obj, w_adam)).max() < 1e-3
        assert np.abs(w_grid - w_adam).max() <= 6 / 300
