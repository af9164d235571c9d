import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg

from fedbens import curvature as cv
from fedbens.oracles import combine_gaussians_prop1, dense_expand, dense_gaussian_log_pdf
from fedbens.posterior import (
    ClientPosterior,
    GlobalObjective,
    LaplaceComponent,
    component_log_density,
    global_grad,
    global_neg_log_posterior,
    mixture_grad,
    mixture_log_density,
    responsibilities,
)

from helpers import blr_instance, central_diff, structured_objective

PRIOR = cv.PriorSpec(0.1)


def diag_comp(mean, diag):
    return LaplaceComponent(np.asarray(mean, float), cv.Diagonal(np.asarray(diag, float)))


def dense_comp(mean, prec):
    return LaplaceComponent(np.asarray(mean, float), cv.DiagPlusLastFull(np.empty(0), prec))


class TestComponent:
    def test_at_mean(self):
        c = diag_comp([1.0, 2.0, 3.0], [2.0, 3.0, 4.0])
        assert component_log_density(c, c.mean) == c.log_norm
        assert c.log_norm == pytest.approx(0.5 * math.log(24) - 1.5 * math.log(2 * math.pi), rel=1e-15)

    def test_standard_normal(self):
        c = diag_comp([0.0, 0.0], [1.0, 1.0])
        assert component_log_density(c, np.array([1.0, 1.0])) == pytest.approx(-math.log(2 * math.pi) - 1, rel=1e-15)

    def test_against_dense_pdf(self, rng):
        spec, obj = structured_objective(rng, "kronecker", 1, 3, dims=(4, 6, 3))
        for cp in obj.clients:
            comp = cp.components[0]
            w = comp.mean + 0.05 * rng.standard_normal(comp.dim)
            ref = dense_gaussian_log_pdf(comp.mean, dense_expand(comp.precision), w)
            assert abs(component_log_density(comp, w) - ref) < 1e-8

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            component_log_density(diag_comp([0.0, 0.0], [1.0, 1.0]), np.zeros(3))


class TestMixture:
    def test_single_component(self, rng):
        c = diag_comp(rng.standard_normal(4), rng.uniform(1, 3, 4))
        w = rng.standard_normal(4)
        cp = ClientPosterior([c])
        assert mixture_log_density(cp, w) == pytest.approx(component_log_density(c, w), rel=1e-15)
        np.testing.assert_array_equal(responsibilities(cp, w), [1.0])

    def test_identical_components(self, rng):
        c = diag_comp(rng.standard_normal(4), rng.uniform(1, 3, 4))
        w = rng.standard_normal(4)
        cp = ClientPosterior([c, c])
        assert mixture_log_density(cp, w) == pytest.approx(component_log_density(c, w), rel=1e-14)
        np.testing.assert_allclose(responsibilities(cp, w), [0.5, 0.5], rtol=1e-15)

    def test_dominant_component(self):
        sharp = diag_comp([0.0, 0.0], [1e4, 1e4])
        broad = diag_comp([50.0, 50.0], [1.0, 1.0])
        cp = ClientPosterior([sharp, broad])
        # the broad component is ~5000 nats down at the sharp mean
        assert mixture_log_density(cp, sharp.mean) == pytest.approx(sharp.log_norm - math.log(2), abs=1e-12)
        assert responsibilities(cp, sharp.mean)[0] > 0.99

    def test_finite_far_in_tails(self):
        cp = ClientPosterior([diag_comp([0.0], [1e8]), diag_comp([1.0], [1e8])])
        w = np.array([1e3])
        assert np.isfinite(mixture_log_density(cp, w))
        assert mixture_log_density(cp, w) < -1e6
        assert np.all(np.isfinite(mixture_grad(cp, w)))
        r = responsibilities(cp, w)
        assert r.sum() == pytest.approx(1.0, abs=1e-12)

    def test_grad_zero_at_single_mean(self, rng):
        c = diag_comp(rng.standard_normal(3), rng.uniform(1, 3, 3))
        np.testing.assert_array_equal(mixture_grad(ClientPosterior([c]), c.mean), 0.0)

    def test_grad_zero_at_symmetric_midpoint(self):
        cp = ClientPosterior([diag_comp([-1.0], [2.0]), diag_comp([1.0], [2.0])])
        assert mixture_grad(cp, np.array([0.0]))[0] == 0.0

    @pytest.mark.parametrize("kind", ["diagonal", "diag_last_full", "kronecker"])
    def test_grad_finite_differences(self, rng, kind):
        _, obj = structured_objective(rng, kind, 3, 1)
        cp = obj.clients[0]
        w = cp.components[1].mean + 0.02 * rng.standard_normal(cp.dim)
        fd = central_diff(lambda v: mixture_log_density(cp, v), w)
        g = mixture_grad(cp, w)
        assert np.max(np.abs(fd - g)) / np.max(np.abs(g)) < 1e-5

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 100.0))
    def test_responsibilities_on_simplex(self, seed, scale):
        rng = np.random.default_rng(seed)
        cp = ClientPosterior([diag_comp(rng.standard_normal(3) * scale, rng.uniform(0.1, 10, 3)) for _ in range(4)])
        r = responsibilities(cp, rng.standard_normal(3) * scale)
        assert np.all(r >= 0)
        assert r.sum() == pytest.approx(1.0, abs=1e-12)


class TestGlobalObjective:
    def test_single_client_has_no_prior_term(self, rng):
        cp = ClientPosterior([diag_comp(rng.standard_normal(3), rng.uniform(1, 2, 3))])
        g = GlobalObjective([cp], PRIOR)
        w = rng.standard_normal(3)
        assert global_neg_log_posterior(g, w) == -mixture_log_density(cp, w)
        np.testing.assert_array_equal(global_grad(g, cp.components[0].mean), 0.0)

    def test_identical_clients_minimized_at_shared_mean(self, rng):
        prec = rng.uniform(20, 30, 4)  # well above (C-1) * tau = 10
        mean = rng.standard_normal(4)
        g = GlobalObjective([ClientPosterior([diag_comp(mean, prec)], client_id=c) for c in range(2)], PRIOR)
        # stationary point of 2*N(mean, prec) / prior is (2 prec - tau)^-1 2 prec mean
        w_star = 2 * prec * mean / (2 * prec - PRIOR.precision)
        np.testing.assert_allclose(global_grad(g, w_star), 0.0, atol=1e-12)

    def test_identical_clients_flat_prior_limit(self, rng):
        prec = rng.uniform(1, 2, 3)
        mean = rng.standard_normal(3)
        g = GlobalObjective([ClientPosterior([diag_comp(mean, prec)], client_id=c) for c in range(2)], cv.PriorSpec(1e12))
        np.testing.assert_allclose(global_grad(g, mean), 0.0, atol=1e-11)

    @pytest.mark.parametrize("kind", ["diagonal", "diag_last_full", "kronecker"])
    @pytest.mark.parametrize("M,C", [(1, 1), (3, 2), (3, 5)])
    def test_grad_finite_differences(self, rng, kind, M, C):
        _, obj = structured_objective(rng, kind, M, C)
        w = obj.clients[0].components[0].mean + 0.02 * rng.standard_normal(obj.dim)
        fd = central_diff(lambda v: global_neg_log_posterior(obj, v), w)
        g = global_grad(obj, w)
        assert np.max(np.abs(fd - g)) / np.max(np.abs(g)) < 1e-5
        val, g2 = obj.value_and_grad(w)
        assert val == pytest.approx(global_neg_log_posterior(obj, w), rel=1e-13)
        np.testing.assert_allclose(g2, g, rtol=1e-12, atol=1e-12)

    def test_conjugate_stationary_point(self):
        prior, _, locals_ = blr_instance(0, d=6, C=3, n_c=10)
        comb = combine_gaussians_prop1(locals_, prior)
        g = GlobalObjective([ClientPosterior([dense_comp(p.mean, p.precision)], client_id=c) for c, p in enumerate(locals_)], prior)
        grad = global_grad(g, comb.mean)
        assert np.max(np.abs(grad)) < 1e-9 * np.max(np.abs(locals_[0].precision @ locals_[0].mean))

    def test_client_order_is_irrelevant(self, rng):
        _, obj = structured_objective(rng, "diagonal", 2, 4)
        shuffled = GlobalObjective(list(reversed(obj.clients)), obj.prior)
        w = rng.standard_normal(obj.dim)
        assert global_neg_log_posterior(obj, w) == global_neg_log_posterior(shuffled, w)
        assert global_grad(obj, w).tobytes() == global_grad(shuffled, w).tobytes()

    def test_removing_a_client_recovers_smaller_objective(self, rng):
        _, obj = structured_objective(rng, "kronecker", 2, 3)
        small = GlobalObjective(obj.clients[:2], obj.prior)
        rebuilt = GlobalObjective(GlobalObjective(obj.clients, obj.prior).clients[:2], obj.prior)
        w = rng.standard_normal(obj.dim)
        assert global_neg_log_posterior(small, w) == global_neg_log_posterior(rebuilt, w)

    def test_rejects_mixed_dims(self):
        with pytest.raises(ValueError):
            GlobalObjective([ClientPosterior([diag_comp([0.0], [1.0])]), ClientPosterior([diag_comp([0.0, 0.0], [1.0, 1.0])])], PRIOR)
