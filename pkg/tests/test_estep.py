"""Mean-field inference tests: bound values against a scalar-loop oracle,
analytic gradients against finite differences, and the importance-sampling
upper-bound check on tiny instances."""

import json
import math

import numpy as np
import pytest

from pof import (FramePosterior, LbfgsConfig, NumericalError, PoFModel,
                 Spectrogram, ValidationError, elbo, elbo_grad, sample)
from pof.estep import (default_posterior_init, dump_posteriors, elbo_workspace,
                       floor_observations, infer_frame, infer_frames)
from conftest import (central_diff, elbo_oracle, importance_log_marginal,
                      random_feasible_posterior, random_frame, random_model)


def trivial_instance():
    """F=1, L=1, U=0, gamma=1, alpha=1, w=1, q=Gamma(1,1): the posterior is
    exact, so the bound equals log p(w) = -1 and is stationary."""
    model = PoFModel(np.zeros((1, 1)), alpha=np.ones(1), gamma=np.ones(1))
    post = FramePosterior(np.ones(1), np.ones(1))
    w = np.ones(1)
    return w, model, post


class TestElbo:
    def test_hand_computed_trivial_case(self):
        w, model, post = trivial_instance()
        assert elbo(w, model, post) == pytest.approx(-1.0, abs=1e-12)

    def test_infeasible_returns_neg_inf(self):
        w, model, _ = trivial_instance()
        model = PoFModel(np.full((1, 1), -0.7), alpha=np.ones(1), gamma=np.ones(1))
        post = FramePosterior(np.ones(1), np.full(1, 0.5))
        assert elbo(w, model, post) == -math.inf

    def test_boundary_is_infeasible(self):
        w = np.ones(1)
        model = PoFModel(np.full((1, 1), -0.5), alpha=np.ones(1), gamma=np.ones(1))
        post = FramePosterior(np.ones(1), np.full(1, 0.5))
        assert elbo(w, model, post) == -math.inf

    def test_matches_scalar_loop_oracle(self, rng):
        for _ in range(20):
            model = random_model(rng, 6, 3)
            post = random_feasible_posterior(rng, model)
            w = random_frame(rng, model)
            assert elbo(w, model, post) == pytest.approx(
                elbo_oracle(w, model, post), rel=1e-10
            )

    def test_below_importance_sampling_log_marginal(self, rng):
        for k in range(5):
            model = random_model(rng, 6, 3, u_scale=0.2)
            post = random_feasible_posterior(rng, model)
            w, _ = sample(model, 1, seed=k)
            w = w.data[:, 0]
            bound = elbo(w, model, post)
            log_p, se = importance_log_marginal(w, model, 200000, seed=100 + k)
            assert bound <= log_p + 3 * se

    def test_dimension_mismatch(self, rng):
        model = random_model(rng, 6, 3)
        post = random_feasible_posterior(rng, model)
        with pytest.raises(ValidationError):
            elbo(np.ones(5), model, post)

    def test_rejects_zero_entries(self, rng):
        model = random_model(rng, 3, 2)
        post = random_feasible_posterior(rng, model)
        with pytest.raises(ValidationError):
            elbo(np.array([1.0, 0.0, 1.0]), model, post)


class TestElboGrad:
    def test_stationary_at_exact_posterior(self):
        w, model, post = trivial_instance()
        d_nu, d_rho = elbo_grad(w, model, post)
        assert abs(d_nu[0]) < 1e-12
        assert abs(d_rho[0]) < 1e-12

    def test_matches_finite_differences(self, rng):
        for _ in range(20):
            model = random_model(rng, 6, 3)
            post = random_feasible_posterior(rng, model)
            w = random_frame(rng, model)
            d_nu, d_rho = elbo_grad(w, model, post)
            L = model.n_filters

            def fun(x):
                return elbo(w, model, FramePosterior(x[:L], x[L:]))

            fd = central_diff(fun, np.concatenate([post.nu, post.rho]), eps=1e-6)
            analytic = np.concatenate([d_nu, d_rho])
            denom = np.maximum(np.abs(fd), 1e-8)
            assert np.max(np.abs(analytic - fd) / denom) < 1e-5

    def test_large_alpha_prior_term_cancels(self):
        # with nu = rho = alpha the prior contribution to d/d nu is
        # (alpha-nu) psi1 + 1 - alpha/rho = 0
        alpha = 1e4
        model = PoFModel(np.zeros((1, 1)), alpha=[alpha], gamma=np.ones(1))
        post = FramePosterior(np.full(1, alpha), np.full(1, alpha))
        d_nu, _ = elbo_grad(np.ones(1), model, post)
        assert abs(d_nu[0]) < 1e-10

    def test_infeasible_point_raises(self):
        model = PoFModel(np.full((1, 1), -0.7), alpha=np.ones(1), gamma=np.ones(1))
        post = FramePosterior(np.ones(1), np.full(1, 0.5))
        with pytest.raises(NumericalError):
            elbo_grad(np.ones(1), model, post)


class TestWorkspace:
    def test_cached_quantities(self, rng):
        model = random_model(rng, 5, 3)
        post = random_feasible_posterior(rng, model)
        w = random_frame(rng, model)
        ws = elbo_workspace(w, model, post)
        assert np.allclose(ws.expect_a, post.nu / post.rho)
        expected = -(np.log1p(model.U / post.rho) @ post.nu)
        assert np.allclose(ws.log_mgf_sums, expected)


class TestInferFrame:
    def test_prior_recovered_when_likelihood_uninformative(self):
        # U = 0 makes the likelihood independent of a; optimum is the prior.
        model = PoFModel(np.zeros((4, 2)), alpha=np.ones(2), gamma=np.ones(4))
        init = FramePosterior(np.full(2, 0.5), np.full(2, 2.0))
        post, bound = infer_frame(np.ones(4), model, init, LbfgsConfig(grad_tol=1e-9))
        assert np.allclose(post.mean(), 1.0, atol=1e-6)
        assert bound >= elbo(np.ones(4), model, init) - 1e-12

    def test_never_decreases_bound(self, rng):
        for _ in range(10):
            model = random_model(rng, 8, 3)
            post0 = random_feasible_posterior(rng, model)
            w = random_frame(rng, model)
            start = elbo(w, model, post0)
            _, bound = infer_frame(w, model, post0)
            assert bound >= start - 1e-12

    def test_returned_posterior_feasible(self, rng):
        for _ in range(10):
            model = random_model(rng, 8, 3, u_scale=0.8)
            post0 = random_feasible_posterior(rng, model)
            w = random_frame(rng, model)
            post, _ = infer_frame(w, model, post0)
            assert np.all(model.U > -post.rho)

    def test_default_init_is_diffuse_gamma_draws(self, rng):
        model = random_model(rng, 4, 3, u_scale=0.01)
        draws = np.array(
            [default_posterior_init(model, seed=0, frame=t).nu for t in range(400)]
        ).ravel()
        # Gamma(100, 100): mean 1, sd 0.1
        assert abs(draws.mean() - 1.0) < 0.02
        assert abs(draws.std() - 0.1) < 0.02

    def test_default_init_lifted_to_feasible(self):
        U = np.array([[-3.0, 0.2], [0.5, -1.5]])
        model = PoFModel(U, alpha=np.ones(2), gamma=np.ones(2))
        for t in range(20):
            init = default_posterior_init(model, seed=1, frame=t)
            assert np.all(model.U > -init.rho)

    def test_infeasible_init_raises(self):
        model = PoFModel(np.full((1, 1), -2.0), alpha=np.ones(1), gamma=np.ones(1))
        init = FramePosterior(np.ones(1), np.ones(1))
        with pytest.raises(NumericalError):
            infer_frame(np.ones(1), model, init)

    def test_generative_coverage(self, rng):
        # posterior mean log-spectra should cover the true ones
        model = random_model(rng, 24, 3, u_scale=0.5)
        model = PoFModel(model.U, model.alpha, np.full(24, 30.0))
        spec, a_true = sample(model, 120, seed=5)
        results = infer_frames(spec, model, LbfgsConfig(), seed=0)
        hits = total = 0
        for t, r in enumerate(results):
            mean_log = model.U @ r.posterior.mean()
            var_log = (model.U**2) @ (r.posterior.nu / r.posterior.rho**2)
            true_log = model.U @ a_true[:, t]
            ok = np.abs(mean_log - true_log) <= 3.0 * np.sqrt(var_log) + 1e-9
            hits += int(np.count_nonzero(ok))
            total += ok.size
        assert hits / total >= 0.95


class TestInferFrames:
    def test_single_frame_equals_infer_frame(self, rng):
        model = random_model(rng, 6, 2)
        w = random_frame(rng, model)
        W = w[:, None]
        results = infer_frames(W, model, seed=3)
        init = default_posterior_init(model, seed=3, frame=0)
        post, bound = infer_frame(floor_observations(W)[:, 0], model, init)
        assert np.array_equal(results[0].posterior.nu, post.nu)
        assert np.array_equal(results[0].posterior.rho, post.rho)
        assert results[0].elbo == bound

    def test_permutation_equivariance(self, rng):
        model = random_model(rng, 6, 2)
        W = rng.lognormal(size=(6, 5))
        perm = np.array([3, 1, 4, 0, 2])
        inits = [random_feasible_posterior(rng, model) for _ in range(5)]
        res = infer_frames(W, model, init=inits)
        res_p = infer_frames(W[:, perm], model, init=[inits[t] for t in perm])
        for i, t in enumerate(perm):
            assert np.array_equal(res_p[i].posterior.nu, res[t].posterior.nu)
            assert np.array_equal(res_p[i].posterior.rho, res[t].posterior.rho)

    def test_serial_vs_parallel_bit_identical(self, rng):
        model = random_model(rng, 8, 3)
        W = rng.lognormal(size=(8, 12))
        serial = infer_frames(W, model, seed=7, threads=1)
        parallel = infer_frames(W, model, seed=7, threads=4)
        for a, b in zip(serial, parallel):
            assert np.array_equal(a.posterior.nu, b.posterior.nu)
            assert np.array_equal(a.posterior.rho, b.posterior.rho)
            assert a.elbo == b.elbo

    def test_dump_format(self, rng, tmp_path):
        model = random_model(rng, 4, 2)
        W = rng.lognormal(size=(4, 3))
        results = infer_frames(W, model)
        path = tmp_path / "post.json"
        dump_posteriors(results, path)
        doc = json.loads(path.read_text())
        assert [d["frame"] for d in doc] == [0, 1, 2]
        for d in doc:
            assert len(d["nu"]) == 2 and len(d["rho"]) == 2
            assert isinstance(d["elbo"], float)


class TestFloorObservations:
    def test_floor_level(self):
        W = np.array([[0.0, 2.0], [1.0, 0.0]])
        out = floor_observations(W)
        assert out.min() == 2.0 * 1e-10
        assert out.max() == 2.0

    def test_idempotent(self, rng):
        W = rng.lognormal(size=(4, 4))
        W[0, 0] = 0.0
        once = floor_observations(W)
        assert np.array_equal(floor_observations(once), once)

    def test_all_zero_rejected(self):
        with pytest.raises(ValidationError):
            floor_observations(np.zeros((3, 3)))
