import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from niva import gaussian as G


def general_noise_marginal(mean, var, weight, bias, noise_cov):
    """Oracle with a full noise covariance; reduces to the model path for eps^2 I."""
    return weight @ mean + bias, weight @ np.diag(var) @ weight.T + noise_cov


def general_noise_posterior(mean, var, weight, bias, noise_cov, obs):
    noise_prec = np.linalg.inv(noise_cov)
    prec = np.diag(1.0 / var) + weight.T @ noise_prec @ weight
    cov = np.linalg.inv(prec)
    return cov @ (weight.T @ noise_prec @ (obs - bias) + mean / var), cov


def random_case(rng, obs_dim, latent_dim):
    prior = G.DiagGaussian(rng.normal(size=latent_dim), rng.uniform(0.2, 2.0, latent_dim))
    em = G.EmissionModel(rng.normal(size=(obs_dim, latent_dim)), rng.normal(size=obs_dim), rng.uniform(0.1, 1.0))
    return prior, em


def test_marginal_direct_substitution():
    prior = G.DiagGaussian([1.0, 2.0], [0.25, 0.25])
    marg = G.marginal_predictive(prior, G.EmissionModel(np.eye(2), np.zeros(2), 0.1))
    np.testing.assert_allclose(marg.mean, [1, 2])
    np.testing.assert_allclose(marg.cov, np.diag([0.26, 0.26]), atol=1e-15)


def test_marginal_degenerate_prior_limit():
    em = G.EmissionModel(np.array([[1.0, 2.0], [0.5, -1.0], [0.0, 3.0]]), np.zeros(3), 0.3)
    marg = G.marginal_predictive(G.DiagGaussian(np.zeros(2), np.full(2, 1e-14)), em)
    np.testing.assert_allclose(marg.cov, 0.09 * np.eye(3), atol=1e-12)


def test_scalar_posterior_textbook():
    post = G.posterior(G.DiagGaussian([0.0], [1.0]), G.EmissionModel([[1.0]], [0.0], 1.0), [2.0])
    assert post.mean[0] == pytest.approx(1.0, abs=1e-15)
    assert post.cov[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_consistent_observation_keeps_prior_mean(rng):
    prior, em = random_case(rng, 3, 5)
    np.testing.assert_allclose(G.posterior(prior, em, em.predict(prior.mean)).mean, prior.mean, atol=1e-12)
    np.testing.assert_allclose(G.posterior_mean(prior, em, em.predict(prior.mean)), prior.mean, atol=1e-12)


def test_joint_density_examples(rng):
    assert G.joint_log_density(G.DiagGaussian([0.0], [1.0]), G.EmissionModel([[1.0]], [0.0], 1.0),
                               [0.0], [0.0]) == pytest.approx(-math.log(2 * math.pi), abs=1e-15)
    prior, em = random_case(rng, 4, 3)
    mode = prior.logpdf(prior.mean) + stats.multivariate_normal(np.zeros(4), em.noise_scale ** 2).logpdf(np.zeros(4))
    assert G.joint_log_density(prior, em, prior.mean, em.predict(prior.mean)) == pytest.approx(mode, abs=1e-12)


def test_general_noise_oracle_specializes(rng):
    for _ in range(50):
        prior, em = random_case(rng, int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        obs = rng.normal(size=em.obs_dim)
        noise = em.noise_scale ** 2 * np.eye(em.obs_dim)
        m, c = general_noise_marginal(prior.mean, prior.var, em.weight, em.bias, noise)
        marg = G.marginal_predictive(prior, em)
        np.testing.assert_allclose(marg.mean, m, atol=1e-10)
        np.testing.assert_allclose(marg.cov, c, atol=1e-10)
        pm, pc = general_noise_posterior(prior.mean, prior.var, em.weight, em.bias, noise, obs)
        post = G.posterior(prior, em, obs)
        np.testing.assert_allclose(post.mean, pm, atol=1e-8)
        np.testing.assert_allclose(post.cov, pc, atol=1e-8)
        assert G.log_marginal_density(marg, obs) == pytest.approx(
            stats.multivariate_normal(m, c).logpdf(obs), abs=1e-9)


def test_bayes_identity_200_cases():
    rng = np.random.default_rng(11)
    for _ in range(200):
        prior, em = random_case(rng, int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        obs, s = rng.normal(size=em.obs_dim), rng.normal(size=em.latent_dim)
        resid = (G.joint_log_density(prior, em, s, obs)
                 - G.log_marginal_density(G.marginal_predictive(prior, em), obs)
                 - G.log_full_density(G.posterior(prior, em, obs), s))
        assert abs(resid) <= 1e-8


def test_sample_with_noise_examples():
    marg = G.FullGaussian(np.array([1.0, -2.0]), np.eye(2))
    np.testing.assert_array_equal(G.sample_with_noise(marg, np.zeros(2)), marg.mean)
    np.testing.assert_array_equal(G.sample_with_noise(marg, np.array([1.0, -1.0])), [2.0, -3.0])


def test_log_marginal_density_examples():
    for d in (1, 3, 6):
        g = G.FullGaussian(np.zeros(d), np.eye(d))
        assert G.log_marginal_density(g, np.zeros(d)) == pytest.approx(-0.5 * d * math.log(2 * math.pi), abs=1e-14)
    rng = np.random.default_rng(4)
    a = rng.normal(size=(3, 3))
    g = G.FullGaussian(rng.normal(size=3), a @ a.T + np.eye(3))
    o, c = rng.normal(size=3), rng.normal(size=3) * 10
    shifted = G.FullGaussian(g.mean + c, g.cov)
    assert G.log_marginal_density(g, o) == pytest.approx(G.log_marginal_density(shifted, o + c), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2 ** 31))
def test_contraction_and_loewner_order(obs_dim, latent_dim, seed):
    rng = np.random.default_rng(seed)
    prior, em = random_case(rng, obs_dim, latent_dim)
    obs = rng.normal(scale=3.0, size=obs_dim)
    post = G.posterior(prior, em, obs)
    before = np.linalg.norm(em.predict(prior.mean) - obs)
    after = np.linalg.norm(em.predict(post.mean) - obs)
    assert after <= before + 1e-12
    assert np.linalg.eigvalsh(np.diag(prior.var) - post.cov).min() >= -1e-10
    marg = G.marginal_predictive(prior, em)
    assert np.array_equal(marg.cov, marg.cov.T)
    assert np.linalg.eigvalsh(marg.cov).min() > 0


def test_invalid_inputs_rejected():
    with pytest.raises(ValueError):
        G.DiagGaussian([0.0], [0.0])
    with pytest.raises(ValueError):
        G.EmissionModel(np.eye(2), np.zeros(3))
    with pytest.raises(ValueError):
        G.posterior(G.DiagGaussian([0.0], [1.0]), G.EmissionModel([[1.0]], [0.0]), [np.nan])


def test_batched_log_marginal_matches_scalar_path(rng):
    prior, em = random_case(rng, 3, 6)
    means, var = rng.normal(size=(4, 6)), rng.uniform(0.1, 1.0, (4, 6))
    obs = rng.normal(size=(4, 3))
    batched = G.batched_log_marginal(obs, means, var, em.weight, em.bias, em.noise_scale)
    for i in range(4):
        marg = G.marginal_predictive(G.DiagGaussian(means[i], var[i]), em)
        assert batched[i] == pytest.approx(G.log_marginal_density(marg, obs[i]), abs=1e-10)
