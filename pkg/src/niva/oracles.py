"""Numerical cross-checks for the closed-form Gaussian and E-step algebra.

Each check returns an ``OracleResult`` holding the worst observed error and
the tolerance it is judged against. ``run_all`` drives the ``oracle``
command-line entry point.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy import integrate, stats

from . import gaussian as G
from .latent import DirichletState, dirichlet_update, responsibilities


@dataclass
class OracleResult:
    name: str
    max_error: float
    tolerance: float
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return (f"{status} {self.name}: max err {self.max_error:.3e} "
                f"(tol {self.tolerance:.0e}, {self.seconds:.2f} s)")


def random_problem(rng: np.random.Generator, obs_dim: int, latent_dim: int):
    """Random prior, emission and observation drawn from the joint model."""
    prior = G.DiagGaussian(rng.normal(size=latent_dim), rng.uniform(0.2, 2.0, latent_dim))
    em = G.EmissionModel(rng.normal(size=(obs_dim, latent_dim)), rng.normal(size=obs_dim),
                         rng.uniform(0.2, 1.0))
    s = prior.mean + np.sqrt(prior.var) * rng.standard_normal(latent_dim)
    obs = em.predict(s) + em.noise_scale * rng.standard_normal(obs_dim)
    return prior, em, s, obs


def bayes_identity(cases: int = 200, seed: int = 0, max_dim: int = 8) -> OracleResult:
    """log p(s) + log p(o|s) against log p(o) + log p(s|o) at a fresh latent point."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        obs_dim, latent_dim = rng.integers(1, max_dim + 1, size=2)
        prior, em, _, obs = random_problem(rng, obs_dim, latent_dim)
        probe = prior.mean + rng.normal(size=latent_dim)
        lhs = G.joint_log_density(prior, em, probe, obs)
        rhs = (G.log_marginal_density(G.marginal_predictive(prior, em), obs)
               + G.log_full_density(G.posterior(prior, em, obs), probe))
        worst = max(worst, abs(lhs - rhs))
    return OracleResult("bayes-identity", worst, 1e-8, time.perf_counter() - start)


def quadrature(seed: int = 0, probes: int = 5, grid: int = 801, width: float = 10.0) -> OracleResult:
    """Closed-form marginal density and posterior mean against a trapezoid grid.

    Uses a 2-D latent and a 3-D observation. The grid spans ``width``
    prior standard deviations either side of the mean; the Gaussian
    integrand decays fast enough that the trapezoid rule is accurate to
    far below the tolerance.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    prior = G.DiagGaussian(rng.normal(size=2), rng.uniform(0.5, 1.5, 2))
    em = G.EmissionModel(rng.normal(size=(3, 2)), rng.normal(size=3), 0.7)
    sd = np.sqrt(prior.var)
    axes = [np.linspace(m - width * s, m + width * s, grid) for m, s in zip(prior.mean, sd)]
    s1, s2 = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([s1, s2], axis=-1)
    log_prior = stats.norm.logpdf(pts, prior.mean, sd).sum(-1)
    marg = G.marginal_predictive(prior, em)
    worst = 0.0
    for _ in range(probes):
        obs = em.predict(prior.mean + sd * rng.standard_normal(2)) + em.noise_scale * rng.standard_normal(3)
        resid = obs - (pts @ em.weight.T + em.bias)
        log_lik = stats.norm.logpdf(resid, 0.0, em.noise_scale).sum(-1)
        joint = np.exp(log_prior + log_lik)
        density = integrate.trapezoid(integrate.trapezoid(joint, axes[1], axis=1), axes[0])
        post_mean = np.array([
            integrate.trapezoid(integrate.trapezoid(joint * pts[..., d], axes[1], axis=1), axes[0])
            for d in range(2)]) / density
        closed = np.exp(G.log_marginal_density(marg, obs))
        worst = max(worst, abs(density - closed) / max(closed, 1.0),
                    np.max(np.abs(post_mean - G.posterior(prior, em, obs).mean)))
    return OracleResult("quadrature", float(worst), 1e-6, time.perf_counter() - start)


def _step_evidence(obs, weight, bias, noise, mean, var):
    """p(o_t) for a scalar latent, integrated numerically."""
    sd = np.sqrt(var)

    def integrand(s):
        return stats.norm.pdf(s, mean, sd) * stats.norm.pdf(obs, weight * s + bias, noise)

    centre = (mean / var + weight * (obs - bias) / noise ** 2) / (1 / var + weight ** 2 / noise ** 2)
    value, _ = integrate.quad(integrand, centre - 40 * sd, centre + 40 * sd, points=[centre, mean],
                              epsabs=0.0, epsrel=1e-13, limit=200)
    return value


def enumeration(cases: int = 20, seed: int = 0, k: int = 2, steps: int = 3) -> OracleResult:
    """Responsibilities against the exact intention posterior by enumeration.

    Each intention owns per-step scalar priors; the posterior over ``z`` is
    computed from numerically integrated evidences and compared with the
    softmax of closed-form log marginals. The Dirichlet update is checked
    for exact equality in the same pass.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        weight, bias, noise = rng.uniform(0.5, 1.5), rng.normal(), rng.uniform(0.3, 1.0)
        means = rng.normal(scale=1.5, size=(k, steps))
        variances = rng.uniform(0.3, 1.5, size=(k, steps))
        z = rng.integers(k)
        obs = weight * (means[z] + np.sqrt(variances[z]) * rng.standard_normal(steps)) + bias
        obs = obs + noise * rng.standard_normal(steps)
        evidence = np.array([np.prod([_step_evidence(obs[t], weight, bias, noise, means[j, t], variances[j, t])
                                      for t in range(steps)]) for j in range(k)])
        exact = evidence / evidence.sum()
        em = G.EmissionModel([[weight]], [bias], noise)
        log_marg = np.array([[G.log_marginal_density(
            G.marginal_predictive(G.DiagGaussian([means[j, t]], [variances[j, t]]), em), [obs[t]])
            for t in range(steps)] for j in range(k)])
        phi = responsibilities(log_marg).probs
        worst = max(worst, float(np.max(np.abs(phi - exact))))
        prior = DirichletState.symmetric(k, rng.uniform(0.5, 2.0))
        updated = dirichlet_update(prior, phi[None])
        if not np.array_equal(updated.concentration, prior.prior_concentration + phi):
            worst = np.inf
    return OracleResult("e-step-enumeration", worst, 1e-10, time.perf_counter() - start)


def sampling_covariance(draws: int = 100_000, seed: int = 0, obs_dim: int = 3, latent_dim: int = 6,
                        tolerance: float = 0.05) -> OracleResult:
    """Relative Frobenius error of the empirical covariance of ``sample_with_noise``."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    prior, em, _, _ = random_problem(rng, obs_dim, latent_dim)
    marg = G.marginal_predictive(prior, em)
    samples = G.sample_with_noise(marg, rng.standard_normal((draws, obs_dim)))
    err = np.linalg.norm(np.cov(samples, rowvar=False) - marg.cov) / np.linalg.norm(marg.cov)
    return OracleResult("sampling-covariance", float(err), tolerance, time.perf_counter() - start)


def contraction(cases: int = 1000, seed: int = 0, max_dim: int = 8) -> OracleResult:
    """Largest growth of the observation residual after the posterior update.

    The reported error is ``max(0, after - before)``, so any case where
    conditioning moves the prediction away from the observation shows up.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        obs_dim, latent_dim = rng.integers(1, max_dim + 1, size=2)
        prior, em, _, _ = random_problem(rng, obs_dim, latent_dim)
        obs = rng.normal(scale=3.0, size=obs_dim)
        before = np.linalg.norm(em.predict(prior.mean) - obs)
        after = np.linalg.norm(em.predict(G.posterior_mean(prior, em, obs)) - obs)
        worst = max(worst, (after - before) / max(before, 1.0))
    return OracleResult("posterior-contraction", max(worst, 0.0), 1e-12, time.perf_counter() - start)


def run_all(seed: int = 0) -> list:
    return [bayes_identity(seed=seed), quadrature(seed=seed), enumeration(seed=seed),
            sampling_covariance(seed=seed), contraction(seed=seed)]
