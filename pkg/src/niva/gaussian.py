"""Linear-Gaussian emission model and its closed-form algebra.

The latent prior over ``s`` is diagonal, the emission is
``o = A s + bias + noise`` with ``noise ~ N(0, eps^2 I)``. Marginals and
posteriors are dense Gaussians carrying a cached lower Cholesky factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        var = np.atleast_1d(np.asarray(self.var, dtype=np.float64))
        if mean.shape != var.shape:
            raise ValueError(f"mean/var shape mismatch {mean.shape} vs {var.shape}")
        if np.any(var <= 0) or not np.all(np.isfinite(var)):
            raise ValueError("variances must be finite and strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def logpdf(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return float(-0.5 * np.sum((x - self.mean) ** 2 / self.var + np.log(self.var) + LOG_2PI))


@dataclass(frozen=True)
class FullGaussian:
    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean {mean.shape}")
        if not np.allclose(cov, cov.T, atol=1e-10, rtol=0):
            raise ValueError("covariance is not symmetric")
        chol = self.chol
        if chol is None:
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as err:
                raise ValueError("covariance is not positive definite") from err
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "chol", chol)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class EmissionModel:
    """``o = weight @ s + bias + N(0, noise_scale^2 I)``; weight is obs x latent."""

    weight: np.ndarray
    bias: np.ndarray
    noise_scale: float = 0.1

    def __post_init__(self):
        weight = np.atleast_2d(np.asarray(self.weight, dtype=np.float64))
        bias = np.atleast_1d(np.asarray(self.bias, dtype=np.float64))
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"bias shape {bias.shape} does not match weight {weight.shape}")
        if not self.noise_scale > 0:
            raise ValueError("noise_scale must be positive")
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)
        object.__setattr__(self, "noise_scale", float(self.noise_scale))

    @property
    def obs_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.weight.shape[1]

    def has_full_column_rank(self) -> bool:
        return np.linalg.matrix_rank(self.weight) == min(self.weight.shape)

    def predict(self, s) -> np.ndarray:
        return self.weight @ np.asarray(s, dtype=np.float64) + self.bias


def _check_dims(prior: DiagGaussian, em: EmissionModel):
    if prior.dim != em.latent_dim:
        raise ValueError(f"prior dim {prior.dim} != emission latent dim {em.latent_dim}")


def marginal_predictive(prior: DiagGaussian, em: EmissionModel) -> FullGaussian:
    """N(A mu + bias, A diag(var) A^T + eps^2 I)."""
    _check_dims(prior, em)
    a = em.weight
    cov = (a * prior.var) @ a.T + em.noise_scale ** 2 * np.eye(em.obs_dim)
    cov = 0.5 * (cov + cov.T)
    return FullGaussian(em.predict(prior.mean), cov)


def posterior(prior: DiagGaussian, em: EmissionModel, obs) -> FullGaussian:
    """p(s | o): precision diag(1/var) + A^T A / eps^2."""
    _check_dims(prior, em)
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (em.obs_dim,) or not np.all(np.isfinite(obs)):
        raise ValueError("observation must be a finite vector of length obs_dim")
    a = em.weight
    inv_noise = em.noise_scale ** -2
    precision = np.diag(1.0 / prior.var) + inv_noise * a.T @ a
    try:
        chol_p = linalg.cho_factor(precision, lower=True)
    except linalg.LinAlgError as err:
        raise ValueError("posterior precision is singular") from err
    rhs = inv_noise * a.T @ (obs - em.bias) + prior.mean / prior.var
    mean = linalg.cho_solve(chol_p, rhs)
    cov = linalg.cho_solve(chol_p, np.eye(em.latent_dim))
    return FullGaussian(mean, 0.5 * (cov + cov.T))


def posterior_mean(prior: DiagGaussian, em: EmissionModel, obs) -> np.ndarray:
    """Posterior mean via the gain form, cheap when obs_dim << latent_dim."""
    _check_dims(prior, em)
    obs = np.asarray(obs, dtype=np.float64)
    marg = marginal_predictive(prior, em)
    innov = linalg.cho_solve((marg.chol, True), obs - marg.mean)
    return prior.mean + prior.var * (em.weight.T @ innov)


def log_marginal_density(marg: FullGaussian, o) -> float:
    r = np.asarray(o, dtype=np.float64) - marg.mean
    z = linalg.solve_triangular(marg.chol, r, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(marg.chol)))
    return float(-0.5 * (z @ z + logdet + marg.dim * LOG_2PI))


def log_full_density(g: FullGaussian, x) -> float:
    return log_marginal_density(g, x)


def emission_log_density(em: EmissionModel, s, o) -> float:
    r = np.asarray(o, dtype=np.float64) - em.predict(s)
    var = em.noise_scale ** 2
    return float(-0.5 * (r @ r / var + em.obs_dim * (math.log(var) + LOG_2PI)))


def joint_log_density(prior: DiagGaussian, em: EmissionModel, s, o) -> float:
    """log p(s) + log p(o | s)."""
    _check_dims(prior, em)
    return prior.logpdf(s) + emission_log_density(em, s, o)


def sample_with_noise(marg: FullGaussian, nu) -> np.ndarray:
    """mean + L nu with L the lower Cholesky factor of the covariance."""
    nu = np.asarray(nu, dtype=np.float64)
    if nu.shape[-1] != marg.dim:
        raise ValueError(f"noise length {nu.shape[-1]} != {marg.dim}")
    return marg.mean + nu @ marg.chol.T


# Batched helpers used by training and rollout: priors (..., D), A (d, D).

def batched_marginal(mean, var, weight, bias, noise_scale):
    mean = np.asarray(mean)
    out_mean = mean @ weight.T + bias
    cov = np.einsum("id,...d,jd->...ij", weight, var, weight)
    cov = cov + noise_scale ** 2 * np.eye(weight.shape[0])
    return out_mean, cov


def batched_log_marginal(obs, mean, var, weight, bias, noise_scale):
    m, cov = batched_marginal(mean, var, weight, bias, noise_scale)
    r = np.asarray(obs) - m
    chol = np.linalg.cholesky(cov)
    alpha = np.linalg.solve(cov, r[..., None])[..., 0]
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)
    return -0.5 * ((r * alpha).sum(-1) + logdet + weight.shape[0] * LOG_2PI)
