"""Style, intention and agent-count latents with their variational updates."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy import special

from .gaussian import DiagGaussian

STYLE_DIM = 16
SIMPLEX_TOL = 1e-10


def stream(seed: int, scenario_id: str, rollout: int = 0, agent: int = 0,
           purpose: int = 0) -> np.random.Generator:
    """Independent RNG stream keyed on (seed, scenario, rollout, agent, purpose)."""
    key = zlib.crc32(str(scenario_id).encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([seed, key, rollout, agent, purpose]))


@dataclass(frozen=True)
class StyleLatent:
    value: np.ndarray
    source: str = "prior-sample"

    def __post_init__(self):
        value = np.asarray(self.value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise ValueError("style latent must be finite")
        if self.source not in ("prior-sample", "recognition-sample", "fixed"):
            raise ValueError(f"unknown style source {self.source!r}")
        object.__setattr__(self, "value", value)


@dataclass(frozen=True)
class IntentionDist:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or np.any(probs < 0) or abs(probs.sum() - 1.0) > SIMPLEX_TOL:
            raise ValueError("intention probabilities must form a simplex vector")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, k: int) -> "IntentionDist":
        return cls(np.full(k, 1.0 / k))

    @property
    def k(self) -> int:
        return self.probs.size


@dataclass(frozen=True)
class DirichletState:
    concentration: np.ndarray
    prior_concentration: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.concentration, dtype=np.float64)
        a0 = np.asarray(self.prior_concentration, dtype=np.float64)
        if a.shape != a0.shape or np.any(a <= 0) or np.any(a0 <= 0):
            raise ValueError("Dirichlet concentrations must be positive and of equal length")
        object.__setattr__(self, "concentration", a)
        object.__setattr__(self, "prior_concentration", a0)

    @classmethod
    def symmetric(cls, k: int, alpha: float = 1.0) -> "DirichletState":
        a = np.full(k, float(alpha))
        return cls(a.copy(), a)

    def expected_log_weights(self) -> np.ndarray:
        return special.digamma(self.concentration) - special.digamma(self.concentration.sum())


@dataclass(frozen=True)
class ArrivalModel:
    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("arrival rate must be positive")


def sample_style(rng: np.random.Generator, dim: int = STYLE_DIM) -> StyleLatent:
    return StyleLatent(rng.standard_normal(dim), "prior-sample")


def sample_intention(d: IntentionDist, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; zero-probability entries are never returned."""
    u = rng.random()
    cdf = np.cumsum(d.probs)
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    idx = min(idx, d.k - 1)
    while d.probs[idx] == 0:
        idx -= 1
    return idx


def responsibilities(log_marg, dirich: DirichletState | None = None,
                     use_dirichlet: bool = False) -> IntentionDist:
    """q(z) = softmax_k(sum_t log_marg[k, t] [+ E log pi_k])."""
    log_marg = np.atleast_2d(np.asarray(log_marg, dtype=np.float64))
    if not np.all(np.isfinite(log_marg)):
        raise ValueError("non-finite log likelihood")
    logits = log_marg.sum(axis=1)
    if use_dirichlet:
        logits = logits + dirich.expected_log_weights()
    logits = logits - logits.max()
    w = np.exp(logits)
    return IntentionDist(w / w.sum())


def responsibilities_batch(loglik, dirich: DirichletState | None = None,
                           use_dirichlet: bool = False) -> np.ndarray:
    """Row-wise version over per-agent summed log likelihoods (N, K)."""
    loglik = np.asarray(loglik, dtype=np.float64)
    if not np.all(np.isfinite(loglik)):
        raise ValueError("non-finite log likelihood")
    if use_dirichlet:
        loglik = loglik + dirich.expected_log_weights()
    return special.softmax(loglik, axis=1)


def dirichlet_update(dirich: DirichletState, phi) -> DirichletState:
    """alpha'_k = alpha_k + sum_n phi_nk."""
    phi = np.asarray(phi, dtype=np.float64).reshape(-1, dirich.prior_concentration.size)
    if np.any(phi < 0) or np.any(np.abs(phi.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise ValueError("responsibility rows must be simplex vectors")
    return DirichletState(dirich.prior_concentration + phi.sum(axis=0),
                          dirich.prior_concentration)


def kl_gaussian_std(q: DiagGaussian) -> float:
    return float(0.5 * np.sum(q.mean ** 2 + q.var - 1.0 - np.log(q.var)))


def kl_categorical(q: IntentionDist, p: IntentionDist) -> float:
    qp, pp = q.probs, p.probs
    support = qp > 0
    if np.any(pp[support] == 0):
        raise ValueError("p has zero mass where q is positive")
    return float(np.sum(qp[support] * (np.log(qp[support]) - np.log(pp[support]))))


def kl_dirichlet(q: DirichletState) -> float:
    """KL[Dir(concentration) || Dir(prior_concentration)]."""
    a, a0 = q.concentration, q.prior_concentration
    return float(special.gammaln(a.sum()) - special.gammaln(a).sum()
                 - special.gammaln(a0.sum()) + special.gammaln(a0).sum()
                 + np.sum((a - a0) * (special.digamma(a) - special.digamma(a.sum()))))


def sample_agent_count(m: ArrivalModel, rng: np.random.Generator) -> int:
    return max(1, int(rng.poisson(m.rate)))
