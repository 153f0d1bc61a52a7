"""Relative spacetime encodings and the attention stack of the transition model.

The open-loop prior comes from temporal attention whose query is a learned
intention embedding. Adaptive-norm blocks then refine the means with
map-to-agent and agent-to-agent cross-attention, modulated by the style
latent. Their gated residuals start at zero, so a fresh block is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import wrap_angle
from .nn import MLP, Embedding, LayerNorm, Linear, Module, MultiHeadAttention, Parameter

VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float
    t: float = 0.0


@dataclass(frozen=True)
class RelPose:
    distance: float
    bearing: float
    heading_diff: float
    time_diff: float

    def as_array(self) -> np.ndarray:
        return np.array([self.distance, self.bearing, self.heading_diff, self.time_diff])


def relative_pose(pi, pj) -> np.ndarray:
    """Vectorized (distance, bearing, heading diff, time diff) from i to j.

    Both inputs are (..., 4) arrays of (x, y, heading, t). The bearing is the
    angle of the displacement measured from i's heading; it is 0 when the two
    positions coincide.
    """
    pi = np.asarray(pi, dtype=np.float64)
    pj = np.asarray(pj, dtype=np.float64)
    d = pj[..., :2] - pi[..., :2]
    dist = np.hypot(d[..., 0], d[..., 1])
    bearing = np.where(dist > 0, wrap_angle(np.arctan2(d[..., 1], d[..., 0]) - pi[..., 2]), 0.0)
    hdiff = wrap_angle(pj[..., 2] - pi[..., 2])
    return np.stack([dist, bearing, np.asarray(hdiff) + 0.0 * dist, pj[..., 3] - pi[..., 3]], axis=-1)


def rel_pose(i: Pose, j: Pose) -> RelPose:
    r = relative_pose([i.x, i.y, i.heading, i.t], [j.x, j.y, j.heading, j.t])
    return RelPose(*(float(v) for v in r))


def normalize_rel(r, distance_scale: float, time_scale: float) -> np.ndarray:
    """Bring the four relative quantities to unit scale before the Fourier map."""
    r = np.asarray(r, dtype=np.float64)
    return r / np.array([distance_scale, np.pi, np.pi, time_scale])


class FourierMap(Module):
    """gamma(x) = [cos(2 pi F x); sin(2 pi F x)] with F frozen after init."""

    def __init__(self, rng, m: int = 32, scale: float = 1.0, in_dim: int = 4):
        self.buf_freq = rng.normal(0.0, scale, (m, in_dim))
        self.init_scale = scale

    @property
    def m(self) -> int:
        return self.buf_freq.shape[0]

    def __call__(self, x) -> np.ndarray:
        proj = 2.0 * np.pi * np.asarray(x, dtype=np.float64) @ self.buf_freq.T
        return np.concatenate([np.cos(proj), np.sin(proj)], axis=-1)


def fourier_map(x, fm: FourierMap) -> np.ndarray:
    return fm(x)


class PositionalBias(Module):
    """R_ij = MLP(gamma(relative pose))."""

    def __init__(self, rng, m: int, dim: int, dropout: float = 0.0):
        self.mlp = MLP(rng, 2 * m, dim, dim, dropout)

    def __call__(self, fourier_feats) -> T.Tensor:
        return self.mlp(T.Tensor(fourier_feats))


def positional_bias(r: RelPose, fm: FourierMap, pb: PositionalBias,
                    distance_scale: float = 20.0, time_scale: float = 20.0) -> np.ndarray:
    feats = fm(normalize_rel(r.as_array(), distance_scale, time_scale))
    return pb(feats[None]).data[0]


class TemporalLayer(Module):
    def __init__(self, rng, dim: int, heads: int, dropout: float):
        self.ln_q = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, heads, dropout)
        self.ln_ff = LayerNorm(dim)
        self.ff = MLP(rng, dim, 2 * dim, dim, dropout)

    def __call__(self, q, kv, mask, return_weights=False):
        a = self.attn(self.ln_q(q), kv, kv, mask, return_weights=return_weights)
        if return_weights:
            a, w = a
        q = q + a
        q = q + self.ff(self.ln_ff(q))
        return (q, w) if return_weights else q


class TemporalAttention(Module):
    """Open-loop prior over s_t from the agent's own past, queried by intention."""

    def __init__(self, rng, cfg):
        d = cfg.model_dim
        self.intent = Embedding(rng, cfg.num_intentions, d, cfg.intent_init_scale)
        self.rel = PositionalBias(rng, cfg.fourier_features, d, cfg.dropout)
        self.layers = [TemporalLayer(rng, d, cfg.num_heads, cfg.dropout)
                       for _ in range(cfg.num_temporal_layers)]
        self.mean_head = Linear(rng, d, d)
        self.var_head = Linear(rng, d, d)

    def __call__(self, z, keys, rel_feats, mask, return_weights=False):
        """z (B,) intention ids, keys (B, W, D), rel_feats (B, W, 2m), mask (B, W)."""
        b = keys.shape[0]
        q = self.intent(np.asarray(z)).reshape(b, 1, -1)
        kv = keys + self.rel(rel_feats)
        weights = []
        for layer in self.layers:
            out = layer(q, kv, np.asarray(mask)[:, None, :], return_weights)
            if return_weights:
                out, w = out
                weights.append(w)
            q = out
        q = q.reshape(b, -1)
        mean = self.mean_head(q)
        var = T.softplus(self.var_head(q)) + VAR_FLOOR
        return (mean, var, weights) if return_weights else (mean, var)


def temporal_self_attention(intention: int, history_tokens, rel_feats, module: TemporalAttention,
                            mask=None):
    """Single-query convenience wrapper returning a DiagGaussian over s_t."""
    from .gaussian import DiagGaussian

    history_tokens = np.asarray(history_tokens, dtype=np.float64)
    if history_tokens.ndim != 2 or len(history_tokens) == 0:
        raise ValueError("history must contain at least one token")
    if mask is None:
        mask = np.ones(len(history_tokens), dtype=bool)
    mean, var = module(np.array([intention]), T.Tensor(history_tokens[None]),
                       np.asarray(rel_feats)[None], np.asarray(mask)[None])
    return DiagGaussian(mean.data[0], var.data[0])


class AdaptiveNormBlock(Module):
    """Style-modulated map-to-agent then agent-to-agent cross-attention.

    The modulation MLP emits (scale, shift, gate) for both sub-layers; its last
    layer starts at zero, so scales are 1, shifts 0 and gates 0 at init.
    """

    def __init__(self, rng, cfg):
        d = cfg.model_dim
        self.dim = d
        self.modulation = MLP(rng, cfg.style_dim, d, 6 * d, zero_out=True)
        self.map_rel = PositionalBias(rng, cfg.fourier_features, d, cfg.dropout)
        self.map_attn = MultiHeadAttention(rng, d, cfg.num_heads, cfg.dropout)
        self.agent_rel = PositionalBias(rng, cfg.fourier_features, d, cfg.dropout)
        self.agent_attn = MultiHeadAttention(rng, d, cfg.num_heads, cfg.dropout)
        self.var_head = Linear(rng, d, d, zero=True)

    def modulate(self, style):
        m = self.modulation(style)
        d = self.dim
        return [m[:, i * d:(i + 1) * d].reshape(-1, 1, d) for i in range(6)]

    def __call__(self, mu, var, style, map_keys, map_rel, map_mask, nb_keys, nb_rel, nb_mask):
        """mu, var (N, P, D); style (N, S); keys (N, P, L, D); rel (N, P, L, 2m); masks (N, P, L).

        The variance is rescaled in log space by a zero-initialized head, so
        the incoming variance also passes through unchanged at init.
        """
        n, p, d = mu.shape
        scale1, shift1, gate1, scale2, shift2, gate2 = self.modulate(style)

        q1 = T.layer_norm(mu) * (scale1 + 1.0) + shift1
        kv = map_keys + self.map_rel(map_rel)
        lm = kv.shape[2]
        q2 = self.map_attn(q1.reshape(n * p, 1, d), kv.reshape(n * p, lm, d),
                           kv.reshape(n * p, lm, d), np.asarray(map_mask).reshape(n * p, 1, lm))
        q3 = mu + gate1 * q2.reshape(n, p, d)

        q4 = T.layer_norm(q3) * (scale2 + 1.0) + shift2
        la = nb_keys.shape[2]
        if la:
            kv = nb_keys + self.agent_rel(nb_rel)
            q5 = self.agent_attn(q4.reshape(n * p, 1, d), kv.reshape(n * p, la, d),
                                 kv.reshape(n * p, la, d), np.asarray(nb_mask).reshape(n * p, 1, la))
            out = q3 + gate2 * q5.reshape(n, p, d)
        else:
            out = q3
        var = (var - VAR_FLOOR) * T.exp(self.var_head(out)) + VAR_FLOOR
        return out, var


class Recognition(Module):
    """q(b) from the whole trajectory, pooled at the last history step."""

    def __init__(self, rng, cfg):
        d = cfg.model_dim
        self.query = Parameter(rng.normal(0.0, 1.0, (1, 1, d)))
        self.rel = PositionalBias(rng, cfg.fourier_features, d, cfg.dropout)
        self.ln = LayerNorm(d)
        self.attn = MultiHeadAttention(rng, d, cfg.num_heads, cfg.dropout)
        self.mean_head = Linear(rng, d, cfg.style_dim)
        self.var_head = Linear(rng, d, cfg.style_dim)

    def __call__(self, keys, rel_feats, mask):
        """keys (N, T, D), rel_feats (N, T, 2m), mask (N, T) -> mean, var (N, S)."""
        n = keys.shape[0]
        q = self.query + np.zeros((n, 1, 1))
        kv = keys + self.rel(rel_feats)
        h = q + self.attn(self.ln(q), kv, kv, np.asarray(mask)[:, None, :])
        h = h.reshape(n, -1)
        return self.mean_head(h), T.softplus(self.var_head(h)) + VAR_FLOOR
