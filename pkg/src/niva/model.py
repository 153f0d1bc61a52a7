"""The full transition model: encoders, attention stack, recognition, emission."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .attention import AdaptiveNormBlock, FourierMap, Recognition, TemporalAttention
from .config import OBS_DIM, ModelConfig
from .context import Context, RecognitionContext, SceneArrays
from .encoders import Encoders, agent_features_array
from .gaussian import EmissionModel
from .nn import Module, Parameter


def emission_log_marginal(obs, mean, var, weight, bias, noise_var):
    """log N(obs; A mean + bias, A diag(var) A^T + noise_var I), batched over rows.

    ``obs`` (B, O) array; ``mean``/``var`` (B, D) tensors; ``weight`` (O, D).
    """
    weight = T.as_tensor(weight)
    o = weight.shape[0]
    b = mean.shape[0]
    pred = T.matmul(mean, weight.T) + bias
    scaled = var.reshape(b, 1, -1) * weight  # (B, O, D)
    cov = T.matmul(scaled, weight.T) + noise_var * np.eye(o)
    return T.mvn_logpdf(T.as_tensor(obs) - pred, cov)


class Niva(Module):
    """Open-loop temporal prior refined by style-modulated cross-attention."""

    def __init__(self, cfg: ModelConfig | None = None):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.model_dim
        self.fourier = FourierMap(rng, cfg.fourier_features, cfg.fourier_scale)
        self.encoders = Encoders(rng, cfg)
        self.temporal = TemporalAttention(rng, cfg)
        self.blocks = [AdaptiveNormBlock(rng, cfg) for _ in range(cfg.num_blocks)]
        self.recognition = Recognition(rng, cfg)
        # orthogonal rows give full column rank on the observation side
        q, _ = np.linalg.qr(rng.normal(size=(d, OBS_DIM)))
        self.emission_weight = Parameter(q.T.copy(), decay=True)
        self.emission_bias = Parameter(np.zeros(OBS_DIM))
        if cfg.train_noise:
            self.log_noise = Parameter(np.array([math.log(cfg.noise_scale)]))

    # --- emission ---------------------------------------------------------

    def noise_var(self):
        if self.cfg.train_noise:
            return T.exp(self.log_noise * 2.0)
        return self.cfg.noise_scale ** 2

    @property
    def noise_scale(self) -> float:
        if self.cfg.train_noise:
            return float(np.exp(self.log_noise.data[0]))
        return self.cfg.noise_scale

    def emission(self) -> EmissionModel:
        return EmissionModel(self.emission_weight.data.copy(), self.emission_bias.data.copy(),
                             self.noise_scale)

    def log_marginal(self, obs, mean, var):
        return emission_log_marginal(obs, mean, var, self.emission_weight, self.emission_bias,
                                     self.noise_var())

    # --- encoders ---------------------------------------------------------

    def encode(self, arrays: SceneArrays):
        """Agent tokens (T N, D) and map plus signal tokens (M + G, D)."""
        feats = agent_features_array(arrays.poses, arrays.speed, arrays.valid, arrays.dt)
        agent = self.encoders.agent(feats, arrays.kinds, arrays.valid)
        d = self.cfg.model_dim
        parts = []
        if len(arrays.map_kinds):
            parts.append(self.encoders.map(arrays.map_feats, arrays.map_kinds))
        if len(arrays.signal_phases):
            parts.append(self.encoders.signal(arrays.signal_phases))
        tokens = T.concat(parts, axis=0) if parts else T.Tensor(np.zeros((0, d)))
        return agent.reshape(-1, d), tokens

    # --- transition -------------------------------------------------------

    def open_loop(self, agent_tokens, ctx: Context, intention):
        """Temporal attention for every (agent, target); intention is (N,) or (N, P)."""
        n, p, w = ctx.hist_index.shape
        d = self.cfg.model_dim
        z = np.broadcast_to(np.asarray(intention, dtype=np.intp).reshape(n, -1), (n, p)).reshape(-1)
        keys = T.take(agent_tokens, ctx.hist_index.reshape(-1), axis=0).reshape(n * p, w, d)
        mean, var = self.temporal(z, keys, ctx.hist_rel.reshape(n * p, w, -1),
                                  ctx.hist_mask.reshape(n * p, w))
        return mean.reshape(n, p, d), var.reshape(n, p, d)

    def closed_loop(self, mean, var, style, map_tokens, ctx: Context):
        """Adaptive-norm refinement; neighbours attend to each other's current means."""
        n, p, d = mean.shape
        style = T.as_tensor(style)
        lm = ctx.map_index.shape[-1]
        la = ctx.nb_index.shape[-1]
        if lm:
            map_keys = T.take(map_tokens, ctx.map_index.reshape(-1), axis=0).reshape(n, p, lm, d)
            map_rel, map_mask = ctx.map_rel, ctx.map_mask
        else:
            map_keys = T.Tensor(np.zeros((n, p, 1, d)))
            map_rel = np.zeros((n, p, 1, 2 * self.fourier.m))
            map_mask = np.zeros((n, p, 1), dtype=bool)
        for block in self.blocks:
            if la:
                nb_keys = T.take(mean.reshape(n * p, d), ctx.nb_index.reshape(-1), axis=0).reshape(n, p, la, d)
            else:
                nb_keys = T.Tensor(np.zeros((n, p, 0, d)))
            mean, var = block(mean, var, style, map_keys, map_rel, map_mask, nb_keys, ctx.nb_rel, ctx.nb_mask)
        return mean, var

    def forward(self, arrays: SceneArrays, ctx: Context, intention, style, tokens=None):
        """Returns (open mean, open var, closed mean, closed var), each (N, P, D)."""
        agent_tokens, map_tokens = tokens if tokens is not None else self.encode(arrays)
        mean0, var0 = self.open_loop(agent_tokens, ctx, intention)
        mean, var = self.closed_loop(mean0, var0, style, map_tokens, ctx)
        return mean0, var0, mean, var

    # --- recognition ------------------------------------------------------

    def recognize(self, agent_tokens, rctx: RecognitionContext):
        """Style posterior parameters (N, S) from every valid step of each track."""
        n, tn = rctx.index.shape
        keys = T.take(agent_tokens, rctx.index.reshape(-1), axis=0).reshape(n, tn, -1)
        return self.recognition(keys, rctx.rel, rctx.mask)
