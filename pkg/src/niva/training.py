"""Variational EM: exact intention E-step, reparameterized ELBO, AdamW M-step."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import tensor as T
from .config import ModelConfig, TrainConfig
from .context import build_context, build_recognition_context, scene_arrays
from .latent import DirichletState, dirichlet_update, kl_dirichlet, responsibilities_batch
from .model import Niva

TRACE_FIELDS = ("step", "lr", "loss", "kl_z", "kl_b", "nll")


class TrainingDiverged(FloatingPointError):
    def __init__(self, batch_id: int, value: float):
        super().__init__(f"non-finite loss {value} in batch {batch_id}")
        self.batch_id = batch_id


def learning_rate(step: int, total_steps: int, peak: float = 2e-4, warmup: int = 1000,
                  final: float = 3e-7) -> float:
    """Linear warmup from 0 to ``peak`` over ``warmup`` steps, then cosine to ``final``."""
    if step <= warmup:
        return peak * step / warmup
    if total_steps <= warmup:
        return peak
    frac = min(1.0, (step - warmup) / (total_steps - warmup))
    return final + 0.5 * (peak - final) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay restricted to parameters flagged ``decay``."""

    def __init__(self, params, weight_decay=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads, lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if getattr(p, "decay", False) and self.weight_decay:
                p.data = p.data * (1.0 - lr * self.weight_decay)
            p.data = p.data - lr * update


def clip_global_norm(grads, max_norm: float):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = [g * scale for g in grads]
    return grads, norm


@dataclass
class Prepared:
    """Weight-independent inputs of one scenario."""
    scenario_id: str
    arrays: object
    ctx: object
    rctx: object

    @property
    def num_agents(self) -> int:
        return self.arrays.num_agents


def prepare(scenario, model: Niva) -> Prepared:
    if not scenario.future:
        raise ValueError(f"scenario {scenario.id} has no future steps to learn from")
    cfg = model.cfg
    arrays = scene_arrays(scenario, cfg)
    steps = np.arange(arrays.history_steps, arrays.num_steps)
    return Prepared(scenario.id, arrays, build_context(arrays, steps, cfg, model.fourier),
                    build_recognition_context(arrays, cfg, model.fourier))


def perturbed(item: Prepared, model: Niva, rng: np.random.Generator, drift_xy: float,
              drift_heading: float) -> Prepared:
    """Copy of ``item`` whose input poses drift by a per-agent random walk.

    Targets still lead to the recorded poses, so the model learns to steer
    back after small errors instead of only continuing its own history.
    Recorded history steps are left untouched.
    """
    arrays = item.arrays
    t0 = arrays.history_steps
    steps = arrays.num_steps - t0
    walk = np.zeros(arrays.poses.shape)
    scale = np.array([drift_xy, drift_xy, drift_heading])
    walk[t0:] = np.cumsum(rng.standard_normal((steps, arrays.num_agents, 3)) * scale, axis=0)
    noisy = dataclasses.replace(arrays, poses=arrays.poses + walk)
    ctx = build_context(noisy, np.arange(t0, arrays.num_steps), model.cfg, model.fourier,
                        target_poses=arrays.poses)
    return Prepared(item.scenario_id, noisy, ctx, item.rctx)


def intention_loglik(model: Niva, item: Prepared, marginal: str = "closed") -> np.ndarray:
    """Per-agent log marginals summed over target steps, one column per intention (N, K).

    ``closed`` scores the refined marginal with the style fixed at the
    recognition mean; ``open`` scores the temporal prior alone. Runs without
    recording and without dropout.
    """
    was_training, rng = model.training, model._rng
    model.eval()
    try:
        with T.paused():
            tokens = model.encode(item.arrays)
            style = model.recognize(tokens[0], item.rctx)[0] if marginal == "closed" else None
            n, p = item.ctx.obs_mask.shape
            out = np.empty((n, model.cfg.num_intentions))
            for k in range(model.cfg.num_intentions):
                mean, var = model.open_loop(tokens[0], item.ctx, np.full(n, k))
                if marginal == "closed":
                    mean, var = model.closed_loop(mean, var, style, tokens[1], item.ctx)
                d = mean.shape[-1]
                ll = model.log_marginal(item.ctx.obs.reshape(-1, 3), mean.reshape(-1, d),
                                        var.reshape(-1, d)).data.reshape(n, p)
                out[:, k] = np.where(item.ctx.obs_mask, ll, 0.0).sum(axis=1)
    finally:
        model.train(rng) if was_training else model.eval()
    return out


@dataclass
class EStep:
    loglik: np.ndarray  # (N, K)
    phi: np.ndarray  # (N, K)
    dirichlet: DirichletState
    best: np.ndarray  # (N,) argmax with ties to the lowest index


def e_step(model: Niva, batch, dirich: DirichletState, use_dirichlet: bool = False,
           marginal: str = "closed") -> EStep:
    loglik = np.concatenate([intention_loglik(model, item, marginal) for item in batch], axis=0)
    phi = responsibilities_batch(loglik, dirich, use_dirichlet)
    return EStep(loglik, phi, dirichlet_update(dirich, phi), np.argmax(phi, axis=1))


def endpoint_features(item: Prepared) -> np.ndarray:
    """Last valid future pose of each agent in its last-history frame (N, 4)."""
    from .context import local_delta

    a = item.arrays
    h = a.history_steps - 1
    feats = np.zeros((a.num_agents, 4))
    for n in range(a.num_agents):
        valid = np.flatnonzero(a.valid[h:, n])
        last = h + valid[-1] if valid.size else h
        dx, dy, dth = local_delta(a.poses[h, n], a.poses[last, n])
        feats[n] = [dx, dy, math.cos(dth), math.sin(dth)]
    return feats


def kmeans_assignments(items, k: int, seed: int = 0) -> np.ndarray:
    """Unsupervised initial intentions from k-means on future endpoints."""
    from scipy.cluster.vq import kmeans2, whiten

    feats = np.concatenate([endpoint_features(it) for it in items], axis=0)
    if k == 1 or len(feats) < k:
        return np.zeros(len(feats), dtype=np.intp)
    scaled = whiten(feats + 1e-12)
    _, labels = kmeans2(scaled, k, minit="++", seed=np.random.default_rng(seed))
    return labels.astype(np.intp)


def fixed_assignment_step(loglik_shape, labels, dirich: DirichletState) -> EStep:
    phi = np.eye(loglik_shape[1])[labels]
    return EStep(np.zeros(loglik_shape), phi, dirichlet_update(dirich, phi), labels.copy())


def variational_objective(loglik, phi, dirich: DirichletState | None = None,
                          use_dirichlet: bool = False) -> float:
    """Negative bound as a function of (phi, alpha') with the network held fixed.

    Uniform mixing weights when the Dirichlet hierarchy is off; otherwise the
    expected log weights under ``dirich`` plus its KL to the prior.
    """
    loglik = np.asarray(loglik, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    k = loglik.shape[1]
    log_prior = dirich.expected_log_weights() if use_dirichlet else np.full(k, -math.log(k))
    ent = special.xlogy(phi, phi).sum()
    value = -(phi * loglik).sum() + ent - (phi * log_prior).sum()
    if use_dirichlet:
        value += kl_dirichlet(dirich)
    return float(value)


def kl_to_uniform(phi) -> float:
    phi = np.asarray(phi, dtype=np.float64)
    return float(special.xlogy(phi, phi).sum() + phi.sum() * math.log(phi.shape[1]))


@dataclass
class LossParts:
    loss: T.Tensor
    nll: float
    kl_b: float
    kl_z: float


def elbo_loss(model: Niva, batch, estep: EStep, rng: np.random.Generator, soft: bool = False,
              use_dirichlet: bool = False, style_noise=None) -> LossParts:
    """Negative bound summed over agents and future steps.

    The hard path trains each agent through its most consistent intention;
    the soft path weights every intention by ``phi``. Responsibilities and
    Dirichlet terms enter as constants. ``style_noise`` (N_total, S) fixes the
    reparameterization draw.
    """
    k_total = model.cfg.num_intentions
    s_dim = model.cfg.style_dim
    total = None
    nll_sum = kl_b_sum = 0.0
    offset = 0
    for item in batch:
        n = item.num_agents
        phi = estep.phi[offset:offset + n]
        best = estep.best[offset:offset + n]
        eta = style_noise[offset:offset + n] if style_noise is not None else rng.standard_normal((n, s_dim))
        offset += n
        tokens = model.encode(item.arrays)
        mu_b, var_b = model.recognize(tokens[0], item.rctx)
        style = mu_b + T.sqrt(var_b) * eta
        kl_b = ((mu_b * mu_b + var_b - 1.0 - T.log(var_b)) * 0.5).sum()
        mask = item.ctx.obs_mask.reshape(-1).astype(np.float64)
        nll = None
        choices = range(k_total) if soft else [None]
        for k in choices:
            z = best if k is None else np.full(n, k)
            _, _, mean, var = model.forward(item.arrays, item.ctx, z, style, tokens=tokens)
            d = mean.shape[-1]
            ll = model.log_marginal(item.ctx.obs.reshape(-1, 3), mean.reshape(-1, d), var.reshape(-1, d))
            weight = mask if k is None else mask * np.repeat(phi[:, k], mean.shape[1])
            term = -(ll * weight).sum()
            nll = term if nll is None else nll + term
        part = nll + kl_b
        total = part if total is None else total + part
        nll_sum += float(nll.data)
        kl_b_sum += float(kl_b.data)
    kl_z = kl_to_uniform(estep.phi)
    if use_dirichlet:
        log_w = estep.dirichlet.expected_log_weights()
        kl_z = float(special.xlogy(estep.phi, estep.phi).sum() - (estep.phi * log_w).sum()
                     + kl_dirichlet(estep.dirichlet))
    return LossParts(total + kl_z, nll_sum, kl_b_sum, kl_z)


@dataclass
class TrainResult:
    model: Niva
    trace: list = field(default_factory=list)
    dirichlet: DirichletState | None = None
    last_estep: EStep | None = None

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_FIELDS)
        for row in self.trace:
            writer.writerow([row["step"]] + [repr(float(row[k])) for k in TRACE_FIELDS[1:]])
        return buf.getvalue()


def train(dataset, model_cfg: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
          model: Niva | None = None, callback=None) -> TrainResult:
    """Variational EM over mini-batches of scenarios.

    Each step runs the exact E-step on the batch with the current weights,
    then one AdamW step on the reparameterized bound. ``callback(step, row,
    estep)`` sees every logged row.
    """
    model_cfg = model_cfg or ModelConfig()
    train_cfg = train_cfg or TrainConfig()
    if not dataset:
        raise ValueError("empty dataset")
    if train_cfg.dropout != model_cfg.dropout:
        model_cfg = dataclasses.replace(model_cfg, dropout=train_cfg.dropout)
    model = model or Niva(model_cfg)
    items = [prepare(s, model) for s in dataset]
    params = model.parameters()
    opt = AdamW(params, train_cfg.weight_decay, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 1]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 2]))
    drift_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 3]))
    dirich = DirichletState.symmetric(model_cfg.num_intentions, train_cfg.dirichlet_prior)
    per_epoch = math.ceil(len(items) / train_cfg.batch_size)
    total_steps = train_cfg.epochs * per_epoch
    result = TrainResult(model, [], dirich)
    init_labels = None
    if train_cfg.init_assignment_steps > 0:
        labels = kmeans_assignments(items, model_cfg.num_intentions, train_cfg.seed)
        starts = np.cumsum([0] + [it.num_agents for it in items])
        init_labels = [labels[starts[i]:starts[i + 1]] for i in range(len(items))]
    step = 0
    for _ in range(train_cfg.epochs):
        order = rng.permutation(len(items))
        for b in range(per_epoch):
            batch = [items[i] for i in order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]]
            step += 1
            lr = learning_rate(step, total_steps, train_cfg.peak_lr, train_cfg.warmup_steps,
                               train_cfg.final_lr)
            if step <= train_cfg.init_assignment_steps:
                idx = order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]
                labels = np.concatenate([init_labels[i] for i in idx])
                estep = fixed_assignment_step((labels.size, model_cfg.num_intentions), labels, dirich)
            else:
                try:
                    estep = e_step(model, batch, dirich, train_cfg.use_dirichlet, train_cfg.estep_marginal)
                except ValueError as err:
                    raise TrainingDiverged(step, float("nan")) from err
            if train_cfg.use_dirichlet:
                dirich = estep.dirichlet
            if train_cfg.input_drift_xy or train_cfg.input_drift_heading:
                batch = [perturbed(it, model, drift_rng, train_cfg.input_drift_xy, train_cfg.input_drift_heading)
                         for it in batch]
            model.train(dropout_rng if train_cfg.dropout > 0 else None)
            with T.Tape() as tape:
                parts = elbo_loss(model, batch, estep, rng, train_cfg.soft_assignment,
                                  train_cfg.use_dirichlet)
            model.eval()
            value = float(parts.loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(step, value)
            grads = tape.gradient(parts.loss, params)
            grads, _ = clip_global_norm(grads, train_cfg.grad_clip)
            opt.step(grads, lr)
            row = {"step": step, "lr": lr, "loss": value, "kl_z": parts.kl_z,
                   "kl_b": parts.kl_b, "nll": parts.nll}
            result.trace.append(row)
            result.last_estep = estep
            if callback is not None:
                callback(step, row, estep)
    result.dirichlet = dirich
    return result
