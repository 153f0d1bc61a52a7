"""Closed-loop scenario sampling and the held-decision error-bound verifier."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import RolloutConfig
from .context import apply_delta, build_context, local_delta, scene_arrays
from .gaussian import DiagGaussian, EmissionModel, marginal_predictive, posterior_mean, sample_with_noise
from .latent import IntentionDist, sample_intention, sample_style, stream
from .scenario import Scenario, states_from_arrays

INTENTION_STREAM, STYLE_STREAM, NOISE_STREAM = 0, 1, 2


def condition_update(prior: DiagGaussian, em: EmissionModel, truth) -> np.ndarray:
    """Posterior mean of the latent state once ``truth`` is observed."""
    return posterior_mean(prior, em, np.asarray(truth, dtype=np.float64))


@dataclass
class RolloutResult:
    scenario_id: str
    rollout_index: int
    poses: np.ndarray  # (H, N, 3)
    speed: np.ndarray  # (H, N)
    intentions: np.ndarray  # (N,)
    styles: np.ndarray  # (N, S)
    noise: np.ndarray  # (N, H, 3), one standard-normal draw per agent and step
    obs_mean: np.ndarray  # (H, N, 3) predicted one-step means in the local frame
    obs_std: np.ndarray  # (H, N, 3) marginal standard deviations
    latent_mean: np.ndarray = field(repr=False, default=None)  # (H, N, D)

    def to_scenario(self, source: Scenario) -> Scenario:
        kinds = source.track_arrays(False)[3]
        future = states_from_arrays(self.poses, self.speed, kinds=kinds)
        meta = dict(source.metadata)
        meta.update({
            "source_id": source.id,
            "rollout_index": int(self.rollout_index),
            "latents": [{"z": int(z), "b": b.tolist(), "nu": nu.tolist()}
                        for z, b, nu in zip(self.intentions, self.styles, self.noise)],
        })
        if source.future:
            meta["truth_future"] = source.track_arrays(True)[0][source.history_steps:].tolist()
        return Scenario(f"{source.id}/r{self.rollout_index}", list(source.history), future,
                        list(source.map), list(source.signals), source.step_seconds, meta)


def _draw_latents(model, scenario: Scenario, cfg: RolloutConfig, rollout_index: int, intentions, styles,
                  style_seed):
    n = scenario.num_agents
    k, s_dim = model.cfg.num_intentions, model.cfg.style_dim
    prior = IntentionDist.uniform(k)
    z = np.empty(n, dtype=np.intp)
    b = np.empty((n, s_dim))
    nu = np.empty((n, cfg.horizon, 3))
    for i in range(n):
        z[i] = sample_intention(prior, stream(cfg.seed, scenario.id, rollout_index, i, INTENTION_STREAM))
        style_rng = stream(cfg.seed if style_seed is None else style_seed, scenario.id,
                           rollout_index if style_seed is None else 0, i, STYLE_STREAM)
        b[i] = sample_style(style_rng, s_dim).value
        nu[i] = stream(cfg.seed, scenario.id, rollout_index, i, NOISE_STREAM).standard_normal((cfg.horizon, 3))
    if intentions is not None:
        over = np.broadcast_to(np.asarray(intentions, dtype=np.intp), (n,))
        if np.any(over < 0) or np.any(over >= k):
            raise ValueError(f"intention override outside [0, {k})")
        z = over.copy()
    if styles is not None:
        over = np.asarray(styles, dtype=np.float64)
        if over.shape[-1] != s_dim:
            raise ValueError(f"style override has dim {over.shape[-1]}, model expects {s_dim}")
        b = np.broadcast_to(over, (n, s_dim)).copy()
    return z, b, nu


def rollout_scenario(model, scenario: Scenario, cfg: RolloutConfig | None = None, rollout_index: int = 0,
                     intentions=None, styles=None, style_seed=None, noise=None) -> RolloutResult:
    """Sample one closed-loop continuation of ``scenario``'s history.

    Intentions, styles and the per-step noise sequence are drawn once per
    agent from streams keyed on (seed, scenario, rollout, agent), so two
    rollouts differing only in an override share the same noise. Step t
    draws ``A mu + bias + L nu_t`` from the marginal, where ``L`` is the lower
    Cholesky factor. With ``condition_on_truth`` the recorded future replaces
    the sample and the latent mean is moved to its posterior mean.
    """
    cfg = cfg or RolloutConfig()
    mcfg = model.cfg
    z, b, nu = _draw_latents(model, scenario, cfg, rollout_index, intentions, styles, style_seed)
    if noise is not None:
        nu = np.broadcast_to(np.asarray(noise, dtype=np.float64), nu.shape).copy()
    arrays = scene_arrays(scenario, mcfg, include_future=False)
    truth = scenario.track_arrays(True)[0][scenario.history_steps:] if scenario.future else None
    em = model.emission()
    n, h = scenario.num_agents, cfg.horizon
    poses = np.empty((h, n, 3))
    speed = np.empty((h, n))
    obs_mean = np.empty((h, n, 3))
    obs_std = np.empty((h, n, 3))
    latent_mean = np.empty((h, n, mcfg.model_dim))
    was_training = model.training
    model.eval()
    held = None
    try:
        with T.paused():
            for step in range(h):
                t = arrays.num_steps
                prev = arrays.poses[-1]
                if step % cfg.patch_size == 0 or held is None:
                    ctx = build_context(arrays, [t], mcfg, model.fourier)
                    _, _, mean, var = model.forward(arrays, ctx, z, b)
                    mean, var = mean.data[:, 0], var.data[:, 0]
                    out = np.empty((n, 3))
                    for i in range(n):
                        prior = DiagGaussian(mean[i], var[i])
                        marg = marginal_predictive(prior, em)
                        obs_mean[step, i] = marg.mean
                        obs_std[step, i] = np.sqrt(np.diag(marg.cov))
                        if cfg.condition_on_truth and truth is not None and step < len(truth):
                            observed = local_delta(prev[i], truth[step, i])
                            mean[i] = condition_update(prior, em, observed)
                            out[i] = observed
                        else:
                            out[i] = sample_with_noise(marg, nu[i, step])
                    latent_mean[step] = mean
                    held = out
                else:
                    obs_mean[step], obs_std[step] = obs_mean[step - 1], obs_std[step - 1]
                    latent_mean[step] = latent_mean[step - 1]
                    out = held
                    if cfg.condition_on_truth and truth is not None and step < len(truth):
                        out = local_delta(prev, truth[step])
                new = apply_delta(prev, out)
                poses[step] = new
                speed[step] = np.hypot(out[:, 0], out[:, 1]) / arrays.dt
                arrays.append(new, speed[step])
    finally:
        if was_training:
            model.train(model._rng)
    return RolloutResult(scenario.id, rollout_index, poses, speed, z, b, nu, obs_mean, obs_std, latent_mean)


def sample_rollouts(model, scenario: Scenario, cfg: RolloutConfig | None = None, **overrides) -> list:
    cfg = cfg or RolloutConfig()
    return [rollout_scenario(model, scenario, cfg, r, **overrides) for r in range(cfg.num_rollouts)]


# --- held-decision error bound -----------------------------------------------

def _linear(x, u):
    return -x + u


def _sine(x, u):
    return -np.sin(x) + u


def _tanh(x, u):
    return -np.tanh(x) + u


DYNAMICS = {"linear": _linear, "sine": _sine, "tanh": _tanh}


@dataclass(frozen=True)
class AsyncBoundCase:
    """One agent's held-decision comparison.

    ``decision_delay`` is the time in seconds after the patch start at which
    the asynchronous agent switches from ``u_delay`` to ``u_patch``; ``None``
    scans the whole patch and keeps the worst gap.
    """
    lipschitz_k: float = 1.0
    action_gap_m: float = 0.5
    decision_delay: float | None = None
    dynamics: str = "linear"
    x0: tuple = (0.5, -0.25)
    direction: tuple = (1.0, 0.0)

    def __post_init__(self):
        if self.lipschitz_k <= 0 or self.action_gap_m <= 0:
            raise ValueError("lipschitz_k and action_gap_m must be positive")
        if self.decision_delay is not None and self.decision_delay < 0:
            raise ValueError("decision_delay must be non-negative")
        if self.dynamics not in DYNAMICS:
            raise ValueError(f"unknown dynamics {self.dynamics!r}")

    def controls(self):
        d = np.asarray(self.direction, dtype=np.float64)
        u_patch = np.zeros_like(d)
        return u_patch, u_patch + self.action_gap_m * d / np.linalg.norm(d)


def rk4(f, x, u, duration: float, steps: int):
    """Classical Runge-Kutta with a constant control; returns the visited states."""
    states = [np.array(x, dtype=np.float64)]
    if steps == 0 or duration == 0:
        return states
    hstep = duration / steps
    x = states[0]
    for _ in range(steps):
        k1 = f(x, u)
        k2 = f(x + 0.5 * hstep * k1, u)
        k3 = f(x + 0.5 * hstep * k2, u)
        k4 = f(x + hstep * k3, u)
        x = x + hstep / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        states.append(x)
    return states


def _gap(case: AsyncBoundCase, tau: float, delay: float, substeps: int):
    f = DYNAMICS[case.dynamics]
    u_patch, u_delay = case.controls()
    x0 = np.asarray(case.x0, dtype=np.float64)
    sync = rk4(f, x0, u_patch, tau, substeps)
    n1 = int(round(substeps * delay / tau))
    first = rk4(f, x0, u_delay, delay, n1)
    second = rk4(f, first[-1], u_patch, tau - delay, substeps - n1)
    return float(np.linalg.norm(sync[-1] - second[-1])), sync + first + second


def lipschitz_violations(case: AsyncBoundCase, states, rng=None, pairs: int = 200) -> int:
    """Count sampled state pairs where f breaks the declared constant."""
    f = DYNAMICS[case.dynamics]
    rng = rng or np.random.default_rng(0)
    u_patch, u_delay = case.controls()
    states = np.asarray(states)
    i = rng.integers(0, len(states), pairs)
    j = rng.integers(0, len(states), pairs)
    bad = 0
    k = case.lipschitz_k
    for a, c in zip(states[i], states[j]):
        lhs = np.linalg.norm(f(a, u_patch) - f(c, u_patch))
        if lhs > k * np.linalg.norm(a - c) * (1 + 1e-9) + 1e-12:
            bad += 1
        lhs_u = np.linalg.norm(f(a, u_patch) - f(a, u_delay))
        if lhs_u > k * np.linalg.norm(u_patch - u_delay) * (1 + 1e-9) + 1e-12:
            bad += 1
    return bad


@dataclass
class BoundRow:
    tau: float
    empirical_gap: float
    analytic_bound: float
    worst_delay: float
    lipschitz_violations: int

    @property
    def holds(self) -> bool:
        return self.empirical_gap <= self.analytic_bound and self.lipschitz_violations == 0


def analytic_bound(k: float, m: float, tau: float) -> float:
    return k * m * tau * math.exp(k * tau)


def async_bound_check(case: AsyncBoundCase, taus, substeps: int = 1000, delay_grid: int = 21) -> list:
    """Compare synchronous and asynchronous held decisions for each patch length.

    The synchronous agent applies ``u_patch`` over the whole patch. The
    asynchronous agent applies ``u_delay`` until the decision time and
    ``u_patch`` afterwards. Both are integrated with RK4 at ``tau/substeps``.
    """
    rows = []
    for tau in taus:
        tau = float(tau)
        if tau <= 0:
            raise ValueError("patch lengths must be positive")
        delays = ([min(case.decision_delay, tau)] if case.decision_delay is not None
                  else np.linspace(0.0, tau, delay_grid))
        best, worst_delay, visited = -1.0, 0.0, []
        for d in delays:
            gap, states = _gap(case, tau, float(d), substeps)
            visited.extend(states)
            if gap > best:
                best, worst_delay = gap, float(d)
        rows.append(BoundRow(tau, best, analytic_bound(case.lipschitz_k, case.action_gap_m, tau),
                             worst_delay, lipschitz_violations(case, visited)))
    return rows
