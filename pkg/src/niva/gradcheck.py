"""Finite-difference checks for every primitive and for the full model loss."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .encoders import AgentState, MapFeature, SignalState
from .latent import DirichletState
from .model import Niva
from .scenario import Scenario
from .training import fixed_assignment_step, elbo_loss, prepare

PRIMITIVE_TOL = 1e-5
END_TO_END_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err <= self.tolerance)


def check_primitives(seeds: int = 50, step: float = 1e-6) -> list:
    """Worst relative error per registered primitive over ``seeds`` random inputs."""
    out = []
    for name, builder in T.PRIMITIVES.items():
        worst = 0.0
        for seed in range(seeds):
            fn, x0 = builder(np.random.default_rng(seed))
            worst = max(worst, T.grad_check(fn, x0, step))
        out.append(CheckResult(name, worst, PRIMITIVE_TOL))
    return out


def micro_scenario(seed: int = 0) -> Scenario:
    """Two vehicles on neighbouring lanes with a signal, 3 history and 2 future steps."""
    rng = np.random.default_rng(seed)
    lanes = [MapFeature(np.array([[0.0, y], [12.0, y], [24.0, y + 0.5]]), "lane-center", i)
             for i, y in enumerate((0.0, 3.5))]
    edge = MapFeature(np.array([[0.0, -1.75], [24.0, -1.75]]), "road-edge", 2)
    steps = []
    for t in range(5):
        steps.append([AgentState((2.0 + 0.9 * t + 0.05 * rng.normal(), y + 0.05 * rng.normal()),
                                 0.02 * rng.normal(), 9.0) for y in (0.0, 3.5)])
    return Scenario(f"micro-{seed}", steps[:3], steps[3:], lanes + [edge], [SignalState(1, "green")])


def micro_model(seed: int = 0, spread: float = 0.3) -> Niva:
    """A small model with every parameter shifted off its initial value.

    Zero-initialized gates would otherwise make some paths carry no gradient.
    Variance heads get a smaller shift: their outputs are exponentiated and a
    wide variance spread makes the marginal covariances ill-conditioned,
    which swamps finite differences in rounding noise.
    """
    cfg = ModelConfig(model_dim=8, style_dim=4, num_intentions=2, num_heads=2, fourier_features=4,
                      map_points=4, embed_dim=4, num_map_neighbors=4, num_agent_neighbors=1,
                      dropout=0.0, seed=seed)
    model = Niva(cfg)
    rng = np.random.default_rng(seed + 1)
    for name, p in model.named_parameters():
        scale = 0.1 * spread if "var_head" in name else spread
        p.data = p.data + scale * rng.normal(size=p.data.shape)
    model.eval()
    return model


def end_to_end_check(seed: int = 0, step: float = 1e-5, soft: bool = True) -> CheckResult:
    """Gradient of the normalized training loss with respect to every parameter.

    The loss covers encoders, temporal attention, the adaptive-norm
    refinement, recognition with a fixed reparameterization draw and the
    emission marginal. The soft path is used so both intentions contribute.

    The error is taken per parameter tensor as ``|autodiff - fd| / (|fd| +
    1e-8)`` in the Euclidean norm, then maximized over tensors. Individual
    coordinates whose gradient is near 1e-7 sit at the rounding floor of
    the loss, so a coordinatewise ratio there measures float noise rather
    than the derivative.
    """
    model = micro_model(seed)
    item = prepare(micro_scenario(seed), model)
    n = item.num_agents
    dirich = DirichletState.symmetric(model.cfg.num_intentions)
    estep = fixed_assignment_step((n, model.cfg.num_intentions), np.arange(n) % model.cfg.num_intentions, dirich)
    estep.phi = np.full_like(estep.phi, 1.0 / model.cfg.num_intentions)
    eta = np.random.default_rng(seed + 2).standard_normal((n, model.cfg.style_dim))
    scale = 1.0 / item.ctx.obs_mask.sum()
    names = [name for name, _ in model.named_parameters()]
    params = model.parameters()

    def loss():
        return elbo_loss(model, [item], estep, None, soft=soft, style_noise=eta).loss * scale

    with T.Tape() as tape:
        value = loss()
    grads = tape.gradient(value, params)
    worst = 0.0
    with T.paused():
        for name, p, g in zip(names, params, grads):
            base = p.data.copy()
            flat = p.data.reshape(-1)
            fd = np.empty(flat.size)
            for i in range(flat.size):
                flat[i] = base.reshape(-1)[i] + step
                hi = float(loss().data)
                flat[i] = base.reshape(-1)[i] - step
                lo = float(loss().data)
                flat[i] = base.reshape(-1)[i]
                fd[i] = (hi - lo) / (2 * step)
            err = np.linalg.norm(g.reshape(-1) - fd) / (np.linalg.norm(fd) + 1e-8)
            worst = max(worst, float(err))
    return CheckResult("end-to-end-2-agent", worst, END_TO_END_TOL)


def run_all(seeds: int = 50) -> tuple:
    start = time.perf_counter()
    results = check_primitives(seeds) + [end_to_end_check()]
    return results, time.perf_counter() - start
