import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from niva import tensor as T
from niva.checkpoint import checkpoint_bytes
from niva.config import ModelConfig, TrainConfig
from niva.context import apply_delta
from niva.gaussian import DiagGaussian, log_marginal_density, marginal_predictive
from niva.gradcheck import micro_scenario
from niva.latent import DirichletState, dirichlet_update, kl_gaussian_std, responsibilities_batch
from niva.model import Niva
from niva.nn import Linear
from niva.scenario import Scenario, generate_toy_dataset
from niva.training import (AdamW, TrainingDiverged, e_step, elbo_loss, fixed_assignment_step,
                           kl_to_uniform, learning_rate, perturbed, prepare, train, variational_objective)

from conftest import TINY


def test_learning_rate_schedule():
    total = 5000
    assert learning_rate(0, total) == 0.0
    assert learning_rate(500, total) == pytest.approx(1e-4, abs=1e-15)
    assert abs(learning_rate(1000, total) - 2e-4) <= 1e-12
    assert abs(learning_rate(total, total) - 3e-7) <= 1e-12
    lrs = [learning_rate(s, total) for s in range(1000, total + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    defaults = TrainConfig()
    assert (defaults.peak_lr, defaults.warmup_steps, defaults.final_lr) == (2e-4, 1000, 3e-7)
    assert (defaults.weight_decay, defaults.dropout) == (0.01, 0.1)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=0)
    with pytest.raises(ValueError):
        TrainConfig(dropout=1.0)


def test_weight_decay_touches_linear_weights_only():
    cfg = ModelConfig(**TINY)
    on, off = Niva(cfg), Niva(cfg)
    zeros = [np.zeros_like(p.data) for p in on.parameters()]
    AdamW(on.parameters(), weight_decay=0.01).step(zeros, 1e-2)
    AdamW(off.parameters(), weight_decay=0.0).step(zeros, 1e-2)
    # the emission matrix is the weight of the linear observation map
    linear_weights = {id(m.weight) for m in on.modules() if isinstance(m, Linear)} | {id(on.emission_weight)}
    changed = 0
    for (name, a), b in zip(on.named_parameters(), off.parameters()):
        if id(a) in linear_weights and np.any(a.data != 0):
            assert not np.array_equal(a.data, b.data), name
            changed += 1
        elif id(a) not in linear_weights:
            assert np.array_equal(a.data, b.data), name
    assert changed > 0


@pytest.fixture(scope="module")
def tiny_data():
    return generate_toy_dataset("intersection-3exit", 3, seed=3, future_steps=6)


def _tiny_train(data, **kw):
    cfg = ModelConfig(**TINY)
    tc = TrainConfig(epochs=kw.pop("epochs", 2), batch_size=2, warmup_steps=2, dropout=0.0, **kw)
    return train(data, cfg, tc)


def test_training_is_deterministic(tiny_data):
    a = _tiny_train(tiny_data)
    b = _tiny_train(tiny_data)
    assert a.trace_csv() == b.trace_csv()
    assert len(a.trace) == 4
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.model.parameters(), b.model.parameters()))


def test_training_with_dropout_is_deterministic(tiny_data):
    cfg = ModelConfig(**dict(TINY, dropout=0.1))
    tc = TrainConfig(epochs=1, batch_size=3, warmup_steps=1, dropout=0.1)
    assert train(tiny_data, cfg, tc).trace_csv() == train(tiny_data, cfg, tc).trace_csv()


def test_zero_epochs_returns_initialization(tiny_data):
    res = _tiny_train(tiny_data, epochs=0)
    init = Niva(ModelConfig(**TINY))
    assert res.trace == []
    assert checkpoint_bytes({}, res.model.state_dict()) == checkpoint_bytes({}, init.state_dict())


def test_empty_dataset_and_divergence(tiny_data):
    with pytest.raises(ValueError):
        train([], ModelConfig(**TINY))
    model = Niva(ModelConfig(**TINY))
    model.emission_bias.data = np.full(3, np.nan)
    with pytest.raises(TrainingDiverged) as info:
        train(tiny_data, model.cfg, TrainConfig(epochs=1, batch_size=3, warmup_steps=1, dropout=0.0),
              model=model)
    assert info.value.batch_id == 1


def test_e_step_single_intention_and_idempotence(tiny_data):
    one = Niva(ModelConfig(**dict(TINY, num_intentions=1)))
    items = [prepare(s, one) for s in tiny_data]
    es = e_step(one, items, DirichletState.symmetric(1))
    assert np.all(es.phi == 1.0) and np.all(es.best == 0)

    model = Niva(ModelConfig(**TINY))
    items = [prepare(s, model) for s in tiny_data]
    a = e_step(model, items, DirichletState.symmetric(3), use_dirichlet=True)
    b = e_step(model, items, DirichletState.symmetric(3), use_dirichlet=True)
    assert np.array_equal(a.phi, b.phi) and np.array_equal(a.dirichlet.concentration, b.dirichlet.concentration)
    np.testing.assert_allclose(a.phi.sum(axis=1), 1.0, atol=1e-12)


def test_e_step_ties_pick_lowest_index():
    es = fixed_assignment_step((2, 3), np.array([0, 2]), DirichletState.symmetric(3))
    assert es.best.tolist() == [0, 2]
    phi = responsibilities_batch(np.zeros((1, 3)))
    assert int(np.argmax(phi, axis=1)[0]) == 0


def test_kl_terms_vanish_at_the_prior():
    assert kl_gaussian_std(DiagGaussian(np.zeros(5), np.ones(5))) == 0.0
    assert kl_to_uniform(np.full((4, 3), 1 / 3)) == pytest.approx(0.0, abs=1e-14)


def test_recognition_outputs_and_gradient(tiny_data):
    model = Niva(ModelConfig(**TINY))
    item = prepare(tiny_data[0], model)
    with T.Tape() as tape:
        agent, _ = model.encode(item.arrays)
        mean, var = model.recognize(agent, item.rctx)
        loss = (mean * mean).sum() + var.sum()
    assert np.all(var.data > 0)
    names = [n for n, _ in model.named_parameters() if n.startswith("recognition.")]
    params = [p for n, p in model.named_parameters() if n.startswith("recognition.")]
    grads = tape.gradient(loss, params)
    assert all(np.any(g != 0) for g in grads), [n for n, g in zip(names, grads) if not np.any(g != 0)]
    again, _ = model.recognize(model.encode(item.arrays)[0], item.rctx)
    assert np.array_equal(again.data, mean.data)


def test_loss_finite_on_random_init(tiny_data):
    model = Niva(ModelConfig(**TINY))
    items = [prepare(s, model) for s in tiny_data]
    es = e_step(model, items, DirichletState.symmetric(3))
    for soft in (False, True):
        parts = elbo_loss(model, items, es, np.random.default_rng(0), soft=soft)
        assert np.isfinite(parts.loss.data)


def test_single_agent_loss_matches_gaussian_module():
    """One agent, one target step, K=1: loss = -log marginal + style KL."""
    src = micro_scenario(0)
    scen = Scenario("one", [[s[0]] for s in src.history], [[src.future[0][0]]], src.map, src.signals)
    cfg = ModelConfig(**dict(TINY, num_intentions=1))
    model = Niva(cfg)
    rng = np.random.default_rng(9)
    for _, p in model.named_parameters():
        p.data = p.data + 0.2 * rng.normal(size=p.data.shape)
    item = prepare(scen, model)
    eta = rng.normal(size=(1, cfg.style_dim))
    es = fixed_assignment_step((1, 1), np.array([0]), DirichletState.symmetric(1))
    loss = float(elbo_loss(model, [item], es, None, style_noise=eta).loss.data)

    with T.paused():
        agent, tokens = model.encode(item.arrays)
        mu_b, var_b = (t.data for t in model.recognize(agent, item.rctx))
        style = mu_b + np.sqrt(var_b) * eta
        *_, mean, var = model.forward(item.arrays, item.ctx, np.zeros(1, dtype=int), style)
    marg = marginal_predictive(DiagGaussian(mean.data[0, 0], var.data[0, 0]), model.emission())
    expected = -log_marginal_density(marg, item.ctx.obs[0, 0]) + kl_gaussian_std(DiagGaussian(mu_b[0], var_b[0]))
    assert loss == pytest.approx(expected, rel=1e-10, abs=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 2 ** 31), st.booleans())
def test_exact_e_step_never_increases_objective(n, k, seed, use_dirichlet):
    rng = np.random.default_rng(seed)
    loglik = rng.normal(scale=20.0, size=(n, k))
    prior = DirichletState.symmetric(k, float(rng.uniform(0.5, 3.0)))
    phi_prev = rng.dirichlet(np.ones(k), size=n)
    dir_prev = dirichlet_update(prior, rng.dirichlet(np.ones(k), size=n))
    before = variational_objective(loglik, phi_prev, dir_prev, use_dirichlet)
    phi = responsibilities_batch(loglik, dir_prev, use_dirichlet)
    mid = variational_objective(loglik, phi, dir_prev, use_dirichlet)
    after = variational_objective(loglik, phi, dirichlet_update(prior, phi), use_dirichlet)
    assert mid <= before + 1e-9
    assert after <= mid + 1e-9


# --- bound versus exact evidence on an enumerable toy ------------------------

GH_NODES, GH_WEIGHTS = np.polynomial.hermite.hermgauss(64)


def _toy_problem(seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 2)) + 2 * np.eye(2)
    cov = a @ np.diag([0.3, 0.5]) @ a.T + 0.2 ** 2 * np.eye(2)
    truth_c = np.array([[2.0, 0.0], [-2.0, 1.0]])
    truth_d = np.array([0.5, -1.0])
    z = np.array([0, 1, 1, 0])
    b = rng.normal(size=4)
    mean = (truth_c[z] + b[:, None] * truth_d)[:, None, :] @ a.T  # (N, 1, 2)
    obs = mean + rng.multivariate_normal(np.zeros(2), cov, size=(4, 3))
    return a, cov, obs


def _loglik(c, d, b, a, cov, obs):
    """log p(o_n | z=k, b) for every agent n, intention k and style value b (N, K, Q)."""
    prec = np.linalg.inv(cov)
    logdet = np.linalg.slogdet(cov)[1]
    pred = (c[None, :, None, :] + b[:, None, :, None] * d) @ a.T  # (N, K, Q, 2)
    r = obs[:, None, None, :, :] - pred[:, :, :, None, :]  # (N, K, Q, T, 2)
    quad = np.einsum("...i,ij,...j->...", r, prec, r)
    return (-0.5 * (quad + logdet + 2 * np.log(2 * np.pi))).sum(-1)


def _log_evidence(c, d, a, cov, obs):
    b = np.broadcast_to(np.sqrt(2.0) * GH_NODES, (obs.shape[0], 64))
    ll = _loglik(c, d, b, a, cov, obs)  # (N, K, Q)
    w = np.log(GH_WEIGHTS / np.sqrt(np.pi))
    return float(special.logsumexp(ll + w + np.log(0.5), axis=(1, 2)).sum())


def _elbo(c, d, mu, log_sd, phi, a, cov, obs):
    b = mu[:, None] + np.sqrt(2.0) * np.exp(log_sd)[:, None] * GH_NODES
    expected = (_loglik(c, d, b, a, cov, obs) * (GH_WEIGHTS / np.sqrt(np.pi))).sum(-1)  # (N, K)
    sd2 = np.exp(2 * log_sd)
    kl_b = 0.5 * (mu ** 2 + sd2 - 1 - 2 * log_sd).sum()
    kl_z = (special.xlogy(phi, phi) - phi * np.log(0.5)).sum()
    return float((phi * expected).sum() - kl_b - kl_z), expected


def test_elbo_lower_bounds_log_evidence_during_training():
    a, cov, obs = _toy_problem()
    rng = np.random.default_rng(1)
    theta = [rng.normal(size=(2, 2)), rng.normal(size=2), np.zeros(4), np.full(4, -0.5)]
    phi = np.full((4, 2), 0.5)

    def objective(flat):
        parts = np.split(flat, np.cumsum([4, 2, 4]))
        return -_elbo(parts[0].reshape(2, 2), parts[1], parts[2], parts[3], phi, a, cov, obs)[0]

    gaps = []
    for _ in range(60):
        c, d, mu, log_sd = theta
        _, expected = _elbo(c, d, mu, log_sd, phi, a, cov, obs)
        phi = special.softmax(expected, axis=1)  # exact E-step for q(z)
        bound, _ = _elbo(c, d, mu, log_sd, phi, a, cov, obs)
        evidence = _log_evidence(c, d, a, cov, obs)
        gaps.append(evidence - bound)
        assert bound <= evidence + 1e-9
        flat = np.concatenate([t.reshape(-1) for t in theta])
        grad = T.numerical_gradient(objective, flat, 1e-6)
        flat = flat - 0.02 * grad
        theta = [p.reshape(t.shape) for p, t in zip(np.split(flat, np.cumsum([4, 2, 4])), theta)]
    assert gaps[-1] < gaps[0]  # the bound tightens as q approaches the posterior


def test_perturbed_inputs_keep_history_and_steer_back(intersection_scenarios):
    model = Niva(ModelConfig(**TINY))
    item = prepare(intersection_scenarios[1], model)
    noisy = perturbed(item, model, np.random.default_rng(0), 0.05, 0.01)
    t0 = item.arrays.history_steps
    assert np.array_equal(noisy.arrays.poses[:t0], item.arrays.poses[:t0])
    assert not np.allclose(noisy.arrays.poses[t0:], item.arrays.poses[t0:])
    # each target delta leads from the perturbed previous pose to the recorded one
    reached = apply_delta(noisy.ctx.query_poses, noisy.ctx.obs)
    recorded = np.transpose(item.arrays.poses[t0:], (1, 0, 2))
    np.testing.assert_allclose(reached[..., :2], recorded[..., :2], atol=1e-9)
    np.testing.assert_allclose(np.angle(np.exp(1j * (reached[..., 2] - recorded[..., 2]))), 0.0, atol=1e-9)
    assert np.array_equal(item.ctx.obs, prepare(intersection_scenarios[1], model).ctx.obs)


def test_drift_training_is_deterministic(intersection_scenarios):
    cfg = TrainConfig(epochs=2, batch_size=2, warmup_steps=1, dropout=0.0, input_drift_xy=0.05,
                      input_drift_heading=0.01)
    runs = [train(intersection_scenarios, ModelConfig(**TINY), cfg) for _ in range(2)]
    assert [r["loss"] for r in runs[0].trace] == [r["loss"] for r in runs[1].trace]
    with pytest.raises(ValueError):
        TrainConfig(input_drift_xy=-1.0)
