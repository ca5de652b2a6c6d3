import numpy as np
import pytest

from dmpo.autodiff import Graph, Tensor
from dmpo.envs import gen_demos, make_env
from dmpo.meanflow import Stage1Config, pretrain
from dmpo.nets import init_velocity_net, init_value_net, param_checksum
from dmpo.ppo import (
    MiniBatch,
    Stage2Config,
    Stage2Nets,
    bc_loss,
    bc_schedule,
    chain_logprob_traced,
    clipped_pg_loss,
    collect_rollouts,
    finetune,
    gae,
    ppo_ratio,
    stage2_loss,
    value_loss,
)
from dmpo.sampler import sample_stochastic

from helpers import rel_err


# ---------------------------------------------------------------------------
# GAE


def test_gae_single_step():
    adv, ret = gae([2.0], [0.5, 0.3], [0.0], 0.9, 0.8)
    delta = 2.0 + 0.9 * 0.3 - 0.5
    assert adv[0] == pytest.approx(delta)
    assert ret[0] == pytest.approx(delta + 0.5)


def test_gae_hand_case():
    adv, ret = gae([1.0, 1.0], [0.0, 0.0, 0.0], [0.0, 0.0], 1.0, 1.0)
    np.testing.assert_allclose(adv, [2.0, 1.0])
    np.testing.assert_allclose(ret, [2.0, 1.0])


def test_gae_lambda_zero_is_one_step_td():
    rng = np.random.default_rng(0)
    r = rng.normal(size=6)
    v = rng.normal(size=7)
    adv, _ = gae(r, v, np.zeros(6), 0.95, 0.0)
    delta = r + 0.95 * v[1:] - v[:-1]
    np.testing.assert_allclose(adv, delta, atol=1e-12)


def _gae_double_sum(rewards, values, dones, gamma, lam):
    T = len(rewards)
    delta = np.array(
        [rewards[t] + gamma * values[t + 1] * (1 - dones[t]) - values[t] for t in range(T)]
    )
    adv = np.zeros(T)
    for t in range(T):
        acc = 0.0
        scale = 1.0
        for ell in range(T - t):
            acc += scale * delta[t + ell]
            if dones[t + ell]:
                break
            scale *= gamma * lam
        adv[t] = acc
    return adv


def test_gae_matches_double_sum_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        T = int(rng.integers(1, 65))
        r = rng.normal(size=T)
        v = rng.normal(size=T + 1)
        d = (rng.random(T) < 0.1).astype(float)
        gamma = rng.uniform(0.8, 1.0)
        lam = rng.uniform(0.0, 1.0)
        adv, _ = gae(r, v, d, gamma, lam)
        want = _gae_double_sum(r, v, d, gamma, lam)
        assert np.max(np.abs(adv - want)) < 1e-10


def test_gae_length_mismatch():
    with pytest.raises(ValueError):
        gae([1.0, 2.0], [0.0, 0.0], [0.0, 0.0], 0.9, 0.9)


# ---------------------------------------------------------------------------
# surrogate pieces


def test_ppo_ratio_basics():
    assert ppo_ratio(0.3, 0.3).item() == pytest.approx(1.0)
    assert ppo_ratio(np.log(2.0), 0.0).item() == pytest.approx(2.0)


def test_ppo_ratio_overflow_error():
    with pytest.raises(OverflowError):
        ppo_ratio(1000.0, 0.0)
    with pytest.raises(ValueError):
        ppo_ratio(np.nan, 0.0)


def test_ppo_ratio_round_trip_at_unchanged_params():
    net = init_velocity_net(2, 3, 2)
    obs = np.random.default_rng(2).normal(size=3)
    chain = sample_stochastic(net, obs, 3, 0.01, np.random.default_rng(3))
    lp = chain_logprob_traced(
        net, chain.states[None], obs[None], Tensor(chain.sigma), 3
    )
    rho = ppo_ratio(lp, np.array([chain.total_logprob]))
    assert abs(rho.data[0] - 1.0) < 1e-10


def test_clipped_pg_loss_hand_cases():
    assert clipped_pg_loss(np.array([2.0]), np.array([1.0]), 0.2).item() == pytest.approx(-1.2)
    assert clipped_pg_loss(np.array([0.5]), np.array([-1.0]), 0.2).item() == pytest.approx(0.8)


def test_clipped_pg_loss_at_ratio_one():
    rng = np.random.default_rng(4)
    adv = rng.normal(size=32)
    got = clipped_pg_loss(np.ones(32), adv, 0.2).item()
    assert got == pytest.approx(float(np.mean(-adv)), abs=1e-12)


def test_clip_inactive_inside_band():
    rng = np.random.default_rng(5)
    rho = rng.uniform(0.8, 1.2, size=64)
    adv = rng.normal(size=64)
    got = clipped_pg_loss(rho, adv, 0.2).item()
    assert got == pytest.approx(float(np.mean(-adv * rho)), abs=1e-12)


def test_clipped_at_least_unclipped_pointwise():
    rng = np.random.default_rng(6)
    rho = np.exp(rng.normal(0, 1, size=10_000))
    adv = rng.normal(size=10_000)
    for r_, a_ in ((rho, adv),):
        clipped = np.maximum(-a_ * r_, -a_ * np.clip(r_, 0.8, 1.2))
        assert np.all(clipped >= -a_ * r_ - 1e-15)
    got = clipped_pg_loss(rho, adv, 0.2).item()
    assert got >= float(np.mean(-adv * rho)) - 1e-12


def test_value_loss_cases():
    assert value_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0])).item() == 0.0
    assert value_loss(np.array([0.0]), np.array([2.0])).item() == pytest.approx(2.0)


def test_value_loss_gradient():
    v = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    r = np.array([0.0, 1.0, 0.5])
    with Graph() as g:
        loss = value_loss(v, r)
    grads = g.backward(loss)
    np.testing.assert_allclose(grads[v], (v.data - r) / 3.0, atol=1e-12)


# ---------------------------------------------------------------------------
# behavior cloning


def test_bc_loss_identical_nets_zero():
    net = init_velocity_net(7, 3, 2)
    obs = np.random.default_rng(7).normal(size=(5, 3))
    noise = np.random.default_rng(8).standard_normal((5, 2))
    assert bc_loss(net, net.clone(), obs, noise).item() == pytest.approx(0.0, abs=1e-24)


def test_bc_loss_constant_offset():
    net = init_velocity_net(9, 3, 2)
    shifted = net.clone()
    shifted.params["out_b"].data[...] += np.array([0.3, -0.4])
    obs = np.random.default_rng(9).normal(size=(6, 3))
    noise = np.random.default_rng(10).standard_normal((6, 2))
    want = 0.3**2 + 0.4**2
    assert bc_loss(net, shifted, obs, noise).item() == pytest.approx(want, abs=1e-10)


def test_bc_loss_gradient_only_into_current():
    frozen = init_velocity_net(11, 3, 2)
    current = init_velocity_net(12, 3, 2)
    obs = np.random.default_rng(11).normal(size=(4, 3))
    noise = np.random.default_rng(12).standard_normal((4, 2))
    with Graph() as g:
        loss = bc_loss(frozen, current, obs, noise)
    grads = g.backward(loss)
    frozen_params = set(map(id, frozen.parameters()))
    assert all(id(p) not in frozen_params for p in grads)
    assert any(id(p) in set(map(id, current.parameters())) for p in grads)


def test_bc_schedule_branches():
    cfg = Stage2Config(lam_bc_init=1.0, lam_bc_final=0.0, bc_decay_start=10, bc_decay_end=30)
    assert bc_schedule(0, cfg) == 1.0
    assert bc_schedule(9, cfg) == 1.0
    assert bc_schedule(20, cfg) == pytest.approx(0.5)
    assert bc_schedule(30, cfg) == 0.0
    assert bc_schedule(100, cfg) == 0.0


def test_bc_schedule_validation():
    with pytest.raises(ValueError):
        Stage2Config(bc_decay_start=5, bc_decay_end=5)
    cfg = Stage2Config()
    with pytest.raises(ValueError):
        bc_schedule(-1, cfg)


# ---------------------------------------------------------------------------
# stage-2 loss composition


def _make_minibatch(net, seed=0, M=6, K=2, sigma=0.01):
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(M, net.d_obs))
    states, old_lp = [], []
    for i in range(M):
        chain = sample_stochastic(net, obs[i], K, sigma, np.random.default_rng(seed + i))
        states.append(chain.states)
        old_lp.append(chain.total_logprob)
    return MiniBatch(
        obs=obs,
        states=np.stack(states),
        old_logprobs=np.array(old_lp),
        advantages=rng.normal(size=M),
        returns=rng.normal(size=M),
        bc_noise=rng.standard_normal((M, net.d_a)),
    )


def test_stage2_loss_reduces_to_pg_when_coeffs_zero():
    net = init_velocity_net(13, 3, 2)
    vnet = init_value_net(13, 3)
    cfg = Stage2Config(lam_value=0.0, lam_entropy=0.0, lam_bc_init=0.0, lam_bc_final=0.0,
                       K=2, sigma=0.01)
    nets = Stage2Nets(policy=net, value=vnet, frozen=net.clone())
    mb = _make_minibatch(net, K=2)
    total, parts = stage2_loss(mb, nets, cfg, n=0)
    assert total.item() == pytest.approx(parts["pg"], abs=1e-12)


def test_stage2_loss_components_sum_to_total():
    net = init_velocity_net(14, 3, 2)
    vnet = init_value_net(14, 3)
    cfg = Stage2Config(K=2, sigma=0.01)
    nets = Stage2Nets(policy=net, value=vnet, frozen=net.clone())
    mb = _make_minibatch(net, K=2)
    total, parts = stage2_loss(mb, nets, cfg, n=3)
    manual = (
        parts["pg"]
        + cfg.lam_value * parts["v"]
        + cfg.lam_entropy * parts["ent"]
        + parts["lambda_bc"] * parts["bc"]
    )
    assert total.item() == pytest.approx(manual, abs=1e-12)


def test_stage2_pg_at_theta_old_is_unclipped():
    # at unchanged parameters rho == 1 so the pg component is mean(-A)
    net = init_velocity_net(15, 3, 2)
    vnet = init_value_net(15, 3)
    cfg = Stage2Config(K=1, sigma=0.01)
    nets = Stage2Nets(policy=net, value=vnet, frozen=net.clone())
    mb = _make_minibatch(net, K=1)
    _, parts = stage2_loss(mb, nets, cfg, n=0)
    assert parts["pg"] == pytest.approx(float(np.mean(-mb.advantages)), abs=1e-8)


def test_stage2_gradients_match_finite_differences():
    net = init_velocity_net(16, 3, 2, d_h=4, enc_width=4, trunk_width=4)
    vnet = init_value_net(16, 3, width=4)
    cfg = Stage2Config(K=1, sigma=0.05)
    nets = Stage2Nets(policy=net, value=vnet, frozen=net.clone())
    mb = _make_minibatch(net, K=1, sigma=0.05)

    with Graph() as g:
        total, _ = stage2_loss(mb, nets, cfg, n=0)
    grads = g.backward(total)

    from helpers import fd_grad

    for p in (net.params["out_w"], vnet.params["out_w"], net.params["enc0_b"]):
        orig = p.data.copy()

        def f(arr):
            p.data[...] = arr
            val, _ = stage2_loss(mb, nets, cfg, n=0)
            p.data[...] = orig
            return val.item()

        assert rel_err(grads[p], fd_grad(f, orig.copy()), floor=1e-6) < 1e-3


# ---------------------------------------------------------------------------
# the full loop


def _pretrained(seed=0):
    ds = gen_demos("point-reach", 6, seed=seed)
    return pretrain(ds, Stage1Config(epochs=5, seed=seed))[0]


def test_finetune_zero_iterations_identity():
    net = _pretrained()
    cfg = Stage2Config(iterations=0, seed=0)
    policy, _, metrics = finetune(net, lambda: make_env("point-reach"), cfg)
    assert param_checksum(policy) == param_checksum(net)
    assert metrics == []


def test_finetune_deterministic_metrics():
    net = _pretrained()
    cfg = Stage2Config(iterations=2, seed=5, rollout_steps=64, n_envs=4)
    _, _, m1 = finetune(net, lambda: make_env("point-reach"), cfg)
    _, _, m2 = finetune(net, lambda: make_env("point-reach"), cfg)
    assert m1 == m2


def test_finetune_frozen_net_untouched():
    net = _pretrained()
    before = param_checksum(net)
    cfg = Stage2Config(iterations=2, seed=1, rollout_steps=64, n_envs=4)
    finetune(net, lambda: make_env("point-reach"), cfg)
    assert param_checksum(net) == before


def test_old_logprob_freeze_before_update():
    net = _pretrained()
    vnet = init_value_net(0, net.d_obs)
    cfg = Stage2Config(rollout_steps=32, n_envs=4, K=2)
    nets = Stage2Nets(policy=net, value=vnet, frozen=net.clone())
    import numpy.random as npr

    ss = npr.SeedSequence(0)
    env_rngs = [npr.default_rng(s) for s in ss.spawn(4)]
    envs_list = [make_env("point-reach") for _ in range(4)]
    obs_cur = [e.reset(int(env_rngs[i].integers(2**63))) for i, e in enumerate(envs_list)]
    batch, _ = collect_rollouts(nets, envs_list, env_rngs, obs_cur, cfg)

    lp = chain_logprob_traced(net, batch.states, batch.obs, Tensor(np.full(net.d_a, cfg.sigma)), cfg.K)
    rho = ppo_ratio(lp, batch.old_logprobs)
    assert np.max(np.abs(rho.data - 1.0)) < 1e-10


def test_finetune_metrics_columns():
    from dmpo.ppo import METRIC_COLUMNS

    net = _pretrained()
    cfg = Stage2Config(iterations=1, seed=2, rollout_steps=64, n_envs=4)
    _, _, metrics = finetune(net, lambda: make_env("point-reach"), cfg)
    assert set(metrics[0]) == set(METRIC_COLUMNS)


def test_stage2_config_validation():
    with pytest.raises(ValueError):
        Stage2Config(gamma=1.0)
    with pytest.raises(ValueError):
        Stage2Config(clip_eps=0.0)
    with pytest.raises(ValueError):
        Stage2Config(sigma=0.0)
    with pytest.raises(ValueError):
        Stage2Config(lam_value=-1.0)


def test_learnable_sigma_mode():
    # optional per-dimension log-sigma head: entropy becomes differentiable
    net = init_velocity_net(20, 3, 2)
    vnet = init_value_net(20, 3)
    log_sigma = Tensor(np.log(np.full(2, 0.05)), requires_grad=True)
    nets = Stage2Nets(policy=net, value=vnet, frozen=net.clone(), log_sigma=log_sigma)
    cfg = Stage2Config(K=1, sigma=0.05, sigma_learnable=True)
    mb = _make_minibatch(net, K=1, sigma=0.05)
    with Graph() as g:
        total, parts = stage2_loss(mb, nets, cfg, n=0)
    grads = g.backward(total)
    assert log_sigma in grads
    assert np.all(np.isfinite(grads[log_sigma]))
    # fixed-sigma entropy value must match the closed form at the same sigma
    from dmpo.sampler import step_entropy

    assert parts["ent"] == pytest.approx(-1 * step_entropy(2, 0.05), abs=1e-12)


def test_finetune_learnable_sigma_runs():
    net = _pretrained()
    cfg = Stage2Config(iterations=2, seed=3, rollout_steps=64, n_envs=4, sigma_learnable=True)
    policy, _, metrics = finetune(net, lambda: make_env("point-reach"), cfg)
    assert len(metrics) == 2
