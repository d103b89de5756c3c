import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import integrate

from calsheq.market import MarketConfig, MarketEnv, market_supertype
from calsheq.core import EpisodeStreams, SupertypeProfile, run_episode
from calsheq.policy import (GaussianPolicy, OffPolicyBatchError, PPOConfig, SharedPolicy, finite_difference_gradient_check,
                            gae, load_checkpoint, save_checkpoint, shared_gradient, flat_grad)
from calsheq.training import PolicySpec, make_shared_trainer

from helpers import bandit_ppo


def _policy(seed=0, **kw):
    torch.manual_seed(seed)
    return GaussianPolicy(3, [-1.0, 0.0], [1.0, 2.0], hidden=(8, 8), **kw)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30, allow_nan=False), min_size=2, max_size=2))
def test_squash_stays_in_the_box(u):
    pol = _policy()
    a = pol.squash(torch.tensor([u], dtype=torch.float32))[0]
    assert float(a[0]) >= -1.0 and float(a[0]) <= 1.0
    assert float(a[1]) >= 0.0 and float(a[1]) <= 2.0


def test_log_density_integrates_to_one():
    torch.manual_seed(0)
    pol = GaussianPolicy(1, [2.0], [5.0], hidden=(4,), init_log_std=-0.5)
    with torch.no_grad():
        mean, log_std = pol(torch.ones(1, 1))

    def density(a):
        y = (a - 2.0) / 3.0 * 2 - 1
        u = torch.tensor([[np.arctanh(np.clip(y, -1 + 1e-15, 1 - 1e-15))]])
        return float(pol.log_prob_from(mean.double(), log_std.double(), u.double()).exp())

    total, _ = integrate.quad(density, 2.0, 5.0, limit=200)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_finite_difference_gradient_check():
    pol = _policy(init_log_std=-0.7)
    rng = np.random.default_rng(0)
    res = finite_difference_gradient_check(pol, rng.normal(size=(16, 3)), rng.normal(size=(16, 2)), n_params=150)
    assert res.max_rel_error < 1e-4


def test_sigma_clamp():
    pol = _policy(init_log_std=-20.0, sigma_bounds=(1e-2, 1.0))
    _, log_std = pol(torch.zeros(1, 3))
    assert torch.allclose(log_std.exp(), torch.full((1, 2), 1e-2))


def test_vector_init_log_std_and_mean():
    pol = _policy(init_log_std=[-1.0, -3.0], init_mean=[0.5, -0.5])
    mean, log_std = pol(torch.zeros(1, 3))
    assert np.allclose(log_std.detach().numpy(), [[-1.0, -3.0]], atol=1e-2)
    assert np.allclose(mean.detach().numpy(), [[0.5, -0.5]], atol=1e-2)


def test_gae_matches_reward_to_go_when_lambda_is_one():
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    adv, ret = gae(r, v, 0.9, 1.0)
    disc = 0.9 ** np.arange(6)
    to_go = np.array([[(r[i, t:] * disc[:6 - t]).sum() for t in range(6)] for i in range(3)])
    assert np.allclose(ret, to_go) and np.allclose(adv, to_go - v)


def _market_episode(policy, seed=0):
    env = MarketEnv(MarketConfig(n_merchants=2))
    prof = SupertypeProfile((0, 1), (market_supertype([0.5, 0.5], 0.5, 0.1), market_supertype([0.8, 0.2], 1.0, 0.3)))
    return env, run_episode(env, prof, policy, EpisodeStreams.create(seed, ("episode", 0), 2))


def test_shared_gradient_is_average_of_agent_gradients():
    env = MarketEnv(MarketConfig(n_merchants=2))
    trainer = make_shared_trainer(env, PolicySpec(hidden=(16,)), PPOConfig(), seed=0)
    pol = trainer.policy
    _, ep = _market_episode(pol)
    params = list(pol.parameters())
    g = flat_grad(shared_gradient(pol, ep), params)
    per_agent = []
    for i in range(2):
        x = pol.inputs(ep.obs[i], ep.types[i])
        lp = pol.log_prob_raw(x, torch.as_tensor(ep.raw_actions[i], dtype=pol.dtype))
        to_go = np.flip(np.cumsum(np.flip(ep.rewards[i]))).copy()
        gi = torch.autograd.grad((lp * torch.as_tensor(to_go, dtype=pol.dtype)).sum(), params, allow_unused=True)
        per_agent.append(flat_grad(gi, params))
    assert np.allclose(g, np.mean(per_agent, axis=0), rtol=1e-4, atol=1e-4)


def test_shared_gradient_rejects_off_policy_batch():
    env = MarketEnv(MarketConfig(n_merchants=2))
    trainer = make_shared_trainer(env, PolicySpec(hidden=(16,)), PPOConfig(), seed=0)
    _, ep = _market_episode(trainer.policy)
    with torch.no_grad():
        for p in trainer.policy.parameters():
            p.add_(0.1)
    with pytest.raises(OffPolicyBatchError):
        shared_gradient(trainer.policy, ep)


def test_ppo_config_rejects_bad_values():
    with pytest.raises(ValueError):
        PPOConfig(clip=0.0)
    with pytest.raises(ValueError):
        PPOConfig(kl_target=-1.0)


def test_bandit_ppo_finds_the_optimum():
    means, kls = bandit_ppo(0.8, iterations=200)
    assert abs(means[-1] - 0.8) <= 0.05
    assert kls.mean() <= 0.04


def test_checkpoint_roundtrip_and_config_guard(tmp_path):
    env = MarketEnv(MarketConfig(n_merchants=2))
    a = make_shared_trainer(env, PolicySpec(hidden=(8,)), PPOConfig(), seed=0)
    b = make_shared_trainer(env, PolicySpec(hidden=(8,)), PPOConfig(), seed=1)
    path = save_checkpoint(tmp_path / "c.pt", a.state_dict(), {"k": 1})
    b.load_state_dict(load_checkpoint(path, {"k": 1}))
    for p, q in zip(a.policy.parameters(), b.policy.parameters()):
        assert torch.equal(p, q)
    with pytest.raises(ValueError):
        load_checkpoint(path, {"k": 2})


def test_shared_policy_checks_dimensions():
    env = MarketEnv(MarketConfig(n_merchants=2))
    pol = SharedPolicy(env.obs_dim + 1, env.type_dim, env.action_low, env.action_high, hidden=(4,))
    prof = SupertypeProfile((0, 0), (market_supertype([0.5, 0.5], 0.5, 0.1),))
    from calsheq.core import ConfigurationError
    with pytest.raises(ConfigurationError):
        run_episode(env, prof, pol, EpisodeStreams.create(0, ("episode", 0), 2))
