import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calsheq.core import ConfigurationError, EpisodeStreams, SupertypeProfile, check_type_symmetry, run_episode
from calsheq.market import (NULL_ACTION, MarketConfig, MarketEnv, increment_ranges, market_supertype,
                            match_customers, settle)
from calsheq.training import PolicySpec, make_shared_trainer
from calsheq.policy import PPOConfig

from helpers import FixedActionPolicy, UniformRandomPolicy


def _profile(n=3, xi=(0.5, 0.5), xstd=(0.0, 0.2)):
    return SupertypeProfile((0,) + (1,) * (n - 1), (market_supertype([0.6, 0.4], xi[0], xstd[0], fix_std=True),
                                                    market_supertype([0.5, 0.9], xi[1], xstd[1])))


def conservation_residuals(steps: int, seed: int = 0):
    env = MarketEnv(MarketConfig(n_merchants=3))
    pol = UniformRandomPolicy(env.action_low, env.action_high)
    goods = cash = 0.0
    worst = 0.0
    for k in range(steps // env.horizon):
        ep = run_episode(env, _profile(), pol, EpisodeStreams.create(seed, ("episode", k), 3))
        goods += ep.info["goods_residual"].sum()
        cash += ep.info["cash_residual"].sum()
        worst = max(worst, abs(goods), abs(cash))
    return worst


def test_goods_and_cash_are_conserved():
    assert conservation_residuals(3000) <= 1e-9


def test_no_trade_earns_exactly_zero_without_inventory_penalty():
    env = MarketEnv(MarketConfig(n_merchants=3))
    prof = _profile(xi=(0.0, 0.0), xstd=(0.0, 0.0))
    for k in range(5):
        ep = run_episode(env, prof, FixedActionPolicy(NULL_ACTION), EpisodeStreams.create(1, ("episode", k), 3))
        assert np.all(ep.rewards == 0.0)
        assert ep.info["captured_qty"].sum() == 0.0


def test_type_symmetry_under_relabelling():
    env = MarketEnv(MarketConfig(n_merchants=3))
    trainer = make_shared_trainer(env, PolicySpec(hidden=(16,), init_log_std=-1.0), PPOConfig(), seed=0)
    rep = check_type_symmetry(env, _profile(), trainer.policy, (0, 2, 1), n_trials=10)
    assert rep.ok, rep.violations


def test_symmetry_check_detects_a_broken_environment():
    class Biased(MarketEnv):
        def step(self, actions):
            obs, r, done, info = super().step(actions)
            r = r.copy()
            r[-1] += 1e-3 * r[0]       # the last merchant cares who sits in slot 0
            return obs, r, done, info
    env = Biased(MarketConfig(n_merchants=3))
    rep = check_type_symmetry(env, _profile(), UniformRandomPolicy(env.action_low, env.action_high), (1, 0, 2),
                              n_trials=3, agent=2)
    assert not rep.ok


def test_matching_prefers_better_price_then_reference():
    # two merchants, three selling customers all connected
    connected = np.ones((2, 3), bool)
    sells = np.array([True, True, True])
    keys = np.array([[0.1, 0.9, 0.5], [0.9, 0.1, 0.5]])
    w = match_customers([9.5, 9.6], [10.5, 10.5], connected, sells, 9.0, 11.0, keys)
    assert w.tolist() == [1, 1, 1]
    w = match_customers([9.5, 9.5], [10.5, 10.5], connected, sells, 9.0, 11.0, keys)
    assert w.tolist() == [1, 0, 0]                      # ties go to the larger key
    w = match_customers([8.0, 8.5], [10.5, 10.5], connected, sells, 9.0, 11.0, keys)
    assert w.tolist() == [-1, -1, -1]                   # worse than the reference


def test_settle_marks_inventory_at_mid_and_charges_tolerance():
    # buy 2 units at 9.5 with mid 10 -> 1.0 gain; xi = 0.25 on |q| = 2
    cash, q, r, hq = settle(0.0, 0.0, 2.0, 19.0, 0.0, 0.0, 0.0, 9.0, 11.0, 10.0, 10.0, 0.25)
    assert (cash, q, hq) == (-19.0, 2.0, 0.0)
    assert r == pytest.approx(1.0 - 0.5)
    # hedging half of an inventory of 4 sells 2 at the reference bid 9
    cash, q, r, hq = settle(0.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.5, 9.0, 11.0, 10.0, 10.0, 0.0)
    assert (cash, q, hq) == (18.0, 2.0, 2.0) and r == pytest.approx(-2.0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=2), st.floats(0, 5), st.floats(0, 2))
def test_drawn_types_respect_the_supertype(conn, xi, xstd):
    env = MarketEnv(MarketConfig(n_merchants=2))
    st_ = market_supertype(conn, xi, xstd)
    t = env.draw_type(st_, np.random.default_rng(0))
    assert t.values.shape == (3,)
    assert np.all((t.values[:2] >= 0) & (t.values[:2] <= 1)) and t.values[2] >= 0


def test_supertype_dimension_mismatch_is_rejected():
    env = MarketEnv(MarketConfig(n_merchants=2, n_clusters=3))
    with pytest.raises(ConfigurationError):
        env.draw_type(market_supertype([0.5, 0.5], 0.5, 0.1), np.random.default_rng(0))


def test_increment_ranges_follow_free_dimensions():
    prof = SupertypeProfile((0, 1), (market_supertype([0.5, 0.5], 0.5, 0.0, fix_std=True),
                                     market_supertype([0.5, 0.5], 0.5, 0.2, fix_tolerance=True)))
    assert increment_ranges(prof).tolist() == [1.0, 1.0, 5.0, 1.0, 1.0]


def test_episode_is_reproducible_from_its_key():
    env = MarketEnv(MarketConfig(n_merchants=3))
    pol = UniformRandomPolicy(env.action_low, env.action_high)
    a = run_episode(env, _profile(), pol, EpisodeStreams.create(5, ("episode", 2), 3))
    b = run_episode(env, _profile(), pol, EpisodeStreams.create(5, ("episode", 2), 3))
    assert np.array_equal(a.rewards, b.rewards) and np.array_equal(a.obs, b.obs)
