import math

import numpy as np
import pytest
import sympy
from hypothesis import given, settings, strategies as st

from calsheq.calibrator import (PERCENTILES, CalibrationTargetSet, Calsheq, CalibratorSettings, EpisodeMetrics,
                                Target, TargetComponent, TimescaleSchedule, ZeroIncrementCalibrator,
                                calibrator_reward, experiment_targets, make_calibrator_trainer, market_share,
                                nearest_rank, transaction_percentiles, validate_schedule)
from calsheq.core import SupertypeProfile
from calsheq.market import MarketConfig, MarketEnv, increment_ranges, market_supertype
from calsheq.policy import PPOConfig
from calsheq.training import PolicySpec, make_shared_trainer, shared_step


def _metrics(s1, total, pct1=None, pct2=None):
    pct = np.stack([np.asarray(pct1 if pct1 is not None else np.zeros(9), float),
                    np.asarray(pct2 if pct2 is not None else np.zeros(9), float)])
    return EpisodeMetrics(np.array([s1, total - s1]), total, pct)


# -- metrics -----------------------------------------------------------------

def test_market_share_examples():
    cust = np.array([60.0, 40.0])
    assert market_share(np.array([100.0, 0.0]), cust, [0]) == 1.0
    assert market_share(np.array([0.0, 0.0]), cust, [0, 1]) == 0.0
    assert market_share(np.array([25.0, 10.0]), cust, [0]) == 0.25
    assert market_share(np.array([5.0]), np.zeros(3), [0]) == 0.0


def test_nearest_rank_examples():
    assert nearest_rank(np.full(30, 5.0)).tolist() == [5.0] * 9
    p = nearest_rank(np.arange(1, 11))
    assert (p[0], p[4], p[8]) == (1, 5, 9)
    assert nearest_rank([]).tolist() == [0.0] * 9


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=60))
def test_nearest_rank_agrees_with_numpy_inverted_cdf(sample):
    ours = nearest_rank(sample)
    ref = np.percentile(np.asarray(sample), PERCENTILES, method="inverted_cdf")
    assert np.array_equal(ours, ref)


def test_transaction_percentiles_pool_individual_transactions():
    fills = np.zeros((3, 2, 2), dtype=int)
    fills[1, 0] = [4, 0]      # merchant 1: four unit-size trades
    fills[2, 1] = [0, 6]      # merchant 2: six trades of size 3
    p = transaction_percentiles(fills, [1.0, 3.0], [1, 2])
    assert p.tolist() == [1, 1, 1, 1, 3, 3, 3, 3, 3]


# -- reward ------------------------------------------------------------------

def test_reward_is_one_when_every_loss_vanishes():
    r, losses = calibrator_reward(experiment_targets(1), _metrics(0.3, 0.9, [8, 8, 8, 9, 9, 9, 10, 10, 10]))
    assert r == 1.0 and np.all(losses == 0)


def test_reward_experiment1_worked_example():
    pct = np.array([8, 8, 8, 9, 9, 9, 10, 10, 10], float) + np.array([1, -1] * 4 + [1])
    r, losses = calibrator_reward(experiment_targets(1), _metrics(0.10, 0.70, pct))
    assert losses.tolist() == pytest.approx([0.075, 1.0])
    assert r == pytest.approx(1 / 1.275, abs=1e-15)


def test_reward_experiment5_exact_target():
    r, _ = calibrator_reward(experiment_targets(5), _metrics(0.40, 0.80))
    assert r == 1.0


def test_target_set_sizes():
    assert [experiment_targets(k).n_targets for k in range(1, 6)] == [11, 20, 20, 2, 2]


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.lists(st.floats(0, 20), min_size=9, max_size=9),
       st.lists(st.floats(0, 20), min_size=9, max_size=9), st.integers(1, 5),
       st.sampled_from(["inverse_of_sum", "sum_of_inverses"]))
def test_reward_in_unit_interval_and_one_iff_losses_vanish(s1, s2, p1, p2, exp, comp):
    targets = experiment_targets(exp)
    targets.composition = comp
    m = EpisodeMetrics(np.array([s1, s2]), s1 + s2, np.array([p1, p2]))
    r, losses = calibrator_reward(targets, m)
    assert 0 < r <= 1
    assert (r == 1.0) == bool(np.all(losses == 0))


def test_target_validation():
    with pytest.raises(ValueError):
        Target("percentile", 1.0, group=0, percentile=15)
    with pytest.raises(ValueError):
        Target("market_share", 0.5)
    with pytest.raises(ValueError):
        TargetComponent(0.0, [Target("total_market_share", 0.5)])
    with pytest.raises(ValueError):
        CalibrationTargetSet([TargetComponent(1.0, [Target("total_market_share", 0.5)])], composition="max")


# -- schedules ---------------------------------------------------------------

def test_power_schedule_accepted_and_ratio_vanishes():
    rep = validate_schedule(TimescaleSchedule(), 10_000)
    assert rep.ok and rep.ratio_end < rep.ratio_start


@settings(max_examples=50, deadline=None)
@given(st.floats(0.51, 0.8), st.floats(0.05, 0.19), st.floats(1.0, 1000.0))
def test_schedule_offset_keeps_two_timescale_conditions(p_shared, gap, offset):
    sch = TimescaleSchedule(shared_exponent=p_shared, cal_exponent=p_shared + gap, offset=offset)
    assert validate_schedule(sch, 3000).ok
    plain = TimescaleSchedule(shared_exponent=p_shared, cal_exponent=p_shared + gap)
    assert plain.shared(7) == plain.shared_scale / 8 ** p_shared
    assert sch.shared(0) == sch.shared_scale and sch.cal(0) == sch.cal_scale


def test_constant_and_divergent_schedules_rejected():
    assert not validate_schedule(TimescaleSchedule(kind="constant", ratio=1.0), 100).ok
    assert not validate_schedule(TimescaleSchedule(cal_exponent=1.1), 100).ok
    assert not validate_schedule(TimescaleSchedule(shared_exponent=0.5), 100).ok
    assert not validate_schedule(TimescaleSchedule(shared_exponent=0.9, cal_exponent=0.6), 100).ok


@pytest.mark.parametrize("p", [0.45, 0.5, 0.55, 0.6, 0.9, 1.0, 1.1])
def test_robbins_monro_exponent_rule_matches_symbolic_series(p):
    m = sympy.symbols("m", positive=True, integer=True)
    q = sympy.Rational(str(p))
    diverges = not sympy.Sum(1 / (1 + m) ** q, (m, 1, sympy.oo)).is_convergent()
    squares_converge = sympy.Sum(1 / (1 + m) ** (2 * q), (m, 1, sympy.oo)).is_convergent()
    ok = validate_schedule(TimescaleSchedule(shared_exponent=0.51, cal_exponent=p), 50).ok
    assert ok == (diverges and bool(squares_converge) and p > 0.51)


# -- the two-timescale loop --------------------------------------------------

def _setup(calibrator=None, B=3):
    env = MarketEnv(MarketConfig(n_merchants=3, horizon=10))
    prof = SupertypeProfile((0, 1, 1), (market_supertype([0.5, 0.5], 0.5, 0.0, fix_std=True),
                                        market_supertype([0.5, 0.5], 0.5, 0.2)))
    shared = make_shared_trainer(env, PolicySpec(hidden=(16,)), PPOConfig(sgd_iterations=3), seed=0)
    step = increment_ranges(prof)
    if calibrator is None:
        calibrator = make_calibrator_trainer(prof, step, CalibratorSettings(
            policy=PolicySpec(hidden=(8,), init_log_std=math.log(0.5)), ppo=PPOConfig(sgd_iterations=2)), 0)
    loop = Calsheq(env, prof, shared, calibrator, experiment_targets(5), TimescaleSchedule(), B, step, seed=0)
    return env, prof, shared, loop


def test_particles_stay_in_bounds_even_with_wide_increments():
    _, prof, _, loop = _setup()
    lo, hi = prof.bounds()
    for _ in range(4):
        rec = loop.iteration()
        assert np.all(rec.profiles >= lo) and np.all(rec.profiles <= hi)
        assert rec.rcal.shape == (3,) and np.all((rec.rcal > 0) & (rec.rcal <= 1))


def test_zero_increment_calibrator_is_plain_self_play():
    env, prof, shared, loop = _setup(ZeroIncrementCalibrator())
    ref_env, _, ref_shared, _ = _setup(ZeroIncrementCalibrator())
    schedule = TimescaleSchedule()
    for m in range(1, 4):
        rec = loop.iteration()
        out = shared_step(ref_env, ref_shared, [prof] * 3, 0, m, lr=schedule.shared(m))
        assert np.array_equal(rec.profiles, np.tile(prof.vector(), (3, 1)))
        assert rec.shared_stats == out.stats
    for p, q in zip(shared.policy.parameters(), ref_shared.policy.parameters()):
        assert np.array_equal(p.detach().numpy(), q.detach().numpy())


def test_three_decisions_per_episode_give_three_transitions_each():
    env = MarketEnv(MarketConfig(n_merchants=3, horizon=12))
    prof = SupertypeProfile((0, 1, 1), (market_supertype([0.5, 0.5], 0.5, 0.0, fix_std=True),
                                        market_supertype([0.5, 0.5], 0.5, 0.2)))
    shared = make_shared_trainer(env, PolicySpec(hidden=(8,)), PPOConfig(sgd_iterations=1), seed=0)
    step = increment_ranges(prof)
    cal = make_calibrator_trainer(prof, step, CalibratorSettings(policy=PolicySpec(hidden=(8,))), 0)
    loop = Calsheq(env, prof, shared, cal, experiment_targets(5), TimescaleSchedule(), 4, step,
                   decisions_per_episode=3)
    rec = loop.iteration()
    assert rec.rcal.shape == (12,)


def test_state_dict_resumes_identically():
    _, _, _, a = _setup()
    _, _, _, b = _setup()
    a.iteration()
    b.load_state_dict(a.state_dict())
    ra, rb = a.iteration(), b.iteration()
    assert np.array_equal(ra.profiles, rb.profiles) and np.array_equal(ra.rcal, rb.rcal)
