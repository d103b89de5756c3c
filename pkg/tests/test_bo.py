import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import ConstantKernel, Matern

from calsheq.bo import (AcquisitionConfig, BOCalibration, GPHyper, GPSurrogate, acquisition, bo_calibration_loop,
                        matern52, propose)
from calsheq.calibrator import experiment_targets
from calsheq.core import SupertypeProfile
from calsheq.market import MarketConfig, MarketEnv, market_supertype
from calsheq.policy import PPOConfig
from calsheq.rng import stream
from calsheq.training import PolicySpec, make_shared_trainer


def _data(n=12, d=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, d))
    return X, np.sin(3 * X[:, 0]) + X[:, 1] ** 2 - X[:, -1] * (d > 2)


def test_matern_matches_sklearn_kernel():
    X, _ = _data()
    ours = matern52(X, X, 0.7, 1.3)
    ref = (ConstantKernel(1.3) * Matern(length_scale=0.7, nu=2.5))(X)
    assert np.allclose(ours, ref, atol=1e-12)


def test_posterior_matches_sklearn():
    X, y = _data()
    hyper = GPHyper(0.6, 1.0, 1e-3)
    gp = GPSurrogate(X, y, hyper)
    ref = GaussianProcessRegressor(ConstantKernel(1.0, "fixed") * Matern(0.6, "fixed", nu=2.5), alpha=1e-3,
                                   normalize_y=True, optimizer=None).fit(X, y)
    Xs = np.random.default_rng(1).random((20, 3))
    mean, var = gp.predict(Xs)
    rm, rs = ref.predict(Xs, return_std=True)
    assert np.allclose(mean, rm, atol=1e-8)
    assert np.allclose(np.sqrt(var), rs, atol=1e-7)


def test_log_marginal_likelihood_gradient_by_finite_differences():
    X, y = _data()
    gp = GPSurrogate(X, y, GPHyper(0.5, 0.8, 1e-2))
    v = gp.hyper.as_log()
    _, g = gp.log_marginal_likelihood(v, grad=True)
    h = 1e-6
    fd = [(gp.log_marginal_likelihood(v + h * e) - gp.log_marginal_likelihood(v - h * e)) / (2 * h)
          for e in np.eye(3)]
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-6)


def test_hyperparameter_fit_does_not_lower_evidence():
    X, y = _data(20)
    gp = GPSurrogate(X, y, GPHyper(5.0, 0.1, 1e-2))
    before = gp.log_marginal_likelihood()
    gp.fit_hyperparameters()
    assert gp.log_marginal_likelihood() >= before - 1e-9


def test_interpolates_noise_free_data():
    X, y = _data()
    gp = GPSurrogate(X, y, GPHyper(0.5, 1.0, 1e-12))
    mean, var = gp.predict(X)
    assert np.allclose(mean, y, atol=1e-5) and np.all(var < 1e-5)


def test_duplicate_inputs_survive_via_jitter():
    X = np.array([[0.2, 0.2], [0.2, 0.2], [0.8, 0.1]])
    gp = GPSurrogate(X, [1.0, 1.0, 0.0], GPHyper(noise=0.0))
    assert gp.jitter > 0 and np.all(np.isfinite(gp.predict(X)[0]))


def test_expected_improvement_formula():
    X, y = _data()
    gp = GPSurrogate(X, y, GPHyper(0.5, 1.0, 1e-3))
    Xs = np.random.default_rng(2).random((15, 3))
    cfg = AcquisitionConfig(kind="ei", xi=0.01)
    mean, var = gp.predict(Xs)
    sd = np.sqrt(var)
    ref = (mean - y.max() - 0.01) * stats.norm.cdf((mean - y.max() - 0.01) / sd) + sd * stats.norm.pdf(
        (mean - y.max() - 0.01) / sd)
    assert np.allclose(acquisition(gp, Xs, cfg), ref)
    ucb = acquisition(gp, Xs, AcquisitionConfig(kappa=2.0))
    assert np.allclose(ucb, mean + 2.0 * sd)


def test_propose_beats_dense_grid_search():
    X, y = _data(15, 2)
    gp = GPSurrogate(X, y, GPHyper(0.4, 1.0, 1e-4))
    cfg = AcquisitionConfig(kappa=1.0)
    prop = propose(gp, cfg, 2, stream(0, "bo", 1))
    g = np.linspace(0, 1, 201)
    grid = np.array(np.meshgrid(g, g)).reshape(2, -1).T
    assert prop.value >= acquisition(gp, grid, cfg).max() - 1e-6
    assert np.all((prop.x >= 0) & (prop.x <= 1))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_cold_start_is_uniform_in_the_box(seed):
    p = propose(None, AcquisitionConfig(), 4, np.random.default_rng(seed))
    assert np.all((p.x >= 0) & (p.x < 1)) and np.isnan(p.value)


def test_acquisition_config_validation():
    with pytest.raises(ValueError):
        AcquisitionConfig(kind="pi")
    with pytest.raises(ValueError):
        AcquisitionConfig(period=0)


def _bo(period=3, seed=0):
    env = MarketEnv(MarketConfig(n_merchants=3, horizon=10))
    prof = SupertypeProfile((0, 1, 1), (market_supertype([0.3, 0.3], 0.5, 0.0, fix_tolerance=True),
                                        market_supertype([0.3, 0.3], 0.5, 0.2, fix_tolerance=True)))
    trainer = make_shared_trainer(env, PolicySpec(hidden=(8,)), PPOConfig(sgd_iterations=2), seed)
    return env, prof, trainer, AcquisitionConfig(period=period, restarts=8, refine_steps=20, window=2)


def test_bo_loop_holds_profile_between_proposals_and_logs_final_observation(tmp_path):
    env, prof, trainer, cfg = _bo()
    loop, records = bo_calibration_loop(env, trainer, prof, experiment_targets(5), cfg, iterations=7, episodes=2)
    profiles = np.array([r.profile for r in records])
    assert np.array_equal(profiles[0], profiles[2]) and np.array_equal(profiles[3], profiles[5])
    assert [o.iteration for o in loop.observations] == [3, 6, 7]
    lo, hi = prof.bounds()
    assert np.all(profiles >= lo) and np.all(profiles <= hi)
    assert loop.max_jump == max(o.jump for o in loop.observations) > 0
    text = loop.write_history(tmp_path / "h.csv").read_text().splitlines()
    assert text[0].startswith("proposal,iteration,s1.conn1") and len(text) == 4


def test_bo_state_dict_resumes_identically():
    env, prof, trainer, cfg = _bo()
    a = BOCalibration(env, prof, trainer, experiment_targets(5), cfg, 2)
    for _ in range(4):
        a.iteration()
    env2, prof2, trainer2, _ = _bo(seed=5)
    b = BOCalibration(env2, prof2, trainer2, experiment_targets(5), cfg, 2)
    b.load_state_dict(a.state_dict())
    for _ in range(3):
        ra, rb = a.iteration(), b.iteration()
        assert np.array_equal(ra.rcal, rb.rcal) and np.array_equal(ra.profile, rb.profile)
