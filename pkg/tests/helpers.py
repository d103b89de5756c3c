"""Small training fixtures shared by the unit and acceptance tests."""

from __future__ import annotations

import numpy as np
import torch

from calsheq.policy import GaussianPolicy, PPOConfig, PPOTrainer, ValueHead


def bandit_ppo(optimum: float = 0.8, iterations: int = 200, batch: int = 256, seed: int = 0,
               lr: float = 1e-2, sigma_bounds=(0.05, 1.0)):
    """PPO on a one-dimensional bandit with reward -(a - optimum)^2, actions in [0, 1].

    Returns the deterministic action (squashed mean) after each iteration and the
    post-update KL of every update.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    pol = GaussianPolicy(1, [0.0], [1.0], hidden=(16,), init_log_std=-1.0, sigma_bounds=sigma_bounds)
    trainer = PPOTrainer(pol, ValueHead(1, hidden=(16,)),
                         PPOConfig(lr=lr, minibatch_size=64, sgd_iterations=10), seed=seed)
    x = np.ones((batch, 1))
    means, kls = [], []
    for _ in range(iterations):
        a, u, lp = pol.sample_from_input(pol.inputs(x), rng.standard_normal((batch, 1)))
        stats = trainer.update(trainer.samples_from_bandit(x, u, lp, -(a[:, 0] - optimum) ** 2))
        kls.append(stats["kl"])
        with torch.no_grad():
            mean, _ = pol(pol.inputs(x[:1]))
            means.append(float(pol.squash(mean)[0, 0]))
    return np.array(means), np.array(kls)


class FixedActionPolicy:
    """Every agent plays the same action; log-probabilities are reported as 0."""

    def __init__(self, action):
        self.action = np.asarray(action, float)

    def sample(self, obs, types, noise):
        n = obs.shape[0]
        a = np.tile(self.action, (n, 1))
        return a, np.zeros_like(a), np.zeros(n)


class UniformRandomPolicy:
    """Uniform actions in the box, driven by the agents' own noise streams (type-symmetric)."""

    def __init__(self, low, high):
        self.low, self.high = np.asarray(low, float), np.asarray(high, float)

    def sample(self, obs, types, noise):
        from scipy.special import ndtr
        a = self.low + (self.high - self.low) * ndtr(noise)
        return a, np.asarray(noise, float), np.zeros(obs.shape[0])
