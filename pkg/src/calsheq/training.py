"""Rollout + shared-policy update step used by every training loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .core import Environment, run_episodes
from .policy import PPOConfig, PPOTrainer, SharedPolicy, ValueHead
from .rng import torch_seed


@dataclass
class PolicySpec:
    hidden: tuple[int, ...] = (256, 256)
    init_log_std: float | list[float] = -1.0
    sigma_bounds: tuple[float, float] = (1e-3, 1.0)
    init_mean: list[float] | None = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.sigma_bounds = (float(self.sigma_bounds[0]), float(self.sigma_bounds[1]))


def make_shared_trainer(env: Environment, spec: PolicySpec, ppo: PPOConfig, seed: int) -> PPOTrainer:
    """Freshly initialised shared policy + value head, seeded from ``seed``."""
    torch.manual_seed(torch_seed(seed, "init", 0))
    policy = SharedPolicy(env.obs_dim, env.type_dim, env.action_low, env.action_high, hidden=spec.hidden,
                          sigma_bounds=spec.sigma_bounds, init_log_std=spec.init_log_std,
                          init_mean=spec.init_mean)
    value = ValueHead(env.obs_dim + env.type_dim, hidden=spec.hidden)
    return PPOTrainer(policy, value, ppo, seed=torch_seed(seed, "sgd", 0))


@dataclass
class StepOutput:
    episodes: list
    stats: dict = field(default_factory=dict)


def shared_step(env: Environment, trainer: PPOTrainer, profiles, seed: int, iteration: int,
                lr: float | None = None, workers: int = 1) -> StepOutput:
    """Roll out one episode per profile under the current policy, then update it."""
    trainer.policy.eval()
    episodes = run_episodes(env, profiles, trainer.policy, seed, ("episode", iteration), workers=workers)
    stats = trainer.update(trainer.samples_from_episodes(episodes), lr=lr)
    return StepOutput(episodes, stats)


def group_mean_returns(episodes, n_groups: int) -> np.ndarray:
    """Mean undiscounted episode reward per agent, by supertype group."""
    out = np.zeros(n_groups)
    for g in range(n_groups):
        vals = [e.rewards[e.profile.members(g)].sum(axis=1) for e in episodes if e.profile.members(g)]
        out[g] = float(np.mean(np.concatenate(vals))) if vals else np.nan
    return out
