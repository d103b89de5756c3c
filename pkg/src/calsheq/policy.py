"""Shared Gaussian policy, the shared policy gradient, and a KL-penalised PPO trainer."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_LOG2 = math.log(2.0)


class OffPolicyBatchError(ValueError):
    pass


def mlp(in_dim: int, out_dim: int, hidden: Sequence[int]) -> nn.Sequential:
    layers, d = [], in_dim
    for h in hidden:
        layers += [nn.Linear(d, h), nn.Tanh()]
        d = h
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


class GaussianPolicy(nn.Module):
    """Diagonal Gaussian over a pre-squash variable, tanh-squashed into a box.

    The network maps its input to a mean and a per-dimension log-stdev; the
    stdev is clamped to ``sigma_bounds``.  Actions are
    ``low + (high - low) * (tanh(u) + 1) / 2`` and log-probabilities include
    the change-of-variables term, so they are exact densities on the box.
    """

    def __init__(self, in_dim: int, act_low, act_high, hidden: Sequence[int] = (256, 256),
                 sigma_bounds: tuple[float, float] = (1e-3, 1.0), init_log_std=-1.0,
                 init_mean=None):
        super().__init__()
        low = torch.as_tensor(np.asarray(act_low, dtype=np.float64), dtype=torch.float32)
        high = torch.as_tensor(np.asarray(act_high, dtype=np.float64), dtype=torch.float32)
        if low.shape != high.shape or low.ndim != 1 or torch.any(high <= low):
            raise ValueError("action bounds must be 1-D with high > low")
        self.in_dim = in_dim
        self.act_dim = low.numel()
        self.hidden = tuple(hidden)
        self.sigma_bounds = (float(sigma_bounds[0]), float(sigma_bounds[1]))
        self.register_buffer("low", low)
        self.register_buffer("high", high)
        self.net = mlp(in_dim, 2 * self.act_dim, hidden)
        last = self.net[-1]
        with torch.no_grad():
            last.weight.mul_(0.01)
            last.bias.zero_()
            last.bias[self.act_dim:] = torch.as_tensor(
                np.broadcast_to(np.asarray(init_log_std, dtype=np.float64), (self.act_dim,)).copy())
            if init_mean is not None:
                last.bias[:self.act_dim] = torch.as_tensor(np.asarray(init_mean, dtype=np.float64))

    @property
    def dtype(self):
        return self.low.dtype

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.net(x)
        mean, log_std = out[..., :self.act_dim], out[..., self.act_dim:]
        lo, hi = self.sigma_bounds
        log_std = torch.clamp(log_std, math.log(lo), math.log(hi))
        return mean, log_std

    def squash(self, u: torch.Tensor) -> torch.Tensor:
        return self.low + (self.high - self.low) * (torch.tanh(u) + 1.0) * 0.5

    def log_prob_raw(self, x: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        """Log-density of the squashed action whose pre-squash value is ``u``."""
        mean, log_std = self(x)
        return self.log_prob_from(mean, log_std, u)

    def log_prob_from(self, mean, log_std, u):
        z = (u - mean) / log_std.exp()
        gauss = -0.5 * z.pow(2) - log_std - 0.5 * math.log(2 * math.pi)
        # log(1 - tanh(u)^2), numerically stable form
        log_det = 2.0 * (_LOG2 - u - F.softplus(-2.0 * u))
        scale = torch.log((self.high - self.low) * 0.5)
        return (gauss - log_det - scale).sum(-1)

    def entropy_gaussian(self, x: torch.Tensor) -> torch.Tensor:
        _, log_std = self(x)
        return (log_std + 0.5 * math.log(2 * math.pi * math.e)).sum(-1)

    def inputs(self, *parts) -> torch.Tensor:
        arrs = [np.asarray(p, dtype=np.float64) for p in parts if p is not None]
        x = np.concatenate(arrs, axis=-1) if len(arrs) > 1 else arrs[0]
        return torch.as_tensor(x, dtype=self.dtype)

    @torch.no_grad()
    def sample_from_input(self, x: torch.Tensor, noise) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        mean, log_std = self(x)
        if not bool(torch.isfinite(mean).all()):
            raise FloatingPointError("policy network produced non-finite output (diverged?)")
        eps = torch.as_tensor(np.asarray(noise), dtype=self.dtype)
        u = mean + log_std.exp() * eps
        a = self.squash(u)
        lp = self.log_prob_from(mean, log_std, u)
        return a.double().numpy(), u.double().numpy(), lp.double().numpy()


class SharedPolicy(GaussianPolicy):
    """pi(a | s, lambda): one network for every agent, input = concat(observation, type)."""

    def __init__(self, obs_dim: int, type_dim: int, act_low, act_high, **kw):
        super().__init__(obs_dim + type_dim, act_low, act_high, **kw)
        self.obs_dim = obs_dim
        self.type_dim = type_dim

    def sample(self, obs, types, noise):
        return self.sample_from_input(self.inputs(obs, types), noise)


def act(policy: SharedPolicy, s, lam, rng: np.random.Generator):
    """Sample one action for a single (observation, type) pair."""
    noise = rng.standard_normal((1, policy.act_dim))
    a, u, lp = policy.sample(np.atleast_2d(s), np.atleast_2d(lam), noise)
    return a[0], float(lp[0])


class ValueHead(nn.Module):
    """Separate baseline network with the same body as the policy."""

    def __init__(self, in_dim: int, hidden: Sequence[int] = (256, 256)):
        super().__init__()
        self.net = mlp(in_dim, 1, hidden)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).squeeze(-1)


# ---------------------------------------------------------------------------
# shared policy gradient (REINFORCE form, no baseline)
# ---------------------------------------------------------------------------

def _episode_list(batch) -> list:
    return [batch] if hasattr(batch, "rewards") else list(batch)


def shared_gradient(policy: SharedPolicy, batch, logprob_tol: float = 1e-4) -> list[torch.Tensor]:
    """(1/n) sum_i g_i with g_i the per-agent likelihood-ratio estimate over B episodes.

    Each agent's experience is treated as its own trajectory; the reward-to-go
    keeps the absolute discount ``gamma**t'``.  Rejects batches whose stored
    log-probabilities do not match the current policy.
    """
    episodes = _episode_list(batch)
    n = episodes[0].n_agents
    B = len(episodes)
    obs = np.concatenate([e.obs.reshape(-1, e.obs.shape[-1]) for e in episodes])
    types = np.concatenate([e.types.reshape(-1, e.types.shape[-1]) for e in episodes])
    raw = np.concatenate([e.raw_actions.reshape(-1, e.raw_actions.shape[-1]) for e in episodes])
    stored = np.concatenate([e.logprobs.reshape(-1) for e in episodes])
    weights = []
    for e in episodes:
        disc = e.gamma ** np.arange(e.horizon)
        to_go = np.flip(np.cumsum(np.flip(e.rewards * disc, axis=1), axis=1), axis=1)
        weights.append(to_go.reshape(-1))
    w = torch.as_tensor(np.concatenate(weights), dtype=policy.dtype)
    x = policy.inputs(obs, types)
    u = torch.as_tensor(raw, dtype=policy.dtype)
    lp = policy.log_prob_raw(x, u)
    gap = float(np.max(np.abs(lp.detach().double().numpy() - stored))) if stored.size else 0.0
    if gap > logprob_tol:
        raise OffPolicyBatchError(f"stored log-probs differ from policy by {gap:.3g}")
    objective = (lp * w).sum() / (n * B)
    params = [p for p in policy.parameters()]
    return list(torch.autograd.grad(objective, params, allow_unused=True))


def flat_grad(grads: Sequence[torch.Tensor | None], params: Sequence[torch.Tensor]) -> np.ndarray:
    return np.concatenate([
        (g if g is not None else torch.zeros_like(p)).detach().double().numpy().ravel()
        for g, p in zip(grads, params)])


# ---------------------------------------------------------------------------
# PPO with adaptive KL penalty
# ---------------------------------------------------------------------------

@dataclass
class PPOConfig:
    clip: float = 0.3
    kl_target: float = 0.01
    kl_coeff: float = 0.2
    lr: float = 1e-4
    sgd_iterations: int = 30
    minibatch_size: int = 128
    gamma: float = 1.0
    gae_lambda: float = 1.0
    vf_coeff: float = 1.0
    entropy_coeff: float = 0.0
    max_grad_norm: float | None = None
    normalize_advantages: bool = True

    def __post_init__(self):
        if self.clip <= 0 or self.kl_target <= 0:
            raise ValueError("clip and kl_target must be positive")
        if self.sgd_iterations < 0 or self.minibatch_size < 1:
            raise ValueError("bad SGD settings")


@dataclass
class Samples:
    """Flat on-policy training samples."""

    x: np.ndarray
    raw: np.ndarray
    logp: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return self.x.shape[0]


def gae(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and value targets for fixed-horizon trajectories ``[..., T]``."""
    T = rewards.shape[-1]
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[:-1])
    for t in reversed(range(T)):
        nxt = values[..., t + 1] if t + 1 < T else 0.0
        delta = rewards[..., t] + gamma * nxt - values[..., t]
        last = delta + gamma * lam * last
        adv[..., t] = last
    return adv, adv + values


class PPOTrainer:
    """Holds the policy, its value head, optimizers and the adaptive KL coefficient."""

    def __init__(self, policy: GaussianPolicy, value_head: ValueHead, config: PPOConfig, seed: int = 0):
        self.policy = policy
        self.value = value_head
        self.config = config
        self.kl_coeff = config.kl_coeff
        self.pi_opt = torch.optim.Adam(policy.parameters(), lr=config.lr)
        self.v_opt = torch.optim.Adam(value_head.parameters(), lr=config.lr)
        self.gen = torch.Generator().manual_seed(int(seed))
        self.updates = 0

    @torch.no_grad()
    def values_of(self, x: np.ndarray) -> np.ndarray:
        return self.value(torch.as_tensor(x, dtype=self.policy.dtype)).double().numpy()

    def samples_from_episodes(self, episodes) -> Samples:
        cfg = self.config
        xs, raws, lps, advs, rets = [], [], [], [], []
        for e in _episode_list(episodes):
            x = np.concatenate([e.obs, e.types], axis=-1)
            v = self.values_of(x.reshape(-1, x.shape[-1])).reshape(e.rewards.shape)
            a, r = gae(e.rewards, v, cfg.gamma, cfg.gae_lambda)
            xs.append(x.reshape(-1, x.shape[-1]))
            raws.append(e.raw_actions.reshape(-1, e.raw_actions.shape[-1]))
            lps.append(e.logprobs.reshape(-1))
            advs.append(a.reshape(-1))
            rets.append(r.reshape(-1))
        return Samples(np.concatenate(xs), np.concatenate(raws), np.concatenate(lps),
                       np.concatenate(advs), np.concatenate(rets))

    def samples_from_bandit(self, x, raw, logp, rewards) -> Samples:
        """Single-step transitions (calibrator decisions, bandit tests)."""
        x = np.asarray(x, dtype=np.float64)
        v = self.values_of(x)
        r = np.asarray(rewards, dtype=np.float64)
        return Samples(x, np.asarray(raw, np.float64), np.asarray(logp, np.float64), r - v, r)

    def _kl(self, x, old_mean, old_log_std):
        mean, log_std = self.policy(x)
        var_o, var_n = (2 * old_log_std).exp(), (2 * log_std).exp()
        kl = log_std - old_log_std + (var_o + (old_mean - mean).pow(2)) / (2 * var_n) - 0.5
        return kl.sum(-1)

    def update(self, samples: Samples, lr: float | None = None) -> dict:
        cfg = self.config
        dt = self.policy.dtype
        if lr is not None:
            for opt in (self.pi_opt, self.v_opt):
                for g in opt.param_groups:
                    g["lr"] = lr
        cur_lr = self.pi_opt.param_groups[0]["lr"]
        x = torch.as_tensor(samples.x, dtype=dt)
        u = torch.as_tensor(samples.raw, dtype=dt)
        old_lp = torch.as_tensor(samples.logp, dtype=dt)
        adv = torch.as_tensor(samples.advantages, dtype=dt)
        ret = torch.as_tensor(samples.returns, dtype=dt)
        if cfg.normalize_advantages and len(samples) > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        with torch.no_grad():
            old_mean, old_log_std = self.policy(x)
        N = len(samples)
        mb = min(cfg.minibatch_size, N)
        perm = torch.randperm(N, generator=self.gen)
        cursor = 0
        stats = {"policy_loss": 0.0, "vf_loss": 0.0}
        for _ in range(cfg.sgd_iterations):
            if cursor + mb > N:
                perm = torch.randperm(N, generator=self.gen)
                cursor = 0
            idx = perm[cursor:cursor + mb]
            cursor += mb
            lp = self.policy.log_prob_raw(x[idx], u[idx])
            ratio = (lp - old_lp[idx]).exp()
            a = adv[idx]
            surr = torch.min(ratio * a, torch.clamp(ratio, 1 - cfg.clip, 1 + cfg.clip) * a)
            kl = self._kl(x[idx], old_mean[idx], old_log_std[idx]).mean()
            pi_loss = -surr.mean() + self.kl_coeff * kl
            if cfg.entropy_coeff:
                pi_loss = pi_loss - cfg.entropy_coeff * self.policy.entropy_gaussian(x[idx]).mean()
            vf_loss = cfg.vf_coeff * (self.value(x[idx]) - ret[idx]).pow(2).mean()
            if not (torch.isfinite(pi_loss) and torch.isfinite(vf_loss)):
                raise FloatingPointError(
                    f"NaN loss at update {self.updates}: pi={pi_loss.item()} vf={vf_loss.item()} "
                    f"kl_coeff={self.kl_coeff} lr={cur_lr}")
            self.pi_opt.zero_grad()
            pi_loss.backward()
            if cfg.max_grad_norm:
                nn.utils.clip_grad_norm_(self.policy.parameters(), cfg.max_grad_norm)
            self.pi_opt.step()
            self.v_opt.zero_grad()
            vf_loss.backward()
            if cfg.max_grad_norm:
                nn.utils.clip_grad_norm_(self.value.parameters(), cfg.max_grad_norm)
            self.v_opt.step()
            stats["policy_loss"] += pi_loss.item() / max(cfg.sgd_iterations, 1)
            stats["vf_loss"] += vf_loss.item() / max(cfg.sgd_iterations, 1)
        with torch.no_grad():
            mean_kl = float(self._kl(x, old_mean, old_log_std).mean())
            entropy = float(self.policy.entropy_gaussian(x).mean())
        stats.update(kl=mean_kl, entropy=entropy, kl_coeff=self.kl_coeff, lr=cur_lr)
        if mean_kl > 2.0 * cfg.kl_target:
            self.kl_coeff *= 2.0
        elif mean_kl < 0.5 * cfg.kl_target:
            self.kl_coeff *= 0.5
        self.updates += 1
        return stats

    def state_dict(self) -> dict:
        return {"policy": self.policy.state_dict(), "value": self.value.state_dict(),
                "pi_opt": self.pi_opt.state_dict(), "v_opt": self.v_opt.state_dict(),
                "kl_coeff": self.kl_coeff, "updates": self.updates, "gen": self.gen.get_state()}

    def load_state_dict(self, state: dict) -> None:
        self.policy.load_state_dict(state["policy"])
        self.value.load_state_dict(state["value"])
        self.pi_opt.load_state_dict(state["pi_opt"])
        self.v_opt.load_state_dict(state["v_opt"])
        self.kl_coeff = state["kl_coeff"]
        self.updates = state["updates"]
        self.gen.set_state(state["gen"])


def ppo_update(trainer: PPOTrainer, batch, lr: float | None = None) -> dict:
    """One PPO update from on-policy episodes (or prepared :class:`Samples`)."""
    samples = batch if isinstance(batch, Samples) else trainer.samples_from_episodes(batch)
    return trainer.update(samples, lr=lr)


def batch_timesteps(n_agents: int, horizon: int, episodes: int) -> int:
    """Agent-timesteps in one shared-policy update."""
    return n_agents * horizon * episodes


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheck:
    max_rel_error: float
    max_abs_error: float
    checked: int


def finite_difference_gradient_check(policy: GaussianPolicy, x, raw, epsilon: float = 1e-5,
                                     n_params: int = 200, seed: int = 0, atol: float = 1e-6,
                                     indices: np.ndarray | None = None) -> GradCheck:
    """Compare autograd d/dtheta sum log pi(u|x) with central differences.

    Runs on a float64 copy of the policy.  Relative error is
    ``|g - fd| / max(|g|, |fd|, atol)``.
    """
    pol = copy.deepcopy(policy).double()
    xt = torch.as_tensor(np.asarray(x), dtype=torch.float64)
    ut = torch.as_tensor(np.asarray(raw), dtype=torch.float64)
    params = list(pol.parameters())
    flat = torch.nn.utils.parameters_to_vector(params).detach()

    def f(vec):
        torch.nn.utils.vector_to_parameters(vec, params)
        with torch.no_grad():
            return float(pol.log_prob_raw(xt, ut).sum())

    torch.nn.utils.vector_to_parameters(flat.clone(), params)
    lp = pol.log_prob_raw(xt, ut).sum()
    g = torch.autograd.grad(lp, params)
    g = torch.cat([gi.reshape(-1) for gi in g]).numpy()
    if indices is None:
        rng = np.random.default_rng(seed)
        indices = rng.choice(flat.numel(), size=min(n_params, flat.numel()), replace=False)
    worst_rel = worst_abs = 0.0
    for k in indices:
        e = torch.zeros_like(flat)
        e[k] = epsilon
        fd = (f(flat + e) - f(flat - e)) / (2 * epsilon)
        err = abs(g[k] - fd)
        worst_abs = max(worst_abs, err)
        worst_rel = max(worst_rel, err / max(abs(g[k]), abs(fd), atol))
    torch.nn.utils.vector_to_parameters(flat, params)
    return GradCheck(worst_rel, worst_abs, len(indices))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def config_hash(config) -> str:
    payload = asdict(config) if hasattr(config, "__dataclass_fields__") else config
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, state: dict, config) -> Path:
    path = Path(path)
    torch.save({"format_version": CHECKPOINT_VERSION, "config_hash": config_hash(config),
                "state": state}, path)
    return path


def load_checkpoint(path, config=None) -> dict:
    blob = torch.load(Path(path), weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('format_version')}")
    if config is not None and blob["config_hash"] != config_hash(config):
        raise ValueError("checkpoint was written under a different configuration")
    return blob["state"]
