"""Type-symmetric partially observable Markov game contract and episode execution."""

from __future__ import annotations

import csv
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .rng import EpisodeStreams


class ConfigurationError(ValueError):
    """Inconsistent dimensions or settings between components."""


@dataclass(frozen=True)
class Supertype:
    """Parameters of one agent-type distribution with per-dimension bounds.

    ``free`` marks the dimensions a calibrator may move; the rest are pinned
    (e.g. the inventory-tolerance stdev of a single-merchant supertype).
    """

    params: np.ndarray
    low: np.ndarray
    high: np.ndarray
    names: tuple[str, ...] = ()
    free: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.params, dtype=float)
        lo = np.asarray(self.low, dtype=float)
        hi = np.asarray(self.high, dtype=float)
        if not (p.shape == lo.shape == hi.shape) or p.ndim != 1:
            raise ConfigurationError("params and bounds must be 1-D and equally sized")
        if np.any(lo > hi):
            raise ConfigurationError("lower bound above upper bound")
        if np.any(p < lo) or np.any(p > hi):
            raise ConfigurationError(f"supertype params {p} outside bounds")
        free = np.ones(p.shape, bool) if self.free is None else np.asarray(self.free, bool)
        if free.shape != p.shape:
            raise ConfigurationError("free mask has wrong size")
        object.__setattr__(self, "params", p)
        object.__setattr__(self, "low", lo)
        object.__setattr__(self, "high", hi)
        object.__setattr__(self, "free", free)
        if self.names and len(self.names) != p.size:
            raise ConfigurationError("names must match params")

    @property
    def dim(self) -> int:
        return self.params.size

    def with_params(self, params) -> "Supertype":
        return replace(self, params=np.clip(np.asarray(params, float), self.low, self.high))


@dataclass(frozen=True)
class SupertypeProfile:
    """Assignment of each agent to one of a few distinct supertypes."""

    assignment: tuple[int, ...]
    groups: tuple[Supertype, ...]

    def __post_init__(self):
        object.__setattr__(self, "assignment", tuple(int(g) for g in self.assignment))
        object.__setattr__(self, "groups", tuple(self.groups))
        if not self.groups:
            raise ConfigurationError("profile needs at least one supertype")
        if any(g < 0 or g >= len(self.groups) for g in self.assignment):
            raise ConfigurationError("assignment refers to a missing supertype")
        dims = {g.dim for g in self.groups}
        if len(dims) != 1:
            raise ConfigurationError("all supertypes must share one dimension")

    @property
    def n_agents(self) -> int:
        return len(self.assignment)

    def supertype_of(self, agent: int) -> Supertype:
        return self.groups[self.assignment[agent]]

    def members(self, group: int) -> list[int]:
        return [i for i, g in enumerate(self.assignment) if g == group]

    # flat view over the free dimensions, group-major
    def vector(self) -> np.ndarray:
        return np.concatenate([g.params[g.free] for g in self.groups])

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.concatenate([g.low[g.free] for g in self.groups])
        hi = np.concatenate([g.high[g.free] for g in self.groups])
        return lo, hi

    def vector_names(self) -> list[str]:
        out = []
        for k, g in enumerate(self.groups):
            names = g.names or tuple(f"p{j}" for j in range(g.dim))
            out += [f"s{k + 1}.{n}" for n, f in zip(names, g.free) if f]
        return out

    def with_vector(self, v) -> "SupertypeProfile":
        """New profile with free dimensions set from ``v`` (projected into bounds)."""
        v = np.asarray(v, dtype=float)
        lo, hi = self.bounds()
        if v.shape != lo.shape:
            raise ConfigurationError(f"expected vector of size {lo.size}, got {v.shape}")
        v = np.clip(v, lo, hi)
        groups, k = [], 0
        for g in self.groups:
            p = g.params.copy()
            m = int(g.free.sum())
            p[g.free] = v[k:k + m]
            k += m
            groups.append(replace(g, params=p))
        return replace(self, groups=tuple(groups))

    def permuted(self, perm: Sequence[int]) -> "SupertypeProfile":
        """Profile where slot ``s`` hosts the agent formerly at ``perm[s]``."""
        return replace(self, assignment=tuple(self.assignment[p] for p in perm))


@dataclass
class AgentType:
    """Type drawn at episode start; ``detail`` holds env-private realisations."""

    values: np.ndarray
    detail: Any = None


@dataclass
class EpisodeBatch:
    """One episode for all agents.

    Per-agent arrays are indexed ``[agent, t, ...]``.  ``raw_actions`` are the
    pre-squash Gaussian draws, kept so log-probabilities can be recomputed
    exactly.  ``types`` is stored per step; it is constant unless the episode
    was split into calibrator decision segments.
    """

    obs: np.ndarray
    types: np.ndarray
    actions: np.ndarray
    raw_actions: np.ndarray
    rewards: np.ndarray
    logprobs: np.ndarray
    profile: SupertypeProfile
    gamma: float
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        n, T = self.rewards.shape
        for name in ("obs", "types", "actions", "raw_actions", "logprobs"):
            arr = getattr(self, name)
            if arr.shape[:2] != (n, T):
                raise ConfigurationError(f"{name} has shape {arr.shape}, expected ({n}, {T}, ...)")
        if not np.all(np.isfinite(self.rewards)):
            raise FloatingPointError("non-finite reward in episode")

    @property
    def n_agents(self) -> int:
        return self.rewards.shape[0]

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]

    def agent_returns(self) -> np.ndarray:
        disc = self.gamma ** np.arange(self.horizon)
        return (self.rewards * disc).sum(axis=1)

    def to_csv(self, path) -> Path:
        """Long-format table: one row per (agent, t)."""
        path = Path(path)
        n, T = self.rewards.shape
        d_obs, d_act = self.obs.shape[2], self.actions.shape[2]
        header = (["agent", "t"] + [f"obs{j}" for j in range(d_obs)]
                  + [f"type{j}" for j in range(self.types.shape[2])]
                  + [f"act{j}" for j in range(d_act)] + ["reward", "logprob"])
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(n):
                for t in range(T):
                    values = [*self.obs[i, t], *self.types[i, t], *self.actions[i, t],
                              self.rewards[i, t], self.logprobs[i, t]]
                    w.writerow([i, t, *(repr(float(v)) for v in values)])
        return path


def read_batch_csv(path) -> dict[str, np.ndarray]:
    """Load a table written by :meth:`EpisodeBatch.to_csv` as column arrays."""
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    return {h: body[:, j] for j, h in enumerate(header)}


class Environment(ABC):
    """Contract every environment satisfies.

    Implementations must be type-symmetric: an agent's reward may depend on
    the other agents only through a permutation-invariant function of their
    (state, action, type) triples, and any randomness attached to an agent
    must come from that agent's own stream.
    """

    n_agents: int
    obs_dim: int
    act_dim: int
    type_dim: int
    horizon: int
    gamma: float
    action_low: np.ndarray
    action_high: np.ndarray
    r_max: float

    @abstractmethod
    def draw_type(self, supertype: Supertype, rng: np.random.Generator) -> AgentType:
        """Sample one agent's type from its supertype distribution."""

    @abstractmethod
    def start(self, types: list[AgentType], streams: EpisodeStreams) -> np.ndarray:
        """Reset internal state given the drawn types; return initial observations."""

    @abstractmethod
    def step(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool, dict]:
        """Advance one step: ``(observations, rewards, done, info)``."""

    def retype(self, types: list[AgentType]) -> np.ndarray:
        """Swap in freshly drawn types mid-episode and return observations."""
        raise NotImplementedError(f"{type(self).__name__} does not support re-typing")

    def episode_info(self) -> dict:
        return {}

    def clone(self) -> "Environment":
        raise NotImplementedError

    def reset(self, profile: SupertypeProfile, streams: EpisodeStreams):
        types = sample_types(self, profile, streams)
        return types, self.start(types, streams)


def sample_types(env: Environment, profile: SupertypeProfile, streams: EpisodeStreams) -> list[AgentType]:
    """One type per agent slot, each drawn from the slot's own stream."""
    if profile.n_agents != env.n_agents:
        raise ConfigurationError(f"profile has {profile.n_agents} agents, env has {env.n_agents}")
    return [env.draw_type(profile.supertype_of(i), streams.agents[i]) for i in range(env.n_agents)]


def _check_dims(env: Environment, policy) -> None:
    if getattr(policy, "obs_dim", env.obs_dim) != env.obs_dim:
        raise ConfigurationError(f"policy obs_dim {policy.obs_dim} != env obs_dim {env.obs_dim}")
    if getattr(policy, "type_dim", env.type_dim) != env.type_dim:
        raise ConfigurationError(f"policy type_dim {policy.type_dim} != env type_dim {env.type_dim}")
    if getattr(policy, "act_dim", env.act_dim) != env.act_dim:
        raise ConfigurationError(f"policy act_dim {policy.act_dim} != env act_dim {env.act_dim}")


def run_episode(env: Environment, profile: SupertypeProfile | Sequence[SupertypeProfile],
                policy, streams: EpisodeStreams) -> EpisodeBatch:
    """Roll out one fixed-horizon episode with every agent on ``policy``.

    ``policy`` must provide ``sample(obs, types, noise) -> (actions, raw, logprob)``
    with noise supplied per agent from the agents' own streams.  Passing a list
    of profiles splits the horizon into equal segments and re-draws types at
    each segment boundary.
    """
    _check_dims(env, policy)
    profiles = [profile] if isinstance(profile, SupertypeProfile) else list(profile)
    T, n = env.horizon, env.n_agents
    bounds = np.linspace(0, T, len(profiles) + 1).round().astype(int)

    types, obs = env.reset(profiles[0], streams)
    type_arr = np.stack([t.values for t in types])
    O = np.zeros((n, T, env.obs_dim))
    L = np.zeros((n, T, env.type_dim))
    A = np.zeros((n, T, env.act_dim))
    U = np.zeros((n, T, env.act_dim))
    R = np.zeros((n, T))
    LP = np.zeros((n, T))
    seg = 0
    for t in range(T):
        if seg + 1 < len(profiles) and t == bounds[seg + 1]:
            seg += 1
            types = sample_types(env, profiles[seg], streams)
            obs = env.retype(types)
            type_arr = np.stack([ty.values for ty in types])
        noise = streams.agent_normals(env.act_dim)
        act, raw, logp = policy.sample(obs, type_arr, noise)
        O[:, t], L[:, t], A[:, t], U[:, t], LP[:, t] = obs, type_arr, act, raw, logp
        obs, rew, done, _ = env.step(act)
        R[:, t] = rew
        if done and t != T - 1:
            raise ConfigurationError("environments must run the full fixed horizon")
    info = env.episode_info()
    info["segments"] = bounds
    return EpisodeBatch(obs=O, types=L, actions=A, raw_actions=U, rewards=R, logprobs=LP,
                        profile=profiles[-1], gamma=env.gamma, info=info)


def run_episodes(env: Environment, profiles: Sequence, policy, seed: int, key: tuple,
                 workers: int = 1) -> list[EpisodeBatch]:
    """Run ``len(profiles)`` independent episodes keyed ``(*key, b)``.

    With ``workers > 1`` episodes run on a thread pool, each on its own
    environment clone; results are returned in episode order.
    """
    def one(b, e):
        streams = EpisodeStreams.create(seed, (*key, b), e.n_agents)
        return run_episode(e, profiles[b], policy, streams)

    if workers <= 1:
        return [one(b, env) for b in range(len(profiles))]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        futs = [ex.submit(one, b, env.clone()) for b in range(len(profiles))]
        return [f.result() for f in futs]


@dataclass
class SymmetryReport:
    n_trials: int
    agent: int
    permutation: tuple[int, ...]
    violations: list[tuple[int, float]] = field(default_factory=list)
    max_abs_diff: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations


def check_type_symmetry(env: Environment, profile: SupertypeProfile, policy, permutation: Sequence[int],
                        seed: int = 0, n_trials: int = 100, agent: int | None = None) -> SymmetryReport:
    """Paired rollouts with the other agents relabelled.

    In the permuted rollout slot ``s`` hosts identity ``permutation[s]``:
    it takes that identity's supertype and random stream, so every z-triple
    is reproduced, only at a different index.  The fixed agent's reward
    sequence must match bit for bit.
    """
    perm = tuple(int(p) for p in permutation)
    if sorted(perm) != list(range(env.n_agents)):
        raise ValueError("not a permutation of the agent slots")
    fixed = [i for i, p in enumerate(perm) if i == p]
    if agent is None:
        if not fixed:
            raise ValueError("permutation fixes no agent")
        agent = fixed[0]
    if perm[agent] != agent:
        raise ValueError(f"permutation must fix agent {agent}")
    report = SymmetryReport(n_trials=n_trials, agent=agent, permutation=perm)
    prof_b = profile.permuted(perm)
    for k in range(n_trials):
        a = run_episode(env, profile, policy, EpisodeStreams.create(seed, ("episode", k), env.n_agents))
        b = run_episode(env, prof_b, policy,
                        EpisodeStreams.create(seed, ("episode", k), env.n_agents, agent_ids=perm))
        diff = float(np.max(np.abs(a.rewards[agent] - b.rewards[agent])))
        report.max_abs_diff = max(report.max_abs_diff, diff)
        if not np.array_equal(a.rewards[agent], b.rewards[agent]):
            report.violations.append((k, diff))
    return report
