"""Named fixtures used by the theory suite and its tests."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import yaml

from .pomg import TabularPOMG, random_pomg


def two_agent_one_step(seed: int = 11) -> TabularPOMG:
    return random_pomg(np.random.default_rng(seed), n=2, S=2, A=2, L=2, supertypes=[0, 0], one_step=True, gamma=0.0)


def two_agent_discounted(seed: int = 12, gamma: float = 0.5) -> TabularPOMG:
    return random_pomg(np.random.default_rng(seed), n=2, S=2, A=2, L=2, supertypes=[0, 0], gamma=gamma)


def three_agent_two_supertypes(seed: int = 13, gamma: float = 0.4) -> TabularPOMG:
    """Agent 0 on one supertype, agents 1 and 2 on another."""
    return random_pomg(np.random.default_rng(seed), n=3, S=2, A=2, L=2, supertypes=[0, 1, 1], gamma=gamma)


def action_symmetric(seed: int = 14, gamma: float = 0.5) -> TabularPOMG:
    """Relabelling the two actions changes nothing, so the uniform policy is a stationary point."""
    rng = np.random.default_rng(seed)
    S, L = 2, 2
    base = rng.dirichlet(np.ones(S), size=(L, S))
    own_kernel = np.repeat(base[:, :, None, :], 2, axis=2)
    same, diff = rng.uniform(-1, 1, size=(S, S)), rng.uniform(-1, 1, size=(S, S))
    pair = np.zeros((S, 2, S, 2))
    for a in range(2):
        for b in range(2):
            pair[:, a, :, b] = same if a == b else diff
    own_reward = np.repeat(rng.uniform(-1, 1, size=(L, S))[:, :, None], 2, axis=2)
    return TabularPOMG(type_probs=np.tile(rng.dirichlet(np.ones(L)), (2, 1)), mu0=rng.dirichlet(np.ones(S), size=L),
                       own_kernel=own_kernel, crowd_kernel=np.tile(rng.dirichlet(np.ones(S)), (2, 1)),
                       crowd_weight=0.3, own_reward=own_reward, pair_reward=pair, gamma=gamma)


def constant_reward(r: float = 1.5, gamma: float = 0.5) -> TabularPOMG:
    rng = np.random.default_rng(0)
    pomg = random_pomg(rng, n=2, gamma=gamma)
    pomg.own_reward[:] = r
    pomg.pair_reward[:] = 0.0
    return pomg


def save_pomg(pomg: TabularPOMG, path) -> Path:
    data = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in vars(pomg).items()}
    path = Path(path)
    path.write_text(yaml.safe_dump(data))
    return path


def load_pomg(path) -> TabularPOMG:
    return TabularPOMG(**yaml.safe_load(Path(path).read_text()))
