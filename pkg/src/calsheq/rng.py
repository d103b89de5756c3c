"""Counter-based random streams.

Every random draw in a run is addressed by a tuple key below one root seed,
so the same key always yields the same stream regardless of what else was
drawn before.  Type-symmetry checks rely on this to replay "the world" while
relabelling agents.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_TAGS = {
    "episode": 1,
    "world": 2,
    "agent": 3,
    "calibrator": 4,
    "init": 5,
    "sgd": 6,
    "bo": 7,
    "particles": 8,
}


def _encode(key: tuple) -> tuple[int, ...]:
    out = []
    for k in key:
        if isinstance(k, str):
            out.append(_TAGS[k])
        else:
            out.append(int(k))
    return tuple(out)


def stream(seed: int, *key) -> np.random.Generator:
    """Philox generator for ``key`` under ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_encode(key))
    return np.random.Generator(np.random.Philox(ss))


def torch_seed(seed: int, *key) -> int:
    """Deterministic 63-bit integer seed for torch generators."""
    return int(stream(seed, *key).integers(0, 2**63 - 1))


@dataclass
class EpisodeStreams:
    """World stream plus one stream per agent identity.

    ``agent_ids[slot]`` names the identity whose stream the agent in ``slot``
    consumes.  Permutation tests relabel slots by permuting ``agent_ids``.
    """

    seed: int
    key: tuple
    agent_ids: tuple[int, ...]

    def __post_init__(self):
        self.world = stream(self.seed, *self.key, "world")
        self.agents = [stream(self.seed, *self.key, "agent", a) for a in self.agent_ids]

    @classmethod
    def create(cls, seed: int, key: tuple, n_agents: int, agent_ids=None) -> "EpisodeStreams":
        ids = tuple(range(n_agents)) if agent_ids is None else tuple(int(a) for a in agent_ids)
        if len(ids) != n_agents:
            raise ValueError(f"expected {n_agents} agent ids, got {len(ids)}")
        return cls(seed=seed, key=tuple(key), agent_ids=ids)

    def agent_normals(self, size: int) -> np.ndarray:
        """One row of standard normals per agent slot, each from its own stream."""
        return np.stack([g.standard_normal(size) for g in self.agents])
