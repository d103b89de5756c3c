"""Tabular partially observable Markov games small enough to enumerate.

Every agent has a local state, sees only that state and its own type, and
acts with a tabular policy ``pi[s, lam, a]``.  Agent ``i``'s next local
state mixes its own kernel with the empirical action mix of the other
agents, and its reward is its own term plus the average of pairwise terms
against the others, so relabelling agents that share a supertype leaves
everything unchanged.

Values are computed by linear solves on the joint (state) chain for each
joint type draw, gradients by occupancy measures, and both are
cross-checked against independent Monte-Carlo and finite differences.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class TabularPOMG:
    """Fields (S local states, A actions, L types, n agents):

    type_probs[i, l]    probability that agent i draws type l (its supertype)
    mu0[l, s]           initial local-state distribution given the type
    own_kernel[l,s,a,s'] own transition kernel
    crowd_kernel[a, s'] transition contribution of one other agent's action
    crowd_weight        mixing weight of the others' average crowd kernel
    own_reward[l, s, a]
    pair_reward[s, a, s2, a2]  reward against one other agent, averaged over others
    one_step            episodes stop after one step (otherwise discounted, gamma < 1)
    """

    type_probs: np.ndarray
    mu0: np.ndarray
    own_kernel: np.ndarray
    crowd_kernel: np.ndarray
    crowd_weight: float
    own_reward: np.ndarray
    pair_reward: np.ndarray
    gamma: float
    one_step: bool = False

    def __post_init__(self):
        for name in ("type_probs", "mu0", "own_kernel", "crowd_kernel", "own_reward", "pair_reward"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n, L = self.type_probs.shape
        S, A = self.own_reward.shape[1:]
        if self.mu0.shape != (L, S) or self.own_kernel.shape != (L, S, A, S):
            raise ValueError("inconsistent local state / type sizes")
        if self.crowd_kernel.shape != (A, S) or self.pair_reward.shape != (S, A, S, A):
            raise ValueError("inconsistent crowd kernel or pairwise reward shape")
        for name, arr in (("type_probs", self.type_probs), ("mu0", self.mu0),
                          ("own_kernel", self.own_kernel), ("crowd_kernel", self.crowd_kernel)):
            if np.any(arr < 0) or not np.allclose(arr.sum(-1), 1.0, atol=1e-12):
                raise ValueError(f"{name} rows must be probability vectors")
        if not 0.0 <= self.crowd_weight <= 1.0:
            raise ValueError("crowd weight must lie in [0, 1]")
        if n < 2:
            raise ValueError("need at least two agents")
        if not self.one_step and not 0.0 <= self.gamma < 1.0:
            raise ValueError("discounted values need gamma in [0, 1)")

    @property
    def n(self) -> int:
        return self.type_probs.shape[0]

    @property
    def sizes(self) -> tuple[int, int, int]:
        """(S, A, L)"""
        return self.own_reward.shape[1], self.own_reward.shape[2], self.type_probs.shape[1]

    @property
    def r_max(self) -> float:
        return float(np.abs(self.own_reward).max() + np.abs(self.pair_reward).max())

    def horizon_for(self, tol: float = 1e-9) -> int:
        """Smallest H with gamma^H R_max / (1 - gamma) below ``tol``."""
        if self.one_step:
            return 1
        if self.gamma == 0.0:
            return 1
        bound = self.r_max / (1.0 - self.gamma)
        if bound <= tol:
            return 1
        return int(math.ceil(math.log(tol / bound) / math.log(self.gamma)))


def random_pomg(rng: np.random.Generator, n: int = 2, S: int = 2, A: int = 2, L: int = 2,
                supertypes: Sequence[int] | None = None, gamma: float = 0.5, crowd_weight: float = 0.3,
                one_step: bool = False) -> TabularPOMG:
    """Random fixture; agents with equal ``supertypes`` entries share a type distribution."""
    supertypes = list(range(n)) if supertypes is None else list(supertypes)
    k = max(supertypes) + 1
    per_super = rng.dirichlet(np.ones(L), size=k)
    return TabularPOMG(
        type_probs=per_super[supertypes],
        mu0=rng.dirichlet(np.ones(S), size=L),
        own_kernel=rng.dirichlet(np.ones(S), size=(L, S, A)),
        crowd_kernel=rng.dirichlet(np.ones(S), size=A),
        crowd_weight=crowd_weight,
        own_reward=rng.uniform(-1, 1, size=(L, S, A)),
        pair_reward=rng.uniform(-1, 1, size=(S, A, S, A)),
        gamma=gamma, one_step=one_step)


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

def softmax_policy(theta: np.ndarray) -> np.ndarray:
    z = theta - theta.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def uniform_policy(pomg: TabularPOMG) -> np.ndarray:
    S, A, L = pomg.sizes
    return np.full((S, L, A), 1.0 / A)


def random_policy(pomg: TabularPOMG, rng: np.random.Generator, concentration: float = 1.0) -> np.ndarray:
    S, A, L = pomg.sizes
    return rng.dirichlet(np.full(A, concentration), size=(S, L))


def check_policy(pomg: TabularPOMG, pi: np.ndarray) -> np.ndarray:
    S, A, L = pomg.sizes
    pi = np.asarray(pi, float)
    if pi.shape != (S, L, A):
        raise ValueError(f"policy table must have shape {(S, L, A)}, got {pi.shape}")
    if np.any(pi < 0) or not np.allclose(pi.sum(-1), 1.0, atol=1e-12):
        raise ValueError("policy rows must be probability vectors")
    return pi


def rho_tv(pi_a: np.ndarray, pi_b: np.ndarray) -> float:
    """Half the largest L1 distance between action distributions over (s, lambda)."""
    return 0.5 * float(np.abs(np.asarray(pi_a) - np.asarray(pi_b)).sum(-1).max())


def rho_tv_pair(p1, p2, p3, p4) -> float:
    return rho_tv(p1, p3) + rho_tv(p2, p4)


# ---------------------------------------------------------------------------
# exact joint-chain machinery
# ---------------------------------------------------------------------------

@dataclass
class _JointTables:
    states: np.ndarray        # [J, n] local state per agent
    actions: np.ndarray       # [K, n]
    trans: np.ndarray         # [J, K, J] given the joint type
    reward: np.ndarray        # [n, J, K]


def _joint_tables(pomg: TabularPOMG, types: tuple[int, ...]) -> _JointTables:
    S, A, L = pomg.sizes
    n = pomg.n
    states = np.array(list(itertools.product(range(S), repeat=n)), dtype=int)
    actions = np.array(list(itertools.product(range(A), repeat=n)), dtype=int)
    lam = np.array(types)
    J, K = len(states), len(actions)
    # per-agent next-local-state distribution [J, K, n, S]
    own = pomg.own_kernel[lam[None, None, :], states[:, None, :], actions[None, :, :]]
    crowd_each = pomg.crowd_kernel[actions]                      # [K, n, S]
    crowd_total = crowd_each.sum(axis=1, keepdims=True)          # [K, 1, S]
    crowd_others = (crowd_total - crowd_each) / (n - 1)          # [K, n, S]
    nxt = (1 - pomg.crowd_weight) * own + pomg.crowd_weight * crowd_others[None]
    trans = np.ones((J, K, J))
    for i in range(n):
        trans *= nxt[:, :, i, :][:, :, states[:, i]]
    reward = np.zeros((n, J, K))
    for i in range(n):
        r = pomg.own_reward[lam[i], states[:, i][:, None], actions[:, i][None, :]]
        pair = np.zeros((J, K))
        for j in range(n):
            if j != i:
                pair += pomg.pair_reward[states[:, i][:, None], actions[:, i][None, :],
                                         states[:, j][:, None], actions[:, j][None, :]]
        reward[i] = r + pair / (n - 1)
    return _JointTables(states, actions, trans, reward)


def _action_probs(tables: _JointTables, types, policies: Sequence[np.ndarray]) -> np.ndarray:
    """P(joint action | joint state) with agent j on ``policies[j]``: [J, K]."""
    st, ac = tables.states, tables.actions
    p = np.ones((len(st), len(ac)))
    for j, pi in enumerate(policies):
        p *= pi[st[:, j][:, None], types[j], ac[:, j][None, :]]
    return p


def _type_draws(pomg: TabularPOMG):
    L = pomg.sizes[2]
    for types in itertools.product(range(L), repeat=pomg.n):
        w = float(np.prod(pomg.type_probs[np.arange(pomg.n), types]))
        if w > 0:
            yield types, w


def _initial(pomg: TabularPOMG, tables: _JointTables, types) -> np.ndarray:
    p = np.ones(len(tables.states))
    for j in range(pomg.n):
        p *= pomg.mu0[types[j], tables.states[:, j]]
    return p


def _solve_value(pomg: TabularPOMG, tables: _JointTables, pa: np.ndarray, agent: int) -> np.ndarray:
    r = (pa * tables.reward[agent]).sum(1)
    if pomg.one_step:
        return r
    P = np.einsum("jk,jkl->jl", pa, tables.trans)
    return np.linalg.solve(np.eye(len(r)) - pomg.gamma * P, r)


def _policies_for(n: int, agent: int, pi1, pi2) -> list:
    return [pi1 if j == agent else pi2 for j in range(n)]


def exact_value(pomg: TabularPOMG, pi1: np.ndarray, pi2: np.ndarray, agent: int) -> float:
    """Expected discounted reward of ``agent`` using pi1 while all others use pi2."""
    pi1, pi2 = check_policy(pomg, pi1), check_policy(pomg, pi2)
    total = 0.0
    for types, w in _type_draws(pomg):
        tables = _joint_tables(pomg, types)
        pa = _action_probs(tables, types, _policies_for(pomg.n, agent, pi1, pi2))
        v = _solve_value(pomg, tables, pa, agent)
        total += w * float(_initial(pomg, tables, types) @ v)
    return total


def v_hat(pomg: TabularPOMG, pi1: np.ndarray, pi2: np.ndarray) -> float:
    """Mean over agents of exact_value: the payoff of the higher-level symmetric game."""
    return float(np.mean([exact_value(pomg, pi1, pi2, i) for i in range(pomg.n)]))


# ---------------------------------------------------------------------------
# Monte-Carlo simulator (independent of the linear-algebra path)
# ---------------------------------------------------------------------------

def _draw_rows(rng: np.random.Generator, cum: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """One categorical draw per entry of ``rows`` from the cumulative table ``cum[row]``."""
    c = np.take(cum, rows, axis=0)
    u = rng.random(rows.shape + (1,))
    return np.minimum((u > c).sum(-1), cum.shape[-1] - 1)


def simulate(pomg: TabularPOMG, policies: Sequence[np.ndarray], episodes: int, rng: np.random.Generator,
             horizon: int | None = None, scores_for: np.ndarray | None = None):
    """Sample episodes; agent j acts with ``policies[j]``.

    Returns discounted returns ``[episodes, n]``.  With ``scores_for`` (a
    softmax parameter table shared by all agents) also returns each agent's
    likelihood-ratio gradient estimate ``[episodes, n, S, L, A]`` using
    reward-to-go weights gamma^t'.

    Next states are drawn from the transition mixture directly: with
    probability 1 - crowd_weight from the agent's own kernel, otherwise from
    the crowd kernel of the action of a uniformly chosen other agent.
    """
    S, A, L = pomg.sizes
    n = pomg.n
    H = pomg.horizon_for() if horizon is None else horizon
    agent = np.arange(n)
    pol_cum = np.cumsum(np.stack(policies).reshape(n * S * L, A), axis=-1)
    kernel_cum = np.cumsum(np.concatenate([pomg.own_kernel.reshape(L * S * A, S), pomg.crowd_kernel]), axis=-1)
    own_reward = pomg.own_reward.ravel()
    pair_reward = pomg.pair_reward.ravel()
    lam = _draw_rows(rng, np.cumsum(pomg.type_probs, -1), np.broadcast_to(agent, (episodes, n)))
    s = _draw_rows(rng, np.cumsum(pomg.mu0, -1), lam)
    ret = np.zeros((episodes, n))
    want_grads = scores_for is not None
    cells, acts, rewards = [], [], []
    disc = 1.0
    for _ in range(H):
        cell = s * L + lam
        a = _draw_rows(rng, pol_cum, agent * S * L + cell)
        sa = s * A + a
        pair = np.take(pair_reward, sa[:, :, None] * (S * A) + sa[:, None, :]).sum(-1)
        pair -= np.take(pair_reward, sa * (S * A) + sa)
        r = np.take(own_reward, (lam * S + s) * A + a) + pair / (n - 1)
        if want_grads:
            cells.append(cell)
            acts.append(a)
            rewards.append(disc * r)
        ret += disc * r
        other = (agent + rng.integers(1, n, size=(episodes, n))) % n
        crowd_row = L * S * A + np.take_along_axis(a, other, axis=1)
        use_own = rng.random((episodes, n)) < 1 - pomg.crowd_weight
        s = _draw_rows(rng, kernel_cum, np.where(use_own, (lam * S + s) * A + a, crowd_row))
        disc *= pomg.gamma
    if not want_grads:
        return ret
    # reward-to-go sum_{t' >= t} gamma^t' r_t' weights the score of the step-t action
    to_go = np.cumsum(np.stack(rewards)[::-1], axis=0)[::-1]           # [H, E, n]
    cells, acts = np.stack(cells), np.stack(acts)
    owner = np.arange(episodes * n).reshape(episodes, n)[None]          # [1, E, n]
    size = episodes * n * S * L
    hits = np.bincount(((owner * S * L + cells) * A + acts).ravel(), weights=to_go.ravel(), minlength=size * A)
    mass = np.bincount((owner * S * L + cells).ravel(), weights=to_go.ravel(), minlength=size)
    pi_shared = softmax_policy(scores_for).reshape(S * L, A)
    grads = hits.reshape(episodes, n, S * L, A) - mass.reshape(episodes, n, S * L, 1) * pi_shared[None, None]
    return ret, grads.reshape(episodes, n, S, L, A)


@dataclass
class MonteCarloEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    samples: int

    def within(self, exact, k: float = 3.0) -> bool:
        return bool(np.all(np.abs(np.asarray(exact) - self.mean) <= k * self.stderr + 1e-15))

    def z_scores(self, exact) -> np.ndarray:
        return np.abs(np.asarray(exact) - self.mean) / np.maximum(self.stderr, 1e-300)


def _accumulate(chunks) -> MonteCarloEstimate:
    total = sq = None
    count = 0
    for x in chunks:
        s1, s2 = x.sum(0), (x * x).sum(0)
        total = s1 if total is None else total + s1
        sq = s2 if sq is None else sq + s2
        count += x.shape[0]
    mean = total / count
    var = np.maximum(sq / count - mean * mean, 0.0) * count / (count - 1)
    return MonteCarloEstimate(mean, np.sqrt(var / count), count)


def monte_carlo_value(pomg: TabularPOMG, pi1, pi2, agent: int, episodes: int, seed: int = 0,
                      chunk: int = 200_000) -> MonteCarloEstimate:
    rng = np.random.default_rng(seed)
    pols = _policies_for(pomg.n, agent, pi1, pi2)

    def chunks():
        left = episodes
        while left > 0:
            m = min(chunk, left)
            yield simulate(pomg, pols, m, rng)[:, agent]
            left -= m
    return _accumulate(chunks())


# ---------------------------------------------------------------------------
# value continuity in total-variation distance
# ---------------------------------------------------------------------------

@dataclass
class Lemma1Report:
    trials: int
    violations: int
    worst_margin: float        # min over trials of bound - |difference| (>= 0 means satisfied)
    worst_ratio: float         # max over trials of |difference| / bound

    @property
    def ok(self) -> bool:
        return self.violations == 0


def lemma1_bound(pomg: TabularPOMG, rho: float) -> float:
    factor = 1.0 if pomg.one_step else (1.0 - pomg.gamma) ** -2
    return 2 * pomg.n * factor * pomg.r_max * rho


def verify_lemma1_bound(pomg: TabularPOMG, quadruples: Sequence[tuple], agents: Sequence[int] | None = None) -> Lemma1Report:
    """|V(p1,p2) - V(p3,p4)| <= 2 n (1-gamma)^-2 R_max rho_TV for every quadruple and agent."""
    agents = range(pomg.n) if agents is None else agents
    violations, margins, ratios, trials = 0, [], [], 0
    for p1, p2, p3, p4 in quadruples:
        bound = lemma1_bound(pomg, rho_tv_pair(p1, p2, p3, p4))
        for i in agents:
            diff = abs(exact_value(pomg, p1, p2, i) - exact_value(pomg, p3, p4, i))
            trials += 1
            margins.append(bound - diff)
            ratios.append(diff / bound if bound > 0 else (0.0 if diff == 0 else math.inf))
            if diff > bound + 1e-12:
                violations += 1
    return Lemma1Report(trials, violations, float(min(margins)), float(max(ratios)))


def random_quadruples(pomg: TabularPOMG, rng: np.random.Generator, count: int) -> list[tuple]:
    """Mix of unrelated policies and small perturbations (where the bound is tightest)."""
    out = []
    for k in range(count):
        p1, p2 = random_policy(pomg, rng), random_policy(pomg, rng)
        if k % 2 == 0:
            p3, p4 = random_policy(pomg, rng), random_policy(pomg, rng)
        else:
            t = rng.uniform(0, 0.1)
            p3 = (1 - t) * p1 + t * random_policy(pomg, rng)
            p4 = (1 - t) * p2 + t * random_policy(pomg, rng)
        out.append((p1, p2, p3, p4))
    return out


# ---------------------------------------------------------------------------
# shared-policy gradient: exact form against finite differences
# ---------------------------------------------------------------------------

def shared_gradient_exact(pomg: TabularPOMG, theta: np.ndarray) -> np.ndarray:
    """(1/n) sum_i of agent i's likelihood-ratio gradient with every agent on softmax(theta).

    For each joint type draw, the discounted occupancy d = mu0 (I - gamma P)^-1
    and Q_i(s, a) = R_i(s, a) + gamma sum_s' P(s'|s,a) V_i(s') give
    g_i = sum_{s,a} d(s) pi(a|s) Q_i(s,a) grad log pi(a_i | s_i, lam_i).
    """
    pi = softmax_policy(theta)
    S, A, L = pomg.sizes
    n = pomg.n
    grad = np.zeros_like(theta, dtype=float)
    for types, w in _type_draws(pomg):
        tables = _joint_tables(pomg, types)
        pa = _action_probs(tables, types, [pi] * n)
        mu = _initial(pomg, tables, types)
        if pomg.one_step:
            occ = mu
        else:
            P = np.einsum("jk,jkl->jl", pa, tables.trans)
            occ = np.linalg.solve((np.eye(len(mu)) - pomg.gamma * P).T, mu)
        for i in range(n):
            v = _solve_value(pomg, tables, pa, i)
            Q = tables.reward[i] if pomg.one_step else tables.reward[i] + pomg.gamma * tables.trans @ v
            weight = occ[:, None] * pa * Q                            # [J, K]
            si = tables.states[:, i]
            ai = tables.actions[:, i]
            lam = types[i]
            # grad log pi(a_i | s_i, lam) = onehot(a_i) - pi(. | s_i, lam) on row (s_i, lam)
            for s in range(S):
                rows = si == s
                wsum = weight[rows].sum()
                by_action = np.array([weight[rows][:, ai == a].sum() for a in range(A)])
                grad[s, lam] += w * (by_action - wsum * pi[s, lam]) / n
    return grad


def v_hat_first_argument_fd(pomg: TabularPOMG, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of theta1 -> V_hat(softmax(theta1), softmax(theta))."""
    pi2 = softmax_policy(theta)
    grad = np.zeros_like(theta, dtype=float)
    for idx in np.ndindex(theta.shape):
        tp, tm = theta.copy(), theta.copy()
        tp[idx] += h
        tm[idx] -= h
        grad[idx] = (v_hat(pomg, softmax_policy(tp), pi2) - v_hat(pomg, softmax_policy(tm), pi2)) / (2 * h)
    return grad


@dataclass
class Proposition1Report:
    exact: np.ndarray
    finite_difference: np.ndarray
    max_deviation: float


def verify_proposition1(pomg: TabularPOMG, theta: np.ndarray, h: float = 1e-5) -> Proposition1Report:
    g = shared_gradient_exact(pomg, theta)
    fd = v_hat_first_argument_fd(pomg, theta, h)
    return Proposition1Report(g, fd, float(np.max(np.abs(g - fd))))


def monte_carlo_shared_gradient(pomg: TabularPOMG, theta: np.ndarray, episodes: int, seed: int = 0,
                                chunk: int = 100_000) -> MonteCarloEstimate:
    """Sample mean of the per-episode shared gradient (1/n) sum_i g_i."""
    rng = np.random.default_rng(seed)
    pi = softmax_policy(theta)

    def chunks():
        left = episodes
        while left > 0:
            m = min(chunk, left)
            _, g = simulate(pomg, [pi] * pomg.n, m, rng, scores_for=theta)
            yield g.mean(axis=1).reshape(m, -1)
            left -= m
    est = _accumulate(chunks())
    return MonteCarloEstimate(est.mean.reshape(theta.shape), est.stderr.reshape(theta.shape), est.samples)


# ---------------------------------------------------------------------------
# gradient self-play on a one-dimensional policy family
# ---------------------------------------------------------------------------

@dataclass
class BridgeResult:
    visited: list[float]            # probability of action 1 at each generator point
    eps: float
    gradient_steps: int
    grid_steps: int
    first_try_steps: int            # gradient steps that cleared eps without backtracking
    endpoint_is_eps_nash: bool
    max_deviation: float


def _bernoulli_policy(pomg: TabularPOMG, p: float) -> np.ndarray:
    S, A, L = pomg.sizes
    pi = np.zeros((S, L, A))
    pi[..., 0], pi[..., 1] = 1 - p, p
    return pi


def gradient_self_play(pomg: TabularPOMG, eps: float, p0: float = 0.5, lr: float = 0.5,
                       grid_points: int = 201, max_steps: int = 10_000) -> BridgeResult:
    """Self-play on policies pi_p (action 1 with probability p everywhere, two actions).

    Each step tries a gradient ascent move on the first argument of V_hat,
    halving the step until the improvement exceeds ``eps``; when that fails,
    any grid policy that improves by more than ``eps`` is taken instead.
    The run stops when neither finds an eps-improvement, and the endpoint is
    then checked as an eps-Nash point of the finite game on grid + visited.
    """
    S, A, L = pomg.sizes
    if A != 2:
        raise ValueError("the bridge uses a two-action policy family")
    grid = np.linspace(0.0, 1.0, grid_points)
    pols = {}

    def pol(p):
        key = round(float(p), 15)
        if key not in pols:
            pols[key] = _bernoulli_policy(pomg, key)
        return pols[key]

    def payoff(p, q):
        return v_hat(pomg, pol(p), pol(q))

    z = [float(p0)]
    grad_steps = grid_steps = first_try = 0
    h = 1e-6
    for _ in range(max_steps):
        x = z[-1]
        base = payoff(x, x)
        lo, hi = max(x - h, 0.0), min(x + h, 1.0)
        slope = (payoff(hi, x) - payoff(lo, x)) / (hi - lo)
        step, moved = lr * slope, False
        for attempt in range(30):
            y = float(np.clip(x + step, 0.0, 1.0))
            if y != x and payoff(y, x) > base + eps:
                z.append(y)
                grad_steps += 1
                first_try += attempt == 0
                moved = True
                break
            step /= 2
        if moved:
            continue
        gains = np.array([payoff(y, x) for y in grid]) - base
        if gains.max() > eps:
            z.append(float(grid[int(np.argmax(gains))]))
            grid_steps += 1
            continue
        break
    else:
        raise RuntimeError("gradient self-play did not terminate")
    strategies = sorted(set(np.round(np.concatenate([grid, z]), 15)))
    x = z[-1]
    dev = max(payoff(y, x) for y in strategies) - payoff(x, x)
    return BridgeResult(z, eps, grad_steps, grid_steps, first_try, dev <= eps, float(dev))
