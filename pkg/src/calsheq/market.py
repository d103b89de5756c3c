"""n-merchant market: reference facility, quoting, customer matching, inventory and PnL."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import AgentType, ConfigurationError, Environment, Supertype, SupertypeProfile
from .rng import EpisodeStreams

# (eps_buy, eps_sell, hedge): quote p_buy = 0 and p_sell = 2 p*_sell, never better than the reference
NULL_ACTION = np.array([-1.0, 1.0, 0.0])
ACTION_LOW = np.array([-1.0, -1.0, 0.0])
ACTION_HIGH = np.array([1.0, 1.0, 1.0])

CONNECTIVITY_RANGE = (0.0, 1.0)
XI_MEAN_RANGE = (0.0, 5.0)
XI_STD_RANGE = (0.0, 2.0)
CONNECTIVITY_STEP = 1.0
XI_MEAN_STEP = 5.0
XI_STD_STEP = 2.0


@dataclass
class MarketConfig:
    n_merchants: int = 3
    n_clusters: int = 2
    customers_per_cluster: int = 10
    cluster_quantities: list[float] | None = None
    sigma_mid: float = 0.05
    sigma_spread: float = 0.01
    mid0: float = 10.0
    spread0: float = 1.0
    window: int = 5
    horizon: int = 30
    gamma: float = 1.0
    per_cluster_history: bool = False
    shock_clip: float = 6.0

    def __post_init__(self):
        if self.cluster_quantities is None:
            self.cluster_quantities = [float(k + 1) for k in range(self.n_clusters)]
        self.cluster_quantities = [float(q) for q in self.cluster_quantities]
        if len(self.cluster_quantities) != self.n_clusters:
            raise ConfigurationError("one quantity per customer cluster required")
        if min(self.n_merchants, self.n_clusters, self.customers_per_cluster, self.window, self.horizon) < 1:
            raise ConfigurationError("market sizes must be positive")
        if self.spread0 < 0 or self.sigma_mid < 0 or self.sigma_spread < 0:
            raise ConfigurationError("spread and volatilities must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in [0, 1]")

    @classmethod
    def full_scale(cls, n_merchants: int = 5) -> "MarketConfig":
        return cls(n_merchants=n_merchants, n_clusters=10, customers_per_cluster=50, window=12,
                   horizon=60, per_cluster_history=True)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def history_groups(self) -> int:
        return self.n_clusters if self.per_cluster_history else 1

    @property
    def obs_dim(self) -> int:
        # mid, half-spread, inventory + W slots x groups x (bought, sold, buy px, sell px)
        return 3 + 4 * self.window * self.history_groups

    @property
    def type_dim(self) -> int:
        return self.n_clusters + 1

    @property
    def step_quantity(self) -> float:
        return float(self.customers_per_cluster * sum(self.cluster_quantities))


def market_supertype(connectivity, xi_mean: float, xi_std: float, fix_std: bool = False,
                     fix_tolerance: bool = False) -> Supertype:
    """Supertype vector: one connection probability per cluster, then inventory-tolerance mean and stdev.

    ``fix_std`` freezes the stdev; ``fix_tolerance`` freezes both tolerance entries,
    leaving only connectivity for a calibrator to move.
    """
    conn = np.asarray(connectivity, dtype=float)
    k = conn.size
    params = np.concatenate([conn, [xi_mean, xi_std]])
    low = np.concatenate([np.full(k, CONNECTIVITY_RANGE[0]), [XI_MEAN_RANGE[0], XI_STD_RANGE[0]]])
    high = np.concatenate([np.full(k, CONNECTIVITY_RANGE[1]), [XI_MEAN_RANGE[1], XI_STD_RANGE[1]]])
    names = tuple(f"conn{j + 1}" for j in range(k)) + ("xi_mean", "xi_std")
    free = np.ones(k + 2, bool)
    if fix_std:
        free[-1] = False
    if fix_tolerance:
        free[-2:] = False
    return Supertype(params=params, low=low, high=high, names=names, free=free)


def increment_ranges(profile: SupertypeProfile) -> np.ndarray:
    """Half-width of the calibrator's increment box for each free profile dimension."""
    out = []
    for g in profile.groups:
        k = g.dim - 2
        steps = np.concatenate([np.full(k, CONNECTIVITY_STEP), [XI_MEAN_STEP, XI_STD_STEP]])
        out.append(steps[g.free])
    return np.concatenate(out)


def step_reference(mid: float, spread: float, sigma_mid: float, sigma_spread: float,
                   rng: np.random.Generator, clip: float = 6.0) -> tuple[float, float]:
    """Gaussian increments for mid and half-spread; half-spread projected onto [0, inf)."""
    z = np.clip(rng.standard_normal(2), -clip, clip)
    return mid + sigma_mid * z[0], max(0.0, spread + sigma_spread * z[1])


def quote(action, ref_buy: float, ref_sell: float) -> tuple[np.ndarray, np.ndarray]:
    a = np.atleast_2d(action)
    return ref_buy * (1.0 + a[:, 0]), ref_sell * (1.0 + a[:, 1])


def match_customers(p_buy, p_sell, connected, sells, ref_buy: float, ref_sell: float, keys) -> np.ndarray:
    """Counterparty of each customer: merchant index, or -1 for the reference facility.

    A selling customer takes the highest merchant bid among connected merchants
    if it is at least ``ref_buy``; a buying customer the lowest merchant offer
    if at most ``ref_sell``.  Ties between merchants go to the larger
    ``keys`` entry (uniform keys give uniform tie-breaking); ties with the
    reference go to the merchant.
    """
    p_buy = np.asarray(p_buy, float)[:, None]
    p_sell = np.asarray(p_sell, float)[:, None]
    connected = np.asarray(connected, bool)
    sells = np.asarray(sells, bool)[None, :]
    ok_bid = connected & (p_buy >= ref_buy)
    ok_ask = connected & (p_sell <= ref_sell)
    # sort key: better price first, tie key second
    bid_score = np.where(ok_bid, p_buy, -np.inf)
    ask_score = np.where(ok_ask, -p_sell, -np.inf)
    score = np.where(sells, bid_score, ask_score)
    best = score.max(axis=0)
    tied = np.isfinite(score) & (score == best[None, :])
    win = np.where(tied, keys, -1.0).argmax(axis=0)
    return np.where(np.isfinite(best), win, -1)


def settle(cash: float, q: float, bought: float, paid: float, sold: float, received: float,
           hedge: float, ref_buy: float, ref_sell: float, mid_old: float, mid_new: float,
           xi: float, q_hedge_base: float | None = None) -> tuple[float, float, float, float]:
    """Apply customer fills and the hedge; return ``(cash, q, reward, hedged_qty)``.

    The hedge trades ``hedge * q_hedge_base`` (default: the inventory before
    this step's fills) at the reference facility, crossing the spread.
    Reward is the change in cash plus inventory marked at mid, minus
    ``xi * |q_after|``.
    """
    base = q if q_hedge_base is None else q_hedge_base
    cash_new = cash - paid + received
    q_new = q + bought - sold
    hq = hedge * base
    if hq > 0:
        cash_new += hq * ref_buy
    elif hq < 0:
        cash_new += hq * ref_sell
    q_new -= hq
    reward = (cash_new - cash) + (q_new * mid_new - q * mid_old) - xi * abs(q_new)
    return cash_new, q_new, reward, hq


class MarketEnv(Environment):
    """Merchants quote around a reference facility; customers pick the best connected quote."""

    def __init__(self, config: MarketConfig | None = None):
        self.config = cfg = config or MarketConfig()
        self.n_agents = cfg.n_merchants
        self.obs_dim = cfg.obs_dim
        self.act_dim = 3
        self.type_dim = cfg.type_dim
        self.horizon = cfg.horizon
        self.gamma = cfg.gamma
        self.action_low = ACTION_LOW.copy()
        self.action_high = ACTION_HIGH.copy()
        K, C = cfg.n_clusters, cfg.customers_per_cluster
        self.n_customers = K * C
        self.customer_cluster = np.repeat(np.arange(K), C)
        self.customer_qty = np.asarray(cfg.cluster_quantities)[self.customer_cluster]
        self.r_max = self._reward_bound()
        self._t = 0

    def clone(self) -> "MarketEnv":
        return MarketEnv(self.config)

    def _reward_bound(self) -> float:
        cfg = self.config
        c, T, Q = cfg.shock_clip, cfg.horizon, cfg.step_quantity
        p = abs(cfg.mid0) + c * cfg.sigma_mid * T + cfg.spread0 + c * cfg.sigma_spread * T
        xi_max = XI_MEAN_RANGE[1] + c * XI_STD_RANGE[1]
        q_max = Q * T
        return 4 * Q * p + q_max * p + 2 * (q_max + Q) * p + xi_max * q_max

    # -- types ---------------------------------------------------------------
    def draw_type(self, supertype: Supertype, rng: np.random.Generator) -> AgentType:
        cfg = self.config
        K, C = cfg.n_clusters, cfg.customers_per_cluster
        if supertype.dim != K + 2:
            raise ConfigurationError(f"market supertype needs {K + 2} params, got {supertype.dim}")
        prob = supertype.params[:K]
        links = rng.random((K, C)) < prob[:, None]
        z = float(np.clip(rng.standard_normal(), -cfg.shock_clip, cfg.shock_clip))
        xi = max(0.0, supertype.params[K] + supertype.params[K + 1] * z)
        values = np.concatenate([links.mean(axis=1), [xi]])
        return AgentType(values=values, detail=links.reshape(-1))

    def _install_types(self, types: list[AgentType]) -> None:
        if len(types) != self.n_agents:
            raise ConfigurationError("one type per merchant required")
        self.types = np.stack([t.values for t in types])
        self.connected = np.stack([np.asarray(t.detail, bool) for t in types])
        self.xi = self.types[:, -1].copy()

    # -- episode -------------------------------------------------------------
    def start(self, types: list[AgentType], streams: EpisodeStreams) -> np.ndarray:
        cfg = self.config
        self.streams = streams
        self._install_types(types)
        n, T, K = self.n_agents, cfg.horizon, cfg.n_clusters
        self.mid, self.spread = cfg.mid0, cfg.spread0
        self.q = np.zeros(n)
        self.cash = np.zeros(n)
        self.hist = np.zeros((n, cfg.window, cfg.history_groups, 4))
        self._t = 0
        self.log = {
            "fills_by_cluster": np.zeros((n, T, K), dtype=np.int64),
            "captured_qty": np.zeros((n, T)),
            "customer_qty": np.zeros(T),
            "reference_qty": np.zeros(T),
            "hedge_qty": np.zeros((n, T)),
            "inventory": np.zeros((n, T)),
            "goods_residual": np.zeros(T),
            "cash_residual": np.zeros(T),
            "mid": np.zeros(T),
            "spread": np.zeros(T),
        }
        return self.observe()

    def retype(self, types: list[AgentType]) -> np.ndarray:
        self._install_types(types)
        return self.observe()

    def observe(self) -> np.ndarray:
        cfg = self.config
        head = np.column_stack([
            np.full(self.n_agents, self.mid / cfg.mid0),
            np.full(self.n_agents, self.spread / cfg.mid0),
            self.q / cfg.step_quantity,
        ])
        return np.concatenate([head, self.hist.reshape(self.n_agents, -1)], axis=1)

    def step(self, actions):
        cfg = self.config
        n, K, t = self.n_agents, cfg.n_clusters, self._t
        if t >= cfg.horizon:
            raise RuntimeError("episode already finished")
        a = np.clip(np.asarray(actions, float).reshape(n, 3), ACTION_LOW, ACTION_HIGH)
        world = self.streams.world
        mid, spread = self.mid, self.spread
        ref_buy, ref_sell = mid - spread, mid + spread
        p_buy, p_sell = quote(a, ref_buy, ref_sell)

        sells = world.random(self.n_customers) < 0.5
        keys = np.stack([g.random(self.n_customers) for g in self.streams.agents])
        winner = match_customers(p_buy, p_sell, self.connected, sells, ref_buy, ref_sell, keys)

        qty = self.customer_qty
        to_ref = winner < 0
        new_mid, new_spread = step_reference(mid, spread, cfg.sigma_mid, cfg.sigma_spread, world,
                                             cfg.shock_clip)
        rewards = np.zeros(n)
        hist_slot = np.zeros((n, cfg.history_groups, 4))
        d_goods = np.zeros(n)
        d_cash = np.zeros(n)
        ref_goods = ref_cash = 0.0
        for i in range(n):
            mine = winner == i
            b_mask, s_mask = mine & sells, mine & ~sells
            bought, sold = qty[b_mask].sum(), qty[s_mask].sum()
            cash0, q0 = self.cash[i], self.q[i]
            cash1, q1, r, hq = settle(cash0, q0, bought, bought * p_buy[i], sold, sold * p_sell[i],
                                      a[i, 2], ref_buy, ref_sell, mid, new_mid, self.xi[i])
            self.cash[i], self.q[i] = cash1, q1
            d_goods[i], d_cash[i] = q1 - q0, cash1 - cash0
            # the reference facility takes the other side of the hedge
            ref_goods += hq
            ref_cash -= hq * (ref_buy if hq > 0 else ref_sell)
            rewards[i] = r
            self.log["fills_by_cluster"][i, t] = np.bincount(self.customer_cluster[mine], minlength=K)
            self.log["captured_qty"][i, t] = bought + sold
            self.log["hedge_qty"][i, t] = hq
            self.log["inventory"][i, t] = q1
            grp = self.customer_cluster if cfg.per_cluster_history else np.zeros(self.n_customers, int)
            for g in range(cfg.history_groups):
                bg, sg = b_mask & (grp == g), s_mask & (grp == g)
                qb, qs = qty[bg].sum(), qty[sg].sum()
                hist_slot[i, g] = [qb / cfg.step_quantity, qs / cfg.step_quantity,
                                   p_buy[i] / mid - 1.0 if qb > 0 else 0.0,
                                   p_sell[i] / mid - 1.0 if qs > 0 else 0.0]

        ref_sells_cust = to_ref & sells      # reference buys from selling customers
        ref_buys_cust = to_ref & ~sells
        ref_goods += qty[ref_sells_cust].sum() - qty[ref_buys_cust].sum()
        ref_cash += -qty[ref_sells_cust].sum() * ref_buy + qty[ref_buys_cust].sum() * ref_sell
        cust_goods = -qty[sells].sum() + qty[~sells].sum()
        cust_cash = 0.0
        for i in range(n):
            mine = winner == i
            cust_cash += qty[mine & sells].sum() * p_buy[i] - qty[mine & ~sells].sum() * p_sell[i]
        cust_cash += qty[ref_sells_cust].sum() * ref_buy - qty[ref_buys_cust].sum() * ref_sell

        self.log["customer_qty"][t] = qty.sum()
        self.log["reference_qty"][t] = qty[to_ref].sum()
        self.log["goods_residual"][t] = d_goods.sum() + ref_goods + cust_goods
        self.log["cash_residual"][t] = d_cash.sum() + ref_cash + cust_cash
        self.log["mid"][t], self.log["spread"][t] = mid, spread

        self.hist = np.roll(self.hist, 1, axis=1)
        self.hist[:, 0] = hist_slot
        self.mid, self.spread = new_mid, new_spread
        self._t += 1
        done = self._t >= cfg.horizon
        return self.observe(), rewards, done, {}

    def episode_info(self) -> dict:
        info = {k: v.copy() for k, v in self.log.items()}
        info["cluster_quantities"] = np.asarray(self.config.cluster_quantities)
        return info
