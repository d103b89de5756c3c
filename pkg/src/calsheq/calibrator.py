"""RL calibrator over supertype profiles, calibration metrics and targets, and the two-timescale loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .core import Environment, SupertypeProfile
from .policy import GaussianPolicy, PPOConfig, PPOTrainer, ValueHead
from .rng import stream, torch_seed
from .training import PolicySpec, group_mean_returns, shared_step

log = logging.getLogger(__name__)

PERCENTILES = tuple(range(10, 100, 10))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def market_share(captured_qty: np.ndarray, customer_qty: np.ndarray, members: Sequence[int]) -> float:
    """Fraction of all customer quantity captured by ``members`` (0 when nothing traded)."""
    total = float(np.sum(customer_qty))
    if total <= 0:
        return 0.0
    return float(np.sum(np.asarray(captured_qty)[list(members)])) / total


def nearest_rank(sample, percentiles: Sequence[int] = PERCENTILES) -> np.ndarray:
    """Nearest-rank percentiles: the ceil(p/100 * N)-th smallest value."""
    x = np.sort(np.asarray(sample, dtype=float).ravel())
    if x.size == 0:
        log.info("empty transaction sample; percentiles set to 0")
        return np.zeros(len(percentiles))
    ranks = np.ceil(np.asarray(percentiles, float) / 100.0 * x.size).astype(int)
    return x[np.clip(ranks, 1, x.size) - 1]


def transaction_percentiles(fills_by_cluster: np.ndarray, cluster_quantities, members: Sequence[int],
                            percentiles: Sequence[int] = PERCENTILES) -> np.ndarray:
    """Percentiles of individual transaction sizes received by a merchant group.

    ``fills_by_cluster[i, t, k]`` counts customer transactions of cluster ``k``
    won by merchant ``i`` at step ``t``; transactions are pooled over the
    group's merchants and the episode.
    """
    counts = np.asarray(fills_by_cluster)[list(members)].sum(axis=(0, 1))
    sample = np.repeat(np.asarray(cluster_quantities, float), counts)
    return nearest_rank(sample, percentiles)


@dataclass
class EpisodeMetrics:
    shares: np.ndarray          # per supertype group
    total_share: float
    percentiles: np.ndarray     # [group, 9]


def episode_metrics(info: dict, profile: SupertypeProfile, t0: int = 0, t1: int | None = None) -> EpisodeMetrics:
    sl = slice(t0, t1)
    cap = info["captured_qty"][:, sl].sum(axis=1)
    cust = info["customer_qty"][sl]
    fills = info["fills_by_cluster"][:, sl]
    G = len(profile.groups)
    shares = np.array([market_share(cap, cust, profile.members(g)) for g in range(G)])
    pct = np.stack([transaction_percentiles(fills, info["cluster_quantities"], profile.members(g))
                    for g in range(G)])
    return EpisodeMetrics(shares, market_share(cap, cust, range(profile.n_agents)), pct)


# ---------------------------------------------------------------------------
# targets and calibrator reward
# ---------------------------------------------------------------------------

@dataclass
class Target:
    kind: str                   # market_share | total_market_share | percentile
    target: float
    loss: str = "abs"           # abs | hinge_below
    group: int | None = None
    percentile: int | None = None

    def __post_init__(self):
        if self.kind not in ("market_share", "total_market_share", "percentile"):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.loss not in ("abs", "hinge_below"):
            raise ValueError(f"unknown loss shape {self.loss!r}")
        if self.kind != "total_market_share" and self.group is None:
            raise ValueError(f"{self.kind} target needs a group")
        if self.kind == "percentile" and self.percentile not in PERCENTILES:
            raise ValueError("percentile must be one of 10, 20, ..., 90")

    def value(self, m: EpisodeMetrics) -> float:
        if self.kind == "market_share":
            return float(m.shares[self.group])
        if self.kind == "total_market_share":
            return float(m.total_share)
        return float(m.percentiles[self.group, PERCENTILES.index(self.percentile)])

    def loss_of(self, x: float) -> float:
        if self.loss == "abs":
            return abs(self.target - x)
        return max(self.target - x, 0.0)


@dataclass
class TargetComponent:
    """Targets whose losses are averaged and enter the reward with one weight."""

    weight: float
    targets: list[Target]
    name: str = ""

    def __post_init__(self):
        if self.weight <= 0:
            raise ValueError("component weights must be positive")
        if not self.targets:
            raise ValueError("component without targets")
        self.targets = [t if isinstance(t, Target) else Target(**t) for t in self.targets]

    def loss(self, m: EpisodeMetrics) -> float:
        return float(np.mean([t.loss_of(t.value(m)) for t in self.targets]))


@dataclass
class CalibrationTargetSet:
    components: list[TargetComponent]
    composition: str = "inverse_of_sum"     # or "sum_of_inverses"

    def __post_init__(self):
        self.components = [c if isinstance(c, TargetComponent) else TargetComponent(**c)
                           for c in self.components]
        if self.composition not in ("inverse_of_sum", "sum_of_inverses"):
            raise ValueError(f"unknown composition {self.composition!r}")

    @property
    def n_targets(self) -> int:
        return sum(len(c.targets) for c in self.components)

    def to_dict(self) -> dict:
        return asdict(self)


def calibrator_reward(targets: CalibrationTargetSet, metrics: EpisodeMetrics) -> tuple[float, np.ndarray]:
    """Reward in (0, 1] and the per-component losses.

    ``inverse_of_sum``: 1 / (1 + sum_c w_c L_c).
    ``sum_of_inverses``: sum_c w_c / (1 + L_c), normalised by sum_c w_c.
    """
    losses = np.array([c.loss(metrics) for c in targets.components])
    w = np.array([c.weight for c in targets.components])
    if targets.composition == "inverse_of_sum":
        r = 1.0 / (1.0 + float(np.dot(w, losses)))
    else:
        r = float(np.dot(w, 1.0 / (1.0 + losses)) / w.sum())
    return r, losses


SUPER1_PERCENTILES = [8, 8, 8, 9, 9, 9, 10, 10, 10]
SUPER2_PERCENTILES = [2, 3, 3, 4, 5, 5, 6, 6, 7]


def _percentile_component(group: int, values, weight: float, name: str) -> TargetComponent:
    return TargetComponent(weight, [Target("percentile", float(v), "abs", group, p)
                                    for p, v in zip(PERCENTILES, values)], name)


def experiment_targets(number: int) -> CalibrationTargetSet:
    """Target sets of experiments 1-5 (supertype 1 = group 0, supertype 2 = group 1)."""
    shares_ge = TargetComponent(1.0, [Target("market_share", 0.15, "hinge_below", 0),
                                      Target("total_market_share", 0.8, "hinge_below")], "market_share")
    if number == 1:
        return CalibrationTargetSet([shares_ge, _percentile_component(0, SUPER1_PERCENTILES, 0.2, "pct_super1")])
    if number in (2, 3):
        return CalibrationTargetSet([shares_ge,
                                     _percentile_component(0, SUPER1_PERCENTILES, 0.2, "pct_super1"),
                                     _percentile_component(1, SUPER2_PERCENTILES, 0.2, "pct_super2")])
    if number == 4:
        return CalibrationTargetSet([
            TargetComponent(1.0, [Target("market_share", 0.25, "abs", 0)], "share_super1"),
            TargetComponent(1.0, [Target("total_market_share", 0.8, "hinge_below")], "share_total")])
    if number == 5:
        return CalibrationTargetSet([
            TargetComponent(1.0, [Target("market_share", 0.4, "abs", 0)], "share_super1"),
            TargetComponent(1.0, [Target("total_market_share", 0.8, "abs")], "share_total")])
    raise ValueError(f"no experiment {number}")


# ---------------------------------------------------------------------------
# learning-rate schedules
# ---------------------------------------------------------------------------

@dataclass
class TimescaleSchedule:
    """``power``: beta_m = scale / (1 + m / offset)^exponent for each timescale.
    ``constant``: fixed shared rate, calibrator rate = shared * ratio.

    ``offset`` stretches the early part of the power schedule without touching
    its tail exponents, so the summability conditions are unaffected.
    """

    kind: str = "power"
    shared_scale: float = 1e-3
    shared_exponent: float = 0.6
    cal_scale: float = 1e-3
    cal_exponent: float = 0.9
    ratio: float = 0.1
    offset: float = 1.0

    def __post_init__(self):
        if self.kind not in ("power", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.offset <= 0:
            raise ValueError("schedule offset must be positive")

    def shared(self, m: int) -> float:
        if self.kind == "constant":
            return self.shared_scale
        return self.shared_scale / (1.0 + m / self.offset) ** self.shared_exponent

    def cal(self, m: int) -> float:
        if self.kind == "constant":
            return self.shared_scale * self.ratio
        return self.cal_scale / (1.0 + m / self.offset) ** self.cal_exponent


@dataclass
class ScheduleReport:
    ok: bool
    problems: list[str]
    ratio_start: float
    ratio_end: float


def validate_schedule(schedule: TimescaleSchedule, horizon: int) -> ScheduleReport:
    """Robbins-Monro conditions and a vanishing calibrator/shared ratio.

    For the power family sum beta diverges iff exponent <= 1 and sum beta^2
    converges iff exponent > 1/2; the ratio decays iff the calibrator
    exponent exceeds the shared one.
    """
    problems = []
    ms = np.arange(1, max(int(horizon), 2) + 1)
    ratio = np.array([schedule.cal(m) / schedule.shared(m) for m in ms])
    if schedule.kind == "constant":
        problems.append("constant rates: sum of squares diverges")
        problems.append("constant rates: calibrator/shared ratio does not vanish")
    else:
        for label, scale, p in (("shared", schedule.shared_scale, schedule.shared_exponent),
                                ("calibrator", schedule.cal_scale, schedule.cal_exponent)):
            if scale <= 0:
                problems.append(f"{label} scale must be positive")
            if p > 1:
                problems.append(f"{label} exponent {p} > 1: sum of rates is finite")
            if p <= 0.5:
                problems.append(f"{label} exponent {p} <= 1/2: sum of squared rates diverges")
        if schedule.cal_exponent <= schedule.shared_exponent:
            problems.append("calibrator exponent must exceed shared exponent for the ratio to vanish")
        if np.any(np.diff(ratio) >= 0):
            problems.append("ratio not strictly decreasing over the horizon")
    return ScheduleReport(not problems, problems, float(ratio[0]), float(ratio[-1]))


# ---------------------------------------------------------------------------
# calibrator policy and CALSHEQ
# ---------------------------------------------------------------------------

class CalibratorPolicy(GaussianPolicy):
    """Gaussian over profile increments, conditioned on the current profile.

    Inputs are the free profile dimensions rescaled to the unit box; outputs
    are squashed into ``[-step, step]`` per dimension.
    """

    def __init__(self, low, high, step, **kw):
        step = np.asarray(step, float)
        super().__init__(len(step), -step, step, **kw)
        self.register_buffer("state_low", torch.as_tensor(np.asarray(low, float), dtype=torch.float32))
        self.register_buffer("state_high", torch.as_tensor(np.asarray(high, float), dtype=torch.float32))

    def encode(self, profiles: np.ndarray) -> np.ndarray:
        lo, hi = self.state_low.double().numpy(), self.state_high.double().numpy()
        return (np.asarray(profiles, float) - lo) / np.where(hi > lo, hi - lo, 1.0)


class ZeroIncrementCalibrator:
    """Stand-in that never moves the profile (plain fixed-profile self-play)."""

    frozen = True


@dataclass
class CalibratorSettings:
    policy: PolicySpec = field(default_factory=lambda: PolicySpec(init_log_std=math.log(0.05)))
    ppo: PPOConfig = field(default_factory=PPOConfig)
    decisions_per_episode: int = 1


def make_calibrator_trainer(profile: SupertypeProfile, step: np.ndarray, settings: CalibratorSettings,
                            seed: int) -> PPOTrainer:
    lo, hi = profile.bounds()
    torch.manual_seed(torch_seed(seed, "init", 1))
    spec = settings.policy
    pol = CalibratorPolicy(lo, hi, step, hidden=spec.hidden, sigma_bounds=spec.sigma_bounds,
                           init_log_std=spec.init_log_std, init_mean=spec.init_mean)
    val = ValueHead(len(step), hidden=spec.hidden)
    return PPOTrainer(pol, val, settings.ppo, seed=torch_seed(seed, "sgd", 1))


@dataclass
class IterationRecord:
    iteration: int
    rcal: np.ndarray                # per calibrator transition
    component_losses: np.ndarray    # [transition, component]
    group_returns: np.ndarray       # per supertype group
    profiles: np.ndarray            # particles after the iteration, [B, D]
    drift: float                    # mean over particles of max |delta| (unit-box scale)
    mean_drift: float               # max |change of particle mean| (unit-box scale)
    shared_stats: dict
    cal_stats: dict
    metrics: list = field(default_factory=list)


class Calsheq:
    """Two-timescale loop: shared policy on the fast rate, calibrator on the slow one.

    ``particles[b]`` is the profile used by episode slot ``b``; each iteration
    moves every particle by a sampled increment (projected into bounds).
    """

    def __init__(self, env: Environment, profile0: SupertypeProfile, shared: PPOTrainer,
                 calibrator: PPOTrainer | ZeroIncrementCalibrator, targets: CalibrationTargetSet,
                 schedule: TimescaleSchedule, episodes: int, step: np.ndarray, seed: int = 0,
                 decisions_per_episode: int = 1, workers: int = 1):
        if episodes < 1:
            raise ValueError("need at least one episode per iteration")
        self.env = env
        self.template = profile0
        self.shared = shared
        self.calibrator = calibrator
        self.targets = targets
        self.schedule = schedule
        self.B = episodes
        self.step = np.asarray(step, float)
        self.seed = seed
        self.k = int(decisions_per_episode)
        self.workers = workers
        self.lo, self.hi = profile0.bounds()
        self.particles = np.tile(profile0.vector(), (episodes, 1))
        self.m = 0

    def _scale(self) -> np.ndarray:
        return np.where(self.hi > self.lo, self.hi - self.lo, 1.0)

    def sample_increments(self, states: np.ndarray, m: int, j: int):
        """Increments for every particle at decision ``j`` of iteration ``m``."""
        if isinstance(self.calibrator, ZeroIncrementCalibrator):
            z = np.zeros_like(states)
            return z, z, np.zeros(len(states))
        pol = self.calibrator.policy
        x = torch.as_tensor(pol.encode(states), dtype=pol.dtype)
        noise = np.stack([stream(self.seed, "calibrator", m, b, j).standard_normal(len(self.step))
                          for b in range(len(states))])
        return pol.sample_from_input(x, noise)

    def iteration(self) -> IterationRecord:
        self.m += 1
        m = self.m
        prev = self.particles.copy()
        states, raws, lps, schedules = [], [], [], [[] for _ in range(self.B)]
        cur = prev.copy()
        for j in range(self.k):
            delta, raw, lp = self.sample_increments(cur, m, j)
            states.append(cur.copy())
            raws.append(raw)
            lps.append(lp)
            cur = np.clip(cur + delta, self.lo, self.hi)
            for b in range(self.B):
                schedules[b].append(self.template.with_vector(cur[b]))
        self.particles = cur
        profiles = [s[0] if self.k == 1 else s for s in schedules]
        out = shared_step(self.env, self.shared, profiles, self.seed, m, lr=self.schedule.shared(m),
                          workers=self.workers)
        rcal, losses, metrics = [], [], []
        for j in range(self.k):
            for b, e in enumerate(out.episodes):
                seg = e.info["segments"]
                mt = episode_metrics(e.info, e.profile, seg[j], seg[j + 1])
                r, ls = calibrator_reward(self.targets, mt)
                if not np.isfinite(r):
                    raise FloatingPointError(f"non-finite calibrator reward for profile {schedules[b][j]}")
                rcal.append(r)
                losses.append(ls)
                metrics.append(mt)
        rcal = np.array(rcal)
        cal_stats = {}
        if not isinstance(self.calibrator, ZeroIncrementCalibrator):
            pol = self.calibrator.policy
            x = pol.encode(np.concatenate(states))
            samples = self.calibrator.samples_from_bandit(x, np.concatenate(raws), np.concatenate(lps), rcal)
            cal_stats = self.calibrator.update(samples, lr=self.schedule.cal(m))
        scale = self._scale()
        drift = float(np.mean(np.max(np.abs(self.particles - prev) / scale, axis=1)))
        mean_drift = float(np.max(np.abs(self.particles.mean(0) - prev.mean(0)) / scale))
        return IterationRecord(m, rcal, np.array(losses), group_mean_returns(out.episodes, len(self.template.groups)),
                               self.particles.copy(), drift, mean_drift, out.stats, cal_stats, metrics)

    def state_dict(self) -> dict:
        state = {"m": self.m, "particles": self.particles.copy(), "shared": self.shared.state_dict()}
        if not isinstance(self.calibrator, ZeroIncrementCalibrator):
            state["calibrator"] = self.calibrator.state_dict()
        return state

    def load_state_dict(self, state: dict) -> None:
        self.m = state["m"]
        self.particles = np.asarray(state["particles"], float)
        self.shared.load_state_dict(state["shared"])
        if "calibrator" in state:
            self.calibrator.load_state_dict(state["calibrator"])


def calsheq_iteration(loop: Calsheq) -> IterationRecord:
    """One pass of the loop: increments, rollouts, then both policy updates."""
    return loop.iteration()
