"""Experiment configuration, presets, the training/calibration runner, and run reports."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from .bo import AcquisitionConfig, BOCalibration
from .calibrator import (CalibrationTargetSet, Calsheq, CalibratorSettings, TimescaleSchedule, ZeroIncrementCalibrator,
                         calibrator_reward, episode_metrics, experiment_targets, make_calibrator_trainer,
                         validate_schedule)
from .core import ConfigurationError, SupertypeProfile
from .market import MarketConfig, MarketEnv, increment_ranges, market_supertype
from .policy import PPOConfig, load_checkpoint, save_checkpoint
from .training import PolicySpec, group_mean_returns, make_shared_trainer, shared_step

log = logging.getLogger(__name__)

METRICS_SCHEMA = 1
MODES = ("train", "calibrate", "baseline-bo")


@dataclass
class SupertypeSpec:
    connectivity: list[float]
    xi_mean: float
    xi_std: float
    fix_std: bool = False
    fix_tolerance: bool = False

    def build(self):
        return market_supertype(self.connectivity, self.xi_mean, self.xi_std, self.fix_std, self.fix_tolerance)


def _build(cls, value):
    return value if isinstance(value, cls) else cls(**(value or {}))


@dataclass
class ExperimentConfig:
    name: str = "desk-exp5"
    mode: str = "calibrate"
    market: MarketConfig = field(default_factory=MarketConfig)
    supertypes: list[SupertypeSpec] = field(default_factory=list)
    assignment: list[int] = field(default_factory=list)
    policy: PolicySpec = field(default_factory=PolicySpec)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    calibrator: CalibratorSettings = field(default_factory=CalibratorSettings)
    schedule: TimescaleSchedule = field(default_factory=TimescaleSchedule)
    acquisition: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    targets: CalibrationTargetSet | None = None
    episodes: int = 8
    budget: int = 1_000_000          # agent timesteps
    seed: int = 0
    out: str = "runs/desk-exp5"
    checkpoint_every: int = 50
    workers: int = 1
    allow_constant_schedule: bool = False

    def __post_init__(self):
        self.market = _build(MarketConfig, self.market)
        self.supertypes = [_build(SupertypeSpec, s) for s in self.supertypes]
        self.policy = _build(PolicySpec, self.policy)
        self.ppo = _build(PPOConfig, self.ppo)
        if isinstance(self.calibrator, dict):
            cal = dict(self.calibrator)
            cal["policy"] = _build(PolicySpec, cal.get("policy"))
            cal["ppo"] = _build(PPOConfig, cal.get("ppo"))
            self.calibrator = CalibratorSettings(**cal)
        self.schedule = _build(TimescaleSchedule, self.schedule)
        self.acquisition = _build(AcquisitionConfig, self.acquisition)
        if isinstance(self.targets, int):
            self.targets = experiment_targets(self.targets)
        elif isinstance(self.targets, dict):
            self.targets = CalibrationTargetSet(**self.targets)
        if not self.assignment and self.supertypes:
            self.assignment = [0] + [1] * (self.market.n_merchants - 1)
        self.assignment = [int(a) for a in self.assignment]

    # -- validation -------------------------------------------------------
    def validate(self) -> None:
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.assignment) != self.market.n_merchants:
            problems.append(f"assignment lists {len(self.assignment)} merchants, market has {self.market.n_merchants}")
        if not self.supertypes:
            problems.append("at least one supertype is required")
        elif sorted(set(self.assignment)) != list(range(len(self.supertypes))):
            problems.append("assignment must use every supertype index 0..G-1")
        for g, st in enumerate(self.supertypes):
            if len(st.connectivity) != self.market.n_clusters:
                problems.append(f"supertype {g}: {len(st.connectivity)} connectivity entries for "
                                f"{self.market.n_clusters} clusters")
        if self.episodes < 1:
            problems.append("episodes per iteration must be positive")
        if self.iterations < 1:
            problems.append(f"budget {self.budget} is below one iteration ({self.steps_per_iteration} steps)")
        if self.mode != "train" and self.targets is None:
            problems.append("calibration modes need a target set")
        if self.mode == "calibrate":
            rep = validate_schedule(self.schedule, self.iterations)
            if not rep.ok and not (self.schedule.kind == "constant" and self.allow_constant_schedule):
                problems.append("learning-rate schedule violates the two-timescale conditions: "
                                + "; ".join(rep.problems))
        if problems:
            raise ConfigurationError("invalid experiment config:\n  - " + "\n  - ".join(problems))

    @property
    def steps_per_iteration(self) -> int:
        return self.market.n_merchants * self.market.horizon * self.episodes

    @property
    def iterations(self) -> int:
        return self.budget // self.steps_per_iteration if self.steps_per_iteration > 0 else 0

    def profile(self) -> SupertypeProfile:
        return SupertypeProfile(tuple(self.assignment), tuple(s.build() for s in self.supertypes))

    # -- serialisation ----------------------------------------------------
    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**copy.deepcopy(data))

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(text) or {})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_yaml(Path(path).read_text())

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_yaml())
        return path


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

FULL_MERCHANTS = {1: 5, 2: 5, 3: 10, 4: 10, 5: 5}
FULL_BUDGET = {1: 40_000_000, 2: 40_000_000, 3: 20_000_000, 4: 20_000_000, 5: 40_000_000}


def full_preset(number: int, mode: str = "calibrate") -> ExperimentConfig:
    """Full-scale experiments 1-5: experiments 1-3 move the 20 connectivity entries,
    4-5 also the tolerance entries (23 parameters)."""
    n = FULL_MERCHANTS[number]
    market = MarketConfig.full_scale(n)
    fixed_tol = number <= 3
    supertypes = [SupertypeSpec([0.5] * 10, 0.5, 0.0, fix_std=True, fix_tolerance=fixed_tol),
                  SupertypeSpec([0.5] * 10, 0.5, 0.2, fix_tolerance=fixed_tol)]
    return ExperimentConfig(
        name=f"exp{number}", mode=mode, market=market, supertypes=supertypes,
        policy=PolicySpec(init_mean=[0.05, -0.045, -2.0], init_log_std=-3.5),
        ppo=PPOConfig(),
        calibrator=CalibratorSettings(policy=PolicySpec(init_log_std=math.log(0.02)), ppo=PPOConfig(),
                                      decisions_per_episode=3),
        schedule=TimescaleSchedule(kind="power", shared_scale=1e-4, shared_exponent=0.6,
                                   cal_scale=1e-4, cal_exponent=0.9),
        acquisition=AcquisitionConfig(period=100),
        targets=experiment_targets(number), episodes=90, budget=FULL_BUDGET[number],
        out=f"runs/exp{number}")


# the largest whole number of 720-step iterations within two million agent steps
DESK_BUDGET = (2_000_000 // 720) * 720


def desk_preset(number: int = 5, mode: str = "calibrate") -> ExperimentConfig:
    """Three merchants, two clusters of ten customers, 30-step episodes.

    Only connectivity is calibrated; tolerance entries stay at their starting
    values (see the README for why).  Experiments 1-3 use three clusters
    with quantities 3, 6 and 9 so their percentile targets are meaningful.
    """
    if number <= 3:
        market = MarketConfig(n_merchants=3, n_clusters=3, customers_per_cluster=10,
                              cluster_quantities=[3.0, 6.0, 9.0])
    else:
        market = MarketConfig(n_merchants=3)
    k = market.n_clusters
    supertypes = [SupertypeSpec([0.3] * k, 0.5, 0.0, fix_std=True, fix_tolerance=True),
                  SupertypeSpec([0.3] * k, 0.5, 0.2, fix_tolerance=True)]
    return ExperimentConfig(
        name=f"desk-exp{number}", mode=mode, market=market, supertypes=supertypes,
        policy=PolicySpec(init_mean=[0.05, -0.045, -2.0], init_log_std=-3.5),
        ppo=PPOConfig(lr=3e-4, minibatch_size=256),
        calibrator=CalibratorSettings(policy=PolicySpec(init_log_std=math.log(0.02)),
                                      ppo=PPOConfig(lr=3e-5, minibatch_size=64, sgd_iterations=10)),
        schedule=TimescaleSchedule(kind="power", shared_scale=3e-4, shared_exponent=0.51,
                                   cal_scale=3e-5, cal_exponent=0.9, offset=300.0),
        acquisition=AcquisitionConfig(period=100),
        targets=experiment_targets(number), episodes=8, budget=DESK_BUDGET,
        out=f"runs/desk-exp{number}")


def preset(name: str, mode: str | None = None) -> ExperimentConfig:
    if name.startswith("desk-exp"):
        cfg = desk_preset(int(name[len("desk-exp"):]))
    elif name.startswith("exp"):
        cfg = full_preset(int(name[3:]))
    else:
        raise ConfigurationError(f"unknown preset {name!r}; use exp1..exp5 or desk-exp1..desk-exp5")
    if mode:
        cfg.mode = mode
    return cfg


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def target_labels(targets: CalibrationTargetSet) -> list[str]:
    out = []
    for c in targets.components:
        for t in c.targets:
            if t.kind == "total_market_share":
                out.append("total_share")
            elif t.kind == "market_share":
                out.append(f"share_s{t.group + 1}")
            else:
                out.append(f"pct{t.percentile}_s{t.group + 1}")
    return out


def component_names(targets: CalibrationTargetSet) -> list[str]:
    return [c.name or f"c{k + 1}" for k, c in enumerate(targets.components)]


def metrics_header(cfg: ExperimentConfig) -> list[str]:
    G = len(cfg.supertypes)
    names = cfg.profile().vector_names()
    cols = ["schema", "iteration", "timesteps", "rcal_mean", "rcal_std", "rcal_min", "rcal_max"]
    cols += [f"reward_s{g + 1}" for g in range(G)]
    cols += [f"share_s{g + 1}" for g in range(G)] + ["total_share"]
    if cfg.targets is not None:
        cols += [f"loss_{name}" for name in component_names(cfg.targets)]
        cols += [f"fit_{label}" for label in target_labels(cfg.targets)]
    for nm in names:
        cols += [f"param_{nm}_mean", f"param_{nm}_std", f"param_{nm}_min", f"param_{nm}_max"]
    cols += ["drift", "shared_kl", "shared_kl_coeff", "cal_kl"]
    return cols


def _target_values(targets: CalibrationTargetSet, metrics: list) -> list[float]:
    return [float(np.mean([t.value(m) for m in metrics])) for c in targets.components for t in c.targets]


def metrics_row(cfg: ExperimentConfig, iteration: int, rcal, rewards, metrics, particles, drift,
                shared_stats, cal_stats) -> list:
    G = len(cfg.supertypes)
    rcal = np.asarray(rcal, float) if rcal is not None and len(rcal) else np.array([np.nan])
    shares = np.mean([m.shares for m in metrics], axis=0)
    row = [METRICS_SCHEMA, iteration, iteration * cfg.steps_per_iteration,
           rcal.mean(), rcal.std(), rcal.min(), rcal.max()]
    row += list(rewards) + list(shares) + [float(np.mean([m.total_share for m in metrics]))]
    if cfg.targets is not None:
        row += [float(np.mean([c.loss(m) for m in metrics])) for c in cfg.targets.components]
        row += _target_values(cfg.targets, metrics)
    P = np.atleast_2d(particles)
    for j in range(P.shape[1]):
        row += [P[:, j].mean(), P[:, j].std(), P[:, j].min(), P[:, j].max()]
    row += [drift, shared_stats.get("kl", np.nan), shared_stats.get("kl_coeff", np.nan), cal_stats.get("kl", np.nan)]
    assert len(row) == len(metrics_header(cfg)) and G == len(rewards)
    return [float(x) if not isinstance(x, int) else x for x in row]


def read_metrics(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no metrics file at {path}")
    with path.open() as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path} has no metric rows yet")
    header, body = rows[0], np.array(rows[1:], dtype=float)
    return {h: body[:, k] for k, h in enumerate(header)}


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------

class _Loop:
    """Uniform wrapper over fixed-profile training, CALSHEQ and the BO baseline."""

    def __init__(self, cfg: ExperimentConfig):
        torch.set_num_threads(1)
        self.cfg = cfg
        self.env = MarketEnv(cfg.market)
        self.profile = cfg.profile()
        self.shared = make_shared_trainer(self.env, cfg.policy, cfg.ppo, cfg.seed)
        self.m = 0
        if cfg.mode == "calibrate":
            step = increment_ranges(self.profile)
            cal = make_calibrator_trainer(self.profile, step, cfg.calibrator, cfg.seed)
            if cfg.schedule.kind == "constant":
                log.warning("constant learning rates: the calibrator/shared ratio does not vanish")
            self.inner = Calsheq(self.env, self.profile, self.shared, cal, cfg.targets, cfg.schedule,
                                 cfg.episodes, step, cfg.seed, cfg.calibrator.decisions_per_episode, cfg.workers)
        elif cfg.mode == "baseline-bo":
            lr = cfg.schedule.shared if cfg.schedule.kind == "power" else None
            self.inner = BOCalibration(self.env, self.profile, self.shared, cfg.targets, cfg.acquisition,
                                       cfg.episodes, cfg.seed, lr_schedule=lr, workers=cfg.workers)
        else:
            self.inner = None

    def step(self, last: bool) -> list:
        cfg = self.cfg
        if cfg.mode == "calibrate":
            r = self.inner.iteration()
            self.m = r.iteration
            return metrics_row(cfg, r.iteration, r.rcal, r.group_returns, r.metrics, r.profiles, r.drift,
                               r.shared_stats, r.cal_stats)
        if cfg.mode == "baseline-bo":
            final = last and (self.inner.m + 1) % cfg.acquisition.period != 0
            r = self.inner.iteration(final=final)
            self.m = r.iteration
            return metrics_row(cfg, r.iteration, r.rcal, r.group_returns, r.metrics, r.profile, 0.0,
                               r.shared_stats, {})
        self.m += 1
        out = shared_step(self.env, self.shared, [self.profile] * cfg.episodes, cfg.seed, self.m,
                          workers=cfg.workers)
        metrics = [episode_metrics(e.info, e.profile) for e in out.episodes]
        rcal = ([calibrator_reward(cfg.targets, mt)[0] for mt in metrics] if cfg.targets is not None else [])
        return metrics_row(cfg, self.m, rcal, group_mean_returns(out.episodes, len(cfg.supertypes)), metrics,
                           self.profile.vector(), 0.0, out.stats, {})

    def state_dict(self) -> dict:
        return {"m": self.m, "inner": self.inner.state_dict() if self.inner else self.shared.state_dict()}

    def load_state_dict(self, state: dict) -> None:
        self.m = state["m"]
        if self.inner:
            self.inner.load_state_dict(state["inner"])
        else:
            self.shared.load_state_dict(state["inner"])


def run(cfg: ExperimentConfig, out=None, resume: bool = True, make_plots: bool = True,
        progress=None) -> Path:
    """Run ``cfg`` to its budget, writing metrics.csv, checkpoints, plots and config.yaml into ``out``."""
    cfg.validate()
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path, timing_path, ckpt = out / "metrics.csv", out / "timing.csv", out / "checkpoint.pt"
    header = metrics_header(cfg)
    loop = _Loop(cfg)
    done = 0
    if resume and ckpt.exists():
        state = load_checkpoint(ckpt, cfg.to_dict())
        loop.load_state_dict(state)
        done = loop.m
        _truncate(metrics_path, done, column=1)
        _truncate(timing_path, done, column=0)
        log.info("resumed %s at iteration %d", out, done)
    else:
        for p in (metrics_path, timing_path):
            p.unlink(missing_ok=True)
    cfg.save(out / "config.yaml")
    total = cfg.iterations
    with metrics_path.open("a", newline="") as mf, timing_path.open("a", newline="") as tf:
        mw, tw = csv.writer(mf), csv.writer(tf)
        if mf.tell() == 0:
            mw.writerow(header)
        if tf.tell() == 0:
            tw.writerow(["iteration", "seconds"])
        t0 = time.perf_counter()
        for k in range(done, total):
            # a FloatingPointError propagates; the last periodic checkpoint stays resumable
            row = loop.step(last=k == total - 1)
            mw.writerow(row)
            tw.writerow([loop.m, round(time.perf_counter() - t0, 3)])
            if loop.m % cfg.checkpoint_every == 0 or k == total - 1:
                mf.flush()
                tf.flush()
                save_checkpoint(ckpt, loop.state_dict(), cfg.to_dict())
            if progress is not None:
                progress(loop.m, total, row)
    if cfg.mode == "baseline-bo":
        loop.inner.write_history(out / "bo_history.csv")
    if make_plots:
        from .plots import write_plots
        write_plots(out)
    return out


def _truncate(path: Path, iteration: int, column: int) -> None:
    """Drop rows written after the checkpoint at ``iteration``."""
    if not path.exists():
        return
    with path.open() as fh:
        rows = list(csv.reader(fh))
    keep = rows[:1] + [r for r in rows[1:] if int(float(r[column])) <= iteration]
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerows(keep)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class RunSummary:
    iterations: int
    tail: int
    rcal: float
    rewards: list[float]
    total_share: float
    fits: dict[str, float]
    residuals: dict[str, float]
    params_within_bounds: bool
    max_drift: float
    max_jump: float | None
    anomalies: list[str]

    def to_text(self) -> str:
        lines = [f"iterations: {self.iterations} (final {self.tail} averaged)",
                 f"calibrator reward: {self.rcal:.4f}",
                 "supertype rewards: " + ", ".join(f"s{g + 1}={r:.3f}" for g, r in enumerate(self.rewards)),
                 f"total market share: {self.total_share:.4f}"]
        for k, v in self.fits.items():
            lines.append(f"  {k}: value {v:.4f}, residual {self.residuals[k]:.4f}")
        lines.append(f"profile within bounds: {self.params_within_bounds}")
        lines.append(f"max per-iteration drift (unit box): {self.max_drift:.4f}")
        if self.max_jump is not None:
            lines.append(f"max proposal jump (unit box): {self.max_jump:.4f}")
        lines += [f"ANOMALY: {a}" for a in self.anomalies] or ["no anomalies"]
        return "\n".join(lines)


def report(out) -> RunSummary:
    out = Path(out)
    cfg = ExperimentConfig.load(out / "config.yaml")
    M = read_metrics(out / "metrics.csv")
    n = len(M["iteration"])
    tail = max(1, int(math.ceil(0.1 * n)))
    sl = slice(n - tail, n)
    G = len(cfg.supertypes)
    rewards = [float(np.mean(M[f"reward_s{g + 1}"][sl])) for g in range(G)]
    fits, residuals = {}, {}
    if cfg.targets is not None:
        flat = [t for c in cfg.targets.components for t in c.targets]
        for label, t in zip(target_labels(cfg.targets), flat):
            v = float(np.mean(M[f"fit_{label}"][sl]))
            fits[label], residuals[label] = v, t.loss_of(v)
    lo, hi = cfg.profile().bounds()
    inside = True
    for j, nm in enumerate(cfg.profile().vector_names()):
        inside &= bool(np.all(M[f"param_{nm}_min"] >= lo[j] - 1e-12) and np.all(M[f"param_{nm}_max"] <= hi[j] + 1e-12))
    max_jump = None
    if (out / "bo_history.csv").exists():
        with (out / "bo_history.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        max_jump = max((float(r["jump"]) for r in rows), default=0.0)
    anomalies = []
    if rewards[0] < 0:
        anomalies.append(f"supertype 1 reward converges to a negative value ({rewards[0]:.3f}); "
                         "merchants can always earn zero by not trading")
    for g in range(1, G):
        if rewards[g] < 0:
            anomalies.append(f"supertype {g + 1} reward converges to a negative value ({rewards[g]:.3f})")
    total_share = float(np.mean(M["total_share"][sl]))
    if np.all(M["total_share"][sl] == 0):
        anomalies.append("total market share is 0: merchants stopped trading")
    return RunSummary(n, tail, float(np.nanmean(M["rcal_mean"][sl])), rewards, total_share, fits, residuals,
                      inside, float(np.max(M["drift"])), max_jump, anomalies)
