"""Bayesian-optimisation baseline: a GP surrogate proposes a fixed profile every M training iterations."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, stats
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .calibrator import CalibrationTargetSet, calibrator_reward, episode_metrics
from .core import Environment, SupertypeProfile
from .policy import PPOTrainer
from .rng import stream
from .training import group_mean_returns, shared_step

log = logging.getLogger(__name__)

SQRT5 = math.sqrt(5.0)
JITTERS = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)


class SurrogateError(RuntimeError):
    """The kernel matrix could not be factorised even with jitter."""


def matern52(X1: np.ndarray, X2: np.ndarray, lengthscale: float = 1.0, variance: float = 1.0) -> np.ndarray:
    d = np.sqrt(np.maximum(((X1[:, None, :] - X2[None, :, :]) ** 2).sum(-1), 0.0)) / lengthscale
    return variance * (1.0 + SQRT5 * d + 5.0 / 3.0 * d * d) * np.exp(-SQRT5 * d)


@dataclass
class GPHyper:
    lengthscale: float = 1.0
    variance: float = 1.0
    noise: float = 1e-4

    def as_log(self) -> np.ndarray:
        return np.log([self.lengthscale, self.variance, self.noise])

    @classmethod
    def from_log(cls, v) -> "GPHyper":
        return cls(*np.exp(np.asarray(v, float)).tolist())


class GPSurrogate:
    """Zero-mean GP on standardised targets over the unit box."""

    def __init__(self, X, y, hyper: GPHyper | None = None, standardize: bool = True):
        X = np.atleast_2d(np.asarray(X, float))
        y = np.asarray(y, float).ravel()
        if len(X) == 0 or len(X) != len(y):
            raise ValueError("need at least one observation with matching inputs")
        self.X, self.y_raw = X, y
        self.hyper = hyper or GPHyper()
        self.y_mean = float(y.mean()) if standardize else 0.0
        sd = float(y.std()) if standardize and len(y) > 1 else 0.0
        self.y_scale = sd if sd > 1e-12 else 1.0
        self.y = (y - self.y_mean) / self.y_scale
        self._factor()

    def _factor(self):
        K = matern52(self.X, self.X, self.hyper.lengthscale, self.hyper.variance)
        K[np.diag_indices_from(K)] += self.hyper.noise
        for jitter in JITTERS:
            try:
                self.L = cholesky(K + jitter * np.eye(len(K)), lower=True)
                self.jitter = jitter
                break
            except np.linalg.LinAlgError:
                continue
        else:
            raise SurrogateError("kernel matrix not positive definite after jitter escalation")
        self.alpha = cho_solve((self.L, True), self.y)

    def predict(self, Xs) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance in the original target units."""
        Xs = np.atleast_2d(np.asarray(Xs, float))
        Ks = matern52(Xs, self.X, self.hyper.lengthscale, self.hyper.variance)
        mean = Ks @ self.alpha
        v = solve_triangular(self.L, Ks.T, lower=True)
        var = np.maximum(self.hyper.variance - (v * v).sum(0), 0.0)
        return self.y_mean + self.y_scale * mean, var * self.y_scale ** 2

    def log_marginal_likelihood(self, log_hyper=None, grad: bool = False):
        """Log evidence of the standardised targets, optionally with its gradient
        in (log lengthscale, log variance, log noise)."""
        h = self.hyper if log_hyper is None else GPHyper.from_log(log_hyper)
        n = len(self.y)
        D = np.sqrt(((self.X[:, None, :] - self.X[None, :, :]) ** 2).sum(-1)) / h.lengthscale
        E = np.exp(-SQRT5 * D)
        Ksig = h.variance * (1.0 + SQRT5 * D + 5.0 / 3.0 * D * D) * E
        K = Ksig + h.noise * np.eye(n)
        L = cholesky(K, lower=True)
        alpha = cho_solve((L, True), self.y)
        lml = -0.5 * self.y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi)
        if not grad:
            return lml
        inner = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(n))
        dK = (h.variance * 5.0 / 3.0 * D * D * (1.0 + SQRT5 * D) * E,   # d/d log lengthscale
              Ksig,                                                     # d/d log variance
              h.noise * np.eye(n))                                      # d/d log noise
        return lml, np.array([0.5 * np.sum(inner * d) for d in dK])

    def fit_hyperparameters(self, bounds=((1e-2, 1e2), (1e-2, 1e2), (1e-8, 1e-1))) -> GPHyper:
        x0 = self.hyper.as_log()
        res = optimize.minimize(lambda v: tuple(-t for t in self.log_marginal_likelihood(v, grad=True)),
                                x0, jac=True, method="L-BFGS-B", bounds=[tuple(np.log(b)) for b in bounds])
        if res.success or res.fun < -self.log_marginal_likelihood(x0):
            self.hyper = GPHyper.from_log(res.x)
            self._factor()
        return self.hyper


def gp_fit(X, y, hyper: GPHyper | None = None, fit: bool = False) -> GPSurrogate:
    gp = GPSurrogate(X, y, hyper)
    if fit:
        gp.fit_hyperparameters()
    return gp


# ---------------------------------------------------------------------------
# acquisition
# ---------------------------------------------------------------------------

@dataclass
class AcquisitionConfig:
    kind: str = "ucb"              # ucb | ei
    kappa: float = 0.5
    xi: float = 0.0                # EI margin
    period: int = 100              # M, training iterations between proposals
    restarts: int = 64
    refine_steps: int = 100
    initial_step: float = 0.1
    window: int = 10               # iterations averaged into one observation
    fit_hyperparameters: bool = False
    hyper: GPHyper = field(default_factory=GPHyper)

    def __post_init__(self):
        if self.kind not in ("ucb", "ei"):
            raise ValueError(f"unknown acquisition {self.kind!r}")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.period < 1:
            raise ValueError("proposal period must be at least 1")
        if isinstance(self.hyper, dict):
            self.hyper = GPHyper(**self.hyper)


def acquisition(gp: GPSurrogate, X, config: AcquisitionConfig) -> np.ndarray:
    mean, var = gp.predict(X)
    sd = np.sqrt(var)
    if config.kind == "ucb":
        return mean + config.kappa * sd
    best = float(gp.y_raw.max())
    imp = mean - best - config.xi
    z = np.where(sd > 0, imp / np.where(sd > 0, sd, 1.0), 0.0)
    return np.where(sd > 0, imp * stats.norm.cdf(z) + sd * stats.norm.pdf(z), np.maximum(imp, 0.0))


@dataclass
class Proposal:
    x: np.ndarray          # unit-box point
    value: float           # acquisition value (nan on a cold start)


def propose(gp: GPSurrogate | None, config: AcquisitionConfig, dim: int, rng: np.random.Generator) -> Proposal:
    """Maximise the acquisition over [0, 1]^dim by random restarts and coordinate refinement.

    Each restart repeatedly tries +/- step along every coordinate and keeps the
    best improvement; the step halves whenever nothing improves.
    """
    if gp is None:
        return Proposal(rng.random(dim), float("nan"))
    starts = rng.random((config.restarts, dim))
    if len(gp.X):
        starts = np.vstack([starts, gp.X[np.argmax(gp.y_raw)][None]])
    x = starts
    f = acquisition(gp, x, config)
    step = np.full(len(x), config.initial_step)
    eye = np.eye(dim)
    for _ in range(config.refine_steps):
        moves = np.concatenate([eye, -eye])                                   # [2d, d]
        cand = np.clip(x[:, None, :] + step[:, None, None] * moves[None], 0.0, 1.0)
        fc = acquisition(gp, cand.reshape(-1, dim), config).reshape(len(x), -1)
        j = np.argmax(fc, axis=1)
        better = fc[np.arange(len(x)), j] > f
        x = np.where(better[:, None], cand[np.arange(len(x)), j], x)
        f = np.where(better, fc[np.arange(len(x)), j], f)
        step = np.where(better, step, step / 2)
    k = int(np.argmax(f))
    return Proposal(x[k], float(f[k]))


# ---------------------------------------------------------------------------
# calibration loop
# ---------------------------------------------------------------------------

@dataclass
class BOObservation:
    index: int
    iteration: int
    profile: np.ndarray
    rcal: float
    acquisition: float          # value of the proposal that installed this profile
    jump: float                 # max |change| (unit box) when this profile was installed


@dataclass
class BOIterationRecord:
    iteration: int
    rcal: np.ndarray
    group_returns: np.ndarray
    profile: np.ndarray
    shared_stats: dict
    metrics: list = field(default_factory=list)


class BOCalibration:
    """Train the shared policy on one fixed profile, swapping it every ``period`` iterations."""

    def __init__(self, env: Environment, profile0: SupertypeProfile, shared: PPOTrainer,
                 targets: CalibrationTargetSet, config: AcquisitionConfig, episodes: int, seed: int = 0,
                 lr_schedule=None, workers: int = 1):
        self.env, self.shared, self.targets, self.config = env, shared, targets, config
        self.template = profile0
        self.B, self.seed, self.workers = episodes, seed, workers
        self.lr_schedule = lr_schedule
        self.lo, self.hi = profile0.bounds()
        self.current = profile0.vector()
        self.current_acq = float("nan")
        self.current_jump = 0.0
        self.observations: list[BOObservation] = []
        self.window: list[float] = []
        self.m = 0

    def to_unit(self, v) -> np.ndarray:
        return (np.asarray(v, float) - self.lo) / np.where(self.hi > self.lo, self.hi - self.lo, 1.0)

    def from_unit(self, u) -> np.ndarray:
        return np.clip(self.lo + np.asarray(u, float) * (self.hi - self.lo), self.lo, self.hi)

    def iteration(self, final: bool = False) -> BOIterationRecord:
        self.m += 1
        m = self.m
        profile = self.template.with_vector(self.current)
        lr = self.lr_schedule(m) if self.lr_schedule is not None else None
        out = shared_step(self.env, self.shared, [profile] * self.B, self.seed, m, lr=lr, workers=self.workers)
        metrics = [episode_metrics(e.info, e.profile) for e in out.episodes]
        rcal = np.array([calibrator_reward(self.targets, mt)[0] for mt in metrics])
        self.window = (self.window + [float(rcal.mean())])[-self.config.window:]
        rec = BOIterationRecord(m, rcal, group_mean_returns(out.episodes, len(self.template.groups)),
                                self.current.copy(), out.stats, metrics)
        if m % self.config.period == 0 or final:
            self._observe_and_propose(propose_next=not final)
        return rec

    def _observe_and_propose(self, propose_next: bool = True) -> None:
        obs = BOObservation(len(self.observations), self.m, self.current.copy(), float(np.mean(self.window)),
                            self.current_acq, self.current_jump)
        self.observations.append(obs)
        if not propose_next:
            return
        try:
            X = np.stack([self.to_unit(o.profile) for o in self.observations])
            y = np.array([o.rcal for o in self.observations])
            gp = gp_fit(X, y, self.config.hyper, fit=self.config.fit_hyperparameters)
            rng = stream(self.seed, "bo", len(self.observations))
            prop = propose(gp, self.config, X.shape[1], rng)
        except (SurrogateError, np.linalg.LinAlgError, ValueError) as err:
            log.warning("surrogate failed at iteration %d (%s); keeping the current profile", self.m, err)
            return
        new = self.from_unit(prop.x)
        self.current_jump = float(np.max(np.abs(self.to_unit(new) - self.to_unit(self.current))))
        self.current, self.current_acq = new, prop.value

    def run(self, iterations: int, callback=None) -> list[BOIterationRecord]:
        records = []
        for k in range(iterations):
            final = k == iterations - 1 and (self.m + 1) % self.config.period != 0
            rec = self.iteration(final=final)
            records.append(rec)
            if callback is not None:
                callback(rec)
        return records

    def state_dict(self) -> dict:
        return {"m": self.m, "current": self.current.copy(), "current_acq": self.current_acq,
                "current_jump": self.current_jump, "window": list(self.window),
                "observations": [vars(o).copy() for o in self.observations], "shared": self.shared.state_dict()}

    def load_state_dict(self, state: dict) -> None:
        self.m = state["m"]
        self.current = np.asarray(state["current"], float)
        self.current_acq, self.current_jump = state["current_acq"], state["current_jump"]
        self.window = list(state["window"])
        self.observations = [BOObservation(**o) for o in state["observations"]]
        self.shared.load_state_dict(state["shared"])

    @property
    def max_jump(self) -> float:
        return max((o.jump for o in self.observations), default=0.0)

    def write_history(self, path, names=None) -> Path:
        names = names or self.template.vector_names()
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["proposal", "iteration", *names, "rcal", "acquisition", "jump"])
            for o in self.observations:
                w.writerow([o.index, o.iteration, *o.profile.tolist(), o.rcal, o.acquisition, o.jump])
        return path


def bo_calibration_loop(env, trainer, profile0, targets, config: AcquisitionConfig, iterations: int,
                        episodes: int, seed: int = 0, lr_schedule=None, callback=None):
    loop = BOCalibration(env, profile0, trainer, targets, config, episodes, seed, lr_schedule)
    records = loop.run(iterations, callback)
    return loop, records
