"""Batteries of brute-force checks, each returning a small result object with a verdict.

``run_all`` writes a text summary and one CSV row per check so the ``theory``
CLI verb leaves behind a machine-readable certification record.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fixtures import action_symmetric, three_agent_two_supertypes, two_agent_discounted, two_agent_one_step
from .games import (FiniteSymmetricGame, check_extended_transitivity, monotonic_game, reference_piecewise_game,
                    rock_paper_scissors, run_self_play, transitive_game, verify_epsilon_nash,
                    verify_piecewise_decomposition)
from .pomg import (exact_value, gradient_self_play, monte_carlo_shared_gradient, random_quadruples,
                   shared_gradient_exact, verify_lemma1_bound, verify_proposition1)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    values: dict = field(default_factory=dict)


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def random_certified_game(rng: np.random.Generator, size: int) -> FiniteSymmetricGame:
    """Alternates two generators of extended-transitive games.

    Monotone-skill games ``sigma(t(x) - t(y)) + c(y)`` with a random increasing
    sigma; and plain random tables kept only when their deviation graph is acyclic.
    """
    if rng.random() < 0.5:
        t = rng.normal(size=size)
        knots = np.sort(rng.normal(scale=3.0, size=8))
        vals = np.cumsum(rng.exponential(size=8))
        c = rng.normal(size=size)
        table = np.interp(t[:, None] - t[None, :], knots, vals) + c[None, :]
        return FiniteSymmetricGame(table)
    while True:
        game = FiniteSymmetricGame(rng.normal(size=(size, size)))
        if check_extended_transitivity(game).certified:
            return game


@_timed
def transitivity_suite(n_games: int = 100, seed: int = 0) -> CheckResult:
    failures = []
    t = np.array([0.3, -1.2, 2.0, 0.7, 1.1])
    cert = check_extended_transitivity(transitive_game(t))
    if not (cert.certified and list(np.argsort(cert.T, kind="stable")) == list(np.argsort(t, kind="stable"))):
        failures.append("u = t(x) - t(y) not certified in the order of t")
    if not check_extended_transitivity(monotonic_game(t)).certified:
        failures.append("monotone game not certified")
    rps = check_extended_transitivity(rock_paper_scissors())
    if rps.certified or rps.cycle is None or len(set(rps.cycle)) != 3:
        failures.append("rock-paper-scissors did not yield a 3-cycle")

    rng = np.random.default_rng(seed)
    longest = 0
    for k in range(n_games):
        game = random_certified_game(rng, int(rng.integers(3, 9)))
        cert = check_extended_transitivity(game)
        spread = float(game.payoff.max() - game.payoff.min())
        eps = float(rng.uniform(0.0, 0.5)) * spread + 1e-9
        start = int(rng.integers(game.size))
        seq = run_self_play(game, eps, start, rule="best" if k % 2 == 0 else "first")
        bound = (cert.T.max() - cert.T.min()) / cert.delta
        longest = max(longest, seq.size)
        if not cert.certified:
            failures.append(f"game {k}: generator produced an uncertified game")
        elif seq.size > bound:
            failures.append(f"game {k}: sequence of {seq.size} steps exceeds bound {bound}")
        if not seq.is_valid(game):
            failures.append(f"game {k}: sequence is not an eps-improving self-play sequence")
        if not verify_epsilon_nash(game, seq.endpoint, eps):
            failures.append(f"game {k}: endpoint {seq.endpoint} is not eps-Nash")
    detail = (f"{n_games} random certified games, longest sequence {longest} steps, "
              f"RPS cycle {rps.cycle}; " + ("no failures" if not failures else "; ".join(failures[:5])))
    return CheckResult("transitivity_and_self_play", not failures, detail,
                       values={"failures": len(failures), "longest": longest})


def proposition1_thetas(seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=(2, 2, 2))


@_timed
def proposition1_suite(mc_episodes: int = 1_000_000, tol: float = 1e-6, seed: int = 0) -> CheckResult:
    theta = proposition1_thetas(seed)
    fixtures = {"two_agent_one_step": two_agent_one_step(), "two_agent_discounted": two_agent_discounted(),
                "three_agent_two_supertypes": three_agent_two_supertypes()}
    devs, zmax, problems = {}, {}, []
    for name, pomg in fixtures.items():
        rep = verify_proposition1(pomg, theta)
        devs[name] = rep.max_deviation
        if rep.max_deviation >= tol:
            problems.append(f"{name}: exact vs finite difference {rep.max_deviation:.2e}")
        if mc_episodes:
            mc = monte_carlo_shared_gradient(pomg, theta, mc_episodes, seed=seed)
            zmax[name] = float(np.max(np.abs(mc.z_scores(rep.exact))))
            if not mc.within(rep.exact, 3.0):
                problems.append(f"{name}: Monte-Carlo gradient outside 3 sigma (max |z| {zmax[name]:.2f})")
    sym = action_symmetric()
    g0 = float(np.abs(shared_gradient_exact(sym, np.zeros((2, 2, 2)))).max())
    if g0 > 1e-12:
        problems.append(f"action-symmetric fixture: uniform-policy gradient {g0:.2e}")
    detail = ", ".join(f"{k}: dev {v:.1e}" + (f", max|z| {zmax[k]:.2f}" if k in zmax else "")
                       for k, v in devs.items())
    return CheckResult("proposition1", not problems, detail + ("; " + "; ".join(problems) if problems else ""),
                       values={"max_deviation": max(devs.values()), "max_abs_z": max(zmax.values(), default=0.0)})


@_timed
def lemma1_suite(count: int = 1000, seed: int = 1) -> CheckResult:
    pomg = two_agent_discounted()
    rep = verify_lemma1_bound(pomg, random_quadruples(pomg, np.random.default_rng(seed), count))
    return CheckResult("lemma1_bound", rep.ok,
                       f"{rep.trials} agent-quadruple checks, {rep.violations} violations, "
                       f"tightest ratio |dV|/bound = {rep.worst_ratio:.3f}",
                       values={"violations": rep.violations, "worst_ratio": rep.worst_ratio})


@_timed
def piecewise_suite(points: int = 21, tol: float = 1e-12) -> CheckResult:
    rep = verify_piecewise_decomposition(reference_piecewise_game(points))
    return CheckResult("piecewise_potential", rep.ok(tol),
                       f"{rep.n_ordered_pairs} ordered pairs, identity residual {rep.identity_residual:.1e}, "
                       f"largest piecewise term {rep.max_piecewise_term:.3f}",
                       values={"residual": rep.identity_residual, "pairs": rep.n_ordered_pairs})


@_timed
def bridge_suite(eps: float = 0.01) -> CheckResult:
    res = gradient_self_play(two_agent_discounted(), eps)
    return CheckResult("gradient_self_play", res.endpoint_is_eps_nash,
                       f"{len(res.visited) - 1} improving steps ({res.gradient_steps} gradient, "
                       f"{res.grid_steps} grid), endpoint deviation {res.max_deviation:.2e} at eps={eps}",
                       values={"steps": len(res.visited) - 1, "first_try": res.first_try_steps})


@_timed
def value_oracle_suite(seed: int = 0) -> CheckResult:
    """Constant-reward fixture against the geometric series."""
    from .fixtures import constant_reward
    pomg = constant_reward(1.5, 0.5)
    pi = np.full((2, 2, 2), 0.5)
    v = exact_value(pomg, pi, pi, 0)
    return CheckResult("value_oracle", abs(v - 3.0) < 1e-12, f"constant reward 1.5 at gamma 0.5 -> {v!r}")


def run_all(out=None, mc_episodes: int = 1_000_000) -> list[CheckResult]:
    results = [transitivity_suite(), piecewise_suite(), value_oracle_suite(), proposition1_suite(mc_episodes),
               lemma1_suite(), bridge_suite()]
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        lines = [f"[{'PASS' if r.passed else 'FAIL'}] {r.name} ({r.seconds:.1f}s): {r.detail}" for r in results]
        (out / "theory_report.txt").write_text("\n".join(lines) + "\n")
        with (out / "theory_report.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["check", "passed", "seconds", "detail"])
            for r in results:
                w.writerow([r.name, int(r.passed), f"{r.seconds:.3f}", r.detail])
    return results
