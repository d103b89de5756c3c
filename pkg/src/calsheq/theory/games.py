"""Finite symmetric 2-player games: transitivity certificates, self-play, epsilon-Nash checks,
and the piecewise-potential construction on a grid."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

GAP_TOL = 1e-12


@dataclass(frozen=True)
class FiniteSymmetricGame:
    """``payoff[x, y]`` is what a player using strategy ``x`` gets against ``y``."""

    payoff: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        u = np.asarray(self.payoff, dtype=float)
        if u.ndim != 2 or u.shape[0] != u.shape[1] or u.shape[0] == 0:
            raise ValueError("payoff must be a non-empty square table")
        if not np.all(np.isfinite(u)):
            raise ValueError("payoff table must be finite")
        object.__setattr__(self, "payoff", u)
        if self.labels and len(self.labels) != u.shape[0]:
            raise ValueError("one label per strategy")

    @property
    def size(self) -> int:
        return self.payoff.shape[0]

    def u(self, x: int, y: int) -> float:
        return float(self.payoff[x, y])

    def deviation_gains(self) -> np.ndarray:
        """``gain[x, y] = u(y, x) - u(x, x)``: what switching from x to y earns against x."""
        u = self.payoff
        return u.T - np.diag(u)[:, None]

    def label(self, x: int) -> str:
        return self.labels[x] if self.labels else str(x)

    @classmethod
    def from_function(cls, strategies: Sequence, fn: Callable, labels=None) -> "FiniteSymmetricGame":
        table = [[fn(x, y) for y in strategies] for x in strategies]
        return cls(np.array(table, float), tuple(labels or (str(s) for s in strategies)))

    @classmethod
    def load(cls, path) -> "FiniteSymmetricGame":
        """YAML file with ``payoff: [[...], ...]`` and optional ``labels``."""
        spec = yaml.safe_load(Path(path).read_text())
        return cls(np.array(spec["payoff"], float), tuple(spec.get("labels", ())))


def max_deviation(game: FiniteSymmetricGame, x: int) -> float:
    """max_y u(y, x) - u(x, x); never negative since y = x is allowed."""
    return float(np.max(game.payoff[:, x] - game.payoff[x, x]))


def verify_epsilon_nash(game: FiniteSymmetricGame, x: int, eps: float) -> bool:
    return max_deviation(game, x) <= eps


# ---------------------------------------------------------------------------
# extended transitivity
# ---------------------------------------------------------------------------

@dataclass
class TransitivityCertificate:
    certified: bool
    eps_min: float
    T: np.ndarray | None = None         # skill level per strategy (longest improving path into it)
    delta: float = 1.0
    cycle: list[int] | None = None
    n_edges: int = 0

    def to_text(self, game: FiniteSymmetricGame | None = None) -> str:
        name = (lambda i: game.label(i)) if game is not None else str
        if self.certified:
            rows = ", ".join(f"{name(i)}:{int(t)}" for i, t in enumerate(self.T))
            return (f"certified at eps_min={self.eps_min:g}: {self.n_edges} improving edges, "
                    f"delta={self.delta:g}, T = {{{rows}}}")
        return (f"not certified at eps_min={self.eps_min:g}: improving cycle "
                + " -> ".join(name(i) for i in self.cycle))

    def to_csv(self, game: FiniteSymmetricGame | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["strategy", "T", "certified", "eps_min", "on_cycle"])
        n = len(self.T) if self.T is not None else (game.size if game else 0)
        on_cycle = set(self.cycle or [])
        for i in range(n):
            w.writerow([game.label(i) if game else i, "" if self.T is None else int(self.T[i]),
                        int(self.certified), self.eps_min, int(i in on_cycle)])
        return buf.getvalue()


def improving_edges(game: FiniteSymmetricGame, eps: float) -> list[tuple[int, int]]:
    gain = game.deviation_gains()
    xs, ys = np.nonzero(gain > eps + GAP_TOL)
    return list(zip(xs.tolist(), ys.tolist()))


def smallest_positive_gap(game: FiniteSymmetricGame) -> float:
    gain = game.deviation_gains()
    pos = gain[gain > GAP_TOL]
    return float(pos.min()) if pos.size else 0.0


def check_extended_transitivity(game: FiniteSymmetricGame, eps_min: float = 0.0) -> TransitivityCertificate:
    """Certificate for every eps >= eps_min, or an improving cycle.

    Edges run x -> y whenever y beats x at (x, x) by more than ``eps_min``.
    An acyclic deviation graph gives T(x) = length of the longest improving
    path ending at x, so every edge raises T by at least 1 (delta = 1).
    ``eps_min = 0`` takes every strictly profitable deviation into account,
    which decides the property on a finite game.
    """
    edges = improving_edges(game, eps_min)
    preds: dict[int, set[int]] = {y: set() for y in range(game.size)}
    for x, y in edges:
        preds[y].add(x)
    try:
        order = list(TopologicalSorter(preds).static_order())
    except CycleError as err:
        cycle = list(err.args[1])
        return TransitivityCertificate(False, eps_min, cycle=cycle, n_edges=len(edges))
    T = np.zeros(game.size, dtype=int)
    for y in order:
        if preds[y]:
            T[y] = max(T[x] for x in preds[y]) + 1
    return TransitivityCertificate(True, eps_min, T=T, delta=1.0, n_edges=len(edges))


def check_witness(game: FiniteSymmetricGame, T, delta: Callable[[float], float], eps: float) -> bool:
    """Does (T, delta_eps) satisfy: u(y,x) - u(x,x) > eps implies T(y) - T(x) > delta(eps)?"""
    T = np.asarray(T, float)
    d = delta(eps)
    return all(T[y] - T[x] > d for x, y in improving_edges(game, eps))


# ---------------------------------------------------------------------------
# self-play
# ---------------------------------------------------------------------------

class SelfPlayDiverged(RuntimeError):
    """Raised when self-play exceeds its iteration cap (a transitivity violation)."""


@dataclass
class SelfPlaySequence:
    generator: list[int]
    eps: float

    @property
    def size(self) -> int:
        """N, the number of improving steps; counting the alternating pair list instead gives 2N."""
        return len(self.generator) - 1

    @property
    def endpoint(self) -> int:
        return self.generator[-1]

    def pairs(self) -> list[tuple[int, int]]:
        z = self.generator
        out = []
        for n in range(len(z)):
            out.append((z[n], z[n]))
            if n + 1 < len(z):
                out.append((z[n + 1], z[n]))
        return out

    def is_valid(self, game: FiniteSymmetricGame) -> bool:
        p = self.pairs()
        return all(game.u(*p[2 * n + 1]) > game.u(*p[2 * n]) + self.eps for n in range(self.size))


def self_play_cap(game: FiniteSymmetricGame, eps: float) -> int:
    spread = float(game.payoff.max() - game.payoff.min())
    return int(game.size * spread / eps) + 1


def run_self_play(game: FiniteSymmetricGame, eps: float, start: int = 0, rule: str = "best",
                  cap: int | None = None) -> SelfPlaySequence:
    """Follow eps-improving deviations from (z, z) until none is left.

    ``rule='best'`` picks the largest gain (lowest index on ties); ``'first'``
    picks the lowest-index strategy that clears the threshold.
    """
    if eps <= 0:
        raise ValueError("self-play threshold must be positive")
    if rule not in ("best", "first"):
        raise ValueError(f"unknown deviation rule {rule!r}")
    cap = self_play_cap(game, eps) if cap is None else cap
    z = [int(start)]
    u = game.payoff
    while True:
        x = z[-1]
        gain = u[:, x] - u[x, x]
        ok = np.nonzero(gain > eps)[0]
        if ok.size == 0:
            return SelfPlaySequence(z, eps)
        if len(z) > cap:
            raise SelfPlayDiverged(f"self-play exceeded {cap} steps; last strategies {z[-5:]}")
        z.append(int(ok[np.argmax(gain[ok])]) if rule == "best" else int(ok[0]))


def epsilon_schedule_endpoints(game: FiniteSymmetricGame, eps_values: Sequence[float], start: int = 0,
                               rule: str = "best") -> list[tuple[float, int, float]]:
    """Run self-play for a decreasing list of thresholds, restarting each from the last endpoint.

    Returns ``(eps, endpoint, max deviation at endpoint)`` triples.
    """
    out, x = [], start
    for eps in eps_values:
        seq = run_self_play(game, eps, x, rule)
        x = seq.endpoint
        out.append((float(eps), x, max_deviation(game, x)))
    return out


# ---------------------------------------------------------------------------
# standard fixtures
# ---------------------------------------------------------------------------

def transitive_game(t) -> FiniteSymmetricGame:
    t = np.asarray(t, float)
    return FiniteSymmetricGame(t[:, None] - t[None, :])


def monotonic_game(t, sigma: Callable = np.tanh) -> FiniteSymmetricGame:
    t = np.asarray(t, float)
    return FiniteSymmetricGame(sigma(t[:, None] - t[None, :]))


def rock_paper_scissors() -> FiniteSymmetricGame:
    u = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]], float)
    return FiniteSymmetricGame(u, ("rock", "paper", "scissors"))


# ---------------------------------------------------------------------------
# piecewise potential games
# ---------------------------------------------------------------------------

@dataclass
class PiecewisePotentialGame:
    """u(x, y) = h(x + y) g(x - y) where g uses g1 above zero and g2 below."""

    h: Callable
    g1: Callable
    g2: Callable
    grid: np.ndarray = field(default_factory=lambda: np.linspace(0.0, 1.0, 21))

    def __post_init__(self):
        self.grid = np.asarray(self.grid, float)
        if not (np.isclose(self.g1(0.0), 1.0) and np.isclose(self.g2(0.0), 1.0)):
            raise ValueError("g1(0) and g2(0) must equal 1")

    def u(self, x, y):
        d = np.asarray(x) - np.asarray(y)
        g = np.where(d >= 0, self.g1(np.abs(d)), self.g2(np.abs(d)))
        return self.h(np.asarray(x) + np.asarray(y)) * g

    def P1(self, x, y):
        return self.h(np.asarray(x) + np.asarray(y)) * self.g1(np.abs(np.asarray(x) - np.asarray(y)))

    def P2(self, x, y):
        return self.h(np.asarray(x) + np.asarray(y)) * self.g2(np.abs(np.asarray(x) - np.asarray(y)))

    def T(self, x):
        return self.P1(x, x)

    def as_finite_game(self) -> FiniteSymmetricGame:
        X, Y = np.meshgrid(self.grid, self.grid, indexing="ij")
        return FiniteSymmetricGame(self.u(X, Y), tuple(f"{v:g}" for v in self.grid))


@dataclass
class PiecewiseReport:
    n_ordered_pairs: int
    identity_residual: float          # max |T(y)-T(x) - (deviation terms + piecewise term)|
    definition_residual: float        # max residual of the two one-sided potential equations
    diagonal_residual: float          # max |P1(x,x) - P2(x,x)|
    symmetry_residual: float          # max |P_j(x,y) - P_j(y,x)|
    max_piecewise_term: float         # max |P2(x,y) - P1(x,y)| over ordered pairs
    exact_potential_residual: float   # max |u(y,z)-u(x,z) - (P1(y,z)-P1(x,z))| over all triples

    def ok(self, tol: float = 1e-12) -> bool:
        return max(self.identity_residual, self.definition_residual, self.diagonal_residual,
                   self.symmetry_residual) <= tol


def game_order(game: PiecewisePotentialGame) -> np.ndarray:
    """``le[i, j]`` iff grid[i] <= grid[j] in the game's order:
    u(x,x) <= u(y,x) and u(x,y) <= u(y,y)."""
    X, Y = np.meshgrid(game.grid, game.grid, indexing="ij")
    return (game.u(X, X) <= game.u(Y, X)) & (game.u(X, Y) <= game.u(Y, Y))


def verify_piecewise_decomposition(game: PiecewisePotentialGame) -> PiecewiseReport:
    X, Y = np.meshgrid(game.grid, game.grid, indexing="ij")
    le = game_order(game)
    u, P1, P2, T = game.u, game.P1, game.P2, game.T
    lhs = T(Y) - T(X)
    dev1 = u(Y, X) - u(X, X)
    dev2 = u(Y, Y) - u(X, Y)
    piece = P2(X, Y) - P1(X, Y)
    ident = np.abs(lhs - (dev1 + dev2 + piece))[le]
    defn = np.maximum(np.abs(dev1 - (P1(Y, X) - P1(X, X))), np.abs(dev2 - (P2(Y, Y) - P2(X, Y))))[le]
    g = game.grid
    diag = float(np.max(np.abs(P1(g, g) - P2(g, g))))
    sym = float(max(np.max(np.abs(P1(X, Y) - P1(Y, X))), np.max(np.abs(P2(X, Y) - P2(Y, X)))))
    # exact potential check over all (x, y, z) with P1 as the candidate potential
    Xs, Ys, Zs = np.meshgrid(g, g, g, indexing="ij")
    exact = float(np.max(np.abs(u(Ys, Zs) - u(Xs, Zs) - (P1(Ys, Zs) - P1(Xs, Zs)))))
    return PiecewiseReport(int(le.sum()), float(ident.max(initial=0.0)), float(defn.max(initial=0.0)),
                           diag, sym, float(np.abs(piece[le]).max(initial=0.0)), exact)


def reference_piecewise_game(points: int = 21) -> PiecewisePotentialGame:
    return PiecewisePotentialGame(h=lambda z: z, g1=lambda z: 1 - z / 2, g2=lambda z: 1 - z / 4,
                                  grid=np.linspace(0.0, 1.0, points))
