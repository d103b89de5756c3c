"""Brute-force checks of the shared-equilibrium machinery on finite games and tabular Markov games.

Nothing here imports the training code, so agreement between the two is a real cross-check.
"""

from .games import (FiniteSymmetricGame, PiecewisePotentialGame, SelfPlayDiverged, SelfPlaySequence,
                    TransitivityCertificate, check_extended_transitivity, check_witness,
                    epsilon_schedule_endpoints, max_deviation, monotonic_game, reference_piecewise_game,
                    rock_paper_scissors, run_self_play, transitive_game, verify_epsilon_nash,
                    verify_piecewise_decomposition)
from .pomg import (TabularPOMG, exact_value, gradient_self_play, monte_carlo_shared_gradient,
                   monte_carlo_value, random_pomg, rho_tv, rho_tv_pair, shared_gradient_exact, softmax_policy,
                   v_hat, verify_lemma1_bound, verify_proposition1)

__all__ = [name for name in dir() if not name.startswith("_")]
