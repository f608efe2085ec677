"""Iterative best-of-n, WIND and the regularised win-rate game on tabular preference problems."""

from .errors import NumericalError, ValidationError
from .exact import (
    BonMode,
    EquilibriumReport,
    best_response,
    bon_exact_operator,
    bon_monte_carlo,
    bon_paper_operator,
    c_beta,
    duality_gap,
    equilibrium_gap_bound,
    fixed_point_residual,
    ibon_step,
    iterative_bon,
    wind_exact_solve,
    wind_exact_step,
)
from .game import (
    Loss,
    PreferenceGame,
    SolverConfig,
    TabularPolicy,
    Trace,
    avg_l1,
    kl_policies,
    log_win_objective,
    payoff_vector,
    preference_from_rewards,
    win_rate,
    wr_objective,
)

__version__ = "0.1.0"
