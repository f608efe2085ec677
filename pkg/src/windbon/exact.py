"""Distribution-level dynamics: best-of-n operators, iterative BoN, exact WIND.

Everything here operates on whole tabular policies.  Updates are carried out
on log-probabilities and renormalised with log-sum-exp.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ValidationError
from .game import (
    PreferenceGame,
    SolverConfig,
    TabularPolicy,
    Trace,
    _check_shape,
    avg_l1,
    kl_policies,
    log_cumulative,
    log_geq_mass,
    log_normalize,
    payoff_vector,
)

__all__ = [
    "BonMode",
    "EquilibriumReport",
    "bon_paper_operator",
    "bon_exact_operator",
    "bon_monte_carlo",
    "ibon_step",
    "iterative_bon",
    "wind_exact_step",
    "wind_exact_solve",
    "best_response",
    "argmax_best_response",
    "fixed_point_residual",
    "duality_gap",
    "c_beta",
    "equilibrium_gap_bound",
]


class BonMode(str, enum.Enum):
    PAPER = "paper"
    ORDER = "order"
    MC = "mc"


def _normalize(logits: np.ndarray) -> TabularPolicy:
    return TabularPolicy(log_normalize(logits), check=False)


def bon_paper_operator(pi: TabularPolicy, game: PreferenceGame, n: int) -> TabularPolicy:
    """Best-of-n in the closed form ``n pi(y) (Pbar_x(y,:) pi_x)^(n-1)``, renormalised.

    The raw expression counts self-ties as wins and so sums to more than one;
    only ratios between responses matter and those are kept.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    if n == 1:
        return pi
    lg = log_geq_mass(game, pi)
    with np.errstate(invalid="ignore", over="ignore"):
        out = np.where(pi.logp == -np.inf, -np.inf, pi.logp + (n - 1) * lg)
    return _normalize(out)


def _group_logmass(game: PreferenceGame, ls: np.ndarray) -> np.ndarray:
    """Log-mass of each sorted entry's tie group (entry itself when rewards are distinct)."""
    out = ls.copy()
    for x in np.flatnonzero(game.has_ties):
        starts = game._group_start[x]
        ends = game._group_end[x]
        for s in np.unique(starts):
            e = ends[s]
            if e > s:
                out[x, s:e + 1] = logsumexp(ls[x, s:e + 1])
    return out


def bon_exact_operator(pi: TabularPolicy, game: PreferenceGame, n: int) -> TabularPolicy:
    """Law of the highest-reward response among ``n`` i.i.d. draws, ties broken uniformly.

    For reward levels with cumulative mass ``F_k``, the winning level is ``k``
    with probability ``F_k^n - F_{k-1}^n``; within the level the winner is
    distributed proportionally to ``pi``.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    if n == 1:
        return pi
    ls = game._to_sorted(pi.logp)
    logm = _group_logmass(game, ls)
    log_below = game._before_group(log_cumulative(ls), -np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_top = np.logaddexp(log_below, logm)
        gap = np.logaddexp(0.0, logm - log_below)  # log F_k - log F_{k-1}
        log_level = n * log_top + np.log(-np.expm1(-n * gap))
        out = np.where(ls == -np.inf, -np.inf, ls - logm + log_level)
    return _normalize(game._from_sorted(out))


def bon_monte_carlo(pi: TabularPolicy, game: PreferenceGame, n: int, samples: int,
                    seed) -> TabularPolicy:
    """Empirical best-of-n frequencies from ``samples`` simulated selections per prompt."""
    if samples < 1:
        raise ValidationError("samples must be >= 1")
    if n < 1:
        raise ValidationError("n must be >= 1")
    _check_shape(game, pi)
    rng = np.random.default_rng(seed)
    probs = pi.probs
    counts = np.zeros(game.shape)
    for x in range(game.num_prompts):
        cdf = np.cumsum(probs[x])
        u = rng.random((samples, n))
        draws = np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), game.num_responses - 1)
        r = game.rewards[x][draws]
        top = r == r.max(axis=1, keepdims=True)
        tiebreak = np.where(top, rng.random((samples, n)), -1.0)
        chosen = draws[np.arange(samples), tiebreak.argmax(axis=1)]
        counts[x] = np.bincount(chosen, minlength=game.num_responses)
    return TabularPolicy.from_probs(counts / samples)


def _bon(pi, game, n, mode, mc_samples, seed):
    mode = BonMode(mode)
    if mode is BonMode.PAPER:
        return bon_paper_operator(pi, game, n)
    if mode is BonMode.ORDER:
        return bon_exact_operator(pi, game, n)
    return bon_monte_carlo(pi, game, n, mc_samples, seed)


def ibon_step(pi: TabularPolicy, pi_ref: TabularPolicy, game: PreferenceGame, cfg: SolverConfig,
              mixing: bool | None = None, mode: BonMode = BonMode.PAPER, mc_samples: int = 10_000,
              seed=None) -> TabularPolicy:
    """One iterative best-of-n update (see :func:`iterative_bon`)."""
    if mixing is None:
        mixing = cfg.mixing
    bon = _bon(pi, game, cfg.n, mode, mc_samples, seed)
    if not mixing:
        return bon
    a1, a2 = cfg.alpha1, cfg.alpha2
    a_ref = 1.0 - a1 - a2
    logits = a1 * bon.logp
    if a2 > 0:
        logits = logits + a2 * pi.logp
    if a_ref > 0:
        logits = logits + a_ref * pi_ref.logp
    return _normalize(logits)


def iterative_bon(pi_ref: TabularPolicy, game: PreferenceGame, cfg: SolverConfig,
                  mixing: bool | None = None, mode: BonMode = BonMode.PAPER,
                  target: TabularPolicy | None = None, *, init: TabularPolicy | None = None,
                  tol: float | None = None, mc_samples: int = 10_000) -> tuple[TabularPolicy, Trace]:
    """Repeated best-of-n, optionally mixed geometrically with the iterate and the reference.

    With mixing: ``pi_{t+1} ∝ (pi_t^(n))^a1 pi_t^a2 pi_ref^(1-a1-a2)``, applied as
    a convex combination of log-probabilities.  Without: ``pi_{t+1} = pi_t^(n)``.
    ``init`` overrides the starting point (defaults to ``pi_ref``).  ``tol``
    stops early once successive iterates differ by at most ``tol`` in
    average l1.

    Trace metrics are ``d_l1`` and ``kl_target`` when ``target`` is given,
    otherwise ``step_l1``.
    """
    _check_shape(game, pi_ref)
    if mixing is None:
        mixing = cfg.mixing
    if mixing and cfg.alpha1 + cfg.alpha2 < 1:
        pi_ref.require_interior("pi_ref")
    pi = pi_ref if init is None else init
    _check_shape(game, pi)
    rho = game.rho
    trace = Trace(metadata={"algorithm": "iterative_bon", "mixing": bool(mixing),
                            "mode": BonMode(mode).value, **cfg.as_dict()})
    if target is not None:
        trace.append(0, d_l1=avg_l1(target, pi, rho), kl_target=kl_policies(target, pi, rho))
    for t in range(cfg.T):
        new = ibon_step(pi, pi_ref, game, cfg, mixing, mode, mc_samples, [cfg.seed, t])
        step = avg_l1(new, pi, rho)
        pi = new
        if target is not None:
            trace.append(t + 1, d_l1=avg_l1(target, pi, rho), kl_target=kl_policies(target, pi, rho))
        else:
            trace.append(t + 1, step_l1=step)
        if tol is not None and step <= tol:
            break
    return pi, trace


def wind_exact_step(pi: TabularPolicy, game: PreferenceGame, pi_ref: TabularPolicy,
                    beta: float, eta: float) -> TabularPolicy:
    """One magnetic mirror descent step on the regularised win-rate game.

    ``pi' ∝ pi^(1/(1+beta eta)) pi_ref^(beta eta/(1+beta eta)) exp(eta/(1+beta eta) P_x pi_x)``.
    ``beta = 0`` gives the unregularised multiplicative-weights self-play update.
    """
    if beta < 0 or eta <= 0:
        raise ValidationError("need beta >= 0 and eta > 0")
    pi.require_interior("pi")
    payoff = payoff_vector(game, pi)
    if beta == 0:
        return _normalize(pi.logp + eta * payoff)
    pi_ref.require_interior("pi_ref")
    be = beta * eta
    return _normalize((pi.logp + be * pi_ref.logp + eta * payoff) / (1.0 + be))


def best_response(pi: TabularPolicy, game: PreferenceGame, pi_ref: TabularPolicy,
                  beta: float) -> TabularPolicy:
    """Maximiser of ``pi'^T P_x pi_x - beta KL(pi' || pi_ref)``: ``pi_ref * exp(P_x pi_x / beta)``."""
    if beta == 0:
        raise ValidationError("best_response needs beta > 0; use argmax_best_response for beta = 0")
    if beta < 0:
        raise ValidationError("beta must be positive")
    pi_ref.require_interior("pi_ref")
    return _normalize(pi_ref.logp + payoff_vector(game, pi) / beta)


def argmax_best_response(pi: TabularPolicy, game: PreferenceGame) -> TabularPolicy:
    """Unregularised best response, uniform over the maximisers of ``P_x pi_x``."""
    payoff = payoff_vector(game, pi)
    top = payoff == payoff.max(axis=1, keepdims=True)
    return TabularPolicy.from_probs(top / top.sum(axis=1, keepdims=True))


def fixed_point_residual(pi: TabularPolicy, game: PreferenceGame, pi_ref: TabularPolicy,
                         beta: float) -> float:
    """Average l1 distance between ``pi`` and its regularised best response."""
    return avg_l1(pi, best_response(pi, game, pi_ref, beta), game.rho)


def duality_gap(pi: TabularPolicy, game: PreferenceGame, pi_ref: TabularPolicy,
                beta: float) -> float:
    """Best-response payoff minus the self-play payoff ``1/2 - beta KL(pi || pi_ref)``.

    Nonnegative, and zero exactly at the regularised equilibrium.  For
    ``beta = 0`` this is ``max_pi' P(pi' > pi) - 1/2``.
    """
    rho = game.rho
    payoff = payoff_vector(game, pi)
    if beta == 0:
        return float(np.dot(rho, payoff.max(axis=1))) - 0.5
    br = best_response(pi, game, pi_ref, beta)
    br_value = float(np.dot(rho, (br.probs * payoff).sum(axis=1))) - beta * kl_policies(br, pi_ref, rho)
    own = 0.5 - beta * kl_policies(pi, pi_ref, rho)
    return br_value - own


@dataclass
class EquilibriumReport:
    policy: TabularPolicy
    residual: float
    duality_gap: float
    iters_used: int
    converged: bool
    trace: Trace = field(default_factory=Trace)
    iterates: list = field(default_factory=list)


def wind_exact_solve(game: PreferenceGame, pi_ref: TabularPolicy, pi0: TabularPolicy | None = None,
                     beta: float = 0.1, eta: float = 0.1, T: int = 10_000, tol: float = 1e-10,
                     star: TabularPolicy | None = None,
                     keep_iterates: bool = False) -> EquilibriumReport:
    """Iterate :func:`wind_exact_step` until the fixed-point residual is at most ``tol``.

    The trace records ``residual`` each iteration, and ``kl_to_star`` (the KL
    from ``star`` to the iterate) when ``star`` is supplied.  With
    ``keep_iterates`` every visited policy is returned in ``iterates``.
    """
    if beta <= 0:
        raise ValidationError("wind_exact_solve needs beta > 0")
    if eta <= 0:
        raise ValidationError("eta must be positive")
    pi_ref.require_interior("pi_ref")
    pi = pi_ref if pi0 is None else pi0
    pi.require_interior("pi0")
    _check_shape(game, pi, pi_ref)
    rho = game.rho
    be = beta * eta
    trace = Trace(metadata={"algorithm": "wind_exact", "beta": beta, "eta": eta, "T": T, "tol": tol})
    iterates = []
    t = 0
    while True:
        # One payoff evaluation serves both the residual and the next step.
        payoff = payoff_vector(game, pi)
        br = _normalize(pi_ref.logp + payoff / beta)
        res = avg_l1(pi, br, rho)
        if keep_iterates:
            iterates.append(pi)
        if star is None:
            trace.append(t, residual=res)
        else:
            trace.append(t, residual=res, kl_to_star=kl_policies(star, pi, rho))
        if res <= tol or t >= T:
            break
        pi = _normalize((pi.logp + be * pi_ref.logp + eta * payoff) / (1.0 + be))
        t += 1
    return EquilibriumReport(policy=pi, residual=res, duality_gap=duality_gap(pi, game, pi_ref, beta),
                             iters_used=t, converged=res <= tol, trace=trace, iterates=iterates)


def c_beta(game: PreferenceGame, pi_ref: TabularPolicy) -> float:
    """Threshold on ``beta`` below which the exponential closeness bound applies.

    Minimum over prompts and suboptimal responses of
    ``mass(Y*) / (4 max(log(pi_ref(y) / max_{Y*} pi_ref), 0))``; ``+inf`` when every
    denominator vanishes.
    """
    _check_shape(game, pi_ref)
    pi_ref.require_interior("pi_ref")
    best = math.inf
    lp = pi_ref.logp
    for x in range(game.num_prompts):
        opt = game.optimal_mask[x]
        if opt.all():
            continue
        star_mass = float(np.exp(logsumexp(lp[x, opt])))
        log_ratio = lp[x, ~opt] - lp[x, opt].max()
        pos = log_ratio[log_ratio > 0]
        if pos.size:
            best = min(best, star_mass / (4.0 * pos.max()))
    return best


def equilibrium_gap_bound(game: PreferenceGame, pi_ref: TabularPolicy, beta: float) -> np.ndarray:
    """Per-prompt bound ``4 (|Y| - |Y*(x)|) exp(-mass(Y*(x)) / (4 beta))``."""
    if beta <= 0:
        raise ValidationError("beta must be positive")
    _check_shape(game, pi_ref)
    star_mass = np.where(game.optimal_mask, pi_ref.probs, 0.0).sum(axis=1)
    n_sub = game.num_responses - game.optimal_mask.sum(axis=1)
    return 4.0 * n_sub * np.exp(-star_mass / (4.0 * beta))
