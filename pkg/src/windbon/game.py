"""Preference games, log-space tabular policies and the scalar metrics on them.

A game is induced by a reward table ``r`` of shape ``(|X|, |Y|)`` and a
prompt distribution ``rho``.  Two comparison tensors are derived from it:

* ``pref``     -- 1 / 0.5 / 0 for win / tie / loss (strict comparison),
* ``pref_geq`` -- 1 when ``r(x, y) >= r(x, y')`` and 0 otherwise.

Policies are stored as log-probabilities so that iterated best-of-n can drive
suboptimal mass far below the smallest positive double without underflow.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np
from scipy.special import logsumexp

from .errors import ValidationError

__all__ = [
    "PreferenceGame",
    "TabularPolicy",
    "Loss",
    "SolverConfig",
    "Trace",
    "preference_from_rewards",
    "win_rate",
    "kl_policies",
    "avg_l1",
    "wr_objective",
    "log_win_objective",
    "payoff_vector",
    "log_geq_mass",
]

_SUM_TOL = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


class PreferenceGame:
    """Reward-induced preference game on a finite prompt/response set.

    The instance is immutable.  Besides the dense tensors it keeps, per prompt,
    the responses sorted by reward together with tie-group boundaries, which
    lets ``payoff_vector`` and ``log_geq_mass`` run in O(|X| |Y|) instead of
    contracting the full ``|X| x |Y| x |Y|`` tensors.
    """

    def __init__(self, rewards, rho):
        rewards = np.asarray(rewards, dtype=float)
        rho = np.asarray(rho, dtype=float)
        if rewards.ndim != 2:
            raise ValidationError(f"rewards must be a 2-d table, got shape {rewards.shape}")
        num_prompts, num_responses = rewards.shape
        if num_responses == 0:
            raise ValidationError("response set is empty")
        if num_prompts == 0:
            raise ValidationError("prompt set is empty")
        if not np.all(np.isfinite(rewards)):
            raise ValidationError("rewards must be finite")
        if rho.shape != (num_prompts,):
            raise ValidationError(f"rho has shape {rho.shape}, expected ({num_prompts},)")
        if np.any(rho < 0) or abs(rho.sum() - 1.0) > _SUM_TOL:
            raise ValidationError("rho is not a probability distribution (entries >= 0, sum 1)")
        if np.any(rho == 0):
            raise ValidationError("rho must have full support over prompts")

        self.num_prompts = num_prompts
        self.num_responses = num_responses
        self.rewards = _readonly(rewards)
        self.rho = _readonly(rho)

        diff = rewards[:, :, None] - rewards[:, None, :]
        self.pref = _readonly(0.5 * (1.0 + np.sign(diff)))
        self.pref_geq = _readonly((diff >= 0).astype(float))

        best = rewards.max(axis=1, keepdims=True)
        self.optimal_mask = (rewards == best)
        self.optimal_mask.setflags(write=False)
        self.optimal_sets = tuple(np.flatnonzero(row) for row in self.optimal_mask)

        order = np.argsort(rewards, axis=1, kind="stable")
        rows = np.arange(num_prompts)[:, None]
        rs = rewards[rows, order]
        pos = np.broadcast_to(np.arange(num_responses), rs.shape)
        brk = rs[:, 1:] != rs[:, :-1]
        is_start = np.concatenate([np.ones((num_prompts, 1), bool), brk], axis=1)
        is_end = np.concatenate([brk, np.ones((num_prompts, 1), bool)], axis=1)
        self._order = order
        self._rows = rows
        self._group_start = np.maximum.accumulate(np.where(is_start, pos, 0), axis=1)
        self._group_end = np.minimum.accumulate(
            np.where(is_end, pos, num_responses - 1)[:, ::-1], axis=1
        )[:, ::-1]
        self.has_ties = ~np.all(is_start, axis=1)
        # Flat gather indices: sorted <-> original layout, group end / entry before group start.
        base = rows * num_responses
        self._sort_flat = (base + order).ravel()
        inv = np.empty_like(order)
        inv[rows, order] = pos
        self._unsort_flat = (base + inv).ravel()
        self._end_flat = (base + self._group_end).ravel()
        self._has_below = (self._group_start > 0).ravel()
        self._below_flat = (base + np.maximum(self._group_start - 1, 0)).ravel()

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_prompts, self.num_responses)

    def distinct_rewards(self) -> bool:
        return not bool(self.has_ties.any())

    def _to_sorted(self, a: np.ndarray) -> np.ndarray:
        return a.ravel()[self._sort_flat].reshape(self.shape)

    def _from_sorted(self, a: np.ndarray) -> np.ndarray:
        return a.ravel()[self._unsort_flat].reshape(self.shape)

    def _at_group_end(self, c: np.ndarray) -> np.ndarray:
        return c.ravel()[self._end_flat].reshape(self.shape)

    def _before_group(self, c: np.ndarray, fill: float) -> np.ndarray:
        return np.where(self._has_below, c.ravel()[self._below_flat], fill).reshape(self.shape)

    def __repr__(self) -> str:
        return f"PreferenceGame(num_prompts={self.num_prompts}, num_responses={self.num_responses})"


def preference_from_rewards(rewards, rho=None) -> PreferenceGame:
    """Build the preference game for a reward table; ``rho`` defaults to uniform."""
    rewards = np.asarray(rewards, dtype=float)
    if rewards.ndim == 1:
        rewards = rewards[None, :]
    if rho is None:
        rho = np.full(rewards.shape[0], 1.0 / rewards.shape[0])
    return PreferenceGame(rewards, rho)


class TabularPolicy:
    """Per-prompt distributions over responses, held as log-probabilities.

    ``logp[x, y] = log pi(y | x)``; ``-inf`` marks zero mass.  Construct via
    :meth:`from_probs`, :meth:`from_logits` or :meth:`uniform`.
    """

    __slots__ = ("logp",)

    def __init__(self, logp, *, check: bool = True):
        logp = np.array(logp, dtype=float, copy=True)
        if logp.ndim == 1:
            logp = logp[None, :]
        if check:
            if logp.ndim != 2 or logp.shape[1] == 0:
                raise ValidationError(f"policy table must be 2-d and nonempty, got {logp.shape}")
            if np.any(np.isnan(logp)) or np.any(logp == np.inf):
                raise ValidationError("log-probabilities must not be NaN or +inf")
            norm = logsumexp(logp, axis=1)
            if np.any(np.abs(norm) > _SUM_TOL):
                raise ValidationError("policy rows must sum to 1")
        logp.setflags(write=False)
        self.logp = logp

    @classmethod
    def from_probs(cls, probs, *, interior: bool = False, floor: float = 1e-300) -> "TabularPolicy":
        probs = np.asarray(probs, dtype=float)
        if probs.ndim == 1:
            probs = probs[None, :]
        if np.any(probs < 0) or np.any(~np.isfinite(probs)):
            raise ValidationError("probabilities must be finite and nonnegative")
        if np.any(np.abs(probs.sum(axis=1) - 1.0) > _SUM_TOL):
            raise ValidationError("policy rows must sum to 1")
        if interior and np.any(probs < floor):
            raise ValidationError(f"interior policy has an entry below the floor {floor:g}")
        with np.errstate(divide="ignore"):
            logp = np.log(probs)
        # Renormalise in log space so the row identity holds to rounding.
        logp = logp - logsumexp(logp, axis=1, keepdims=True)
        return cls(logp, check=False)

    @classmethod
    def from_logits(cls, logits) -> "TabularPolicy":
        logits = np.asarray(logits, dtype=float)
        if logits.ndim == 1:
            logits = logits[None, :]
        if np.any(np.isnan(logits)) or np.any(logits == np.inf):
            raise ValidationError("logits must not be NaN or +inf")
        return cls(log_normalize(logits), check=False)

    @classmethod
    def uniform(cls, num_prompts: int, num_responses: int) -> "TabularPolicy":
        return cls(np.full((num_prompts, num_responses), -math.log(num_responses)), check=False)

    @classmethod
    def point_mass(cls, num_prompts: int, num_responses: int, index) -> "TabularPolicy":
        index = np.broadcast_to(np.asarray(index), (num_prompts,))
        logp = np.full((num_prompts, num_responses), -np.inf)
        logp[np.arange(num_prompts), index] = 0.0
        return cls(logp, check=False)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logp)

    @property
    def shape(self) -> tuple[int, int]:
        return self.logp.shape

    def is_interior(self, floor: float = 0.0) -> bool:
        """True when every entry is strictly positive (and >= ``floor``)."""
        if floor > 0:
            return bool(np.all(self.logp >= math.log(floor)))
        return bool(np.all(np.isfinite(self.logp)))

    def require_interior(self, name: str = "policy") -> None:
        if not self.is_interior():
            raise ValidationError(f"{name} must be interior (log of zero encountered)")

    def __repr__(self) -> str:
        return f"TabularPolicy(shape={self.shape})"


def _check_shape(game: PreferenceGame, *policies: TabularPolicy) -> None:
    for pi in policies:
        if pi.shape != game.shape:
            raise ValidationError(f"policy shape {pi.shape} does not match game {game.shape}")


def _check_pair(pi: TabularPolicy, pi2: TabularPolicy, rho) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    if pi.shape != pi2.shape or rho.shape != (pi.shape[0],):
        raise ValidationError(f"shape mismatch: {pi.shape}, {pi2.shape}, rho {rho.shape}")
    return rho


def payoff_vector(game: PreferenceGame, pi: TabularPolicy) -> np.ndarray:
    """``(P_x pi_x)(y)``: probability that ``y`` beats a draw from ``pi``, ties counted half."""
    _check_shape(game, pi)
    c = np.cumsum(game._to_sorted(pi.probs), axis=1)
    return game._from_sorted(0.5 * (game._at_group_end(c) + game._before_group(c, 0.0)))


def log_cumulative(ls: np.ndarray) -> np.ndarray:
    """Row-wise ``log cumsum exp``.

    Uses a max-shifted linear cumsum when no finite entry sits more than 700
    nats below its row maximum, else the exact log-space accumulation.
    """
    m = ls.max(axis=1, keepdims=True)
    rel = ls - m
    if np.all((rel > -700.0) | (ls == -np.inf)):
        with np.errstate(divide="ignore"):
            return np.log(np.cumsum(np.exp(rel), axis=1)) + m
    return np.logaddexp.accumulate(ls, axis=1)


def log_normalize(logits: np.ndarray) -> np.ndarray:
    """Subtract the row-wise log-sum-exp."""
    m = logits.max(axis=1, keepdims=True)
    return logits - (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))


def log_geq_mass(game: PreferenceGame, pi: TabularPolicy) -> np.ndarray:
    """``log (Pbar_x pi_x)(y)``: log of the mass of responses not better than ``y``."""
    _check_shape(game, pi)
    c = log_cumulative(game._to_sorted(pi.logp))
    return game._from_sorted(game._at_group_end(c))


def win_rate(pi: TabularPolicy, pi2: TabularPolicy, game: PreferenceGame) -> float:
    """Expected preference of a draw from ``pi`` over a draw from ``pi2``.

    Identical arguments return exactly 1/2 (``P + P^T = 1``) rather than a
    value carrying rounding error.
    """
    _check_shape(game, pi, pi2)
    if pi is pi2 or np.array_equal(pi.logp, pi2.logp):
        return 0.5
    per_prompt = np.einsum("xy,xy->x", pi.probs, payoff_vector(game, pi2))
    return float(np.dot(game.rho, per_prompt))


def _kl_rows(pi: TabularPolicy, pi2: TabularPolicy) -> np.ndarray:
    lp, lq = pi.logp, pi2.logp
    support = lp > -np.inf
    bad = support & (lq == -np.inf)
    with np.errstate(invalid="ignore"):
        terms = np.where(support & ~bad, np.exp(lp) * (lp - lq), 0.0)
    out = terms.sum(axis=1)
    out[bad.any(axis=1)] = np.inf
    return out


def kl_policies(pi: TabularPolicy, pi2: TabularPolicy, rho) -> float:
    """``E_{x~rho} KL(pi(.|x) || pi2(.|x))``; ``+inf`` when ``pi`` leaves the support of ``pi2``."""
    rho = _check_pair(pi, pi2, rho)
    rows = _kl_rows(pi, pi2)
    if np.any(np.isinf(rows)):
        return math.inf
    return float(max(np.dot(rho, rows), 0.0))


def avg_l1(pi: TabularPolicy, pi2: TabularPolicy, rho) -> float:
    """``E_{x~rho} ||pi_x - pi2_x||_1``."""
    rho = _check_pair(pi, pi2, rho)
    return float(np.dot(rho, np.abs(pi.probs - pi2.probs).sum(axis=1)))


def wr_objective(pi: TabularPolicy, game: PreferenceGame, pi_ref: TabularPolicy, beta: float) -> float:
    """KL-regularised win rate of ``pi`` against the reference."""
    if beta < 0:
        raise ValidationError("beta must be nonnegative")
    value = win_rate(pi, pi_ref, game)
    if beta == 0:
        return value
    return value - beta * kl_policies(pi, pi_ref, game.rho)


def log_win_objective(pi: TabularPolicy, pi2: TabularPolicy, game: PreferenceGame,
                      pi_ref: TabularPolicy, beta: float) -> float:
    """Payoff of ``pi`` in the log-win-rate game against ``pi2``; may be ``-inf``."""
    _check_shape(game, pi, pi2, pi_ref)
    lg = log_geq_mass(game, pi2)
    p = pi.probs
    support = p > 0
    if np.any(support & (lg == -np.inf)):
        return -math.inf
    with np.errstate(invalid="ignore"):
        inner = np.where(support, p * lg, 0.0).sum(axis=1)
    value = float(np.dot(game.rho, inner))
    if beta == 0:
        return value
    return value - beta * kl_policies(pi, pi_ref, game.rho)


class Loss(str, enum.Enum):
    SQ = "sq"
    KL = "kl"
    NCE = "nce"


@dataclass(frozen=True)
class SolverConfig:
    """Hyperparameters shared by the exact and sampled solvers.

    ``alpha1 = 1, alpha2 = 0`` (the default) is plain iterative best-of-n.
    Use :meth:`with_mixing_preset` for the mixing rates under which the
    iterates solve the regularised log-win-rate game.
    """

    beta: float = 0.0
    eta: float = 1.0
    n: int = 2
    alpha1: float = 1.0
    alpha2: float = 0.0
    T: int = 100
    M: int = 1024
    loss: Loss = Loss.SQ
    nce_p: float = 0.5
    seed: int = 0
    tol_residual: float = 1e-10
    inner_steps: int = 200
    inner_lr: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "loss", Loss(self.loss))
        checks = [
            ("beta", self.beta >= 0 and math.isfinite(self.beta)),
            ("eta", self.eta > 0 and math.isfinite(self.eta)),
            ("n", int(self.n) == self.n and self.n >= 1),
            ("alpha1", 0 < self.alpha1 <= 1),
            ("alpha2", 0 <= self.alpha2 <= 1),
            ("alpha1+alpha2", self.alpha1 + self.alpha2 <= 1 + 1e-15),
            ("T", int(self.T) == self.T and self.T >= 0),
            ("M", int(self.M) == self.M and self.M >= 1),
            ("nce_p", 0 < self.nce_p < 1),
            ("seed", int(self.seed) == self.seed and 0 <= self.seed < 2**64),
            ("tol_residual", self.tol_residual > 0),
            ("inner_steps", int(self.inner_steps) == self.inner_steps and self.inner_steps >= 1),
            ("inner_lr", self.inner_lr > 0),
        ]
        for key, ok in checks:
            if not ok:
                raise ValidationError(f"{key} out of range: {getattr(self, key, None)!r}"
                                      if hasattr(self, key) else f"{key} out of range")

    @property
    def mixing(self) -> bool:
        return not (self.alpha1 == 1.0 and self.alpha2 == 0.0)

    @classmethod
    def with_mixing_preset(cls, beta: float, eta: float, n: int, **kw) -> "SolverConfig":
        """Mixing rates ``a1 = eta/((1+beta eta)(n-1))``, ``a2 = (n-1-eta)/((1+beta eta)(n-1))``."""
        if n < 2:
            raise ValidationError("n must be >= 2 for the mixing preset")
        if eta > n - 1:
            raise ValidationError(f"eta must be <= n-1 = {n - 1} for the mixing preset")
        denom = (1.0 + beta * eta) * (n - 1)
        return cls(beta=beta, eta=eta, n=n, alpha1=eta / denom, alpha2=(n - 1 - eta) / denom, **kw)

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["loss"] = self.loss.value
        return d


@dataclass
class Trace:
    """Per-iteration metric records plus a metadata snapshot."""

    records: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def append(self, it: int, **metrics: float) -> None:
        if self.records:
            last_it, last = self.records[-1]
            if it <= last_it:
                raise ValidationError(f"trace iterations must increase ({it} after {last_it})")
            if set(metrics) != set(last):
                raise ValidationError(f"metric names changed: {sorted(metrics)} vs {sorted(last)}")
        self.records.append((int(it), {k: float(v) for k, v in metrics.items()}))

    @property
    def names(self) -> list[str]:
        return list(self.records[0][1]) if self.records else []

    @property
    def iters(self) -> np.ndarray:
        return np.array([it for it, _ in self.records], dtype=int)

    def column(self, name: str) -> np.ndarray:
        return np.array([m[name] for _, m in self.records])

    def last(self) -> Mapping[str, float]:
        return self.records[-1][1]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator:
        return iter(self.records)
