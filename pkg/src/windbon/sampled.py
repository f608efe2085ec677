"""Sample-based WIND: parameterised softmax policies fit by empirical risk minimisation.

Each round draws prompts and response pairs from the current policy, forms a
regression target from a frozen snapshot of the logits, and fits new
parameters with one of three losses (squared, Bernoulli KL, NCE).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable

import numpy as np

from .errors import NumericalError, ValidationError
from .game import (
    Loss,
    PreferenceGame,
    SolverConfig,
    TabularPolicy,
    Trace,
    avg_l1,
    kl_policies,
)

__all__ = [
    "ParamPolicy",
    "SampleBatch",
    "Judge",
    "ProxyParams",
    "sample_batch",
    "exhaustive_batch",
    "proxy_target",
    "zeta",
    "risk_sq",
    "risk_kl",
    "risk_nce",
    "RISKS",
    "inner_minimize",
    "tie_target_init",
    "wind_sampled",
    "conditional_mean_oracle",
    "population_sq_risk",
]

ZETA_EPS = 1e-6


class ParamPolicy:
    """Softmax policy over logits ``phi_theta(y|x)``.

    Two kinds are supported: ``"tabular"`` (one free logit per prompt/response
    pair) and ``"linear"`` (``phi_theta(y|x) = features[x, y] @ theta``).
    Instances are immutable; :meth:`with_params` returns a new one.
    """

    __slots__ = ("kind", "shape", "features", "_params")

    def __init__(self, kind: str, shape: tuple[int, int], params, features=None):
        if kind not in ("tabular", "linear"):
            raise ValidationError(f"unknown policy kind {kind!r}")
        params = np.array(params, dtype=float, copy=True).ravel()
        if not np.all(np.isfinite(params)):
            raise ValidationError("policy parameters must be finite")
        if kind == "tabular":
            if params.size != shape[0] * shape[1]:
                raise ValidationError("tabular parameters must have one entry per (x, y)")
        else:
            features = np.asarray(features, dtype=float)
            if features.ndim != 3 or features.shape[:2] != tuple(shape):
                raise ValidationError(f"features must have shape {tuple(shape)} + (d,)")
            if features.shape[2] != params.size:
                raise ValidationError("theta length must match the feature dimension")
            if not np.all(np.isfinite(features)):
                raise ValidationError("features must be finite")
            features = features.copy()
            features.setflags(write=False)
        params.setflags(write=False)
        self.kind = kind
        self.shape = (int(shape[0]), int(shape[1]))
        self.features = features
        self._params = params

    @classmethod
    def tabular(cls, logits) -> "ParamPolicy":
        logits = np.asarray(logits, dtype=float)
        if logits.ndim == 1:
            logits = logits[None, :]
        return cls("tabular", logits.shape, logits)

    @classmethod
    def linear(cls, features, theta) -> "ParamPolicy":
        features = np.asarray(features, dtype=float)
        return cls("linear", features.shape[:2], theta, features)

    @classmethod
    def zeros_like_game(cls, game: PreferenceGame) -> "ParamPolicy":
        return cls.tabular(np.zeros(game.shape))

    @property
    def params(self) -> np.ndarray:
        return self._params

    @property
    def dim(self) -> int:
        return self._params.size

    def with_params(self, params) -> "ParamPolicy":
        return ParamPolicy(self.kind, self.shape, params, self.features)

    def logits(self) -> np.ndarray:
        if self.kind == "tabular":
            return self._params.reshape(self.shape)
        return self.features @ self._params

    def phi(self, x, y) -> np.ndarray:
        """Logits at index arrays ``x, y``."""
        if self.kind == "tabular":
            return self._params[np.asarray(x) * self.shape[1] + np.asarray(y)]
        return self.features[x, y] @ self._params

    def pullback(self, x, y, g) -> np.ndarray:
        """Gradient of ``sum_i g_i phi_theta(y_i|x_i)`` with respect to the parameters."""
        if self.kind == "tabular":
            flat = np.asarray(x) * self.shape[1] + np.asarray(y)
            return np.bincount(flat, weights=g, minlength=self._params.size)
        return np.asarray(g) @ self.features[x, y]

    def policy(self) -> TabularPolicy:
        return TabularPolicy.from_logits(self.logits())

    def gram_min_eigenvalue(self, weights=None) -> float:
        """Smallest eigenvalue of ``sum w(x,y) f f^T`` (linear kind; identity for tabular)."""
        if self.kind == "tabular":
            w = np.ones(self.shape) if weights is None else np.asarray(weights)
            return float(w.min())
        f = self.features.reshape(-1, self.dim)
        w = np.ones(f.shape[0]) if weights is None else np.asarray(weights).ravel()
        return float(np.linalg.eigvalsh((f * w[:, None]).T @ f).min())

    def __repr__(self) -> str:
        return f"ParamPolicy(kind={self.kind!r}, shape={self.shape}, dim={self.dim})"


class Judge:
    """Preference oracle ``Phat``; exact, or perturbed by at most ``delta``.

    The perturbation is antisymmetric in ``(y, y')`` so ``Phat + Phat^T = 1``
    still holds after clipping to ``[0, 1]``.
    """

    def __init__(self, game: PreferenceGame, delta: float = 0.0, seed: int = 0):
        if not 0.0 <= delta < 0.5:
            raise ValidationError(f"judge delta must lie in [0, 1/2), got {delta}")
        self.delta = float(delta)
        self.seed = int(seed)
        table = np.array(game.pref, dtype=float)
        if delta > 0:
            u = np.random.default_rng([self.seed, 7]).uniform(-1.0, 1.0, size=table.shape)
            noise = 0.5 * (u - np.swapaxes(u, 1, 2))
            table = np.clip(table + delta * noise, 0.0, 1.0)
        table.setflags(write=False)
        self.table = table

    @classmethod
    def exact(cls, game: PreferenceGame) -> "Judge":
        return cls(game, 0.0)

    @property
    def exact_mode(self) -> bool:
        return self.delta == 0.0

    def __call__(self, x, y, y2) -> np.ndarray:
        return self.table[x, y, y2]

    def expected(self, pi: TabularPolicy) -> np.ndarray:
        """``(Phat_x pi_x)(y)`` for every prompt and response."""
        return np.einsum("xab,xb->xa", self.table, pi.probs)


@dataclass(frozen=True)
class SampleBatch:
    """Prompt/response-pair draws with judge and noise Bernoullis.

    Sampled batches carry 0/1 indicators ``v`` and ``v2`` with weights ``1/M``.
    Exhaustive batches carry their expectations instead, weighted by the
    exact sampling probabilities; every loss is linear in the indicators so
    the two agree in expectation.
    """

    x: np.ndarray
    y: np.ndarray
    y2: np.ndarray
    v: np.ndarray
    v2: np.ndarray
    weights: np.ndarray
    seed: object = None

    def __post_init__(self):
        n = self.x.size
        for name in ("y", "y2", "v", "v2", "weights"):
            if getattr(self, name).shape != (n,):
                raise ValidationError(f"batch field {name} must have length {n}")
        if n == 0:
            raise ValidationError("batch must be nonempty")

    @property
    def size(self) -> int:
        return self.x.size


def sample_batch(policy: ParamPolicy, game: PreferenceGame, judge: Judge, M: int,
                 p: float = 0.5, seed=0) -> SampleBatch:
    """Draw ``M`` triples ``x ~ rho``, ``y, y' ~ pi(.|x)`` and their Bernoullis."""
    if M < 1:
        raise ValidationError("M must be >= 1")
    if not 0.0 < p < 1.0:
        raise ValidationError("p must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    probs = policy.policy().probs
    x = np.searchsorted(np.cumsum(game.rho), rng.random(M), side="right")
    x = np.minimum(x, game.num_prompts - 1)
    cdf = np.cumsum(probs, axis=1)[x]
    last = game.num_responses - 1
    y = np.minimum((cdf <= rng.random(M)[:, None]).sum(axis=1), last)
    y2 = np.minimum((cdf <= rng.random(M)[:, None]).sum(axis=1), last)
    v = (rng.random(M) < judge(x, y, y2)).astype(float)
    v2 = (rng.random(M) < p).astype(float)
    return SampleBatch(x, y, y2, v, v2, np.full(M, 1.0 / M), seed)


def exhaustive_batch(policy: ParamPolicy, game: PreferenceGame, judge: Judge,
                     p: float = 0.5) -> SampleBatch:
    """Every ``(x, y, y')`` with weight ``rho(x) pi(y|x) pi(y'|x)``."""
    X, Y = game.shape
    probs = policy.policy().probs
    x, y, y2 = (a.ravel() for a in np.meshgrid(np.arange(X), np.arange(Y), np.arange(Y), indexing="ij"))
    w = game.rho[x] * probs[x, y] * probs[x, y2]
    return SampleBatch(x, y, y2, judge(x, y, y2).astype(float), np.full(x.size, p), w, "exhaustive")


@dataclass(frozen=True)
class ProxyParams:
    """Frozen snapshots defining one round's regression problem."""

    beta: float
    eta: float
    theta_t: ParamPolicy
    theta_ref: ParamPolicy
    z_t: np.ndarray = None
    z_bound: float = 1e6
    phi_t: np.ndarray = field(init=False, repr=False)
    phi_ref: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not (math.isfinite(self.beta) and self.beta >= 0):
            raise ValidationError("beta must be finite and nonnegative")
        if not (math.isfinite(self.eta) and self.eta > 0):
            raise ValidationError("eta must be finite and positive")
        if self.theta_t.shape != self.theta_ref.shape:
            raise ValidationError("snapshot shapes differ")
        z = np.zeros(self.theta_t.shape[0]) if self.z_t is None else np.asarray(self.z_t, dtype=float)
        if z.shape != (self.theta_t.shape[0],) or not np.all(np.abs(z) <= self.z_bound):
            raise ValidationError("z_t must be one finite offset per prompt, bounded by z_bound")
        object.__setattr__(self, "z_t", z)
        object.__setattr__(self, "phi_t", self.theta_t.logits())
        object.__setattr__(self, "phi_ref", self.theta_ref.logits())

    @property
    def scale(self) -> float:
        return 1.0 + self.beta * self.eta


def proxy_target(pp: ProxyParams, judge: Judge, x, y, y2) -> np.ndarray:
    """Per-sample regression target for the next round's logits."""
    be = pp.beta * pp.eta
    return ((pp.phi_t[x, y] + be * pp.phi_ref[x, y] + pp.eta * judge(x, y, y2)) / pp.scale
            + pp.z_t[x])


def zeta(phi, pp: ProxyParams, x, y) -> np.ndarray:
    """Map logits to the implied win-probability estimate (unclamped)."""
    c = pp.scale / pp.eta
    return c * phi - pp.phi_t[x, y] / pp.eta - pp.beta * pp.phi_ref[x, y] - c * pp.z_t[x]


def _targets(batch: SampleBatch, pp: ProxyParams, judge: Judge) -> np.ndarray:
    return proxy_target(pp, judge, batch.x, batch.y, batch.y2)


def risk_sq(theta: ParamPolicy, batch: SampleBatch, pp: ProxyParams, judge: Judge,
            targets: np.ndarray | None = None):
    """Weighted squared error between targets and logits; returns ``(value, grad)``."""
    if targets is None:
        targets = _targets(batch, pp, judge)
    r = theta.phi(batch.x, batch.y) - targets
    value = float(np.sum(batch.weights * r * r))
    grad = theta.pullback(batch.x, batch.y, 2.0 * batch.weights * r)
    return value, grad


def risk_kl(theta: ParamPolicy, batch: SampleBatch, pp: ProxyParams, judge: Judge = None,
            eps: float = ZETA_EPS):
    """Bernoulli log-loss of ``zeta`` against ``v``, with ``zeta`` clamped to ``[eps, 1-eps]``."""
    z_raw = zeta(theta.phi(batch.x, batch.y), pp, batch.x, batch.y)
    z = np.clip(z_raw, eps, 1.0 - eps)
    w, v = batch.weights, batch.v
    value = -float(np.sum(w * (v * np.log(z) + (1.0 - v) * np.log1p(-z))))
    dz = -w * (v / z - (1.0 - v) / (1.0 - z))
    dz = np.where((z_raw > eps) & (z_raw < 1.0 - eps), dz, 0.0)
    grad = theta.pullback(batch.x, batch.y, dz * (pp.scale / pp.eta))
    return value, grad


def risk_nce(theta: ParamPolicy, batch: SampleBatch, pp: ProxyParams, judge: Judge = None,
             p: float = 0.5, eps: float = ZETA_EPS):
    """Noise-contrastive loss with data indicator ``v`` and noise indicator ``v2``.

    ``zeta`` is clamped below at ``eps``.  The weights on the two log terms
    are ``1{v=1} + 1{v2=0}`` and ``1{v=0} + 1{v2=1}``.
    """
    if not 0.0 < p < 1.0:
        raise ValidationError("p must lie in (0, 1)")
    z_raw = zeta(theta.phi(batch.x, batch.y), pp, batch.x, batch.y)
    z = np.maximum(z_raw, eps)
    a = batch.v + (1.0 - batch.v2)
    b = (1.0 - batch.v) + batch.v2
    w = batch.weights
    value = -float(np.sum(w * (a * (np.log(z) - np.log(z + p)) + b * (math.log(p) - np.log(z + p)))))
    dz = -w * (a / z - (a + b) / (z + p))
    dz = np.where(z_raw > eps, dz, 0.0)
    grad = theta.pullback(batch.x, batch.y, dz * (pp.scale / pp.eta))
    return value, grad


RISKS = {Loss.SQ: risk_sq, Loss.KL: risk_kl, Loss.NCE: risk_nce}


def inner_minimize(risk: Callable, theta_init: ParamPolicy, steps: int = 200, lr: float = 0.5
                   ) -> ParamPolicy:
    """Gradient descent on ``risk`` (a map ``ParamPolicy -> (value, grad)``).

    A step that would raise the risk is rejected and the rate halved, so the
    accepted iterates have non-increasing risk and the last one is the best
    seen.  Raises :class:`NumericalError` on a non-finite risk or gradient.
    """
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    if not lr > 0:
        raise ValidationError("lr must be positive")
    theta = theta_init
    value, grad = risk(theta)
    if not (math.isfinite(value) and np.all(np.isfinite(grad))):
        raise NumericalError(f"non-finite risk {value} at the initial parameters")
    for k in range(steps):
        if not np.any(grad):
            break
        step = theta.params - lr * grad
        if not np.all(np.isfinite(step)):
            raise NumericalError(f"non-finite parameters at inner step {k} (lr={lr:g})")
        cand = theta.with_params(step)
        v2, g2 = risk(cand)
        if not (math.isfinite(v2) and np.all(np.isfinite(g2))):
            raise NumericalError(f"non-finite risk {v2} at inner step {k} (lr={lr:g})")
        if v2 <= value:
            theta, value, grad = cand, v2, g2
        else:
            lr *= 0.5
    return theta


def tie_target_init(pp: ProxyParams, like: ParamPolicy) -> ParamPolicy:
    """Parameters whose logits best match the target with ``Phat = 1/2``.

    This puts ``zeta`` at 1/2 everywhere, away from the clamp where the KL and
    NCE gradients vanish.
    """
    target = (pp.phi_t + pp.beta * pp.eta * pp.phi_ref + 0.5 * pp.eta) / pp.scale + pp.z_t[:, None]
    if like.kind == "tabular":
        return like.with_params(target)
    f = like.features.reshape(-1, like.dim)
    theta, *_ = np.linalg.lstsq(f, target.ravel(), rcond=None)
    return like.with_params(theta)


def wind_sampled(game: PreferenceGame, judge: Judge, policy0: ParamPolicy, cfg: SolverConfig,
                 reference: TabularPolicy | None = None, *, theta_ref: ParamPolicy | None = None,
                 z_t=None) -> tuple[ParamPolicy, Trace]:
    """Run ``cfg.T`` rounds of sample, build proxy, fit.

    ``theta_ref`` defaults to ``policy0``.  Round ``t`` draws its batch with
    seed ``(cfg.seed, t)``.  With ``reference`` the trace records
    ``kl_to_star = KL(reference || pi_t)`` and ``d_l1_to_star`` for rounds
    ``0..T``.
    """
    if cfg.beta <= 0:
        raise ValidationError("sampled WIND needs beta > 0")
    if policy0.shape != game.shape:
        raise ValidationError(f"policy shape {policy0.shape} does not match game {game.shape}")
    theta_ref = policy0 if theta_ref is None else theta_ref
    risk_fn = RISKS[cfg.loss]
    extra = {"p": cfg.nce_p} if cfg.loss is Loss.NCE else {}
    trace = Trace(metadata={"algorithm": "wind_sampled", **cfg.as_dict(), "judge_delta": judge.delta})

    def record(t, theta):
        if reference is not None:
            pi = theta.policy()
            trace.append(t, kl_to_star=kl_policies(reference, pi, game.rho),
                         d_l1_to_star=avg_l1(reference, pi, game.rho))

    theta = policy0
    record(0, theta)
    for t in range(cfg.T):
        batch = sample_batch(theta, game, judge, cfg.M, cfg.nce_p, seed=[cfg.seed, t])
        pp = ProxyParams(cfg.beta, cfg.eta, theta, theta_ref, z_t)
        if cfg.loss is Loss.SQ:
            risk = partial(risk_sq, batch=batch, pp=pp, judge=judge, targets=_targets(batch, pp, judge))
        else:
            risk = partial(risk_fn, batch=batch, pp=pp, judge=judge, **extra)
        theta = inner_minimize(risk, tie_target_init(pp, theta), cfg.inner_steps, cfg.inner_lr)
        record(t + 1, theta)
    return theta, trace


def conditional_mean_oracle(game: PreferenceGame, pp: ProxyParams, judge: Judge) -> np.ndarray:
    """``psi_t(x, y) = E_{y' ~ pi_t(.|x)} target(x, y, y')`` by exact summation."""
    win = judge.expected(pp.theta_t.policy())
    be = pp.beta * pp.eta
    return (pp.phi_t + be * pp.phi_ref + pp.eta * win) / pp.scale + pp.z_t[:, None]


def population_sq_risk(table, game: PreferenceGame, pp: ProxyParams, judge: Judge) -> float:
    """Expected squared error of a logit table under ``rho x pi_t x pi_t``."""
    probs = pp.theta_t.policy().probs
    be = pp.beta * pp.eta
    base = (pp.phi_t + be * pp.phi_ref) / pp.scale + pp.z_t[:, None]
    target = base[:, :, None] + pp.eta * judge.table / pp.scale
    err = (target - np.asarray(table)[:, :, None]) ** 2
    return float(np.einsum("x,xa,xb,xab->", game.rho, probs, probs, err))
