"""Contextual-bandit experiments comparing iterative BoN with WIND.

Every run is a pure function of ``(spec, seed)``.  Results hold per-seed
traces plus flat summary rows that the CLI writes out.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ValidationError
from .exact import BonMode, c_beta, equilibrium_gap_bound, ibon_step, iterative_bon, wind_exact_solve, wind_exact_step
from .game import Loss, PreferenceGame, SolverConfig, TabularPolicy, Trace, avg_l1, preference_from_rewards
from .sampled import Judge, ParamPolicy, wind_sampled

__all__ = [
    "Kind",
    "ExperimentSpec",
    "ExperimentResult",
    "generate_game",
    "dirichlet_init",
    "designed_bound_game",
    "limit_policy_oracle",
    "wind_dominates",
    "run_no_mixing",
    "run_beta_sweep",
    "run_bound_check",
    "run_sampled_convergence",
    "run_experiment",
]

# Distances below this are treated as equal when comparing trajectories; one
# method can underflow to exactly zero while the other sits at 1e-150.
DISTANCE_FLOOR = 1e-12


class Kind(str, enum.Enum):
    NO_MIXING = "no_mixing"
    BETA_SWEEP = "beta_sweep"
    BOUND_CHECK = "bound_check"
    SAMPLED = "sampled_convergence"


_DEFAULTS = {
    Kind.NO_MIXING: dict(grid=(0.0,), T=50, eta=16.0, seeds=tuple(range(5))),
    Kind.BETA_SWEEP: dict(grid=tuple(np.round(np.linspace(0.01, 0.1, 10), 12)), T=5000, eta=1.0,
                          seeds=(0, 1, 2)),
    Kind.BOUND_CHECK: dict(num_prompts=4, num_responses=3, grid=(0.005, 0.01, 0.02, 0.05),
                           T=200_000, eta=1.0, seeds=tuple(range(5)), init="reference"),
    Kind.SAMPLED: dict(num_prompts=4, num_responses=8, grid=(1.0,), T=30, eta=1.0,
                       seeds=tuple(range(20)), init="reference"),
}


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything that determines an experiment, apart from the seed.

    ``init`` is the WIND starting point (``"dirichlet"`` or ``"reference"``);
    ``ibon_init`` is the iterative-BoN starting point (``"reference"`` starts
    from the reference policy, ``"shared"`` reuses WIND's start).
    ``rewards``, when given, replaces the random game.
    """

    kind: Kind
    num_prompts: int = 20
    num_responses: int = 100
    seeds: tuple = (0,)
    grid: tuple = (0.0,)
    T: int = 50
    eta: float = 1.0
    n: int = 2
    init: str = "dirichlet"
    ibon_init: str = "reference"
    mode: BonMode = BonMode.PAPER
    m_ladder: tuple = (256, 1024, 4096)
    delta: float = 0.0
    loss: Loss = Loss.SQ
    nce_p: float = 0.5
    ref_star_mass: float = 0.9
    tol: float = 1e-14
    record_every: int = 100
    rewards: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "mode", BonMode(self.mode))
        object.__setattr__(self, "loss", Loss(self.loss))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "grid", tuple(float(b) for b in self.grid))
        object.__setattr__(self, "m_ladder", tuple(int(m) for m in self.m_ladder))
        checks = [
            ("num_prompts", self.num_prompts >= 1),
            ("num_responses", self.num_responses >= 2),
            ("seeds", len(self.seeds) >= 1 and min(self.seeds) >= 0),
            ("grid", len(self.grid) >= 1 and all(math.isfinite(b) and b >= 0 for b in self.grid)),
            ("T", int(self.T) == self.T and self.T >= 1),
            ("eta", self.eta > 0 and math.isfinite(self.eta)),
            ("n", int(self.n) == self.n and self.n >= 2),
            ("init", self.init in ("dirichlet", "reference")),
            ("ibon_init", self.ibon_init in ("reference", "shared")),
            ("m_ladder", len(self.m_ladder) >= 1 and min(self.m_ladder) >= 1),
            ("delta", 0 <= self.delta < 0.5),
            ("nce_p", 0 < self.nce_p < 1),
            ("ref_star_mass", 0 < self.ref_star_mass < 1),
            ("tol", self.tol > 0),
            ("record_every", self.record_every >= 1),
        ]
        for key, ok in checks:
            if not ok:
                raise ValidationError(f"{key} out of range: {getattr(self, key)!r}")
        if self.kind in (Kind.BETA_SWEEP, Kind.BOUND_CHECK, Kind.SAMPLED) and min(self.grid) <= 0:
            raise ValidationError(f"grid: beta must be positive for {self.kind.value}")

    @classmethod
    def defaults(cls, kind, **overrides) -> "ExperimentSpec":
        kind = Kind(kind)
        return cls(kind=kind, **{**_DEFAULTS[kind], **overrides})

    def with_(self, **changes) -> "ExperimentSpec":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        d = asdict(self)
        for k in ("kind", "mode", "loss"):
            d[k] = getattr(self, k).value
        return d


@dataclass
class ExperimentResult:
    """Traces keyed by ``(seed, ...)`` tuples, per-seed summary rows and aggregates."""

    spec: ExperimentSpec
    seeds: tuple
    traces: dict = field(default_factory=dict)
    summary: list = field(default_factory=list)
    aggregate: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.summary])


def generate_game(spec: ExperimentSpec, seed: int) -> PreferenceGame:
    """Standard-normal rewards from the stream ``(seed, 0)``, uniform ``rho``."""
    if spec.rewards is not None:
        return preference_from_rewards(np.asarray(spec.rewards, dtype=float))
    rng = np.random.default_rng([seed, 0])
    return preference_from_rewards(rng.standard_normal((spec.num_prompts, spec.num_responses)))


def dirichlet_init(shape: tuple[int, int], seed: int) -> TabularPolicy:
    """Uniform draw from the simplex per prompt, as normalised unit exponentials."""
    e = np.random.default_rng([seed, 1]).standard_exponential(shape)
    return TabularPolicy.from_probs(e / e.sum(axis=1, keepdims=True))


def designed_bound_game(spec: ExperimentSpec, seed: int) -> tuple[PreferenceGame, TabularPolicy]:
    """Random game with a reference putting ``ref_star_mass`` on each prompt's best response."""
    game = generate_game(spec, seed)
    if not game.distinct_rewards():
        raise ValidationError("bound-check game needs distinct rewards per prompt")
    Y = game.num_responses
    probs = np.full(game.shape, (1.0 - spec.ref_star_mass) / (Y - 1))
    probs[np.arange(game.num_prompts), game.rewards.argmax(axis=1)] = spec.ref_star_mass
    return game, TabularPolicy.from_probs(probs)


def limit_policy_oracle(game: PreferenceGame, pi_ref: TabularPolicy) -> TabularPolicy:
    """Reference restricted to each prompt's optimal set, renormalised."""
    pi_ref.require_interior("pi_ref")
    probs = np.where(game.optimal_mask, pi_ref.probs, 0.0)
    return TabularPolicy.from_probs(probs / probs.sum(axis=1, keepdims=True))


def wind_dominates(trace: Trace, start: int = 5, floor: float = DISTANCE_FLOOR) -> bool:
    """True when ``d_l1_wind <= d_l1_ibon`` at every iteration ``>= start``, both clipped at ``floor``."""
    keep = trace.iters >= start
    w = np.maximum(trace.column("d_l1_wind")[keep], floor)
    b = np.maximum(trace.column("d_l1_ibon")[keep], floor)
    return bool(np.all(w <= b))


def _starts(spec: ExperimentSpec, game: PreferenceGame, ref: TabularPolicy, seed: int):
    wind0 = dirichlet_init(game.shape, seed) if spec.init == "dirichlet" else ref
    ibon0 = wind0 if spec.ibon_init == "shared" else ref
    return ibon0, wind0


def run_no_mixing(spec: ExperimentSpec, seed: int) -> ExperimentResult:
    """Unmixed iterative BoN and unregularised WIND, both measured against the oracle limit."""
    if spec.kind is not Kind.NO_MIXING:
        raise ValidationError(f"run_no_mixing needs kind no_mixing, got {spec.kind.value}")
    game = generate_game(spec, seed)
    ref = TabularPolicy.uniform(*game.shape)
    oracle = limit_policy_oracle(game, ref)
    pi_b, pi_w = _starts(spec, game, ref, seed)
    cfg = SolverConfig(n=spec.n, T=spec.T, seed=seed)
    rho = game.rho
    trace = Trace(metadata={"experiment": spec.kind.value, "seed": seed})
    trace.append(0, d_l1_ibon=avg_l1(pi_b, oracle, rho), d_l1_wind=avg_l1(pi_w, oracle, rho))
    for t in range(spec.T):
        pi_b = ibon_step(pi_b, ref, game, cfg, False, spec.mode, seed=[seed, t])
        pi_w = wind_exact_step(pi_w, game, None, 0.0, spec.eta)
        trace.append(t + 1, d_l1_ibon=avg_l1(pi_b, oracle, rho), d_l1_wind=avg_l1(pi_w, oracle, rho))
    last = trace.last()
    row = {"seed": seed, "d_l1_ibon": last["d_l1_ibon"], "d_l1_wind": last["d_l1_wind"],
           "wind_dominates": wind_dominates(trace)}
    return ExperimentResult(spec, (seed,), {(seed,): trace}, [row])


def run_beta_sweep(spec: ExperimentSpec, seed: int) -> ExperimentResult:
    """For each beta: mixed iterative BoN and regularised WIND for ``T`` steps; distance between them."""
    if spec.kind is not Kind.BETA_SWEEP:
        raise ValidationError(f"run_beta_sweep needs kind beta_sweep, got {spec.kind.value}")
    game = generate_game(spec, seed)
    ref = TabularPolicy.uniform(*game.shape)
    result = ExperimentResult(spec, (seed,))
    for beta in spec.grid:
        cfg = SolverConfig.with_mixing_preset(beta, spec.eta, spec.n, T=spec.T, seed=seed)
        pi_b, pi_w = _starts(spec, game, ref, seed)
        trace = Trace(metadata={"experiment": spec.kind.value, "seed": seed, "beta": beta})
        for t in range(1, spec.T + 1):
            pi_b = ibon_step(pi_b, ref, game, cfg, True, spec.mode, seed=[seed, t - 1])
            pi_w = wind_exact_step(pi_w, game, ref, beta, spec.eta)
            if t % spec.record_every == 0 or t == spec.T:
                trace.append(t, d_l1=avg_l1(pi_b, pi_w, game.rho))
        result.traces[(seed, beta)] = trace
        result.summary.append({"beta": beta, "d_l1_final": trace.last()["d_l1"], "seed": seed})
    return result


def run_bound_check(spec: ExperimentSpec, seed: int) -> ExperimentResult:
    """Distance between the two regularised limits against the exponential closeness bound."""
    if spec.kind is not Kind.BOUND_CHECK:
        raise ValidationError(f"run_bound_check needs kind bound_check, got {spec.kind.value}")
    game, ref = designed_bound_game(spec, seed)
    cb = c_beta(game, ref)
    bad = [b for b in spec.grid if b >= cb]
    if bad:
        raise ValidationError(f"grid: beta {bad[0]} is not below c_beta = {cb!r}")
    result = ExperimentResult(spec, (seed,))
    for beta in spec.grid:
        cfg = SolverConfig.with_mixing_preset(beta, spec.eta, spec.n, T=spec.T, seed=seed)
        pi_b, trace = iterative_bon(ref, game, cfg, True, spec.mode, tol=spec.tol)
        rep = wind_exact_solve(game, ref, ref, beta=beta, eta=spec.eta, T=spec.T, tol=spec.tol)
        measured = avg_l1(pi_b, rep.policy, game.rho)
        bound = float(game.rho @ equilibrium_gap_bound(game, ref, beta))
        result.traces[(seed, beta)] = trace
        result.summary.append({"beta": beta, "measured": measured, "bound": bound,
                               "passed": measured <= bound + 1e-9, "c_beta": cb, "seed": seed,
                               "ibon_iters": len(trace), "wind_iters": rep.iters_used})
    return result


def run_sampled_convergence(spec: ExperimentSpec, seed: int) -> ExperimentResult:
    """Sampled WIND at every ``M`` in the ladder, scored against the exact equilibrium.

    With ``delta > 0`` each ``M`` is run twice: exact judge and perturbed judge.
    """
    if spec.kind is not Kind.SAMPLED:
        raise ValidationError(f"run_sampled_convergence needs kind sampled_convergence, got {spec.kind.value}")
    beta = spec.grid[0]
    game = generate_game(spec, seed)
    ref = TabularPolicy.uniform(*game.shape)
    star = wind_exact_solve(game, ref, beta=beta, eta=spec.eta, T=1_000_000, tol=1e-13).policy
    policy0 = ParamPolicy.tabular(ref.logp)
    if spec.init == "dirichlet":
        policy0 = ParamPolicy.tabular(dirichlet_init(game.shape, seed).logp)
    deltas = (0.0, spec.delta) if spec.delta > 0 else (0.0,)
    result = ExperimentResult(spec, (seed,))
    for delta in deltas:
        judge = Judge(game, delta, seed)
        for M in spec.m_ladder:
            cfg = SolverConfig(beta=beta, eta=spec.eta, T=spec.T, M=M, loss=spec.loss,
                               nce_p=spec.nce_p, seed=seed)
            _, trace = wind_sampled(game, judge, policy0, cfg, reference=star,
                                    theta_ref=ParamPolicy.tabular(ref.logp))
            result.traces[(seed, M, delta)] = trace
            last = trace.last()
            result.summary.append({"M": M, "delta": delta, "kl_to_star": last["kl_to_star"],
                                   "d_l1_to_star": last["d_l1_to_star"], "seed": seed})
    return result


_RUNNERS = {
    Kind.NO_MIXING: run_no_mixing,
    Kind.BETA_SWEEP: run_beta_sweep,
    Kind.BOUND_CHECK: run_bound_check,
    Kind.SAMPLED: run_sampled_convergence,
}


def _aggregate(spec: ExperimentSpec, rows: list) -> list:
    if spec.kind is Kind.NO_MIXING:
        frac = float(np.mean([r["wind_dominates"] for r in rows]))
        return [{"wind_dominates_fraction": frac,
                 "max_d_l1_ibon": max(r["d_l1_ibon"] for r in rows),
                 "max_d_l1_wind": max(r["d_l1_wind"] for r in rows)}]
    if spec.kind is Kind.SAMPLED:
        out = []
        for delta in sorted({r["delta"] for r in rows}):
            for M in spec.m_ladder:
                cell = [r for r in rows if r["M"] == M and r["delta"] == delta]
                out.append({"M": M, "delta": delta,
                            "median_kl_to_star": float(np.median([r["kl_to_star"] for r in cell])),
                            "median_d_l1_to_star": float(np.median([r["d_l1_to_star"] for r in cell]))})
        return out
    key = "d_l1_final" if spec.kind is Kind.BETA_SWEEP else "measured"
    return [{"beta": b, f"max_{key}": max(r[key] for r in rows if r["beta"] == b)} for b in spec.grid]


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Run every seed in ``spec.seeds`` and merge, preserving seed and grid order."""
    runner = _RUNNERS[spec.kind]
    merged = ExperimentResult(spec, spec.seeds)
    for seed in spec.seeds:
        one = runner(spec, seed)
        merged.traces.update(one.traces)
        merged.summary.extend(one.summary)
    merged.aggregate = _aggregate(spec, merged.summary)
    return merged
