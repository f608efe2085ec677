"""Acceptance criteria 1-11.  Each test prints one PASS/FAIL line with the measured values."""

import time
from functools import partial

import numpy as np
import pytest

from windbon.exact import (
    BonMode,
    best_response,
    bon_exact_operator,
    bon_monte_carlo,
    duality_gap,
    iterative_bon,
    wind_exact_solve,
    wind_exact_step,
)
from windbon.experiments import ExperimentSpec, limit_policy_oracle, run_experiment
from windbon.game import SolverConfig, TabularPolicy, avg_l1, kl_policies, preference_from_rewards, win_rate
from windbon.sampled import (
    Judge,
    ParamPolicy,
    ProxyParams,
    conditional_mean_oracle,
    exhaustive_batch,
    inner_minimize,
    population_sq_risk,
    risk_kl,
    risk_nce,
    risk_sq,
    sample_batch,
    tie_target_init,
    wind_sampled,
)

from conftest import random_game, random_policy, sigmoid


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail, elapsed, budget):
        ok = bool(ok) and elapsed <= budget
        line = (f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} | {detail} | "
                f"{elapsed:.1f}s of {budget}s")
        with capsys.disabled():
            print("\n" + line)
        return ok
    return emit


def test_01_mirror_descent_contraction(report):
    t0 = time.perf_counter()
    worst, max_iters = -np.inf, 0
    for seed in range(50):
        rng = np.random.default_rng([seed, 0])
        g = preference_from_rewards(rng.standard_normal((20, 100)))
        ref = TabularPolicy.uniform(20, 100)
        e = np.random.default_rng([seed, 1]).standard_exponential((20, 100))
        pi0 = TabularPolicy.from_probs(e / e.sum(axis=1, keepdims=True))
        for b in (0.1, 0.5):
            rep = wind_exact_solve(g, ref, pi0, beta=b, eta=b, T=100_000, tol=1e-12, keep_iterates=True)
            assert rep.converged
            kl = np.array([kl_policies(rep.policy, q, g.rho) for q in rep.iterates])
            worst = max(worst, float(np.max(kl[1:] - kl[:-1] / (1 + b * b))))
            max_iters = max(max_iters, rep.iters_used)
    elapsed = time.perf_counter() - t0
    assert report(1, "KL(pi*||pi_t+1) <= KL(pi*||pi_t)/(1+eta beta) + 1e-10", worst <= 1e-10,
                  f"worst slack {worst:.2e}, longest run {max_iters} iters", elapsed, 60)


def test_02_no_mixing_convergence(report):
    t0 = time.perf_counter()
    res = run_experiment(ExperimentSpec.defaults("no_mixing"))
    final_b = max(tr.column("d_l1_ibon")[50] for tr in res.traces.values())
    final_w = max(tr.column("d_l1_wind")[50] for tr in res.traces.values())
    monotone = all(np.all(np.diff(tr.column(c)[1:]) <= 0)
                   for tr in res.traces.values() for c in ("d_l1_ibon", "d_l1_wind"))
    frac = res.aggregate[0]["wind_dominates_fraction"]
    ok = final_b <= 1e-6 and final_w <= 1e-6 and monotone and frac >= 0.8
    elapsed = time.perf_counter() - t0
    assert report(2, "no-mixing iBoN and WIND reach the limit policy", ok,
                  f"d_l1@50 ibon {final_b:.1e} wind {final_w:.1e}, monotone {monotone}, "
                  f"WIND<=iBoN on {frac:.0%} of seeds", elapsed, 30)


def test_03_beta_sweep_trend(report):
    t0 = time.perf_counter()
    base = ExperimentSpec.defaults("beta_sweep")
    res = run_experiment(base.with_(grid=(0.001,) + base.grid))
    ok, worst_drop, ext_ok = True, 0.0, True
    for seed in base.seeds:
        rows = [r for r in res.summary if r["seed"] == seed]
        d = np.array([r["d_l1_final"] for r in rows])
        drops = d[1:-1] - d[2:]
        worst_drop = max(worst_drop, float(drops.max()))
        ok &= bool(np.all(drops <= 1e-6))
        ext_ok &= bool(d[0] <= d[1])
    d = {r["beta"]: r["d_l1_final"] for r in res.summary if r["seed"] == 0}
    elapsed = time.perf_counter() - t0
    assert report(3, "final distance nondecreasing in beta", ok and ext_ok,
                  f"worst decrease {worst_drop:.1e}, beta=0.001 ext ok {ext_ok}; seed 0: "
                  f"{d[0.001]:.1e} @0.001, {d[0.01]:.1e} @0.01, {d[0.1]:.3f} @0.1", elapsed, 300)


def test_04_closeness_bound(report):
    t0 = time.perf_counter()
    res = run_experiment(ExperimentSpec.defaults("bound_check"))
    at = [r for r in res.summary if r["beta"] == 0.005]
    measured = max(r["measured"] for r in at)
    bound = at[0]["bound"]
    ok = measured <= 1e-9 and abs(bound - 2.29e-19) <= 0.01e-19 and all(r["passed"] for r in res.summary)
    elapsed = time.perf_counter() - t0
    assert report(4, "limit distance within the exponential bound at beta=0.005", ok,
                  f"measured {measured:.2e}, bound {bound:.3e}, all grid points pass "
                  f"{all(r['passed'] for r in res.summary)}", elapsed, 10)


def test_05_analytic_fixed_point(report, two_response):
    t0 = time.perf_counter()
    u = TabularPolicy.uniform(1, 2)
    err_exact = err_br = 0.0
    for beta in (0.25, 0.5, 1.0, 2.0):
        target = sigmoid(1 / (2 * beta))
        rep = wind_exact_solve(two_response, u, beta=beta, eta=beta, tol=1e-12)
        err_exact = max(err_exact, abs(rep.policy.probs[0, 0] - target))
        pi = u
        for _ in range(5):
            pi = best_response(pi, two_response, u, beta)
        err_br = max(err_br, abs(pi.probs[0, 0] - target))
    star = TabularPolicy.from_probs([[sigmoid(0.5), 1 - sigmoid(0.5)]])
    dists = []
    for seed in range(20):
        cfg = SolverConfig(beta=1.0, eta=1.0, M=4096, T=30, seed=seed)
        _, tr = wind_sampled(two_response, Judge.exact(two_response), ParamPolicy.tabular(np.zeros((1, 2))),
                             cfg, reference=star)
        dists.append(tr.last()["d_l1_to_star"])
    med = float(np.median(dists))
    ok = err_exact <= 1e-10 and err_br <= 1e-10 and med <= 0.02
    elapsed = time.perf_counter() - t0
    assert report(5, "exact, best-response and sampled WIND recover sigma(1/(2 beta))", ok,
                  f"exact err {err_exact:.1e}, BR err {err_br:.1e}, sampled median d_l1 {med:.4f}",
                  elapsed, 60)


def test_06_exhaustive_regression_matches_exact_step(report):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        g = random_game(rng, 3, 5)
        pt = ParamPolicy.tabular(rng.standard_normal((3, 5)))
        pr = ParamPolicy.tabular(rng.standard_normal((3, 5)))
        beta, eta = rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0)
        pp = ProxyParams(beta, eta, pt, pr)
        j = Judge.exact(g)
        batch = exhaustive_batch(pt, g, j)
        w = np.bincount(batch.x * 5 + batch.y, batch.weights, 15)
        theta = inner_minimize(partial(risk_sq, batch=batch, pp=pp, judge=j), pt, 3000, 0.5 / w.max())
        step = wind_exact_step(pt.policy(), g, pr.policy(), beta, eta)
        worst = max(worst, avg_l1(theta.policy(), step, g.rho))
    elapsed = time.perf_counter() - t0
    assert report(6, "exhaustive SQ regression reproduces the exact step", worst <= 1e-6,
                  f"worst avg_l1 {worst:.2e}", elapsed, 10)


def test_07_conditional_mean_minimises_risk(report):
    t0 = time.perf_counter()
    worst_margin = np.inf
    for seed in range(5):
        rng = np.random.default_rng(seed)
        g = random_game(rng, 2, 3, ties=seed % 2 == 1)
        j = Judge(g, 0.1 * (seed % 3) / 2, seed=seed)
        pp = ProxyParams(rng.uniform(0.1, 2), rng.uniform(0.1, 2), ParamPolicy.tabular(rng.standard_normal((2, 3))),
                         ParamPolicy.tabular(rng.standard_normal((2, 3))), rng.standard_normal(2))
        psi = conditional_mean_oracle(g, pp, j)
        best = population_sq_risk(psi, g, pp, j)
        for _ in range(100):
            cand = psi + rng.standard_normal(psi.shape) * rng.uniform(1e-3, 1.0)
            worst_margin = min(worst_margin, population_sq_risk(cand, g, pp, j) - best)
    elapsed = time.perf_counter() - t0
    assert report(7, "conditional mean has the lowest population squared risk", worst_margin > 0,
                  f"smallest excess risk over 500 candidates {worst_margin:.2e}", elapsed, 5)


def _fd(risk, theta, h=1e-5):
    g = np.zeros(theta.dim)
    for i in range(theta.dim):
        e = np.zeros(theta.dim)
        e[i] = h
        g[i] = (risk(theta.with_params(theta.params + e))[0] - risk(theta.with_params(theta.params - e))[0]) / (2 * h)
    return g


def test_08_loss_gradients(report):
    t0 = time.perf_counter()
    worst = {"sq": 0.0, "kl": 0.0, "nce": 0.0}
    rng = np.random.default_rng(8)
    for _ in range(20):
        g = random_game(rng, 3, 4)
        j = Judge(g, 0.1, seed=int(rng.integers(1000)))
        pt = ParamPolicy.tabular(rng.standard_normal((3, 4)))
        pp = ProxyParams(rng.uniform(0.2, 2), rng.uniform(0.2, 2), pt,
                         ParamPolicy.tabular(rng.standard_normal((3, 4))), 0.1 * rng.standard_normal(3))
        batch = sample_batch(pt, g, j, 128, 0.4, seed=int(rng.integers(1000)))
        base = tie_target_init(pp, pt)
        scale = 0.3 * pp.eta / pp.scale
        theta = base.with_params(base.params + rng.uniform(-scale, scale, base.dim))
        for name, risk in (("sq", partial(risk_sq, batch=batch, pp=pp, judge=j)),
                           ("kl", partial(risk_kl, batch=batch, pp=pp)),
                           ("nce", partial(risk_nce, batch=batch, pp=pp, p=0.4))):
            a, n = risk(theta)[1], _fd(risk, theta)
            worst[name] = max(worst[name], np.linalg.norm(a - n) / np.linalg.norm(n))
    elapsed = time.perf_counter() - t0
    assert report(8, "analytic risk gradients match central differences", max(worst.values()) <= 1e-5,
                  ", ".join(f"{k} {v:.1e}" for k, v in worst.items()), elapsed, 5)


def test_09_bon_semantics(report):
    t0 = time.perf_counter()
    worst_tv = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        g = random_game(rng, 2, 6, ties=seed % 2 == 0)
        pi = random_policy(rng, 2, 6)
        n = 2 + seed % 3
        mc = bon_monte_carlo(pi, g, n, 100_000, seed=seed).probs
        ex = bon_exact_operator(pi, g, n).probs
        worst_tv = max(worst_tv, 0.5 * np.abs(mc - ex).sum(axis=1).max())
    worst_l1 = 0.0
    for seed in range(10):
        g = preference_from_rewards(np.random.default_rng([seed, 0]).standard_normal((20, 100)))
        ref = TabularPolicy.uniform(20, 100)
        oracle = limit_policy_oracle(g, ref)
        for mode in (BonMode.PAPER, BonMode.ORDER):
            pi, _ = iterative_bon(ref, g, SolverConfig(n=2, T=50), mode=mode)
            worst_l1 = max(worst_l1, avg_l1(pi, oracle, g.rho))
    elapsed = time.perf_counter() - t0
    assert report(9, "Monte Carlo vs order statistics; both no-mixing forms share a limit",
                  worst_tv <= 0.01 and worst_l1 <= 1e-6,
                  f"worst TV {worst_tv:.4f}, worst d_l1@50 {worst_l1:.1e}", elapsed, 30)


def test_10_sampled_convergence_in_batch_size(report):
    t0 = time.perf_counter()
    res = run_experiment(ExperimentSpec.defaults("sampled_convergence", delta=0.1))
    med = {(r["M"], r["delta"]): r["median_kl_to_star"] for r in res.aggregate}
    ladder = [med[(m, 0.0)] for m in (256, 1024, 4096)]
    decreasing = ladder[0] > ladder[1] > ladder[2]
    floor_ok = med[(4096, 0.1)] >= med[(4096, 0.0)]
    elapsed = time.perf_counter() - t0
    assert report(10, "median final KL falls with M; perturbed judge is no better", decreasing and floor_ok,
                  "exact " + " > ".join(f"{v:.2e}" for v in ladder)
                  + f"; M=4096 delta=0.1 {med[(4096, 0.1)]:.2e}", elapsed, 180)


def test_11_game_identities(report):
    t0 = time.perf_counter()
    exact_sym, worst_anti, gaps = True, 0.0, []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        X, Y = int(rng.integers(1, 5)), int(rng.integers(2, 12))
        g = random_game(rng, X, Y, ties=seed % 2 == 0, rho=True)
        s = g.pref + np.swapaxes(g.pref, 1, 2)
        exact_sym &= bool(np.array_equal(s, np.ones_like(s)))
        a, b = random_policy(rng, X, Y), random_policy(rng, X, Y)
        worst_anti = max(worst_anti, abs(win_rate(a, b, g) + win_rate(b, a, g) - 1))
        ref = random_policy(rng, X, Y)
        beta = float(rng.uniform(0.1, 1.0))
        rep = wind_exact_solve(g, ref, beta=beta, eta=beta, T=100_000, tol=1e-12)
        gaps.append(duality_gap(rep.policy, g, ref, beta))
    ok = exact_sym and worst_anti <= 1e-12 and min(gaps) >= -1e-10 and max(gaps) <= 1e-9
    elapsed = time.perf_counter() - t0
    assert report(11, "P+P^T=J, win-rate antisymmetry, zero gap at fixed points", ok,
                  f"exact symmetry {exact_sym}, antisymmetry err {worst_anti:.1e}, "
                  f"gap range [{min(gaps):.1e}, {max(gaps):.1e}]", elapsed, 10)
