"""Command-line entry point: ``windbon <command> [flags]``.

Each run writes CSV traces, plot data, the resolved config and a manifest
with sha256 checksums under ``<out>/<run_id>/``.  Exit codes: 0 success,
1 validation or usage error, 2 numerical or I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from .errors import NumericalError, ValidationError
from .exact import (
    BonMode,
    best_response,
    bon_exact_operator,
    bon_paper_operator,
    duality_gap,
    fixed_point_residual,
    wind_exact_solve,
    wind_exact_step,
)
from .experiments import ExperimentSpec, Kind, dirichlet_init, generate_game, run_experiment
from .game import Loss, SolverConfig, TabularPolicy, payoff_vector, preference_from_rewards, win_rate

COMMANDS = ("ibon", "wind-exact", "wind-sample", "sweep-beta", "bound-check", "nash-gap", "selftest")

DEMO_REWARDS = ((1.0, 0.0),)

_TYPES = {
    "beta": float, "eta": float, "n": int, "T": int, "M": int, "loss": str, "nce_p": float,
    "seed": int, "num_seeds": int, "grid": str, "mode": str, "num_prompts": int,
    "num_responses": int, "init": str, "ibon_init": str, "delta": float, "inner_steps": int,
    "inner_lr": float, "tol": float, "game": str, "ref_star_mass": float,
}

_BASE = {
    "beta": 0.0, "eta": 1.0, "n": 2, "T": 50, "M": 1024, "loss": "sq", "nce_p": 0.5, "seed": 0,
    "num_seeds": 1, "grid": "", "mode": "paper", "num_prompts": 20, "num_responses": 100,
    "init": "dirichlet", "ibon_init": "reference", "delta": 0.0, "inner_steps": 200,
    "inner_lr": 0.5, "tol": 1e-10, "game": "random", "ref_star_mass": 0.9,
}

_COMMAND_DEFAULTS = {
    "ibon": {"eta": 16.0, "T": 50},
    "wind-exact": {"beta": 1.0, "eta": 1.0, "T": 10_000, "game": "demo", "init": "reference"},
    "wind-sample": {"beta": 1.0, "eta": 1.0, "T": 30, "M": 4096, "num_prompts": 4,
                    "num_responses": 8, "init": "reference"},
    "sweep-beta": {"eta": 1.0, "T": 5000, "grid": "0.01:0.1:10", "num_seeds": 3},
    "bound-check": {"eta": 1.0, "T": 200_000, "grid": "0.005,0.01,0.02,0.05", "num_prompts": 4,
                    "num_responses": 3, "num_seeds": 5, "tol": 1e-14},
    "nash-gap": {"beta": 0.1, "eta": 0.1, "T": 100_000, "tol": 1e-12, "init": "reference"},
    "selftest": {},
}

_CHOICES = {
    "loss": [m.value for m in Loss],
    "mode": [m.value for m in BonMode],
    "init": ["dirichlet", "reference"],
    "ibon_init": ["reference", "shared"],
    "game": ["demo", "random"],
}


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# ---------------------------------------------------------------- config


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind is int:
            value = float(raw) if any(c in raw for c in ".eE") else int(raw)
            if isinstance(value, float):
                if not value.is_integer():
                    raise ValueError
                value = int(value)
            return value
        if kind is float:
            return float(raw)
    except ValueError:
        raise ValidationError(f"{key}: expected {kind.__name__}, got {raw!r}") from None
    if key in _CHOICES and raw not in _CHOICES[key]:
        raise ValidationError(f"{key}: expected one of {_CHOICES[key]}, got {raw!r}")
    return raw


def read_config_file(path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ValidationError(f"{path}:{lineno}: unknown key {key!r}")
        if not raw:
            raise ValidationError(f"{path}:{lineno}: missing value for {key!r}")
        try:
            values[key] = _convert(key, raw)
        except ValidationError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return values


def parse_grid(text: str) -> tuple:
    """``LO:HI:COUNT`` (inclusive linear grid) or a comma-separated list."""
    text = text.strip()
    try:
        if ":" in text:
            lo, hi, count = text.split(":")
            count = int(count)
            if count < 1:
                raise ValueError
            pts = np.linspace(float(lo), float(hi), count) if count > 1 else np.array([float(lo)])
            values = tuple(float(f"{v:.12g}") for v in pts)
        else:
            values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ValidationError(f"grid: cannot parse {text!r} (use LO:HI:COUNT or a comma list)") from None
    if not values or not all(math.isfinite(v) for v in values):
        raise ValidationError(f"grid: no finite values in {text!r}")
    return values


def resolve_config(command: str, file_values: dict | None = None, flags: dict | None = None) -> dict:
    """Merge defaults, file and flags (flags win) and range-check the result."""
    cfg = {**_BASE, **_COMMAND_DEFAULTS[command], **(file_values or {}),
           **{k: v for k, v in (flags or {}).items() if v is not None}}
    _check_ranges(cfg)
    return cfg


def _check_ranges(cfg: dict) -> None:
    solver_config(cfg)
    checks = [
        ("num_seeds", cfg["num_seeds"] >= 1),
        ("num_prompts", cfg["num_prompts"] >= 1),
        ("num_responses", cfg["num_responses"] >= 2),
        ("delta", 0 <= cfg["delta"] < 0.5),
        ("tol", cfg["tol"] > 0),
        ("ref_star_mass", 0 < cfg["ref_star_mass"] < 1),
    ]
    for key, ok in checks:
        if not ok:
            raise ValidationError(f"{key} out of range: {cfg[key]!r}")
    for key, choices in _CHOICES.items():
        if cfg[key] not in choices:
            raise ValidationError(f"{key}: expected one of {choices}, got {cfg[key]!r}")
    if cfg["grid"]:
        grid = parse_grid(cfg["grid"])
        if min(grid) < 0:
            raise ValidationError(f"grid: beta values must be nonnegative, got {min(grid)!r}")


def solver_config(cfg: dict) -> SolverConfig:
    return SolverConfig(beta=cfg["beta"], eta=cfg["eta"], n=cfg["n"], T=cfg["T"], M=cfg["M"],
                        loss=cfg["loss"], nce_p=cfg["nce_p"], seed=cfg["seed"],
                        tol_residual=cfg["tol"], inner_steps=cfg["inner_steps"],
                        inner_lr=cfg["inner_lr"])


def experiment_spec(kind: Kind, cfg: dict) -> ExperimentSpec:
    grid = parse_grid(cfg["grid"]) if cfg["grid"] else (cfg["beta"],)
    extra = {}
    if cfg["game"] == "demo":
        extra["rewards"] = DEMO_REWARDS
    if kind is Kind.SAMPLED:
        extra["m_ladder"] = (cfg["M"],)
    return ExperimentSpec(
        kind=kind, num_prompts=cfg["num_prompts"], num_responses=cfg["num_responses"],
        seeds=tuple(range(cfg["seed"], cfg["seed"] + cfg["num_seeds"])), grid=grid, T=cfg["T"],
        eta=cfg["eta"], n=cfg["n"], init=cfg["init"], ibon_init=cfg["ibon_init"], mode=cfg["mode"],
        delta=cfg["delta"], loss=cfg["loss"], nce_p=cfg["nce_p"], ref_star_mass=cfg["ref_star_mass"],
        tol=cfg["tol"], **extra)


# ---------------------------------------------------------------- output


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(rows: list[dict], path, columns: list[str]) -> None:
    """RFC 4180 CSV with a header; floats use the shortest round-trip form."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def emit_plot_data(series: list[tuple[str, list, list]], path, log_y: bool = False,
                   title: str = "") -> None:
    """Whitespace columns per series, separated by blank lines, ``#`` headers."""
    if not series or not any(len(x) for _, x, _ in series):
        raise ValidationError("nothing to plot")
    with open(path, "w") as fh:
        if title:
            fh.write(f"# {title}\n")
        if log_y:
            fh.write("# hint: log-scale y axis\n")
        for i, (name, xs, ys) in enumerate(series):
            if i:
                fh.write("\n\n")
            fh.write(f"# series: {name}\n# x y\n")
            for x, y in zip(xs, ys):
                fh.write(f"{_fmt(x)} {_fmt(y)}\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _new_run_dir(out: Path, command: str, cfg: dict) -> tuple[str, Path]:
    digest = hashlib.sha256(repr(sorted(cfg.items())).encode()).hexdigest()[:8]
    stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
    base = f"{command}-{stamp}-{time.time_ns() % 10**9:09d}-s{cfg['seed']}-{digest}"
    run_id, k = base, 0
    out.mkdir(parents=True, exist_ok=True)
    while True:
        try:
            (out / run_id).mkdir()
            return run_id, out / run_id
        except FileExistsError:
            k += 1
            run_id = f"{base}-{k}"


def _write_manifest(run_dir: Path, run_id: str, command: str, cfg: dict, files: list[str]) -> None:
    config_path = run_dir / "config.txt"
    # Empty values (an unset grid) are left out so the file parses back.
    config_path.write_text("".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(cfg.items()) if v != ""))
    files = ["config.txt"] + files
    lines = [f"run_id = {run_id}", f"command = {command}"]
    lines += [f"config.{k} = {_fmt(v)}" for k, v in sorted(cfg.items())]
    for name in files:
        lines.append(f"file.{name} = {run_dir / name}")
        lines.append(f"sha256.{name} = {_sha256(run_dir / name)}")
    (run_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- commands


def _trace_rows(trace, key: str, extra: dict | None = None) -> list[dict]:
    return [{key: it, **m, **(extra or {})} for it, m in trace]


def _cmd_ibon(cfg, run_dir, log):
    spec = experiment_spec(Kind.NO_MIXING, cfg)
    result = run_experiment(spec)
    files = []
    for seed in spec.seeds:
        trace = result.traces[(seed,)]
        rows = _trace_rows(trace, "iter")
        suffix = "" if len(spec.seeds) == 1 else f"_seed{seed}"
        write_csv(rows, run_dir / f"trace{suffix}.csv", ["iter", "d_l1_ibon", "d_l1_wind"])
        emit_plot_data([("ibon", list(trace.iters), list(trace.column("d_l1_ibon"))),
                        ("wind", list(trace.iters), list(trace.column("d_l1_wind")))],
                       run_dir / f"plot{suffix}.dat", log_y=True,
                       title=f"avg l1 distance to the limit policy, seed {seed}")
        files += [f"trace{suffix}.csv", f"plot{suffix}.dat"]
    write_csv(result.summary, run_dir / "summary.csv", ["seed", "d_l1_ibon", "d_l1_wind", "wind_dominates"])
    for row in result.summary:
        log(f"seed {row['seed']}: final d_l1 ibon={row['d_l1_ibon']:.3e} wind={row['d_l1_wind']:.3e}")
    return files + ["summary.csv"]


def _demo_or_random(cfg):
    if cfg["game"] == "demo":
        return preference_from_rewards(np.array(DEMO_REWARDS))
    spec = ExperimentSpec(kind=Kind.NO_MIXING, num_prompts=cfg["num_prompts"],
                          num_responses=cfg["num_responses"])
    return generate_game(spec, cfg["seed"])


def _cmd_wind_exact(cfg, run_dir, log):
    if cfg["beta"] <= 0:
        raise ValidationError("beta out of range: wind-exact needs beta > 0")
    game = _demo_or_random(cfg)
    ref = TabularPolicy.uniform(*game.shape)
    pi0 = None
    if cfg["init"] == "dirichlet":
        pi0 = dirichlet_init(game.shape, cfg["seed"])
    rep = wind_exact_solve(game, ref, pi0, beta=cfg["beta"], eta=cfg["eta"], T=cfg["T"], tol=cfg["tol"])
    write_csv(_trace_rows(rep.trace, "iter"), run_dir / "trace.csv", ["iter", "residual"])
    write_csv([{"x": x, "y": y, "prob": float(rep.policy.probs[x, y])}
               for x in range(game.num_prompts) for y in range(game.num_responses)],
              run_dir / "policy.csv", ["x", "y", "prob"])
    emit_plot_data([("residual", list(rep.trace.iters), list(rep.trace.column("residual")))],
                   run_dir / "plot.dat", log_y=True, title="fixed-point residual")
    if game.num_prompts == 1:
        log("final policy: (" + ", ".join(f"{p:.6f}" for p in rep.policy.probs[0]) + ")")
    log(f"residual: {rep.residual:.3e} after {rep.iters_used} iterations; duality gap {rep.duality_gap:.3e}")
    if not rep.converged:
        raise NumericalError(f"wind-exact did not reach residual {cfg['tol']:g} in {cfg['T']} iterations")
    return ["trace.csv", "policy.csv", "plot.dat"]


def _cmd_wind_sample(cfg, run_dir, log):
    if cfg["beta"] <= 0:
        raise ValidationError("beta out of range: wind-sample needs beta > 0")
    spec = experiment_spec(Kind.SAMPLED, {**cfg, "grid": "", "beta": cfg["beta"]})
    result = run_experiment(spec)
    rows, series = [], []
    for (seed, M, delta), trace in result.traces.items():
        if delta != 0.0 and spec.delta > 0:
            tag = f"seed={seed} delta={delta!r}"
        else:
            tag = f"seed={seed}"
        rows += _trace_rows(trace, "round", {"seed": seed, "delta": delta})
        series.append((tag, list(trace.iters), list(trace.column("kl_to_star"))))
    columns = ["round", "kl_to_star", "d_l1_to_star", "seed"] + (["delta"] if spec.delta > 0 else [])
    write_csv(rows, run_dir / "trace.csv", columns)
    write_csv(result.aggregate, run_dir / "summary.csv",
              ["M", "delta", "median_kl_to_star", "median_d_l1_to_star"])
    emit_plot_data(series, run_dir / "plot.dat", log_y=True, title="KL(pi* || pi_t) per round")
    for row in result.aggregate:
        log(f"M={row['M']} delta={row['delta']}: median final KL {row['median_kl_to_star']:.3e}, "
            f"d_l1 {row['median_d_l1_to_star']:.3e}")
    return ["trace.csv", "summary.csv", "plot.dat"]


def _cmd_sweep(cfg, run_dir, log):
    spec = experiment_spec(Kind.BETA_SWEEP, cfg)
    result = run_experiment(spec)
    write_csv(result.summary, run_dir / "summary.csv", ["beta", "d_l1_final", "seed"])
    series = []
    for seed in spec.seeds:
        rows = [r for r in result.summary if r["seed"] == seed]
        series.append((f"seed={seed}", [r["beta"] for r in rows], [r["d_l1_final"] for r in rows]))
    emit_plot_data(series, run_dir / "plot.dat", log_y=True, title="final avg l1 between iBoN and WIND vs beta")
    for r in result.summary:
        log(f"seed {r['seed']} beta {r['beta']:g}: {r['d_l1_final']:.3e}")
    return ["summary.csv", "plot.dat"]


def _cmd_bound(cfg, run_dir, log):
    spec = experiment_spec(Kind.BOUND_CHECK, cfg)
    result = run_experiment(spec)
    write_csv(result.summary, run_dir / "summary.csv", ["beta", "measured", "bound", "passed", "c_beta", "seed"])
    for r in result.summary:
        log(f"seed {r['seed']} beta {r['beta']:g}: measured {r['measured']:.3e} bound {r['bound']:.3e} "
            f"{'PASS' if r['passed'] else 'FAIL'}")
    if not all(r["passed"] for r in result.summary):
        raise NumericalError("measured distance exceeded the bound")
    return ["summary.csv"]


def _cmd_nash_gap(cfg, run_dir, log):
    if cfg["beta"] <= 0:
        raise ValidationError("beta out of range: nash-gap needs beta > 0")
    game = _demo_or_random(cfg)
    ref = TabularPolicy.uniform(*game.shape)
    beta = cfg["beta"]
    rep = wind_exact_solve(game, ref, beta=beta, eta=cfg["eta"], T=cfg["T"], tol=cfg["tol"])
    candidates = [("reference", ref), ("best_response_to_reference", best_response(ref, game, ref, beta)),
                  ("wind", rep.policy)]
    rows = [{"policy": name, "duality_gap": duality_gap(p, game, ref, beta),
             "residual": fixed_point_residual(p, game, ref, beta)} for name, p in candidates]
    write_csv(rows, run_dir / "summary.csv", ["policy", "duality_gap", "residual"])
    for r in rows:
        log(f"{r['policy']}: duality gap {r['duality_gap']:.3e}, residual {r['residual']:.3e}")
    return ["summary.csv"]


def selftest(log=print) -> bool:
    """Fast invariant checks plus a round trip through every CSV schema."""
    ok = True

    def check(name, cond):
        nonlocal ok
        ok &= bool(cond)
        log(f"{'PASS' if cond else 'FAIL'} {name}")

    rng = np.random.default_rng(0)
    game = preference_from_rewards(rng.integers(0, 4, size=(3, 6)).astype(float))
    pi = TabularPolicy.from_probs(rng.dirichlet(np.ones(6), size=3))
    pi2 = TabularPolicy.from_probs(rng.dirichlet(np.ones(6), size=3))
    check("P + P^T = 1", np.array_equal(game.pref + np.swapaxes(game.pref, 1, 2), np.ones((3, 6, 6))))
    check("win rate antisymmetry", abs(win_rate(pi, pi2, game) + win_rate(pi2, pi, game) - 1) <= 1e-12)
    dense = np.einsum("xab,xb->xa", game.pref, pi.probs)
    check("payoff matches dense product", np.allclose(payoff_vector(game, pi), dense, atol=1e-13))
    check("BoN n=1 is identity", np.allclose(bon_paper_operator(pi, game, 1).probs, pi.probs))
    check("order-statistics BoN sums to 1", np.allclose(bon_exact_operator(pi, game, 3).probs.sum(1), 1))
    demo = preference_from_rewards(np.array(DEMO_REWARDS))
    u = TabularPolicy.uniform(1, 2)
    rep = wind_exact_solve(demo, u, beta=1.0, eta=1.0, tol=1e-12)
    check("demo fixed point sigma(1/2)", abs(rep.policy.probs[0, 0] - 1 / (1 + math.exp(-0.5))) <= 1e-10)
    step = wind_exact_step(rep.policy, demo, u, 1.0, 1.0)
    check("fixed point is stationary", np.allclose(step.probs, rep.policy.probs, atol=1e-11))
    with tempfile.TemporaryDirectory() as tmp:
        schemas = {
            "no_mixing": ["iter", "d_l1_ibon", "d_l1_wind"],
            "sweep": ["beta", "d_l1_final", "seed"],
            "sampled": ["round", "kl_to_star", "d_l1_to_star", "seed"],
        }
        for name, cols in schemas.items():
            row = {c: (3 if c in ("iter", "round", "seed") else math.pi / (7 + i)) for i, c in enumerate(cols)}
            path = Path(tmp) / f"{name}.csv"
            write_csv([row], path, cols)
            with open(path, newline="") as fh:
                back = list(csv.DictReader(fh))
            same = len(back) == 1 and all(
                (int(back[0][c]) == row[c]) if isinstance(row[c], int) else float(back[0][c]) == row[c]
                for c in cols)
            check(f"csv schema {name} round trip", same)
    return ok


_COMMAND_FUNCS = {
    "ibon": _cmd_ibon,
    "wind-exact": _cmd_wind_exact,
    "wind-sample": _cmd_wind_sample,
    "sweep-beta": _cmd_sweep,
    "bound-check": _cmd_bound,
    "nash-gap": _cmd_nash_gap,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="windbon", description="Iterative best-of-n and WIND on tabular preference games.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value file")
        p.add_argument("--out", help="output directory (default $WIND_OUT or ./out)")
        p.add_argument("--seed", type=int)
        p.add_argument("--beta", type=float)
        p.add_argument("--eta", type=float)
        p.add_argument("--n", type=int)
        p.add_argument("--T", type=int)
        p.add_argument("--M", type=int)
        p.add_argument("--loss", choices=_CHOICES["loss"])
        p.add_argument("--nce-p", dest="nce_p", type=float)
        p.add_argument("--grid", help="LO:HI:COUNT or comma list of beta values")
        p.add_argument("--mode", choices=_CHOICES["mode"])
        p.add_argument("--game", choices=_CHOICES["game"])
        p.add_argument("--num-seeds", dest="num_seeds", type=int)
        p.add_argument("--delta", type=float)
    return parser


def main(argv=None, stdout=None) -> int:
    out_stream = stdout or sys.stdout

    def log(msg):
        print(msg, file=out_stream)

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        if args.command == "selftest":
            return 0 if selftest(log) else 1
        flags = {k: getattr(args, k) for k in _TYPES if hasattr(args, k)}
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(args.command, file_values, flags)
        out = Path(args.out or os.environ.get("WIND_OUT") or "out")
        run_id, run_dir = _new_run_dir(out, args.command, cfg)
        files = _COMMAND_FUNCS[args.command](cfg, run_dir, log)
        _write_manifest(run_dir, run_id, args.command, cfg, files)
        log(f"run {run_id} written to {run_dir}")
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, FloatingPointError, OSError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
