"""Command-line front end.

Exit codes: 0 ok, 1 check failure, 2 input error, 3 numerical-configuration
error (unstable grid, population explosion).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, checks, hjb
from .labels import ROOT
from .scenario import Scenario, ScenarioError, desk_scenario, load_scenario
from .simulate import ConstantControl, ExplosionError, SimConfig, population_growth_report, riskless, simulate_paths
from .target import BracketError, Problem, dpp_residual, estimate_value

log = logging.getLogger("branch_target")

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


def resolve_threads(flag: int | None) -> int:
    env = os.environ.get("BRANCH_TARGET_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ScenarioError(f"BRANCH_TARGET_THREADS must be an integer, got {env!r}") from None
    if flag:
        return max(1, flag)
    return os.cpu_count() or 1


def _fmt(v) -> str:
    return repr(float(v))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(checks._jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_manifest(out: Path, sc: Scenario, command: str, params: dict, outputs: list[str], started: float) -> dict:
    """Manifest with a ``run_key`` hashing everything that determines the outputs."""
    key_src = json.dumps({"digest": sc.digest, "command": command, "params": checks._jsonable(params),
                          "version": __version__}, sort_keys=True)
    manifest = {
        "command": command,
        "scenario": sc.name,
        "scenario_digest": sc.digest,
        "params": params,
        "tool_version": __version__,
        "run_key": hashlib.sha256(key_src.encode()).hexdigest(),
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
        "outputs": outputs,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def _control_from(text: str):
    if text == "riskless":
        return riskless()
    try:
        return ConstantControl(float(text))
    except ValueError:
        raise ScenarioError(f"control must be 'riskless' or a number, got {text!r}") from None


# ---------------------------------------------------------------- commands


def cmd_simulate(args, sc: Scenario) -> int:
    started = time.perf_counter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = args.paths or sc.sim.paths
    dt = args.dt or sc.sim.dt
    seed = sc.sim.seed if args.seed is None else args.seed
    if n < 1:
        raise ScenarioError("--paths must be >= 1")
    control = _control_from(args.control)
    mu = sc.initial.extend_dim(args.y0)
    cfg = SimConfig(dt=dt, seed=seed)
    batch = simulate_paths(sc.t0, mu, sc.model, sc.law, control, cfg, sc.target.T, n_paths=n,
                           threads=resolve_threads(args.threads))
    term = batch.terminal
    order = np.lexsort((np.array([str(lab) for lab in term.labels]), term.path))
    T = _fmt(sc.target.T)
    rows = [[int(batch.path_indices[term.path[i]]), T, str(term.labels[i]), *map(_fmt, term.x[i]), _fmt(term.y[i])]
            for i in order]
    xcols = [f"x{k}" for k in range(sc.model.dim_x)]
    _write_csv(out / "population.csv", ["path_index", "time", "label", *xcols, "y"], rows)
    eorder = np.lexsort((batch.event_time, batch.event_path))
    erows = [[int(batch.path_indices[batch.event_path[i]]), _fmt(batch.event_time[i]), str(batch.event_parent[i]),
              int(batch.event_k[i])] for i in eorder]
    _write_csv(out / "events.csv", ["path_index", "time", "parent", "k"], erows)
    growth = {
        "n_paths": n,
        "mean_terminal_size": float(batch.terminal_sizes.mean()),
        "mean_sup_size": float(batch.sup_sizes.mean()),
    }
    if n >= 100:
        rep = population_growth_report(batch, sc.law)
        growth.update(se=rep.se, bound=rep.bound, within_bound=rep.within_bound)
    _write_json(out / "growth.json", growth)
    outputs = ["population.csv", "events.csv", "growth.json"]
    write_manifest(out, sc, "simulate", {"paths": n, "dt": dt, "seed": seed, "control": args.control,
                                         "y0": args.y0}, outputs, started)
    print(f"simulated {n} paths; mean sup|V|={growth['mean_sup_size']:.4f}; wrote {out}")
    return EXIT_OK


def _grid_from_args(args, sc: Scenario) -> hjb.GridSpec:
    base = sc.grid_or_default()
    return hjb.GridSpec(
        x_lo=base.x_lo if args.x_lo is None else args.x_lo,
        x_hi=base.x_hi if args.x_hi is None else args.x_hi,
        nx=args.nx or base.nx,
        nt=args.nt or 1,
        depth=base.depth if args.depth is None else args.depth,
        offspring_index_cap=base.offspring_index_cap,
        epsilon=base.epsilon,
    )


def cmd_solve(args, sc: Scenario) -> int:
    started = time.perf_counter()
    out = Path(args.out)
    grid = _grid_from_args(args, sc)
    if not args.nt:
        grid = hjb.with_stable_nt(sc.model, grid, sc.target.T)
    surface = hjb.solve_vi(sc.model, sc.law, sc.target, grid)
    out.mkdir(parents=True, exist_ok=True)
    surface.write_csv(out / "surface.csv")
    x0 = float(sc.initial.points[0, 0])
    report = {
        "value_root_t0_x0": float(surface.value([ROOT], 0.0, [x0])[0]),
        "x0": x0,
        "grid": {"x_lo": grid.x_lo, "x_hi": grid.x_hi, "nx": grid.nx, "nt": grid.nt, "depth": grid.depth},
        "meta": surface.meta,
        "obstacle_excess": hjb.obstacle_violation(surface),
        "facelift_defect": hjb.facelift_defect(surface),
    }
    if sc.fintech is not None:
        report["bracket"] = [sc.fintech.lower_bound(0.0), sc.fintech.upper_bound(0.0)]
    if not args.no_truncation_check:
        deeper = hjb.GridSpec(grid.x_lo, grid.x_hi, grid.nx, grid.nt, grid.depth + 1, grid.offspring_index_cap,
                              grid.epsilon)
        s1 = hjb.solve_vi(sc.model, sc.law, sc.target, deeper)
        report["truncation_max_root_diff"] = float(np.max(np.abs(s1.slice(ROOT) - surface.slice(ROOT))))
    _write_json(out / "solve.json", report)
    write_manifest(out, sc, "solve", report["grid"], ["surface.csv", "solve.json"], started)
    print(f"v(0, x0={x0:g}) = {report['value_root_t0_x0']:.6f}; wrote {out}")
    return EXIT_OK


def cmd_value_mc(args, sc: Scenario) -> int:
    started = time.perf_counter()
    out = Path(args.out)
    n = args.paths or sc.sim.paths
    seed = sc.sim.seed if args.seed is None else args.seed
    if args.bracket:
        bracket = tuple(args.bracket)
    elif sc.fintech is not None:
        bracket = (sc.fintech.lower_bound(sc.t0) - 0.1, sc.fintech.upper_bound(sc.t0) + 0.1)
    else:
        raise ScenarioError("--bracket is required for non-fintech scenarios")
    controls = checks.constant_family()
    if args.with_pde:
        surface = checks.solve_surface(sc)
        controls.append(surface.feedback_control())
    prob = Problem(sc.model, sc.law, sc.target, dt=sc.sim.dt)
    est = estimate_value(prob, sc.t0, sc.initial, controls, bracket, eta=args.eta, n_paths=n, seed=seed,
                         tol=args.tol, threads=resolve_threads(args.threads))
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "bisection.csv", ["y", "control_id", "rate", "SE"],
               [[_fmt(y), cid, _fmt(r), _fmt(se)] for y, cid, r, se in est.trace])
    _write_json(out / "value.json", {"y_hat": est.y_hat, "failure_rate_at_y_hat": est.failure_rate_at_y_hat,
                                     "ci_halfwidth": est.ci_halfwidth, "n_paths": est.n_paths,
                                     "bisection_tol": est.bisection_tol, "control_id": est.control_id,
                                     "bracket": list(est.bracket), "eta": args.eta})
    write_manifest(out, sc, "value-mc", {"paths": n, "seed": seed, "eta": args.eta, "tol": args.tol,
                                         "bracket": list(bracket)}, ["bisection.csv", "value.json"], started)
    print(f"y_hat = {est.y_hat:.4f} via {est.control_id}; failure rate {est.failure_rate_at_y_hat:.4f}")
    return EXIT_OK


def cmd_dpp_check(args, sc: Scenario) -> int:
    started = time.perf_counter()
    out = Path(args.out)
    n = args.paths or sc.sim.paths
    seed = sc.sim.seed if args.seed is None else args.seed
    theta = args.theta if args.theta is not None else sc.t0 + 0.5 * (sc.target.T - sc.t0)
    surface = checks.solve_surface(sc)
    prob = Problem(sc.model, sc.law, sc.target, dt=sc.sim.dt)
    res = dpp_residual(prob, sc.t0, sc.initial, theta, surface, n_paths=n, seed=seed, slack=args.slack,
                       threads=resolve_threads(args.threads))
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "dpp.json", {"violation_rate": res.violation_rate, "out_of_grid_rate": res.out_of_grid_rate,
                                   "n_paths": n, "theta": theta, "slack": args.slack, "y0": res.y0})
    write_manifest(out, sc, "dpp-check", {"paths": n, "seed": seed, "theta": theta, "slack": args.slack},
                   ["dpp.json"], started)
    print(f"violation rate {res.violation_rate:.4f} (off-grid {res.out_of_grid_rate:.4f})")
    return EXIT_OK if res.violation_rate <= args.max_rate else EXIT_CHECK


def cmd_verify(args, sc: Scenario) -> int:
    started = time.perf_counter()
    results = checks.run_suite(sc, level=args.level, echo=print)
    ok = all(r.passed for r in results)
    report = {"level": args.level, "passed": ok, "checks": [r.to_json() for r in results]}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "report.json", report)
        write_manifest(out, sc, "verify", {"level": args.level}, ["report.json"], started)
    else:
        print(json.dumps(checks._jsonable(report), sort_keys=True))
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return EXIT_OK if ok else EXIT_CHECK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="branch-target", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario_required=True):
        if scenario_required:
            sp.add_argument("scenario", help="scenario JSON file")
        else:
            sp.add_argument("scenario", nargs="?", help="scenario JSON file (default: built-in desk case)")
        sp.add_argument("--threads", type=int, default=None)

    s = sub.add_parser("simulate", help="simulate population paths")
    common(s)
    s.add_argument("--paths", type=int, default=None)
    s.add_argument("--dt", type=float, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--control", default="riskless", help="'riskless' or a constant control value")
    s.add_argument("--y0", type=float, default=0.0)
    s.add_argument("--out", default="out/simulate")

    v = sub.add_parser("value-mc", help="Monte Carlo value estimate by bisection")
    common(v)
    v.add_argument("--paths", type=int, default=None)
    v.add_argument("--seed", type=int, default=None)
    v.add_argument("--eta", type=float, default=0.01)
    v.add_argument("--tol", type=float, default=0.05)
    v.add_argument("--bracket", type=float, nargs=2, default=None)
    v.add_argument("--with-pde", action="store_true", help="add the PDE feedback to the control family")
    v.add_argument("--out", default="out/value")

    so = sub.add_parser("solve", help="solve the variational inequality on a truncated tree")
    common(so)
    so.add_argument("--nx", type=int, default=None)
    so.add_argument("--nt", type=int, default=None, help="time steps (default: smallest stable)")
    so.add_argument("--depth", type=int, default=None)
    so.add_argument("--x-lo", type=float, default=None)
    so.add_argument("--x-hi", type=float, default=None)
    so.add_argument("--no-truncation-check", action="store_true")
    so.add_argument("--out", default="out/solve")

    d = sub.add_parser("dpp-check", help="dynamic programming residual with the PDE feedback")
    common(d)
    d.add_argument("--paths", type=int, default=None)
    d.add_argument("--seed", type=int, default=None)
    d.add_argument("--theta", type=float, default=None)
    d.add_argument("--slack", type=float, default=0.05)
    d.add_argument("--max-rate", type=float, default=0.05)
    d.add_argument("--out", default="out/dpp")

    ve = sub.add_parser("verify", help="run the acceptance suite")
    common(ve, scenario_required=False)
    ve.add_argument("--level", choices=["fast", "full"], default="fast")
    ve.add_argument("--out", default=None)
    return p


COMMANDS = {"simulate": cmd_simulate, "value-mc": cmd_value_mc, "solve": cmd_solve, "dpp-check": cmd_dpp_check,
            "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_INPUT
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise ScenarioError("--threads must be >= 1")
        sc = load_scenario(args.scenario) if args.scenario else desk_scenario()
        return COMMANDS[args.command](args, sc)
    except ScenarioError as err:
        print(f"input error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except hjb.CFLError as err:
        print(f"numerical configuration error: {err}; suggested dt <= {err.dt_max:.6g}", file=sys.stderr)
        return EXIT_NUMERIC
    except ExplosionError as err:
        print(f"numerical configuration error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except BracketError as err:
        print(f"input error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as err:
        print(f"input error: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
