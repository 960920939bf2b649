"""Command-line entry point.

Subcommands: ``bench-selection`` (selection-quality study vs the brute-force
optimum), ``simulate`` (continual FedAvg grid with replay strategies),
``coord-serve`` / ``coord-client`` (networked coordination sessions), and
``report`` (aggregate run CSVs).  Configuration comes from a YAML file with
flag overrides; flags win.  Exit codes: 0 success, 2 config error, 3 runtime
failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from collections import defaultdict

import numpy as np
import yaml

from . import bench, flsim
from .gradients import GradientSet
from .qp import SolverOptions
from .strategies import KINDS, StrategySpec
from .transport import run_tcp_client, serve_coordination


class ConfigError(ValueError):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a mapping")
    return cfg


def _take(cfg: dict, allowed: set) -> None:
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")


def _parse_strategy(entry, seed: int):
    if isinstance(entry, str):
        entry = {"kind": entry}
    if not isinstance(entry, dict) or "kind" not in entry:
        raise ConfigError(f"bad strategy entry: {entry!r}")
    kind = entry["kind"]
    if kind == "coordinated":
        _take(entry, {"kind", "iterations"})
        return flsim.CoordinatedSpec(int(entry.get("iterations", 1)), seed)
    if kind not in KINDS:
        raise ConfigError(f"unknown strategy kind {kind!r}")
    _take(entry, {"kind", "p"})
    try:
        return StrategySpec(kind, entry.get("p"), seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _parse_solver(cfg: dict):
    """Optional ``solver`` config section -> SolverOptions (None = defaults)."""
    section = dict(cfg.get("solver", {}))
    if not section:
        return None
    _take(section, {"max_iters", "tolerance", "power_iter_steps",
                    "pg_tolerance"})
    try:
        return SolverOptions(**section)
    except TypeError as exc:
        raise ConfigError(f"bad solver options: {exc}") from None


def _header(fh, config: dict) -> None:
    fh.write("# config: " + json.dumps(config, sort_keys=True) + "\n")


def cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    _take(cfg, {"dim", "budget", "n_values", "trials", "poisson_rate", "seed",
                "strategies", "output_dir", "solver"})
    solver_opts = _parse_solver(cfg)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    trials = args.trials if args.trials is not None else int(cfg.get("trials", 5000))
    n_values = cfg.get("n_values", [10, 30, 50])
    out_dir = args.output_dir or cfg.get("output_dir", ".")
    os.makedirs(out_dir, exist_ok=True)
    strat_cfg = cfg.get("strategies",
                        ["naive_uniform", "greedy_gss", "relaxed_convex", "relaxed_nonconvex"])
    strategies = [_parse_strategy(s, seed) for s in strat_cfg]
    if any(isinstance(s, flsim.CoordinatedSpec) for s in strategies):
        raise ConfigError("the selection benchmark is single-client; "
                          "coordinated strategies are not applicable")
    summary = {"seed": seed, "trials": trials, "runs": {}}
    for n in n_values:
        mix = bench.MixtureConfig(dim=int(cfg.get("dim", 300)), n=int(n),
                                  budget=int(cfg.get("budget", 5)), trials=trials,
                                  poisson_rate=float(cfg.get("poisson_rate", 4.0)),
                                  seed=seed)
        path = os.path.join(out_dir, f"bench_n{n}.csv")
        result = bench.run_selection_benchmark(mix, strategies, csv_path=path,
                                               solver_opts=solver_opts)
        summary["runs"][f"n={n}"] = result.summary()
        print(f"wrote {path}")
    spath = os.path.join(out_dir, "bench_summary.json")
    with open(spath, "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"wrote {spath}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    _take(cfg, {"seed", "seeds", "strategies", "budgets", "drift", "fedavg",
                "output_dir", "solver"})
    solver_opts = _parse_solver(cfg)
    base_seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    num_seeds = args.seeds if args.seeds is not None else int(cfg.get("seeds", 1))
    budgets = [int(n) for n in cfg.get("budgets", [0, 5, 20])]
    drift_cfg = dict(cfg.get("drift", {}))
    _take(drift_cfg, {f for f in flsim.SyntheticDriftConfig.__dataclass_fields__})
    fed_cfg = dict(cfg.get("fedavg", {}))
    _take(fed_cfg, {"rounds_per_period", "epochs", "lr", "batch"})
    out_dir = args.output_dir or cfg.get("output_dir", ".")
    os.makedirs(out_dir, exist_ok=True)

    seeds = [base_seed + k for k in range(num_seeds)]
    strat_entries = cfg.get("strategies", ["naive_uniform", "relaxed_nonconvex"])
    resolved = {"seed": base_seed, "seeds": num_seeds, "budgets": budgets,
                "strategies": strat_entries, "drift": drift_cfg,
                "fedavg": fed_cfg, "solver": dict(cfg.get("solver", {}))}

    def sim_config(budget):
        drift = flsim.SyntheticDriftConfig(**drift_cfg)
        return flsim.SimConfig(drift=drift, budget=budget, solver=solver_opts,
                               **fed_cfg)

    rows = []
    baselines = {}
    for seed in seeds:
        baselines[seed] = flsim.run_simulation(sim_config(0), None, seed)
    for seed in seeds:
        for entry in strat_entries:
            for budget in budgets:
                if budget == 0:
                    continue
                strategy = _parse_strategy(entry, seed)
                res = flsim.run_simulation(sim_config(budget), strategy, seed)
                rows.extend(_report_rows(res, baselines[seed]))
        rows.extend(_report_rows(baselines[seed], baselines[seed]))

    path = os.path.join(out_dir, "runreport.csv")
    with open(path, "w", newline="") as fh:
        _header(fh, resolved)
        writer = csv.writer(fh)
        writer.writerow(["strategy", "N", "seed", "eval_period", "metric", "rcp",
                         "forgetting"])
        writer.writerows(rows)
    print(f"wrote {path}")
    return 0


def _report_rows(res: flsim.SimResult, baseline: flsim.SimResult):
    """Per-period and overall rows; RCP is against the matched-seed baseline."""
    rows = []
    forgettings = []
    periods = res.metric.shape[0]
    for p in range(periods):
        metric = float(res.metric[-1, p])
        base = float(baseline.metric[-1, p])
        fgt = res.forgetting(p) if periods >= 2 else 0.0
        forgettings.append(fgt)
        rows.append([res.strategy, res.budget, res.seed, p + 1,
                     f"{metric:.12g}", f"{flsim.rcp(metric, base):.12g}",
                     f"{fgt:.12g}"])
    rows.append([res.strategy, res.budget, res.seed, "all",
                 f"{res.overall:.12g}",
                 f"{flsim.rcp(res.overall, baseline.overall):.12g}",
                 f"{float(np.mean(forgettings)):.12g}"])
    return rows


def cmd_report(args) -> int:
    cells = defaultdict(lambda: defaultdict(list))  # (strategy, N) -> period -> values
    for path in args.csv:
        with open(path) as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        reader = csv.DictReader(lines)
        count = 0
        for row in reader:
            try:
                key = (row["strategy"], int(row["N"]))
                cells[key][row["eval_period"]].append(
                    (float(row["rcp"]), float(row["forgetting"])))
                count += 1
            except (KeyError, TypeError, ValueError):
                raise ConfigError(f"malformed run report {path}") from None
        if count == 0:
            raise ConfigError(f"no data rows in {path}")
    out = {}
    for (strategy, budget), per_period in sorted(cells.items()):
        entry = {}
        for period, vals in sorted(per_period.items()):
            arr = np.array(vals)
            entry[period] = {
                "rcp_mean": float(arr[:, 0].mean()),
                "rcp_std": float(arr[:, 0].std()),  # population std
                "forgetting_mean": float(arr[:, 1].mean()),
                "forgetting_std": float(arr[:, 1].std()),
                "seeds": len(vals),
            }
        out[f"{strategy}/N={budget}"] = entry
    text = json.dumps(out, indent=2)
    print(text)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text + "\n")
    return 0


def cmd_coord_serve(args) -> int:
    report = serve_coordination((args.bind_host, args.bind_port), args.clients,
                                max_rounds=args.max_rounds, tol=args.tol,
                                timeout=args.timeout_secs)
    print(json.dumps({
        "rounds_run": report.rounds_run,
        "relaxed_objective_per_round": list(report.relaxed_objective_per_round),
        "converged": report.converged,
        "theorem1_residual": report.theorem1_residual,
    }, indent=2))
    return 0


def cmd_coord_client(args) -> int:
    from .coordination import ClientSelectionState

    with open(args.gradients, "rb") as fh:
        g = GradientSet.from_bytes(fh.read())
    state = ClientSelectionState(args.client_id, g, args.budget)
    selection, _ = run_tcp_client((args.connect_host, args.connect_port), state,
                                  timeout=args.timeout_secs)
    print(json.dumps({"client_id": args.client_id,
                      "selected": sorted(selection.chosen)}))
    return 0


def _host_port(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="replaycoord")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench-selection", help="selection quality vs brute force")
    p.add_argument("--config")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("simulate", help="continual FedAvg simulation grid")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="aggregate run report CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--output")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("coord-serve", help="run a coordination server")
    p.add_argument("--bind", type=_host_port, required=True, dest="bind")
    p.add_argument("--clients", type=int, required=True)
    p.add_argument("--max-rounds", type=int, default=4)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--timeout-secs", type=float, default=30.0)
    p.set_defaults(func=cmd_coord_serve)

    p = sub.add_parser("coord-client", help="join a coordination session")
    p.add_argument("--connect", type=_host_port, required=True, dest="connect")
    p.add_argument("--client-id", required=True)
    p.add_argument("--gradients", required=True, help="gradient-set blob file")
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--timeout-secs", type=float, default=30.0)
    p.set_defaults(func=cmd_coord_client)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "bind", None):
        args.bind_host, args.bind_port = args.bind
    if getattr(args, "connect", None):
        args.connect_host, args.connect_port = args.connect
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
