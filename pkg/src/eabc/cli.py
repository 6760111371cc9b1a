"""Command-line entry point.

    eabc simulate --scenario rear-tracking --controller eabc --out runs/ --plot
    eabc compare --scenario rear-tracking --controller eabc,ecbc,impc,mpc --seeds 0-4
    eabc equilibrium --delta-ref 0.3 --d-phi 0

Exit status: 0 success, 1 run fault (fall, infeasible equilibrium, solver
failure), 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, with_scenario
from .controllers import VARIANTS
from .equilibrium import InfeasibleEquilibriumError, Reference, track_stand_equilibrium
from .harness import SCENARIOS, aggregate_metrics, build_scenario, run_closed_loop

EXIT_OK, EXIT_FAULT, EXIT_CONFIG = 0, 1, 2


def parse_seeds(text: str) -> list[int]:
    """``"3"``, ``"0,2,5"`` or ``"0-4"`` (inclusive)."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        m = re.fullmatch(r"(\d+)-(\d+)", part)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if hi < lo:
                raise ConfigError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        elif part.isdigit():
            seeds.append(int(part))
        else:
            raise ConfigError(f"bad seed {part!r}; use e.g. 0,1,2 or 0-4")
    if not seeds:
        raise ConfigError("no seeds given")
    return seeds


def _controllers(text: str) -> list[str]:
    names = [c.strip().lower() for c in text.split(",") if c.strip()]
    for name in names:
        if name not in VARIANTS:
            raise ConfigError(f"unknown controller {name!r}; available: {list(VARIANTS)}")
    return names


def _resolve(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "delta_ref", None) is not None:
        try:
            config = replace(config, harness=replace(config.harness, delta_ref=args.delta_ref))
        except ValueError as exc:
            raise ConfigError(f"--delta-ref: {exc}") from None
    if getattr(args, "scenario", None):
        config = with_scenario(config, name=args.scenario)
    if getattr(args, "command", "") in ("simulate", "compare"):
        name = config.scenario_name
        if name is None:
            raise ConfigError("no scenario given (use --scenario or the config's scenario.name)")
        if name not in SCENARIOS:
            raise ConfigError(f"unknown scenario {name!r}; available: {sorted(SCENARIOS)}")
    return config


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=False) + "\n")


def _run_one(config: RunConfig, variant: str, seed: int, out: Path, plot: bool):
    try:
        scenario = build_scenario(config.scenario_name, config.robot, config.harness, seed,
                                  **config.scenario_overrides())
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario {config.scenario_name!r}: {exc}") from None
    log, metrics = run_closed_loop(scenario, variant, config.robot, config.ocp,
                                   config.observer, config.harness)
    stem = f"{scenario.name}_{variant}_seed{seed}"
    log.write_csv(out / f"{stem}.csv")
    record = {"scenario": scenario.name, "controller": variant, "seed": seed,
              "description": scenario.description, **metrics.to_dict()}
    _write_json(out / f"{stem}_metrics.json", record)
    if plot:
        from .plotting import write_run_plots
        write_run_plots(log, out, prefix=f"{stem}_")
    return metrics


def _failure_line(variant: str, seed: int, metrics) -> str:
    return (f"{variant} seed {seed}: {metrics.failure or 'balance lost'} "
            f"at t={metrics.failure_time if metrics.failure_time is not None else float('nan'):.3f} s")


def cmd_simulate(args) -> int:
    config = _resolve(args)
    variants = _controllers(args.controller)
    if len(variants) != 1:
        raise ConfigError("simulate takes exactly one controller")
    seeds = parse_seeds(args.seeds) if args.seeds else [int(config.scenario.get("seed", 0))]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", config.to_dict())
    status = EXIT_OK
    for seed in seeds:
        m = _run_one(config, variants[0], seed, out, args.plot)
        print(f"{config.scenario_name} {variants[0]} seed {seed}: "
              f"position MAE {m.mae_position:.6f} m, max |e_s| {m.max_abs_position_error:.6f} m, "
              f"max |phi| {m.max_roll:.4f} rad")
        if not m.balance_maintained:
            print(_failure_line(variants[0], seed, m), file=sys.stderr)
            status = EXIT_FAULT
    return status


def ranking_table(aggregate: dict, key: str = "mae_position") -> str:
    rows = sorted(aggregate.items(), key=lambda kv: kv[1][key]["mean"])
    best = rows[0][1][key]["mean"]
    lines = [f"{'rank':<5}{'controller':<12}{'MAE s [m]':>22}{'RMSE s [m]':>22}"
             f"{'MAE delta [rad]':>22}{'ratio':>9}{'balanced':>10}"]
    for rank, (name, agg) in enumerate(rows, 1):
        def cell(k):
            return f"{agg[k]['mean']:.3e} +/- {agg[k]['std']:.1e}"
        ratio = agg[key]["mean"] / best if best > 0 else float("nan")
        lines.append(f"{rank:<5}{name:<12}{cell('mae_position'):>22}{cell('rmse_position'):>22}"
                     f"{cell('mae_steering'):>22}{ratio:>9.2f}"
                     f"{str(agg['balance_maintained']) + '/' + str(agg['runs']):>10}")
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    config = _resolve(args)
    variants = _controllers(args.controller)
    if len(variants) < 2:
        raise ConfigError("compare needs at least two controllers")
    seeds = parse_seeds(args.seeds or "0-4")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", config.to_dict())
    results: dict[str, list] = {}
    status = EXIT_OK
    for variant in variants:
        for seed in seeds:
            m = _run_one(config, variant, seed, out, args.plot)
            results.setdefault(variant, []).append(m)
            if not m.balance_maintained:
                print(_failure_line(variant, seed, m), file=sys.stderr)
                status = EXIT_FAULT
    aggregate = {v: aggregate_metrics(ms) for v, ms in results.items()}
    _write_json(out / "aggregate.json", {"scenario": config.scenario_name, "seeds": seeds,
                                         "controllers": aggregate})
    table = ranking_table(aggregate)
    (out / "ranking.txt").write_text(table)
    print(table, end="")
    return status


def cmd_equilibrium(args) -> int:
    config = _resolve(args)
    delta_ref = args.delta_ref if args.delta_ref is not None else config.harness.delta_ref
    d_hat = np.array([args.d_r, args.d_phi])
    try:
        ref = Reference(0.0, delta_ref)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        eq = track_stand_equilibrium(ref, d_hat, config.robot)
    except InfeasibleEquilibriumError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        print(json.dumps({"feasible": False, "error": str(exc)}))
        return EXIT_FAULT
    print(json.dumps({"x_e": eq.x_e.tolist(), "u_e": eq.u_e.tolist(), "phi_e": eq.phi_e,
                      "residual": eq.residual, "feasible": eq.feasible}, indent=2))
    return EXIT_OK if eq.feasible else EXIT_FAULT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eabc", description=__doc__.splitlines()[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, multi: bool):
        p.add_argument("--scenario", help=f"built-in scenario: {', '.join(sorted(SCENARIOS))}")
        p.add_argument("--controller", default="eabc,ecbc,impc,mpc" if multi else "eabc",
                       help="controller variant" + ("s, comma separated" if multi else ""))
        p.add_argument("--config", help="JSON config with robot/observer/ocp/harness/scenario sections")
        p.add_argument("--out", default="runs", help="output directory (default: runs)")
        p.add_argument("--seeds", help="seed list, e.g. 0,1,2 or 0-4")
        p.add_argument("--plot", action="store_true", help="write SVG plots per run")
        p.add_argument("--delta-ref", type=float, help="track-stand steering angle [rad]")

    p = sub.add_parser("simulate", help="run one scenario with one controller")
    common(p, multi=False)
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("compare", help="controller x seed sweep with aggregated metrics")
    common(p, multi=True)
    p.set_defaults(func=cmd_compare)
    p = sub.add_parser("equilibrium", help="disturbed equilibrium for a given disturbance estimate")
    p.add_argument("--config")
    p.add_argument("--delta-ref", type=float)
    p.add_argument("--d-phi", type=float, default=0.0, help="roll disturbance estimate [N m]")
    p.add_argument("--d-r", type=float, default=0.0, help="rear-wheel disturbance estimate [N m]")
    p.set_defaults(func=cmd_equilibrium)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2 already
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
