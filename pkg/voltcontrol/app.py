#!/usr/bin/env python3
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

from . import config as cfgmod
from .errors import (
    CaseError,
    ConfigError,
    OpfBuildError,
    OpfError,
    PowerFlowError,
    ProfileError,
    SimulationError,
    TraceMismatchError,
)
from .network import Network, case_hash, load_case
from .opf import audit_constraints, build_opf, solve_opf
from .powerflow import PowerFlowOptions, nominal_setpoints, scaled_setpoints, solve_power_flow
from .profiles import load_profile_file
from .report import (
    RunManifest,
    summary_text,
    write_comparison,
    write_opf,
    write_power_flow,
    write_trace,
)
from .runlog import configure_logging, read_run_log, run_log_path
from .simulation import ControlConfig, compare_scenarios, cost_savings, run_pair, run_scenario

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_POWER_FLOW = 2
EXIT_OPF = 3

DEFAULT_OUT = "voltcontrol-out"


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--case", type=Path, default=cfgmod.REFERENCE_CASE, help="case file (JSON)")
    common.add_argument("--profile", type=Path, default=None, help="profile CSV (time_h,key,value)")
    common.add_argument("--config", type=Path, default=None, help="scenario configuration (JSON)")
    common.add_argument("--out", type=Path, default=Path(DEFAULT_OUT), help="output directory")
    common.add_argument("--seed-ignored", type=int, default=None, help="reserved; the simulator is deterministic")
    common.add_argument("--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="voltcontrol", description="Hierarchical voltage control simulator")
    parser.add_argument("--show-log", action="store_true", help="print the run log and exit")
    sub = parser.add_subparsers(dest="command")

    pf = sub.add_parser("pf", parents=[common], help="solve one power flow")
    pf.add_argument("--hour", type=float, default=None, help="scale loads and wind with the profile at this hour")

    opf = sub.add_parser("opf", parents=[common], help="solve the loss-minimising OPF")
    opf.add_argument("--hour", type=float, default=None)

    for name, text in (("compare", "baseline vs controlled daily run"), ("run", "one daily run")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--mode", choices=("baseline", "svr_only", "svr_tvr"), default=None)
    return parser


def _scenario(args) -> ControlConfig:
    if args.config is not None:
        return cfgmod.load_scenario(args.config)
    if cfgmod.SCENARIO_PATH.exists():
        return cfgmod.load_scenario()
    return cfgmod.load_scenario(cfgmod.REFERENCE_SCENARIO)


def _profile_path(args) -> Path:
    return args.profile if args.profile is not None else cfgmod.REFERENCE_PROFILE


def _setpoints(args, net: Network):
    base = nominal_setpoints(net)
    if getattr(args, "hour", None) is None:
        return base
    if not 0 <= args.hour <= 24:
        raise ConfigError("--hour must lie in [0, 24]")
    profile = load_profile_file(_profile_path(args), net)
    return scaled_setpoints(net, profile, args.hour, base=base)


def _manifest(args, net: Network, with_profile: bool) -> RunManifest:
    return RunManifest(
        command=args.command,
        case_path=str(args.case),
        profile_path=str(_profile_path(args)) if with_profile else None,
        config_path=str(args.config) if args.config is not None else None,
        out_dir=str(args.out),
        case_hash=case_hash(net),
    )


def cmd_pf(args) -> int:
    net = load_case(args.case)
    manifest = _manifest(args, net, args.hour is not None)
    started = time.monotonic()
    sol = solve_power_flow(net, _setpoints(args, net), PowerFlowOptions())
    if not sol.converged:
        print(
            f"power flow did not converge after {sol.iterations} iterations (mismatch {sol.max_mismatch_pu:.3e} pu)",
            file=sys.stderr,
        )
        return EXIT_POWER_FLOW
    manifest.add(*write_power_flow(args.out, net, sol, time_s=(args.hour or 0.0) * 3600.0))
    manifest.wall_clock_s = time.monotonic() - started
    manifest.write()
    print(f"converged in {sol.iterations} iterations; losses {sol.losses_mw:.4f} MW")
    return EXIT_OK


def cmd_opf(args) -> int:
    net = load_case(args.case)
    scenario = _scenario(args)
    manifest = _manifest(args, net, args.hour is not None)
    started = time.monotonic()
    op = solve_power_flow(net, _setpoints(args, net), scenario.power_flow)
    if not op.converged:
        print("operating point power flow did not converge", file=sys.stderr)
        return EXIT_POWER_FLOW
    prob = build_opf(net, op, scenario.opf)
    sol = solve_opf(prob, scenario.opf)
    manifest.add(*write_opf(args.out, net, sol))
    manifest.wall_clock_s = time.monotonic() - started
    manifest.write()
    print(f"status {sol.status} after {sol.iterations} iterations")
    print(f"losses {sol.objective_mw:.6f} MW (operating point {sol.start_losses_mw:.6f} MW)")
    print(
        f"KKT: stationarity {sol.kkt.stationarity:.2e}, primal {sol.kkt.primal:.2e}, "
        f"complementarity {sol.kkt.complementarity:.2e}"
    )
    if not sol.optimal:
        print(f"OPF failed ({sol.status}); best iterate written to {args.out}", file=sys.stderr)
        return EXIT_OPF
    for msg in audit_constraints(prob, sol):
        logger.warning("constraint audit: %s", msg)
    return EXIT_OK


def cmd_run(args) -> int:
    net = load_case(args.case)
    profile = load_profile_file(_profile_path(args), net)
    scenario = _scenario(args)
    if args.mode is not None:
        scenario = scenario.with_mode(args.mode)
    manifest = _manifest(args, net, True)
    started = time.monotonic()
    trace = run_scenario(net, profile, scenario)
    manifest.add(*write_trace(args.out, net, trace))
    manifest.wall_clock_s = time.monotonic() - started
    manifest.write()
    print(f"{trace.mode}: {len(trace.times_s)} samples, {trace.tvr_updates} TVR updates")
    return EXIT_OK


def cmd_compare(args) -> int:
    net = load_case(args.case)
    profile = load_profile_file(_profile_path(args), net)
    scenario = _scenario(args)
    if args.mode is not None:
        scenario = scenario.with_mode(args.mode)
    if scenario.mode == "baseline":
        raise ConfigError("compare needs a controlled mode (svr_only or svr_tvr)")
    manifest = _manifest(args, net, True)
    started = time.monotonic()
    baseline, controlled = run_pair(net, profile, scenario)
    cmp = compare_scenarios(baseline, controlled)
    savings = cost_savings(cmp, scenario.price_eur_per_mwh)
    text = summary_text(cmp, savings, scenario.price_eur_per_mwh, controlled.tvr_updates, scenario.mode)

    manifest.add(*write_trace(args.out / "baseline", net, baseline))
    manifest.add(*write_trace(args.out / "controlled", net, controlled))
    manifest.add(write_comparison(args.out, cmp))
    summary_path = args.out / "summary.txt"
    summary_path.write_text(text, encoding="utf-8")
    manifest.add(summary_path)
    manifest.wall_clock_s = time.monotonic() - started
    manifest.write()
    print(text, end="")
    return EXIT_OK


COMMANDS = {"pf": cmd_pf, "opf": cmd_opf, "run": cmd_run, "compare": cmd_compare}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if "--show-log" in argv:
        text = read_run_log()
        if not text:
            print(f"Run log not found: {run_log_path()}")
            return EXIT_OK
        print(text, end="")
        return EXIT_OK

    args = _parser().parse_args(argv)
    if args.command is None:
        _parser().print_help()
        return EXIT_INPUT
    configure_logging(args.verbose)
    logger.info("voltcontrol %s: case %s", args.command, args.case)

    try:
        return COMMANDS[args.command](args)
    except (CaseError, ProfileError, ConfigError, OpfBuildError, TraceMismatchError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except SimulationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_OPF if e.kind == "opf" else EXIT_POWER_FLOW
    except PowerFlowError as e:
        print(f"power flow failed: {e}", file=sys.stderr)
        return EXIT_POWER_FLOW
    except OpfError as e:
        print(f"OPF failed: {e}", file=sys.stderr)
        return EXIT_OPF
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
