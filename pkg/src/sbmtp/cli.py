"""Command-line entry point.

Exit codes: 0 success, 2 invalid input, 3 numerical abort, 4 fd-check above
tolerance.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, NumericalAbort
from .kinematics import load_chain, manipulability, manipulability_jacobian_numeric, resolve_rows
from .sim import DATA_DIR, ScenarioConfig, ScenarioMetrics, load_scenario, run_scenario, write_metrics, write_trace

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_ABORT = 3
EXIT_FD_FAILED = 4

FD_TOLERANCE = 1e-3

log = logging.getLogger("sbmtp")


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _rows(text: str):
    if text in ("full", "position", "orientation"):
        return text
    try:
        return resolve_rows([int(part) for part in text.split(",")])
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"rows must be a named selector or comma-separated indices: {exc}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sbmtp", description="Set-based multi-task priority scenario runner.")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_args(p, with_opt_flag: bool):
        p.add_argument("--scenario", required=True, help="scenario file, or the name of a shipped scenario")
        p.add_argument("--dt", type=float, help="override the integration step (s)")
        p.add_argument("--duration", type=float, help="override the run length (s)")
        p.add_argument("--damping", type=float, help="override the largest damping factor")
        if with_opt_flag:
            p.add_argument("--with-optimization", type=_bool, metavar="{true|false}")

    p_run = sub.add_parser("run", help="run one scenario and write trace.csv and metrics.json")
    scenario_args(p_run, True)
    p_run.add_argument("--out", required=True, help="output directory")

    p_cmp = sub.add_parser("compare", help="run without and with optimization tasks and compare")
    scenario_args(p_cmp, False)
    p_cmp.add_argument("--out", required=True, help="output directory")

    p_val = sub.add_parser("validate", help="load and check a scenario without running it")
    scenario_args(p_val, True)

    p_fd = sub.add_parser("fd-check", help="check the numeric manipulability Jacobian against central differences")
    p_fd.add_argument("--chain", default=str(DATA_DIR / "chain_7dof.json"), help="chain description file")
    p_fd.add_argument("--fd-samples", type=int, default=100, help="number of random configurations")
    p_fd.add_argument("--delta-q", type=float, default=1e-6, help="forward-difference step (rad)")
    p_fd.add_argument("--rows", type=_rows, default="full", help="full, position, orientation or e.g. 0,1")
    p_fd.add_argument("--seed", type=int, default=0)
    return parser


def _configure(args) -> ScenarioConfig:
    cfg = load_scenario(args.scenario)
    changes = {}
    if args.dt is not None:
        changes["dt"] = args.dt
    if args.duration is not None:
        changes["duration"] = args.duration
    if getattr(args, "with_optimization", None) is not None:
        changes["with_optimization"] = args.with_optimization
    if args.damping is not None:
        changes["solver"] = replace(cfg.solver, damping=args.damping)
    return replace(cfg, **changes) if changes else cfg


def _output_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _run_leg(cfg: ScenarioConfig, out: Path) -> ScenarioMetrics:
    trace, metrics = run_scenario(cfg)
    write_trace(trace, out / "trace.csv")
    write_metrics(
        metrics,
        out / "metrics.json",
        scenario=cfg.name,
        with_optimization=cfg.with_optimization,
        dt=cfg.dt,
        duration=cfg.duration,
    )
    return metrics


def cmd_run(args) -> int:
    cfg = _configure(args)
    out = _output_dir(args.out)
    metrics = _run_leg(cfg, out)
    print(f"{cfg.name}: rmse {metrics.tracking_rmse:.6g} m, activations {sum(metrics.activation_count.values())}")
    return EXIT_OK


def _triple(without: float, with_: float) -> dict:
    return {"without": without, "with": with_, "delta": with_ - without}


def comparison(without: ScenarioMetrics, with_: ScenarioMetrics) -> dict:
    """A/B summary; every delta is ``with - without``."""
    ids = sorted(without.activation_count)
    return {
        "rmse": _triple(without.tracking_rmse, with_.tracking_rmse),
        "activations": {i: _triple(without.activation_count[i], with_.activation_count[i]) for i in ids},
        "active_time": {i: _triple(without.active_time_fraction[i], with_.active_time_fraction[i]) for i in ids},
        "joints_reaching_limits": _triple(without.joints_reaching_limits, with_.joints_reaching_limits),
    }


def cmd_compare(args) -> int:
    cfg = _configure(args)
    out = _output_dir(args.out)
    legs = {}
    for label, flag in (("without", False), ("with", True)):
        legs[label] = _run_leg(replace(cfg, with_optimization=flag), _output_dir(out / label))
    report = comparison(legs["without"], legs["with"])
    (out / "comparison.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(
        f"{cfg.name}: rmse {report['rmse']['without']:.6g} -> {report['rmse']['with']:.6g} m, "
        f"joints at limits {report['joints_reaching_limits']['without']} -> {report['joints_reaching_limits']['with']}"
    )
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _configure(args)
    n_set = sum(spec.is_set_based for spec in cfg.hierarchy.tasks)
    print(f"{cfg.name}: ok ({len(cfg.hierarchy.tasks)} tasks, {n_set} set-based, {cfg.chain.dof} joints)")
    return EXIT_OK


def _central_gradient(chain, q, rows, h=1e-5) -> np.ndarray:
    grad = np.empty(chain.dof)
    for j in range(chain.dof):
        step = np.zeros(chain.dof)
        step[j] = h
        grad[j] = (manipulability(chain, q + step, rows) - manipulability(chain, q - step, rows)) / (2 * h)
    return grad


def fd_check(chain, samples: int, delta_q: float, rows, seed: int = 0) -> float:
    """Largest relative gap between the forward-difference and a central-difference gradient."""
    if samples < 1:
        raise ConfigurationError("--fd-samples must be at least 1")
    if not delta_q > 0.0:
        raise ConfigurationError("--delta-q must be positive")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        q = rng.uniform(chain.lower_bounds, chain.upper_bounds)
        numeric = manipulability_jacobian_numeric(chain, q, rows, delta_q)[0]
        oracle = _central_gradient(chain, q, rows)
        scale = max(float(np.max(np.abs(oracle))), 1e-6)
        worst = max(worst, float(np.max(np.abs(numeric - oracle))) / scale)
    return worst


def cmd_fd_check(args) -> int:
    chain = load_chain(args.chain)
    worst = fd_check(chain, args.fd_samples, args.delta_q, args.rows, args.seed)
    print(f"max relative error: {worst:.6e} over {args.fd_samples} samples (delta_q={args.delta_q:g})")
    return EXIT_OK if worst < FD_TOLERANCE else EXIT_FD_FAILED


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "validate": cmd_validate, "fd-check": cmd_fd_check}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
