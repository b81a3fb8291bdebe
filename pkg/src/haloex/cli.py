"""Command line: ``haloex {verify,litmus,sweep,trace}``.

Exit codes: 0 all checks passed, 1 a check failed, 2 bad configuration,
3 internal simulator error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, RunConfig, load_config, with_overrides
from .ddcore import CutoffTooLarge, NoValidDecomposition
from .exchange import MUTATIONS
from .simtime import (SCHEDULES, MachineModel, SweepConfig, calibrate, default_sweep, machine_to_dict,
                      shape_from_layout, simulate_step, sweep, trace_to_csv, write_sweep_csv)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="haloex", description="Halo-exchange simulator: checks, litmus tests, timing.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (needs schema_version)")
    common.add_argument("--seed", type=int, action="append", dest="seeds", help="scheduler seed; repeatable")
    common.add_argument("--out", help="output directory")
    common.add_argument("--schedule", choices=SCHEDULES)
    common.add_argument("--memory-model", choices=("sequential", "weak"), dest="memory_model")
    common.add_argument("--mutate", metavar="NAME", help=f"inject a protocol bug: {', '.join(sorted(MUTATIONS))}")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("verify", parents=[common], help="oracle, schedule, weak-memory, conservation, liveness checks")
    sub.add_parser("litmus", parents=[common], help="memory-model litmus set and mutation detection")
    sub.add_parser("sweep", parents=[common], help="timing metrics over the configured grid, as CSV")
    sub.add_parser("trace", parents=[common], help="one timeline trace per sweep config")
    return p


def resolve_machine(cfg: RunConfig) -> tuple[MachineModel, Optional[dict]]:
    base = MachineModel(**cfg.machine)
    if not cfg.calibrate:
        return base, None
    fit = calibrate(base=base)
    return fit.machine, fit.residuals


def _provenance(cfg: RunConfig, machine: Optional[MachineModel] = None) -> dict:
    d = {"config": {k: v for k, v in cfg.to_dict().items() if k != "out"}}
    if machine is not None:
        d["machine"] = machine_to_dict(machine)
    return d


def _sweep_configs(cfg: RunConfig, only_schedule: Optional[str]) -> list[SweepConfig]:
    scheds = [only_schedule] if only_schedule else cfg.sweep_schedules
    return default_sweep(cfg.sweep_atoms, cfg.sweep_grids, scheds, cfg.gpus_per_node)


def cmd_verify(cfg: RunConfig, out: Path, mutation: Optional[str]) -> int:
    from .suites import run_verify, write_report
    results = run_verify(cfg, mutation)
    path = write_report(out / "verify_report.jsonl", results, cfg.to_dict(), cfg.seeds)
    return _summarize(results, path)


def cmd_litmus(cfg: RunConfig, out: Path, mutation: Optional[str]) -> int:
    from .suites import run_litmus, write_report
    results = run_litmus(cfg, mutation)
    path = write_report(out / "litmus_report.jsonl", results, cfg.to_dict(), cfg.seeds)
    return _summarize(results, path)


def cmd_sweep(cfg: RunConfig, out: Path, schedule: Optional[str]) -> int:
    machine, _ = resolve_machine(cfg)
    rows = sweep(_sweep_configs(cfg, schedule), machine)
    path = write_sweep_csv(out / "sweep.csv", rows, _provenance(cfg, machine))
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def cmd_trace(cfg: RunConfig, out: Path, schedule: Optional[str]) -> int:
    from .simtime import synthetic_shape
    from .suites import build_system
    machine, _ = resolve_machine(cfg)
    head = ["config: " + json.dumps(_provenance(cfg, machine), sort_keys=True)]
    n = 0
    for c in _sweep_configs(cfg, schedule):
        tl = simulate_step(synthetic_shape(c.atoms_per_rank, c.np, c.gpus_per_node), c.schedule, machine)
        name = f"trace_{c.atoms_per_rank}_{'x'.join(map(str, c.np))}_{c.schedule}.csv"
        (out / name).write_text(trace_to_csv(tl, head))
        n += 1
    shape = shape_from_layout(build_system(cfg), cfg.islands())
    for s in ([schedule] if schedule else SCHEDULES):
        (out / f"trace_system_{s}.csv").write_text(trace_to_csv(simulate_step(shape, s, machine), head))
        n += 1
    print(f"wrote {n} traces to {out}")
    return EXIT_OK


def _summarize(results, path: Path) -> int:
    for r in results:
        extra = f" (caught mutation {r.details['caught_mutation']})" if "caught_mutation" in r.details else ""
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}{extra}")
    print(f"report: {path}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        cfg = with_overrides(cfg, seeds=args.seeds, out=args.out, schedule=args.schedule,
                             memory_model=args.memory_model)
        if args.mutate is not None and args.mutate not in MUTATIONS:
            raise ConfigError(f"unknown mutation {args.mutate!r}; known: {', '.join(sorted(MUTATIONS))}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "verify":
            return cmd_verify(cfg, out, args.mutate)
        if args.command == "litmus":
            return cmd_litmus(cfg, out, args.mutate)
        if args.command == "sweep":
            return cmd_sweep(cfg, out, args.schedule)
        return cmd_trace(cfg, out, args.schedule)
    except (ConfigError, NoValidDecomposition, CutoffTooLarge) as exc:
        # geometry problems (cutoff too large, no valid grid) are configuration errors
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
