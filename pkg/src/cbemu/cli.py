"""``bench`` command line: single runs and weak-scaling sweeps.

Exit codes: 0 success, 1 usage or configuration error, 2 run failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .bench import (
    MODES,
    BenchError,
    CheckpointPlan,
    Scenario,
    ScaleRow,
    bench_params,
    emit_results,
    run_scenario,
    speedup_table,
    weak_scaling,
)
from .ckpt import CheckpointError, CheckpointLevel
from .mprt import MPRTError
from .platform import ConfigError, PlatformConfig, default_config, load_platform_config
from .xpic.fields import SolverError

EXIT_OK, EXIT_USAGE, EXIT_RUN = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _node_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad node list {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cells-per-node", type=int, default=4096)
    p.add_argument("--particles-per-cell", type=int, default=16)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, help="platform config (JSON)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bench", description="Cluster-Booster emulator benchmarks")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("--mode", choices=MODES, required=True)
    run.add_argument("--nodes", type=int, required=True)
    run.add_argument("--ckpt-level", choices=[lv.name.lower() for lv in CheckpointLevel])
    run.add_argument("--ckpt-interval", type=float, help="virtual seconds between checkpoints")
    run.add_argument("--no-trace", action="store_true", help="skip writing trace.txt")
    _common(run)

    scale = sub.add_parser("scale", help="weak-scaling sweep")
    scale.add_argument("--modes", default="all", help="'all' or a comma list of modes")
    scale.add_argument("--nodes", type=_node_list, default=[1, 2, 4, 8])
    _common(scale)
    return parser


def _load_config(path: Path | None) -> PlatformConfig:
    if path is None:
        return default_config()
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return load_platform_config(text)


def _cmd_run(args, cfg: PlatformConfig) -> None:
    if (args.ckpt_level is None) != (args.ckpt_interval is None):
        raise UsageError("--ckpt-level and --ckpt-interval go together")
    if args.nodes < 1:
        raise UsageError("--nodes must be >= 1")
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    plan = None
    if args.ckpt_level is not None:
        if not args.ckpt_interval > 0:
            raise UsageError("--ckpt-interval must be positive")
        plan = CheckpointPlan(CheckpointLevel[args.ckpt_level.upper()], args.ckpt_interval,
                              str(out / "ckpt"))
    params = _params(args, args.nodes)
    rep = run_scenario(Scenario(args.mode, args.nodes, params, plan), cfg,
                       trace=not args.no_trace)
    base = rep.total
    if args.nodes > 1:
        one = run_scenario(Scenario(args.mode, 1, _params(args, 1)), cfg)
        base = one.total
    eff = base / rep.total if rep.total > 0 else 1.0
    row = ScaleRow(args.mode, args.nodes, rep.total, rep.field, rep.particle, rep.exchange,
                   eff * args.nodes, eff)
    emit_results([row], out)
    (out / "steps.csv").write_text(rep.trace.to_csv())
    if not args.no_trace:
        (out / "trace.txt").write_text("\n".join(rep.trace_lines) + "\n")
    print(f"{args.mode} nodes={args.nodes} total={rep.total * 1e6:.3f}us "
          f"field={rep.field * 1e6:.3f}us particle={rep.particle * 1e6:.3f}us "
          f"exchange={rep.exchange * 1e6:.3f}us")
    if rep.checkpoint_epochs:
        print(f"checkpoints at steps {rep.checkpoint_epochs}")


def _params(args, nodes: int):
    try:
        return bench_params(nodes, args.cells_per_node, args.particles_per_cell,
                            args.steps, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _cmd_scale(args, cfg: PlatformConfig) -> None:
    modes = MODES if args.modes == "all" else tuple(m.strip() for m in args.modes.split(","))
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise UsageError(f"unknown modes: {', '.join(bad)}")
    _params(args, 1)
    try:
        reports: dict = {}
        rows = weak_scaling(modes, args.nodes, cfg, args.cells_per_node,
                            args.particles_per_cell, args.steps, args.seed, reports)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise UsageError(str(exc)) from exc
    emit_results(rows, args.out)
    lines = ["nodes,metric,value"]
    for n in args.nodes:
        present = [reports[(m, n)] for m in modes if (m, n) in reports]
        for key, value in speedup_table(present).items():
            lines.append(f"{n},{key},{value:.6f}")
    (args.out / "speedups.csv").write_text("\n".join(lines) + "\n")
    for r in rows:
        print(f"{r.mode:8s} {r.nodes:3d} total={r.total * 1e6:12.3f}us eff={r.efficiency:.3f}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _load_config(args.config)
        if args.command == "run":
            _cmd_run(args, cfg)
        else:
            _cmd_scale(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BenchError, SolverError, MPRTError, CheckpointError, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
