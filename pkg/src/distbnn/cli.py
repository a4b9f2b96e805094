"""Command line entry point.

On failure the last stderr line is ``error: <ErrorClass>: <message>`` and the
exit status is nonzero (2 for bad configuration or usage, 1 otherwise).
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments, mapping
from .experiments import ConfigError, ExperimentConfig

log = logging.getLogger("distbnn")


class UsageError(ValueError):
    pass


def _config(args, mode: str) -> ExperimentConfig:
    overrides = {"seed": args.seed, "scheduler": args.scheduler}
    if args.config:
        cfg = experiments.load_config(args.config, **overrides)
    else:
        cfg = ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})
    if cfg.mode != mode:
        cfg = replace(cfg, mode=mode)
    return cfg


def _out(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out) if args.out else Path(cfg.output_dir)


def cmd_gen_map(args) -> None:
    cfg = _config(args, "multi_agent")
    out = _out(args, cfg)
    grid, trajs, data = experiments.build_environment(cfg)
    out.mkdir(parents=True, exist_ok=True)
    mapping.save_grid(grid, out / "map.pgm")
    for i, (traj, samples) in enumerate(zip(trajs, data.agents)):
        samples.to_csv(out / f"agent{i}_samples.csv")
        lines = ["x,y"] + [f"{float(x)!r},{float(y)!r}" for x, y in traj.waypoints]
        (out / f"agent{i}_trajectory.csv").write_text("\n".join(lines) + "\n")
    data.validation.to_csv(out / "validation.csv")
    print(f"map {grid.height}x{grid.width} free_fraction={grid.free_fraction():.4f} -> {out}")


def cmd_run_single(args) -> None:
    cfg = _config(args, "single_agent")
    out = _out(args, cfg)
    res = experiments.run_single_agent(cfg, out)
    print(f"final_val_loss={res.metrics.final_val_loss():.6f} mean_std={float(res.std.mean()):.6f} -> {out}")


def cmd_run_multi(args) -> None:
    cfg = _config(args, "multi_agent")
    out = _out(args, cfg)
    results = experiments.run_multi_agent(cfg, out)
    for strategy, res in results.items():
        print(f"{strategy} final_val_loss={res.metrics.final_val_loss():.6f}")
    print(f"-> {out}")


def cmd_run_consensus_toy(args) -> None:
    cfg = _config(args, "quadratic_consensus")
    if not args.config:
        cfg = replace(cfg, max_round=200)
    out = _out(args, cfg)
    res = experiments.run_quadratic_consensus(cfg, out, experiments.TOY_CONSENSUS)
    final = res["thetas"][:, -1]
    print("final " + " ".join(f"{v:.6f}" for v in final) + f" target={res['mean']:.6f}")
    if cfg.figures:
        from . import plotting

        plotting.render_run(out)


def cmd_compare(args) -> None:
    if not args.runs:
        raise UsageError("compare needs at least one run directory")
    logs = experiments.collect_run_logs(args.runs)
    report = experiments.compare_strategies(logs)
    out = Path(args.out) if args.out else Path("runs/compare")
    experiments.write_report(report, out, logs)
    sys.stdout.write(report.to_text())


def cmd_render(args) -> None:
    from . import plotting

    if not args.runs:
        raise UsageError("render needs a run directory")
    for d in args.runs:
        if not Path(d).is_dir():
            raise FileNotFoundError(f"{d}: not a directory")
        for p in plotting.render_run(d):
            print(p)


COMMANDS = {
    "gen-map": (cmd_gen_map, "generate a floor plan, trajectories and sensor samples"),
    "run-single": (cmd_run_single, "train one BNN on local data"),
    "run-multi": (cmd_run_multi, "decentralized training under every configured strategy"),
    "run-consensus-toy": (cmd_run_consensus_toy, "scalar quadratic consensus through the peer protocol"),
    "compare": (cmd_compare, "strategy comparison report over run-multi directories"),
    "render": (cmd_render, "PNG figures for existing run directories"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--scheduler", choices=("deterministic", "threads"))
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="distbnn", description="Decentralized Bayesian neural network mapping.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_)
        if name in ("compare", "render"):
            p.add_argument("runs", nargs="*", help="run directories")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code:
            print("error: UsageError: invalid command line", file=sys.stderr)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command][0](args)
    except (ConfigError, UsageError, mapping.MapError) as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 2
    except Exception as exc:  # report every failure as one parsable line
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or "no detail"


if __name__ == "__main__":
    sys.exit(main())
