"""Command-line entry point.

Subcommands:

* generate  materialize datasets from a generate config
* train     one training run; writes model.json and history.csv
* sweep     grid experiments: noise_sweep, ndata_sweep, cmnist_analogue,
            projection_check
* analyze   theory checks: norm_sweep (restricted-fit norms and the gap
            condition) and boundary_export (2-d boundary geometry)
* curves    coefficient_curves (penalty gradient factor tabulation)

Exit codes: 0 on success, 2 on a config error, 3 on a numerical failure
during training.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, TrainingDivergedError
from .experiments import (
    EXPERIMENT_KINDS,
    ExperimentConfig,
    run_experiment,
    run_generate,
    run_single_training,
)

SWEEP_KINDS = ("noise_sweep", "ndata_sweep", "cmnist_analogue", "projection_check")
ANALYZE_KINDS = ("norm_sweep", "boundary_export")
CURVE_KINDS = ("coefficient_curves",)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noisedg",
        description="label noise vs. spurious features: data, training, sweeps",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("generate", "write datasets described by the config"),
        ("train", "run one training job and save model and history"),
        ("sweep", f"run a grid experiment ({', '.join(SWEEP_KINDS)})"),
        ("analyze", f"run a theory check ({', '.join(ANALYZE_KINDS)})"),
        ("curves", "tabulate penalty gradient-factor curves"),
    ):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", required=True, help="path to a JSON config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed-offset", type=int, default=0,
                       help="added to every seed in the config")
    return parser


def _load_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


def _run_kinded(path: str, out: str, offset: int, allowed: tuple[str, ...],
                command: str) -> None:
    cfg = ExperimentConfig.from_json(path).with_seed_offset(offset)
    if cfg.experiment not in allowed:
        hint = {k: cmd for cmd, kinds in
                (("sweep", SWEEP_KINDS), ("analyze", ANALYZE_KINDS), ("curves", CURVE_KINDS))
                for k in kinds}.get(cfg.experiment)
        raise ConfigError(
            f"experiment {cfg.experiment!r} is not run by {command!r}"
            + (f"; use the {hint!r} subcommand" if hint else "")
        )
    result = run_experiment(cfg)
    result.write_outputs(out)


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            run_generate(_load_json(args.config), args.out, args.seed_offset)
        elif args.command == "train":
            run_single_training(_load_json(args.config), args.out, args.seed_offset)
        elif args.command == "sweep":
            _run_kinded(args.config, args.out, args.seed_offset, SWEEP_KINDS, "sweep")
        elif args.command == "analyze":
            _run_kinded(args.config, args.out, args.seed_offset, ANALYZE_KINDS, "analyze")
        elif args.command == "curves":
            _run_kinded(args.config, args.out, args.seed_offset, CURVE_KINDS, "curves")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
