# scripts/run_experiment.py
import argparse
import sys
from typing import List, Optional

from dotenv import load_dotenv

from src.services.experiment_runner import cmd_analyze, cmd_noise, cmd_sweep, cmd_train
from src.utils.config_loader import load_config
from src.utils.errors import AggregationError, ConfigError, MissingAnalysisError, MlnsError
from src.utils.file_io import COMPLETED
from src.utils.logging_setup import configure_logging

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_DIVERGED = 3


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML file with flat keys, layered over config/experiment.yaml")
    parser.add_argument("--out", dest="out_dir", help="Output directory")
    parser.add_argument("--seed", dest="seeds", type=int, action="append", help="Seed (repeatable)")
    parser.add_argument("--mu-conv", dest="mu_conv", type=float, action="append", help="Conv weight mu (repeatable)")
    parser.add_argument("--mu-other", dest="mu_other", type=float, help="mu for every other parameter")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--variant", dest="variants", action="append", help="Network variant (repeatable)")
    parser.add_argument("--paper-scale", dest="paper_scale", action="store_true", default=None,
                        help="Full dataset, 20 epochs (40 for noise), 5 seeds")
    parser.add_argument("--noise-alpha", dest="noise_alpha", type=float)
    parser.add_argument("--dataset", choices=["mnist", "synthetic"])
    parser.add_argument("--mnist-dir", dest="mnist_dir")
    parser.add_argument("--workers", type=int)
    parser.add_argument("--log-level", dest="log_level", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlns", description="Modal analysis of normalization in conv-net training")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="One run per (variant, seed, mu)")
    _common(train)
    train.add_argument("--fail-on-divergence", dest="fail_on_divergence", action="store_true", default=None)

    sweep = sub.add_parser("sweep", help="Runs over the mu grid plus quartile bands")
    _common(sweep)

    noise = sub.add_parser("noise", help="Gradient-noise study with a frozen FC layer")
    _common(noise)

    analyze = sub.add_parser("analyze", help="Modal reports from saved analysis checkpoints")
    analyze.add_argument("target", help="Run directory or checkpoint file")
    analyze.add_argument("--step", dest="steps", type=int, action="append", help="Only these steps (repeatable)")
    analyze.add_argument("--out", dest="out_dir", help="Where to write modal.csv (default <run dir>/analysis)")
    analyze.add_argument("--mnist-dir", dest="mnist_dir")
    analyze.add_argument("--log-level", dest="log_level", default=None)
    return parser


OVERRIDE_KEYS = ("out_dir", "seeds", "mu_conv", "mu_other", "epochs", "batch_size", "variants", "paper_scale",
                 "noise_alpha", "dataset", "mnist_dir", "workers", "fail_on_divergence")


def _overrides(args: argparse.Namespace) -> dict:
    return {key: getattr(args, key, None) for key in OVERRIDE_KEYS}


def _report_runs(records) -> bool:
    diverged = False
    for record in records:
        if record.outcome == COMPLETED:
            print(f"✅ {record.run_id}: {record.outcome}")
        else:
            diverged = True
            print(f"⚠️ {record.run_id}: {record.outcome}")
    return diverged


def run(args: argparse.Namespace) -> int:
    if args.command == "analyze":
        rows = cmd_analyze(args.target, args.steps, {"mnist_dir": args.mnist_dir}, args.out_dir)
        for row in rows:
            print(f"✅ {row['run_id']} {row['layer']} step {row['step']}: "
                  f"lambda [{row['lambda_min']:.4g}, {row['lambda_max']:.4g}], mu_max {row['mu_max']:.4g}")
        return EXIT_OK

    config = load_config(args.command, args.config, _overrides(args))
    if args.command == "train":
        diverged = _report_runs(cmd_train(config))
        return EXIT_DIVERGED if diverged and config.fail_on_divergence else EXIT_OK
    if args.command == "noise":
        _report_runs(cmd_noise(config))
        print(f"✅ Bands written to {config.out_dir}/sweep_curves.csv")
        return EXIT_OK
    for row in cmd_sweep(config):
        median = "n/a" if row["median"] is None else f"{row['median']:.4f}"
        print(f"✅ {row['variant']} mu={row['mu']:g}: median val_error {median} "
              f"({row['n_seeds']} seeds, {row['n_unstable']} unstable)")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        code = run(args)
    except ConfigError as e:
        print(f"❌ {e}", file=sys.stderr)
        code = EXIT_CONFIG
    except OSError as e:
        print(f"❌ IO error: {e}", file=sys.stderr)
        code = EXIT_IO
    except (MissingAnalysisError, AggregationError) as e:
        print(f"❌ {e}", file=sys.stderr)
        code = EXIT_IO
    except MlnsError as e:
        print(f"❌ {e}", file=sys.stderr)
        code = EXIT_CONFIG
    return code


if __name__ == "__main__":
    sys.exit(main())
