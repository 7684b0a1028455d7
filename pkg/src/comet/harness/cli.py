"""Command-line entry point.

Subcommands: gen (write .cmft datasets), train (single run), eval (score a
saved model), sweep (noise robustness suite), ablate (component-removal
suite). Exit codes: 0 ok, 2 config error, 3 divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..data import FeatureFileError, generate, save_features
from ..meta import DivergenceError
from .config import ConfigError, parse_config_file, resolve_config
from .runner import SweepSpec, ablate, evaluate_model, plot_sweep, run, sweep_noise
from .report import dump_json

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="path to a key = value config file")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--backbone", choices=("nf", "sn"), help="override the backbone")
    parser.add_argument("--noise", type=float, help="override the training contamination rate")
    parser.add_argument("--out", type=Path, default=Path("."), help="output directory")
    parser.add_argument("--workers", type=int, default=1, help="parallel suite cells")
    parser.add_argument("--plot", action="store_true", help="also emit SVG charts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="comet",
        description="Confidence-weighted meta-learning for anomaly detection backbones.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("gen", "generate a synthetic dataset pair as .cmft files"),
        ("train", "train one model and write report.json + model.json"),
        ("eval", "score a saved model on a .cmft dataset"),
        ("sweep", "noise-robustness suite over configurations x levels x seeds"),
        ("ablate", "five-configuration component-removal suite"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "eval":
            p.add_argument("--model", type=Path, required=True, help="model.json path")
            p.add_argument("--data", type=Path, required=True, help=".cmft dataset path")
    return parser


def _resolve(args) -> "RunConfig":
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.backbone is not None:
        overrides["backbone"] = args.backbone
    if args.noise is not None:
        overrides["data_contamination"] = args.noise
    return resolve_config(file_values=file_values, overrides=overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print("config error:\n  " + "\n  ".join(exc.problems), file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (FeatureFileError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def _dispatch(args) -> int:
    cfg = None
    if args.command != "eval":
        cfg = _resolve(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)

    if args.command == "gen":
        train_set, test_set = generate(cfg.generator_config())
        save_features(train_set, out / "train.cmft")
        save_features(test_set, out / "test.cmft")
        print(f"wrote {out / 'train.cmft'} ({train_set.n}x{train_set.dim}) and "
              f"{out / 'test.cmft'} ({test_set.n}x{test_set.dim})")
        return EXIT_OK

    if args.command == "train":
        report = run(cfg, out_dir=out)
        result = report.result
        print(
            f"i_auroc={result.i_auroc:.4f} precision={result.precision:.4f} "
            f"recall={result.recall:.4f} f1={result.f1:.4f} "
            f"({len(report.epochs)} epochs, {report.wall_seconds:.1f}s)"
        )
        return EXIT_OK

    if args.command == "eval":
        result = evaluate_model(args.model, args.data)
        dump_json(result, out / "eval.json")
        print(
            f"i_auroc={result['i_auroc']:.4f} precision={result['precision']:.4f} "
            f"recall={result['recall']:.4f} f1={result['f1']:.4f}"
        )
        return EXIT_OK

    if args.command == "sweep":
        spec = SweepSpec.from_config(cfg)
        rows = sweep_noise(spec, cfg, out, workers=args.workers)
        if args.plot:
            plot_sweep(rows, out / "sweep.svg")
        failures = sum(1 for r in rows if "error" in r)
        print(f"sweep complete: {len(rows) - failures}/{len(rows)} cells ok -> {out / 'sweep.csv'}")
        return EXIT_OK

    if args.command == "ablate":
        table = ablate(cfg, out, workers=args.workers)
        for row in table:
            print(
                f"{row['configuration']:<38} {row['mean_i_auroc']:.4f} "
                f"+/- {row['std_i_auroc']:.4f} (n={row['n_seeds']})"
            )
        print(f"-> {out / 'ablation.csv'}")
        return EXIT_OK

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
