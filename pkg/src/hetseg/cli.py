"""Command line entry point: ``hetseg <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
import argparse
import sys
from pathlib import Path

from . import harness
from .segmodel import ARMS

FLAGS = ("--config", "--seed", "--arm", "--out", "--verbose", "--help")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\nvalid flags: {', '.join(FLAGS)}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="JSON experiment config; unknown keys are rejected")
    common.add_argument("--seed", type=int, help="global seed (overrides the config's seed)")
    common.add_argument("--out", metavar="DIR", default=".",
                        help="experiment directory holding dataset, checkpoints and reports")
    common.add_argument("--verbose", action="store_true", help="print per-epoch losses")
    arm = _Parser(add_help=False)
    arm.add_argument("--arm", choices=ARMS, required=True,
                     help="training arm: lb (D1 only), naive, slac, ub (unmerged data)")

    parser = _Parser(
        prog="hetseg",
        description="Super-label aware segmentation experiments.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=(
            "flags (after the command):\n"
            "  --config PATH   JSON experiment config; unknown keys are rejected\n"
            "  --seed N        global seed, overrides the config\n"
            "  --arm ARM       lb | naive | slac | ub (train, eval)\n"
            "  --out DIR       experiment directory (default: .)\n"
            "  --verbose       print per-epoch losses\n"
            "\nexit codes: 0 success, 1 usage error, 2 runtime failure"
        ),
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    sub.add_parser("train", parents=[common, arm], help="train one arm on a generated dataset")
    sub.add_parser("eval", parents=[common, arm], help="evaluate a trained arm on the test set")
    sub.add_parser("report", parents=[common], help="print and write the comparison table")
    sub.add_parser("run-all", parents=[common], help="generate data, train and evaluate every arm")
    return parser


def _config(args) -> dict:
    overrides = {"seed": args.seed} if args.seed is not None else None
    return harness.load_config(args.config, overrides)


def _require_manifest(out: Path):
    if not (out / "manifest.json").exists():
        raise FileNotFoundError(f"dataset manifest not found in {out} (run gen-data first)")


def run(args) -> int:
    out = Path(args.out)
    cmd = args.command
    if cmd == "gen-data":
        cfg = _config(args)
        manifest = harness.generate_data(cfg, out)
        print(f"wrote {sum(manifest.counts().values())} items to {out}")
    elif cmd == "train":
        cfg = _config(args)
        _require_manifest(out)
        est = harness.train_arm(cfg, out, args.arm, verbose=args.verbose)
        log = est.training_log_
        print(f"{args.arm}: best epoch {log.best_epoch}, validation loss {log.best_val_loss:.6f}")
    elif cmd == "eval":
        _require_manifest(out)
        report = harness.eval_arm(out, args.arm)
        print(report.to_csv(), end="")
    elif cmd == "report":
        table = harness.build_comparison(out)
        if not table.cells:
            raise FileNotFoundError(f"no report_<arm>.csv files in {out}")
        (out / "comparison.csv").write_text(table.to_csv(), encoding="utf-8")
        print(table.render())
    elif cmd == "run-all":
        cfg = _config(args)
        table = harness.run_experiment(cfg, out, verbose=args.verbose)
        print(table.render())
        if not table.cells:
            print("every arm failed", file=sys.stderr)
            return 2
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"hetseg: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return run(args)
    except harness.ConfigError as exc:
        print(f"hetseg: config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"hetseg: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
