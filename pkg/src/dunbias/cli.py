"""Command-line entry point.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 runtime
failure (including more failed repetitions than ``max_failed_reps``).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness, plotting
from .config import EXPERIMENT_KINDS, ConfigError, load_config
from .data import DATA_DIR_ENV, DataError, default_data_dir, validate_data

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("dunbias")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(f"{self.prog}: error: {message}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dunbias", description="Active-learning bias experiments for depth-uncertainty networks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    sub = p.add_subparsers(dest="command", required=True)
    for kind in EXPERIMENT_KINDS:
        sp = sub.add_parser(kind, help=f"run the {kind} experiment")
        sp.add_argument("--config", type=Path, help="INI file with [DEFAULT] and per-experiment sections")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        sp.add_argument("--output-dir", type=Path, help="where results CSV and summary JSON go")
        sp.add_argument("--workers", type=int, help="parallel repetitions")
        sp.add_argument("--data-dir", type=Path, help=f"dataset directory (default ${DATA_DIR_ENV} or ./data)")
    pp = sub.add_parser("plot", help="render a results CSV to SVG")
    pp.add_argument("results", type=Path)
    pp.add_argument("--kind", choices=plotting.PLOT_KINDS, help="figure kind (default: taken from the CSV)")
    pp.add_argument("--output-dir", type=Path)
    vp = sub.add_parser("validate-data", help="check dataset files against a manifest")
    vp.add_argument("--manifest", type=Path, help="manifest JSON (default: <data dir>/manifest.json)")
    vp.add_argument("--dataset", action="append", dest="datasets", help="only check this dataset (repeatable)")
    return p


def _run_experiment(args) -> int:
    overrides = list(args.override)
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    if args.output_dir is not None:
        overrides.append(f"output_dir={args.output_dir}")
    if args.data_dir is not None:
        overrides.append(f"data_dir={args.data_dir}")
    cfg = load_config(args.config, args.command, overrides)
    data_dir = Path(cfg.data_dir) if cfg.data_dir else default_data_dir()
    if (data_dir / "manifest.json").exists():
        report = _load_report(data_dir / "manifest.json", [cfg.dataset])
        if not report.ok:
            raise DataError("; ".join(report.lines()))
    log.info("running %s on %s (config %s)", cfg.kind, cfg.dataset, cfg.config_hash())
    result = harness.run_experiment(cfg)
    csv_path, summary_path = harness.write_results(result)
    print(csv_path)
    print(summary_path)
    if result.n_failed > cfg.max_failed_reps:
        for f in result.failures:
            print(f"failed repetition {f['rep']} ({f['model']}/{f['objective']}): {f['error']}", file=sys.stderr)
        print(f"{result.n_failed} failed repetitions exceed the tolerance of {cfg.max_failed_reps}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _plot(args) -> int:
    kind = args.kind
    if kind is None:
        rows = harness.read_results(args.results)
        if not rows or rows[0].get("experiment") not in plotting.PLOT_KINDS:
            raise DataError(f"{args.results}: cannot infer figure kind; pass --kind")
        kind = rows[0]["experiment"]
    for path in plotting.plot(args.results, kind, args.output_dir):
        print(path)
    return EXIT_OK


def _load_report(manifest, names):
    try:
        return validate_data(manifest, names)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"cannot read manifest {manifest}: {exc}") from exc


def _validate(args) -> int:
    manifest = args.manifest or default_data_dir() / "manifest.json"
    report = _load_report(manifest, args.datasets)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.ok else EXIT_DATA


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return EXIT_OK
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plot":
            return _plot(args)
        if args.command == "validate-data":
            return _validate(args)
        return _run_experiment(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RuntimeError, ArithmeticError, ValueError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
