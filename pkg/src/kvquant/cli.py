"""Command-line entry point: ``python -m kvquant <command>``.

Commands
--------
run --config FILE             full campaign (trials.csv, comparisons.csv, report.json)
table NAME --config FILE      one reference-layout table as CSV
hist --d N --modes A,B --samples N
                              rotated-coordinate histograms with a KS test
selftest [--inject FAULT]     invariant suite

The output directory is ``--output-dir``, else ``$KVQUANT_OUTPUT_DIR``,
else the config's ``output_dir``.  Exit codes: 0 success, 1 configuration
error, 2 selftest or reference-sign mismatch.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness

EXIT_OK, EXIT_CONFIG, EXIT_FAILED = 0, 1, 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvquant", description="KV-cache quantization experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a campaign from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--output-dir")

    p_tab = sub.add_parser("table", help="build one table")
    p_tab.add_argument("name", choices=sorted(harness.TABLES))
    p_tab.add_argument("--config", required=True)
    p_tab.add_argument("--output-dir")
    p_tab.add_argument("--check", action="store_true",
                       help="exit 2 when a winner disagrees with the reference table")

    p_hist = sub.add_parser("hist", help="rotated-coordinate histograms")
    p_hist.add_argument("--d", type=int, required=True)
    p_hist.add_argument("--modes", default="random,heavy_tail,low_rank",
                        help="comma-separated workload modes; ';' separates modes that carry parameters")
    p_hist.add_argument("--samples", type=int, default=100_000)
    p_hist.add_argument("--seed", type=int, default=0)
    p_hist.add_argument("--output-dir")

    p_self = sub.add_parser("selftest", help="run the invariant suite")
    p_self.add_argument("--inject", action="append", choices=harness.FAULTS, default=[],
                        help="plant a known fault (repeatable)")
    return parser


def _split_modes(text: str) -> list[str]:
    if ";" in text:
        return [m.strip() for m in text.split(";") if m.strip()]
    return [m.strip() for m in text.split(",") if m.strip()]


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            result = harness.run(harness.load_config(args.config), args.output_dir)
            for key, path in result.paths.items():
                print(f"{key}: {path}")
            return EXIT_OK
        if args.command == "table":
            rows, path = harness.table(args.name, harness.load_config(args.config), args.output_dir)
            print(path.read_text(encoding="utf-8"), end="")
            bad = harness.sign_mismatches(rows)
            if bad:
                print(f"{len(bad)} of {len(rows)} rows disagree with the reference winner", file=sys.stderr)
            return EXIT_FAILED if (args.check and bad) else EXIT_OK
        if args.command == "hist":
            if args.d < 2 or args.d & (args.d - 1) or args.samples < 1:
                raise harness.ConfigError("hist", "--d must be a power of two >= 2 and --samples positive")
            for s in harness.hist(args.d, _split_modes(args.modes), args.samples, master_seed=args.seed,
                                  output_dir=args.output_dir):
                print(f"{s['mode']}: n={s['n']} KS D={s['ks_D']:.5f} p={s['ks_p']:.4g} -> {s['path']}")
            return EXIT_OK
        results = harness.selftest(args.inject)
        for res in results:
            print(res.line())
        failed = [r for r in results if not r.passed]
        print(f"{len(results) - len(failed)}/{len(results)} checks passed")
        return EXIT_FAILED if failed else EXIT_OK
    except (harness.ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
