"""Command-line entry point: generate, run, analyze, report, validate-config."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .datasets import SplitPolicy, SyntheticSpec, generate_synthetic_scenario, save_domain
from .pipeline import (AnalysisError, ConfigError, ExperimentConfig, analyze, report,
                       resolve_output, run, validate_config)


def _cmd_generate(args) -> int:
    spec_data = json.loads(Path(args.config).read_text()) if args.config else {}
    spec = SyntheticSpec.from_dict(spec_data)
    out = resolve_output(args.output)
    scenario = generate_synthetic_scenario(spec, args.seed + args.seed_offset,
                                           SplitPolicy(seed=args.seed + args.seed_offset))
    for name, domain in (("source", scenario.source), ("target", scenario.target)):
        save_domain(out / name, domain)
    print(f"wrote {spec.name} source/target domains to {out}")
    return 0


def _cmd_validate(args) -> int:
    try:
        data = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read {args.config}: {exc}", file=sys.stderr)
        return 2
    errors = validate_config(data)
    if errors:
        print("\n".join(errors), file=sys.stderr)
        return 1
    print("config is valid")
    return 0


def _cmd_run(args) -> int:
    config = ExperimentConfig.load(args.config)
    if args.seed_offset:
        config = config.with_seed_offset(args.seed_offset)
    out = resolve_output(args.output, config)
    summary = run(config, out, parallel=args.parallel, force=args.force)
    print(f"done={len(summary.done)} skipped={len(summary.skipped)} errors={len(summary.errors)}")
    for key, err in summary.errors:
        print(f"  {key}: {err}", file=sys.stderr)
    return 1 if summary.errors else 0


def _cmd_analyze(args) -> int:
    out = resolve_output(args.output)
    bundle = analyze(out)
    (out / "analysis.json").write_text(json.dumps(bundle, indent=2, sort_keys=True) + "\n")
    for notice in bundle["notices"]:
        print(f"notice: {notice}")
    print(f"wrote {out / 'analysis.json'}")
    return 0


def _cmd_report(args) -> int:
    out = resolve_output(args.output)
    path = out / "analysis.json"
    bundle = json.loads(path.read_text()) if path.exists() else analyze(out)
    written = report(bundle, out / "report")
    print(f"wrote {len(written)} files under {out / 'report'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uda-bench",
                                     description="Time-series domain adaptation benchmark")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, config_required=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=config_required, help="JSON file")
        p.add_argument("--output", help="output directory (fallback: $UDA_BENCH_OUTPUT)")
        p.add_argument("--seed-offset", type=int, default=0, help="added to every seed")
        p.set_defaults(func=fn)
        return p

    gen = add("generate", _cmd_generate, "write a synthetic scenario to disk")
    gen.add_argument("--seed", type=int, default=0)
    run_p = add("run", _cmd_run, "run the benchmark described by a config", True)
    run_p.add_argument("--parallel", type=int, default=None, help="worker processes")
    run_p.add_argument("--force", action="store_true", help="rerun completed keys")
    add("analyze", _cmd_analyze, "aggregate results into analysis.json")
    add("report", _cmd_report, "write tables, plot data and a summary")
    add("validate-config", _cmd_validate, "check a config against the schema", True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, AnalysisError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
