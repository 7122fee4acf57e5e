"""Command-line interface: per-stage subcommands over a JSON config file.

Exit codes: 0 on success, 1 on configuration/validation problems, 2 on
runtime failures (a stage raised or a fetch could not complete).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import corpus, pipeline

logger = logging.getLogger(__name__)

_SUBCOMMAND_STAGES = {
    "ingest": ("ingest",),
    "fit-gravity": ("gravity",),
    "fit-mixture": ("mixture",),
    "network": ("network",),
    "report": ("report",),
}


def parse_years(text: str) -> list[int]:
    """Year selections: "2007", "2007,2009", or an inclusive range "2007-2013"."""
    years = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo_s, hi_s = part.split("-", 1)
            lo, hi = int(lo_s), int(hi_s)
            if hi < lo:
                raise ValueError(f"year range {part!r} runs backwards")
            years.extend(range(lo, hi + 1))
        else:
            years.append(int(part))
    if not years:
        raise ValueError(f"no years in {text!r}")
    return years


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file (see CONFIG_KEYS)")
    common.add_argument("--years", type=str, help='years to process, e.g. "2007" or "2007-2013"')
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, help="community-detection seed (overrides the config)")

    parser = argparse.ArgumentParser(
        prog="tradepurity",
        description="Trade-resistance estimation, purity decomposition, and network analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="build the yearly country panel")
    sub.add_parser("fit-gravity", parents=[common], help="fit the error model and resistance matrix")
    sub.add_parser("fit-mixture", parents=[common], help="fit the two-category mixture and TPI")
    sub.add_parser("network", parents=[common], help="backbone, communities, and comparison stats")
    sub.add_parser("report", parents=[common], help="tables, figure data, and the summary document")
    run_p = sub.add_parser("run", parents=[common], help="run all stages (or a subset)")
    run_p.add_argument("--stages", type=str, help='comma-separated subset, e.g. "gravity,mixture"')
    fetch_p = sub.add_parser("fetch", parents=[common], help="download raw yearly files into the cache")
    fetch_p.add_argument(
        "--source", required=True, choices=sorted(corpus.DEFAULT_URL_TEMPLATES), help="remote source"
    )
    return parser


def _load_config(args) -> pipeline.PipelineConfig:
    if args.config is not None:
        config = pipeline.PipelineConfig.from_file(args.config)
    else:
        config = pipeline.PipelineConfig()
    if args.years is not None:
        config.years = parse_years(args.years)
    if args.out is not None:
        config.out_dir = args.out
    if args.seed is not None:
        config.seed = args.seed
    return config


def main(argv=None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        config = _load_config(args)
    except (OSError, ValueError) as exc:
        logger.error("config: %s", exc)
        return 1

    if args.command == "fetch":
        violations = [v for v in (
            None if config.years else "years: fetch needs at least one year",
        ) if v]
        if violations:
            for violation in violations:
                logger.error("config: %s", violation)
            return 1
        try:
            paths = corpus.fetch_remote(
                args.source,
                config.years,
                config.cache_dir,
                url_template=config.url_templates.get(args.source),
            )
        except RuntimeError as exc:
            logger.error("fetch: %s", exc)
            return 2
        for path in paths:
            print(path)
        return 0

    if args.command == "run":
        stages = [s.strip() for s in args.stages.split(",")] if getattr(args, "stages", None) else None
        try:
            result = pipeline.run(config, stages)
        except pipeline.PipelineError as exc:
            logger.error("%s", exc)
            return 1
    else:
        result = pipeline.run(config, _SUBCOMMAND_STAGES[args.command])

    for violation in result.violations:
        print(f"config error: {violation}", file=sys.stderr)
    for year, stage, message in result.failures:
        print(f"{year}/{stage} failed: {message}", file=sys.stderr)
    return result.status


if __name__ == "__main__":
    sys.exit(main())
