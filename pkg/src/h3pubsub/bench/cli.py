"""``bench`` command line: run scenarios and print comparison tables."""

from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path
from typing import Sequence

from ..netlink.profile import NetworkProfile, ProfileError, load_profile
from .report import MetricsReport, emit_report, load_report
from .scenarios import KB, PROTOCOLS, SCENARIOS, ConfigError, ScenarioConfig, run_scenario

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAILURES = 3
DEFAULT_MAX_FAILURE_RATE = 0.1

_SIZE = re.compile(r"^(\d+)([kK]?)$")


def parse_size(text: str) -> int:
    match = _SIZE.match(text.strip())
    if not match:
        raise ValueError(f"bad size {text!r}")
    value = int(match.group(1))
    return value * KB if match.group(2) else value


def parse_sizes(text: str) -> tuple[int, ...]:
    """Parse ``1k..10k`` (1 KB steps when the bounds use ``k``), ``512,1k`` or a single size."""
    sizes: list[int] = []
    for part in text.split(","):
        if ".." in part:
            lo_text, hi_text = part.split("..", 1)
            lo, hi = parse_size(lo_text), parse_size(hi_text)
            step = KB if lo_text.strip().lower().endswith("k") else 1
            if hi < lo:
                raise ValueError(f"empty size range {part!r}")
            sizes.extend(range(lo, hi + 1, step))
        else:
            sizes.append(parse_size(part))
    return tuple(sizes)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write a report")
    run.add_argument("--scenario", required=True, choices=SCENARIOS)
    run.add_argument("--protocol", default="both", choices=(*PROTOCOLS, "both"))
    run.add_argument("--profile", type=Path, help="JSON or TOML profile (defaults to NB-IoT, lossless)")
    run.add_argument("--sizes", help="message sizes, e.g. 1k..10k")
    run.add_argument("--reps", type=int)
    run.add_argument("--publishers", type=int)
    run.add_argument("--stagger", type=float, help="seconds between publisher starts")
    run.add_argument("--out", type=Path, required=True)
    run.add_argument("--mode", choices=("virtual", "virtual_time", "realtime"))
    run.add_argument("--format", default="csv", choices=("csv", "json"))
    run.add_argument("--no-auth", action="store_true", help="MQTT CONNECT without credentials")
    run.add_argument("--max-failure-rate", type=float, default=DEFAULT_MAX_FAILURE_RATE)

    report = sub.add_parser("report", help="print the comparison table of a report directory")
    report.add_argument("dir", type=Path)
    return parser


def _config(args: argparse.Namespace) -> ScenarioConfig:
    profile, mode = NetworkProfile.nb_iot(), None
    if args.profile is not None:
        profile, mode = load_profile(args.profile)
    if args.mode is not None:
        mode = args.mode
    sizes = parse_sizes(args.sizes) if args.sizes else None
    if not 0 <= args.max_failure_rate <= 1:
        raise ConfigError("--max-failure-rate must lie in [0, 1]")
    return ScenarioConfig(
        scenario=args.scenario,
        protocol=args.protocol,
        profile=profile,
        message_sizes=sizes,
        publisher_count=args.publishers,
        stagger=args.stagger,
        repetitions=args.reps,
        output=str(args.out),
        mode=mode,
        mqtt_auth=not args.no_auth,
    )


def _fmt(value: float | None, digits: int = 1) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def format_table(report: MetricsReport) -> str:
    lines = [f"scenario {report.scenario}, rtt {report.rtt:g} s, {len(report.records)} runs, {len(report.failures)} failed"]
    lines.append(f"{'protocol':<8} {'size':>7} {'runs':>4} {'first_data_ms':>14} {'complete_ms':>12}")
    for (protocol, size), m in report.medians().items():
        lines.append(
            f"{protocol:<8} {size:>7} {m['runs']:>4} {_fmt(m['t_first_data_ms']):>14} {_fmt(m['t_complete_ms']):>12}"
        )
    paired = report.paired()
    if paired:
        lines.append("")
        lines.append(f"{'size':>7} {'rep':>3} {'conn':<6} {'mqtt-h3_ms':>11} {'rtt_units':>9}")
        for row in paired:
            lines.append(
                f"{row.msg_size_bytes:>7} {row.rep:>3} {row.connection:<6} {row.delta_ms:>11.1f} {row.delta_rtt_units:>9.3f}"
            )
    overhead = report.overhead()
    if overhead:
        lines.append("")
        lines.append(f"{'size':>7} {'rep':>3} {'conn':<6} {'h3_B':>7} {'mqtt_B':>7} {'dB%':>7} {'h3_p':>5} {'mqtt_p':>6} {'dP%':>7}")
        for o in overhead:
            lines.append(
                f"{o.msg_size_bytes:>7} {o.rep:>3} {o.connection:<6} {o.h3_bytes:>7} {o.mqtt_bytes:>7} "
                f"{o.bytes_delta_pct:>7.2f} {o.h3_pkts:>5} {o.mqtt_pkts:>6} {o.pkts_delta_pct:>7.2f}"
            )
    if len(set(report.fingerprints.values())) > 1:
        lines.append("")
        lines.append("warning: protocols ran with different inputs (fingerprints differ)")
    return "\n".join(lines)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "report":
        try:
            report = load_report(args.dir)
        except (OSError, ValueError, KeyError) as exc:
            print(f"bench: cannot read report in {args.dir}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(format_table(report))
        return EXIT_OK

    try:
        config = _config(args)
    except (ConfigError, ProfileError, ValueError) as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = run_scenario(config)
    emit_report(report, args.out, args.format)
    print(format_table(report))
    if report.failure_rate > args.max_failure_rate:
        print(
            f"bench: {len(report.failures)} of {len(report.records)} runs failed "
            f"(limit {args.max_failure_rate:.0%})",
            file=sys.stderr,
        )
        return EXIT_FAILURES
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
