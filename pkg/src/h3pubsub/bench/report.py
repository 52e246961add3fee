"""Benchmark results and their CSV/JSON serialization.

Output layout for ``emit_report(report, out_dir, fmt)``:

``summary.csv``
    one row per publisher connection per run::

        scenario,protocol,msg_size_bytes,rep,t_first_data_ms,t_complete_ms,
        up_bytes,down_bytes,up_pkts,down_pkts,dropped,connection,seed,setup_pkts,delivered,error

``paired.csv``
    MQTT minus HTTP/3 time to first data per size/rep/connection, also in RTT units.
``overhead.csv``
    bytes and packets per protocol and the relative HTTP/3-over-MQTT deltas.
``series/throughput_<protocol>_r<rep>_<connection>.csv``
    ``bin_start_ms,bytes`` (200 ms bins by arrival); connection ``all`` is the aggregate.
``series/resources_<protocol>_r<rep>.csv``
    ``ts_s,cpu_fraction``.
``meta.json``
    scenario config and per-protocol fingerprints.

With ``fmt="json"`` everything goes into a single ``report.json``.
"""

from __future__ import annotations

import csv
import json
import statistics
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from ..netlink.link import TraceEvent

SUMMARY_COLUMNS = (
    "scenario",
    "protocol",
    "msg_size_bytes",
    "rep",
    "t_first_data_ms",
    "t_complete_ms",
    "up_bytes",
    "down_bytes",
    "up_pkts",
    "down_pkts",
    "dropped",
    "connection",
    "seed",
    "setup_pkts",
    "delivered",
    "error",
)
PAIRED_COLUMNS = ("msg_size_bytes", "rep", "connection", "h3_first_data_ms", "mqtt_first_data_ms", "delta_ms", "delta_rtt_units")
OVERHEAD_COLUMNS = (
    "msg_size_bytes",
    "rep",
    "connection",
    "h3_bytes",
    "mqtt_bytes",
    "h3_pkts",
    "mqtt_pkts",
    "bytes_delta_pct",
    "pkts_delta_pct",
)
AGGREGATE_NAME = "all"


@dataclass
class RunRecord:
    scenario: str
    protocol: str
    msg_size_bytes: int
    rep: int
    t_first_data_ms: float | None
    t_complete_ms: float | None
    up_bytes: int
    down_bytes: int
    up_pkts: int
    down_pkts: int
    dropped: int
    connection: str
    seed: int
    setup_pkts: int | None = None
    delivered: bool = False
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def total_bytes(self) -> int:
        return self.up_bytes + self.down_bytes

    @property
    def total_pkts(self) -> int:
        return self.up_pkts + self.down_pkts


@dataclass
class ThroughputPoint:
    protocol: str
    rep: int
    connection: str
    bin_start_ms: float
    bytes: int


@dataclass
class ResourcePoint:
    protocol: str
    rep: int
    ts_s: float
    cpu_fraction: float


@dataclass
class PairedRow:
    msg_size_bytes: int
    rep: int
    connection: str
    h3_first_data_ms: float
    mqtt_first_data_ms: float
    delta_ms: float
    delta_rtt_units: float


@dataclass
class OverheadRow:
    msg_size_bytes: int
    rep: int
    connection: str
    h3_bytes: int
    mqtt_bytes: int
    h3_pkts: int
    mqtt_pkts: int
    bytes_delta_pct: float
    pkts_delta_pct: float


@dataclass
class MetricsReport:
    scenario: str
    rtt: float
    config: dict[str, Any] = field(default_factory=dict)
    fingerprints: dict[str, str] = field(default_factory=dict)
    records: list[RunRecord] = field(default_factory=list)
    throughput: list[ThroughputPoint] = field(default_factory=list)
    resources: list[ResourcePoint] = field(default_factory=list)
    # raw captures are kept in memory only, keyed by (protocol, rep, msg_size_bytes)
    traces: dict[tuple[str, int, int], list[TraceEvent]] = field(default_factory=dict, compare=False, repr=False)

    def normalize(self) -> MetricsReport:
        """Put series into the canonical order used on disk."""
        self.throughput.sort(key=lambda p: (p.protocol, p.rep, p.connection, p.bin_start_ms))
        self.resources.sort(key=lambda p: (p.protocol, p.rep, p.ts_s))
        return self

    @property
    def failures(self) -> list[RunRecord]:
        return [r for r in self.records if not r.ok]

    @property
    def failure_rate(self) -> float:
        return len(self.failures) / len(self.records) if self.records else 0.0

    def _by_key(self) -> dict[tuple[int, int, str], dict[str, RunRecord]]:
        grouped: dict[tuple[int, int, str], dict[str, RunRecord]] = defaultdict(dict)
        for r in self.records:
            grouped[(r.msg_size_bytes, r.rep, r.connection)][r.protocol] = r
        return grouped

    def paired(self) -> list[PairedRow]:
        rows = []
        for (size, rep, conn), pair in sorted(self._by_key().items()):
            h3, mqtt = pair.get("h3"), pair.get("mqtt")
            if h3 is None or mqtt is None or h3.t_first_data_ms is None or mqtt.t_first_data_ms is None:
                continue
            delta = round(mqtt.t_first_data_ms - h3.t_first_data_ms, 3)
            units = round(delta / (self.rtt * 1000), 6) if self.rtt > 0 else 0.0
            rows.append(PairedRow(size, rep, conn, h3.t_first_data_ms, mqtt.t_first_data_ms, delta, units))
        return rows

    def overhead(self) -> list[OverheadRow]:
        rows = []
        for (size, rep, conn), pair in sorted(self._by_key().items()):
            h3, mqtt = pair.get("h3"), pair.get("mqtt")
            if h3 is None or mqtt is None or not (h3.ok and mqtt.ok):
                continue
            rows.append(
                OverheadRow(
                    size, rep, conn,
                    h3.total_bytes, mqtt.total_bytes, h3.total_pkts, mqtt.total_pkts,
                    _pct(h3.total_bytes, mqtt.total_bytes), _pct(h3.total_pkts, mqtt.total_pkts),
                )
            )
        return rows

    def medians(self) -> dict[tuple[str, int], dict[str, float | None]]:
        """Median first-data and completion times per (protocol, size) over repetitions."""
        groups: dict[tuple[str, int], list[RunRecord]] = defaultdict(list)
        for r in self.records:
            groups[(r.protocol, r.msg_size_bytes)].append(r)
        out = {}
        for key, recs in sorted(groups.items()):
            first = [r.t_first_data_ms for r in recs if r.t_first_data_ms is not None]
            done = [r.t_complete_ms for r in recs if r.t_complete_ms is not None]
            out[key] = {
                "t_first_data_ms": statistics.median(first) if first else None,
                "t_complete_ms": statistics.median(done) if done else None,
                "runs": len(recs),
                "failures": sum(not r.ok for r in recs),
            }
        return out

    def series(self, protocol: str, rep: int, connection: str) -> list[tuple[float, int]]:
        return [
            (p.bin_start_ms, p.bytes)
            for p in self.throughput
            if p.protocol == protocol and p.rep == rep and p.connection == connection
        ]


def _pct(value: int, base: int) -> float:
    return round((value - base) / base * 100, 3) if base else 0.0


# -- writing ------------------------------------------------------------------------


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _write_csv(path: Path, columns: tuple[str, ...], rows: list[Any]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            data = asdict(row)
            writer.writerow([_cell(data[c]) for c in columns])


def emit_report(report: MetricsReport, out_dir: str | Path, fmt: str = "csv") -> list[Path]:
    """Write ``report`` under ``out_dir``; returns the files written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path = out / "report.json"
        path.write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=False) + "\n")
        return [path]
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")

    written = []
    for name, columns, rows in (
        ("summary.csv", SUMMARY_COLUMNS, report.records),
        ("paired.csv", PAIRED_COLUMNS, report.paired()),
        ("overhead.csv", OVERHEAD_COLUMNS, report.overhead()),
    ):
        _write_csv(out / name, columns, rows)
        written.append(out / name)

    series_dir = out / "series"
    series_dir.mkdir(exist_ok=True)
    throughput: dict[tuple[str, int, str], list[ThroughputPoint]] = defaultdict(list)
    for p in report.throughput:
        throughput[(p.protocol, p.rep, p.connection)].append(p)
    for (protocol, rep, conn), points in sorted(throughput.items()):
        path = series_dir / f"throughput_{protocol}_r{rep}_{conn}.csv"
        _write_csv(path, ("bin_start_ms", "bytes"), points)
        written.append(path)
    resources: dict[tuple[str, int], list[ResourcePoint]] = defaultdict(list)
    for p in report.resources:
        resources[(p.protocol, p.rep)].append(p)
    for (protocol, rep), points in sorted(resources.items()):
        path = series_dir / f"resources_{protocol}_r{rep}.csv"
        _write_csv(path, ("ts_s", "cpu_fraction"), points)
        written.append(path)

    meta = {"scenario": report.scenario, "rtt": report.rtt, "config": report.config, "fingerprints": report.fingerprints}
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    written.append(out / "meta.json")
    return written


def report_to_dict(report: MetricsReport) -> dict[str, Any]:
    return {
        "scenario": report.scenario,
        "rtt": report.rtt,
        "config": report.config,
        "fingerprints": report.fingerprints,
        "records": [asdict(r) for r in report.records],
        "paired": [asdict(r) for r in report.paired()],
        "overhead": [asdict(r) for r in report.overhead()],
        "throughput": [asdict(p) for p in report.throughput],
        "resources": [asdict(p) for p in report.resources],
    }


# -- reading ------------------------------------------------------------------------


def _parse(value: str, kind: Any) -> Any:
    if value == "":
        return None
    text = str(kind)
    if "bool" in text:
        return value == "true"
    if "int" in text and "float" not in text:
        return int(value)
    if "float" in text:
        return float(value)
    return value


def _read_rows(path: Path, cls: type) -> list[Any]:
    types = {f.name: f.type for f in fields(cls)}
    with path.open(newline="") as fh:
        return [cls(**{k: _parse(v, types[k]) for k, v in row.items()}) for row in csv.DictReader(fh)]


def load_report(path: str | Path) -> MetricsReport:
    """Read back a directory written by :func:`emit_report` (either format)."""
    path = Path(path)
    if path.is_dir() and (path / "report.json").exists() and not (path / "summary.csv").exists():
        path = path / "report.json"
    if path.suffix == ".json":
        data = json.loads(path.read_text())
        return MetricsReport(
            scenario=data["scenario"],
            rtt=data["rtt"],
            config=data["config"],
            fingerprints=data["fingerprints"],
            records=[RunRecord(**r) for r in data["records"]],
            throughput=[ThroughputPoint(**p) for p in data["throughput"]],
            resources=[ResourcePoint(**p) for p in data["resources"]],
        ).normalize()

    meta = json.loads((path / "meta.json").read_text())
    report = MetricsReport(meta["scenario"], meta["rtt"], meta["config"], meta["fingerprints"])
    report.records = _read_rows(path / "summary.csv", RunRecord)
    for file in sorted((path / "series").glob("throughput_*.csv")):
        protocol, rep, conn = file.stem.split("_", 3)[1:]
        for row in _read_rows(file, _Bin):
            report.throughput.append(ThroughputPoint(protocol, int(rep[1:]), conn, row.bin_start_ms, row.bytes))
    for file in sorted((path / "series").glob("resources_*.csv")):
        protocol, rep = file.stem.split("_", 2)[1:]
        for row in _read_rows(file, _Sample):
            report.resources.append(ResourcePoint(protocol, int(rep[1:]), row.ts_s, row.cpu_fraction))
    return report.normalize()


@dataclass
class _Bin:
    bin_start_ms: float
    bytes: int


@dataclass
class _Sample:
    ts_s: float
    cpu_fraction: float
