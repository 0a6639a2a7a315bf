"""Historical log parsing, load-intensity tagging and observation grouping."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Hashable, Iterable, NamedTuple

import numpy as np

from .core import (DatasetProfile, NetworkProfile, ParamTriple, TransferLogEntry,
                   ValidationError)

LOG_FIELDS = (
    "ts", "src", "dst", "bw_mbps", "rtt_ms", "tcp_buf_bytes", "disk_read_mbs",
    "disk_write_mbs", "avg_file_bytes", "num_files", "total_bytes", "cc", "p", "pp",
    "throughput_mbps", "contending_out_mbps", "contending_streams",
)

_INT_FIELDS = {"num_files", "cc", "p", "pp", "contending_streams"}
_STR_FIELDS = {"src", "dst"}


@dataclass(frozen=True)
class Rejection:
    line: int
    field: str
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.field}: {self.message}"


class ParseResult(NamedTuple):
    entries: list[TransferLogEntry]
    rejected: list[Rejection]


def _coerce(name: str, raw) -> object:
    if name in _STR_FIELDS:
        return str(raw)
    if raw is None or (isinstance(raw, str) and raw.strip() == ""):
        raise ValidationError(name, "missing value")
    value = float(raw)
    if name in _INT_FIELDS:
        if value != int(value):
            raise ValidationError(name, f"must be an integer, got {raw!r}")
        return int(value)
    return value


def record_to_entry(record: dict) -> TransferLogEntry:
    """Build a validated entry from one schema record (dict keyed by LOG_FIELDS)."""
    vals = {}
    for name in LOG_FIELDS:
        if name not in record:
            raise ValidationError(name, "required field missing")
        try:
            vals[name] = _coerce(name, record[name])
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(name, f"not a number: {record[name]!r}") from None
    net = NetworkProfile(vals["bw_mbps"], vals["rtt_ms"], vals["tcp_buf_bytes"],
                         vals["disk_read_mbs"], vals["disk_write_mbs"],
                         vals["src"], vals["dst"])
    data = DatasetProfile(vals["avg_file_bytes"], vals["num_files"], vals["total_bytes"])
    params = ParamTriple(vals["cc"], vals["p"], vals["pp"])
    return TransferLogEntry(net, data, params, vals["throughput_mbps"], vals["ts"],
                            vals["contending_out_mbps"], vals["contending_streams"])


def entry_to_record(entry: TransferLogEntry) -> dict:
    n, d, k = entry.network, entry.dataset, entry.params
    return {
        "ts": entry.timestamp, "src": n.source_id, "dst": n.dest_id,
        "bw_mbps": n.bandwidth, "rtt_ms": n.rtt, "tcp_buf_bytes": n.tcp_buffer,
        "disk_read_mbs": n.disk_read, "disk_write_mbs": n.disk_write,
        "avg_file_bytes": d.avg_file_size, "num_files": d.num_files,
        "total_bytes": d.total_size, "cc": k.cc, "p": k.p, "pp": k.pp,
        "throughput_mbps": entry.throughput,
        "contending_out_mbps": entry.contending_out,
        "contending_streams": entry.contending_streams,
    }


def parse_log(path: str | Path, format: str | None = None) -> ParseResult:
    """Read a JSONL or CSV transfer log.

    Invalid records end up in ``ParseResult.rejected`` with the line number
    and offending field; they are never silently dropped.  ``format`` is
    inferred from the suffix when omitted.
    """
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    if format not in ("jsonl", "csv"):
        raise ValueError(f"unknown log format {format!r}")
    entries: list[TransferLogEntry] = []
    rejected: list[Rejection] = []

    with path.open(newline="" if format == "csv" else None) as fh:
        if format == "jsonl":
            rows: Iterable[tuple[int, object]] = (
                (i, line) for i, line in enumerate(fh, start=1) if line.strip())
        else:
            reader = csv.DictReader(fh)
            # header is line 1
            rows = ((i, row) for i, row in enumerate(reader, start=2))
        for lineno, raw in rows:
            if format == "jsonl":
                try:
                    raw = json.loads(raw)
                except json.JSONDecodeError as exc:
                    rejected.append(Rejection(lineno, "<line>", f"malformed JSON: {exc.msg}"))
                    continue
                if not isinstance(raw, dict):
                    rejected.append(Rejection(lineno, "<line>", "record is not an object"))
                    continue
            try:
                entries.append(record_to_entry(raw))
            except ValidationError as exc:
                rejected.append(Rejection(lineno, exc.field, exc.message))
    return ParseResult(entries, rejected)


def write_log(entries: Iterable[TransferLogEntry], fh) -> int:
    """Write entries as JSONL to an open text handle; returns the line count."""
    n = 0
    for e in entries:
        fh.write(json.dumps(entry_to_record(e), sort_keys=False))
        fh.write("\n")
        n += 1
    return n


def load_intensity(entry: TransferLogEntry) -> float:
    """(bw - th_out) / bw clamped to [0, 1]."""
    bw = entry.network.bandwidth
    value = (bw - entry.contending_out) / bw
    return min(1.0, max(0.0, value))


def aggregate_contending(entries: Iterable[TransferLogEntry],
                         window: tuple[float, float]) -> float:
    """Sum throughput of entries whose active interval touches ``window``.

    A transfer occupies [timestamp, timestamp + duration].  Partial overlap
    counts in full.
    """
    lo, hi = window
    total = 0.0
    for e in entries:
        start = e.timestamp
        end = start + e.duration
        if start <= hi and end >= lo:
            total += e.throughput
    return total


def contending_for(entry: TransferLogEntry, log: Iterable[TransferLogEntry]) -> float:
    """Outgoing contending rate seen by ``entry``: other transfers sharing an endpoint."""
    ends = {entry.network.source_id, entry.network.dest_id}
    others = [e for e in log if e is not entry
              and (e.network.source_id in ends or e.network.dest_id in ends)]
    return aggregate_contending(others, (entry.timestamp, entry.timestamp + entry.duration))


@dataclass
class ObservationGroup:
    """Repeated observations sharing a feature key and a parameter triple."""

    key: Hashable
    params: ParamTriple
    samples: list[float] = field(default_factory=list)
    mean: float = 0.0
    stddev: float = 0.0

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def low_confidence(self) -> bool:
        return self.n < 2

    def recompute(self) -> None:
        arr = np.asarray(self.samples, dtype=float)
        self.mean = float(arr.mean())
        # population form, 1/N
        self.stddev = float(np.sqrt(np.mean((arr - self.mean) ** 2)))


def _sig(x: float, digits: int = 6) -> float:
    if x == 0 or not math.isfinite(x):
        return x
    return float(f"{x:.{digits}g}")


def feature_key(entry: TransferLogEntry) -> tuple:
    """Quantized transfer-characteristic key (endpoints, path, dataset shape)."""
    n, d = entry.network, entry.dataset
    return (n.source_id, n.dest_id, _sig(n.bandwidth), _sig(n.rtt), _sig(n.tcp_buffer),
            _sig(d.avg_file_size), d.num_files)


def group_observations(entries: Iterable[TransferLogEntry],
                       key: Callable[[TransferLogEntry], Hashable] | None = feature_key,
                       ) -> list[ObservationGroup]:
    """Partition entries by (key(entry), params) and attach mean and stddev.

    ``key=None`` groups on parameters alone.  Output order follows first
    appearance, so it is deterministic for a given input order.
    """
    groups: dict[tuple, ObservationGroup] = {}
    for e in entries:
        k = key(e) if key is not None else None
        g = groups.get((k, e.params))
        if g is None:
            g = groups[(k, e.params)] = ObservationGroup(k, e.params)
        g.samples.append(e.throughput)
    out = list(groups.values())
    for g in out:
        g.recompute()
    return out


def sigma_with_floor(mean: float, sigma: float, floor_frac: float = 0.05) -> float:
    """Stddev used for confidence bounds: never below ``floor_frac`` of the mean."""
    return max(sigma, floor_frac * abs(mean))
