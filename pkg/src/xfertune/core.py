"""Shared domain types and the bounded parameter lattice."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import total_ordering

import numpy as np

#: bytes per megabyte (binary) used for all MB/GB quantities
MB = 1 << 20
GB = 1 << 30

#: disk rates arrive in MB/s; throughput is Mbps everywhere
MBYTES_TO_MBITS = 8.0


class ValidationError(ValueError):
    """A record violates a domain invariant.  ``field`` names the culprit."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


@total_ordering
@dataclass(frozen=True)
class ParamTriple:
    """Protocol knobs: concurrency, parallelism, pipelining depth.

    Ordering is lexicographic on ``(cc, p, pp)``; it is the tie-break order
    used everywhere an argmax has to pick between equal values.
    """

    cc: int
    p: int
    pp: int

    def __post_init__(self):
        for name in ("cc", "p", "pp"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ValidationError(name, f"must be an integer, got {v!r}")
            if v < 1:
                raise ValidationError(name, f"must be >= 1, got {v}")
            object.__setattr__(self, name, int(v))

    @property
    def streams(self) -> int:
        return self.cc * self.p

    def key(self) -> tuple[int, int, int]:
        return (self.cc, self.p, self.pp)

    def __lt__(self, other: ParamTriple) -> bool:
        if not isinstance(other, ParamTriple):
            return NotImplemented
        return self.key() < other.key()

    def __str__(self) -> str:
        return f"(cc={self.cc}, p={self.p}, pp={self.pp})"


@dataclass(frozen=True)
class Lattice:
    """The bounded integer search space {1..beta} per knob."""

    cc_max: int = 16
    p_max: int = 16
    pp_max: int = 32

    def __post_init__(self):
        for name in ("cc_max", "p_max", "pp_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def size(self) -> int:
        return self.cc_max * self.p_max * self.pp_max

    def contains(self, params: ParamTriple) -> bool:
        return (params.cc <= self.cc_max and params.p <= self.p_max
                and params.pp <= self.pp_max)

    def validate(self, params: ParamTriple) -> ParamTriple:
        if not self.contains(params):
            raise ValidationError("params", f"{params} outside lattice {self}")
        return params

    def clamp(self, params: ParamTriple) -> ParamTriple:
        return ParamTriple(min(params.cc, self.cc_max), min(params.p, self.p_max),
                           min(params.pp, self.pp_max))

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All lattice points as flat (cc, p, pp) arrays in lexicographic order.

        Index 0 is (1, 1, 1); ``np.argmax`` over values laid out this way
        therefore implements the smallest-(cc, p, pp) tie-break for free.
        """
        cc, p, pp = np.meshgrid(np.arange(1, self.cc_max + 1),
                                np.arange(1, self.p_max + 1),
                                np.arange(1, self.pp_max + 1), indexing="ij")
        return cc.ravel(), p.ravel(), pp.ravel()

    def mid(self) -> ParamTriple:
        return ParamTriple(max(1, self.cc_max // 2), max(1, self.p_max // 2),
                           max(1, self.pp_max // 2))

    def top(self) -> ParamTriple:
        return ParamTriple(self.cc_max, self.p_max, self.pp_max)


DEFAULT_LATTICE = Lattice()


def _positive(field: str, value: float) -> float:
    value = float(value)
    if not (value > 0) or math.isnan(value):
        raise ValidationError(field, f"must be > 0, got {value}")
    return value


@dataclass(frozen=True)
class NetworkProfile:
    """Endpoint pair and path characteristics.

    bandwidth in Mbps, rtt in ms, tcp_buffer in bytes, disk rates in MB/s.
    """

    bandwidth: float
    rtt: float
    tcp_buffer: float
    disk_read: float = math.inf
    disk_write: float = math.inf
    source_id: str = "src"
    dest_id: str = "dst"

    def __post_init__(self):
        for name in ("bandwidth", "rtt", "tcp_buffer", "disk_read", "disk_write"):
            object.__setattr__(self, name, _positive(name, getattr(self, name)))

    @property
    def bdp_bytes(self) -> float:
        """Bandwidth-delay product in bytes."""
        return self.bandwidth * 1e6 / 8.0 * self.rtt / 1e3


@dataclass(frozen=True)
class DatasetProfile:
    """Average file size and count; total size in bytes."""

    avg_file_size: float
    num_files: int
    total_size: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "avg_file_size",
                           _positive("avg_file_size", self.avg_file_size))
        if int(self.num_files) != self.num_files or self.num_files < 1:
            raise ValidationError("num_files", f"must be an integer >= 1, got {self.num_files}")
        object.__setattr__(self, "num_files", int(self.num_files))
        total = self.total_size
        if total is None:
            total = self.avg_file_size * self.num_files
        total = _positive("total_size", total)
        # rounding slack: avg is usually total/n truncated
        if total < self.avg_file_size * (1 - 1e-6):
            raise ValidationError("total_size", "must be >= avg_file_size")
        object.__setattr__(self, "total_size", total)


@dataclass(frozen=True)
class TransferLogEntry:
    """One historical transfer record.  Rates in Mbps, timestamp in epoch s."""

    network: NetworkProfile
    dataset: DatasetProfile
    params: ParamTriple
    throughput: float
    timestamp: float = 0.0
    contending_out: float = 0.0
    contending_streams: int = 0

    def __post_init__(self):
        th = float(self.throughput)
        if math.isnan(th) or th < 0:
            raise ValidationError("throughput", f"violates throughput ≥ 0 (got {th})")
        bound = max_achievable(self.network)
        if th > bound * (1 + 1e-9):
            raise ValidationError(
                "throughput", f"violates throughput ≤ max achievable {bound:g} (got {th})")
        object.__setattr__(self, "throughput", th)
        if float(self.contending_out) < 0:
            raise ValidationError("contending_out", "must be >= 0")
        if int(self.contending_streams) < 0:
            raise ValidationError("contending_streams", "must be >= 0")

    @property
    def duration(self) -> float:
        """Seconds the transfer took, inferred from size and throughput."""
        if self.throughput <= 0:
            return math.inf
        return self.dataset.total_size * 8.0 / (self.throughput * 1e6)


def max_achievable(network: NetworkProfile) -> float:
    """Throughput ceiling in Mbps: the slowest of link, disk read, disk write."""
    return min(network.bandwidth,
               network.disk_read * MBYTES_TO_MBITS,
               network.disk_write * MBYTES_TO_MBITS)
