"""Deterministic transfer simulator with a closed-form mean throughput.

The mean rate of a transfer is

    min( bw * (1 - I_ext) * U(cc * p) * P(pp), disk_read * 8, disk_write * 8 )

with a saturating stream-utilization curve ``U(k) = k / (k + K_half)``
where ``K_half = BDP / tcp_buffer``.  The pipelining efficiency is
``P = pp / (pp + c)`` where ``c`` is the number of files one process must
keep in flight to cover a round trip at its share of the path.  Observed
rates get multiplicative Gaussian noise from a seeded generator.
"""

from __future__ import annotations

import bisect
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import (DEFAULT_LATTICE, MBYTES_TO_MBITS, DatasetProfile, Lattice,
                   NetworkProfile, ParamTriple, TransferLogEntry, max_achievable)

DEFAULT_NOISE = 0.05
SLOW_START_RTTS = 10.0


def utilization(streams, k_half: float) -> np.ndarray:
    k = np.asarray(streams, dtype=float)
    return k / (k + k_half)


def mean_throughput(network: NetworkProfile, dataset: DatasetProfile, i_ext: float,
                    cc, p, pp) -> np.ndarray:
    """Noiseless rate in Mbps; broadcasts over array-valued cc, p, pp."""
    if not 0.0 <= i_ext <= 1.0:
        raise ValueError(f"external intensity must be in [0, 1], got {i_ext}")
    cc = np.asarray(cc, dtype=float)
    p = np.asarray(p, dtype=float)
    pp = np.asarray(pp, dtype=float)
    k_half = network.bdp_bytes / network.tcp_buffer
    share = network.bandwidth * (1.0 - i_ext) * utilization(cc * p, k_half)   # Mbps
    per_proc = share * 1e6 / 8.0 / cc                                       # bytes/s
    in_flight = network.rtt / 1e3 * per_proc / dataset.avg_file_size
    eff = pp / (pp + in_flight)
    disk = min(network.disk_read, network.disk_write) * MBYTES_TO_MBITS
    return np.minimum(share * eff, disk)


@dataclass
class SimScenario:
    """A network under a piecewise-constant external load schedule."""

    network: NetworkProfile
    schedule: list[tuple[float, float]] = field(default_factory=lambda: [(0.0, 0.0)])
    noise: float = DEFAULT_NOISE
    seed: int = 0
    dataset: DatasetProfile | None = None

    def __post_init__(self):
        self.schedule = [(float(t), float(i)) for t, i in self.schedule]
        if not self.schedule:
            raise ValueError("schedule must not be empty")
        times = [t for t, _ in self.schedule]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("schedule times must be strictly increasing")
        for _, i in self.schedule:
            if not 0.0 <= i <= 1.0:
                raise ValueError(f"external intensity must be in [0, 1], got {i}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        self._times = times

    def load_at(self, t: float) -> float:
        """Intensity of the last schedule step at or before ``t`` (first step before it)."""
        k = bisect.bisect_right(self._times, t) - 1
        return self.schedule[max(k, 0)][1]

    def to_dict(self) -> dict:
        n = self.network
        d = {
            "network": {"bw_mbps": n.bandwidth, "rtt_ms": n.rtt, "tcp_buf_bytes": n.tcp_buffer,
                        "disk_read_mbs": n.disk_read, "disk_write_mbs": n.disk_write,
                        "src": n.source_id, "dst": n.dest_id},
            "schedule": [[t, i] for t, i in self.schedule],
            "noise": self.noise,
            "seed": self.seed,
        }
        if self.dataset is not None:
            d["dataset"] = dataset_to_dict(self.dataset)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SimScenario:
        ds = d.get("dataset")
        return cls(network_from_dict(d["network"]),
                   [(t, i) for t, i in d.get("schedule", [[0.0, 0.0]])],
                   float(d.get("noise", DEFAULT_NOISE)), int(d.get("seed", 0)),
                   dataset_from_dict(ds) if ds else None)


def network_from_dict(d: dict) -> NetworkProfile:
    return NetworkProfile(d["bw_mbps"], d["rtt_ms"], d["tcp_buf_bytes"],
                          d.get("disk_read_mbs", math.inf), d.get("disk_write_mbs", math.inf),
                          d.get("src", "src"), d.get("dst", "dst"))


def dataset_from_dict(d: dict) -> DatasetProfile:
    return DatasetProfile(d["avg_file_bytes"], d["num_files"], d.get("total_bytes"))


def dataset_to_dict(d: DatasetProfile) -> dict:
    return {"avg_file_bytes": d.avg_file_size, "num_files": d.num_files,
            "total_bytes": d.total_size}


def load_scenario(path) -> SimScenario:
    with open(path) as fh:
        return SimScenario.from_dict(json.load(fh))


def sim_throughput(scenario: SimScenario, params: ParamTriple, dataset: DatasetProfile,
                   t: float = 0.0) -> float:
    """Noiseless mean rate of ``params`` at time ``t``."""
    return float(mean_throughput(scenario.network, dataset, scenario.load_at(t),
                                 params.cc, params.p, params.pp))


def oracle_optimum(scenario: SimScenario, dataset: DatasetProfile, t: float = 0.0,
                   lattice: Lattice = DEFAULT_LATTICE) -> tuple[ParamTriple, float]:
    """Exhaustive noiseless optimum over the lattice; ties go to the smallest (cc, p, pp)."""
    cc, p, pp = lattice.arrays()
    vals = mean_throughput(scenario.network, dataset, scenario.load_at(t), cc, p, pp)
    k = int(np.argmax(vals))
    return ParamTriple(int(cc[k]), int(p[k]), int(pp[k])), float(vals[k])


@dataclass(frozen=True)
class ChunkResult:
    achieved: float   # Mbps, excluding the parameter-change cost
    elapsed: float    # seconds, including the parameter-change cost


class BackendError(RuntimeError):
    """A chunk transfer failed."""


class SimBackend:
    """Transfer backend driven by a scenario.

    Keeps a simulated clock.  Each chunk sees the load in force when it
    starts.  Changing parameters costs ``c_ss * rtt`` per stream opened.
    """

    def __init__(self, scenario: SimScenario, dataset: DatasetProfile,
                 c_ss: float = SLOW_START_RTTS, start_time: float | None = None):
        self.scenario = scenario
        self.dataset = dataset
        self.c_ss = c_ss
        self.clock = scenario.schedule[0][0] if start_time is None else float(start_time)
        self.rng = np.random.default_rng(scenario.seed)
        self.params: ParamTriple | None = None
        self.ceiling = max_achievable(scenario.network)

    def noisy(self, mean: float) -> float:
        draw = self.rng.standard_normal()
        return float(min(max(mean * (1.0 + self.scenario.noise * draw), 0.0), self.ceiling))

    def transfer(self, nbytes: float, params: ParamTriple) -> ChunkResult:
        mean = sim_throughput(self.scenario, params, self.dataset, self.clock)
        achieved = self.noisy(mean)
        if achieved <= 0.0:
            raise BackendError(f"transfer stalled at t={self.clock:g}s (rate 0)")
        penalty = 0.0
        if params != self.params:
            opened = params.streams
            if self.params is not None:
                opened = max(params.streams - self.params.streams, 0)
            penalty = self.c_ss * self.scenario.network.rtt / 1e3 * opened
            self.params = params
        elapsed = nbytes * 8.0 / (achieved * 1e6) + penalty
        self.clock += elapsed
        return ChunkResult(achieved, elapsed)


@dataclass(frozen=True)
class Coverage:
    """Parameter values sampled when generating a corpus."""

    cc: tuple[int, ...]
    p: tuple[int, ...]
    pp: tuple[int, ...]

    @classmethod
    def full(cls, lattice: Lattice = DEFAULT_LATTICE, pp: Sequence[int] = (1, 8, 16, 32)
             ) -> Coverage:
        return cls(tuple(range(1, lattice.cc_max + 1)), tuple(range(1, lattice.p_max + 1)),
                   tuple(pp))

    def points(self) -> list[ParamTriple]:
        return [ParamTriple(c, p, q) for c, p, q in itertools.product(self.cc, self.p, self.pp)]


DEFAULT_COVERAGE = Coverage((1, 2, 3, 4, 6, 8, 11, 16), (1, 2, 3, 4, 6, 8, 11, 16),
                            (1, 2, 4, 8, 16, 32))


def generate_corpus(scenarios: Iterable[SimScenario], coverage: Coverage = DEFAULT_COVERAGE,
                    repeats: int = 1, seed: int = 0, datasets: Sequence[DatasetProfile] | None = None,
                    load_spread: float = 0.0) -> list[TransferLogEntry]:
    """Noisy log entries: ``repeats`` per coverage point per schedule step.

    Each scenario uses its own ``dataset`` unless ``datasets`` gives one per
    scenario.  With ``load_spread > 0`` the intensity of each entry is drawn
    uniformly from the step's value +/- spread/2 (clipped to [0, 1]).
    Contending traffic is recorded as ``I_ext * bw`` so the ingested load
    intensity equals ``1 - I_ext``.
    """
    rng = np.random.default_rng(seed)
    scenarios = list(scenarios)
    if datasets is not None and len(datasets) != len(scenarios):
        raise ValueError("need one dataset per scenario")
    points = coverage.points()
    out: list[TransferLogEntry] = []
    for si, sc in enumerate(scenarios):
        ds = datasets[si] if datasets is not None else sc.dataset
        if ds is None:
            raise ValueError("scenario has no dataset")
        net = sc.network
        ceiling = max_achievable(net)
        j = 0
        for t0, i_ext in sc.schedule:
            for prm in points:
                for _ in range(repeats):
                    load = i_ext
                    if load_spread > 0:
                        load = float(np.clip(i_ext + load_spread * (rng.random() - 0.5), 0, 1))
                    mean = float(mean_throughput(net, ds, load, prm.cc, prm.p, prm.pp))
                    th = float(min(max(mean * (1.0 + sc.noise * rng.standard_normal()), 0.0),
                                   ceiling))
                    out.append(TransferLogEntry(net, ds, prm, th, t0 + j * 1e-3,
                                                load * net.bandwidth, int(round(load * 100))))
                    j += 1
    return out
