"""Online adaptive sampling: pick parameters from precomputed surfaces using a
few sample chunks, then monitor the bulk transfer and re-tune on load shifts."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .core import MB, DatasetProfile, ParamTriple
from .regions import SamplingRegion
from .simulator import BackendError, ChunkResult
from .surface import DEFAULT_Z, SIGMA_FLOOR_FRAC, ThroughputSurface

log = logging.getLogger(__name__)

CHUNK_FRACTION = 0.05
CHUNK_CAP = 256 * MB
WINDOW = 3
TRANSCRIPT_COLUMNS = ("chunk_idx", "cc", "p", "pp", "predicted_mbps", "achieved_mbps",
                      "elapsed_s", "event")


class TransferBackend(Protocol):
    def transfer(self, nbytes: float, params: ParamTriple) -> ChunkResult: ...


@dataclass(frozen=True)
class SamplerConfig:
    z: float = DEFAULT_Z
    window: int = WINDOW
    floor_frac: float = SIGMA_FLOOR_FRAC
    selection: str = "closest"      # or "median"
    retries: int = 1
    chunk_fraction: float = CHUNK_FRACTION
    chunk_cap: float = CHUNK_CAP


def plan_chunks(dataset: DatasetProfile, config: SamplerConfig = SamplerConfig()
                ) -> list[float]:
    """Chunk sizes in bytes covering the whole dataset.

    Chunk size is max(min(5% of total, 256 MB), avg file size).  The bulk
    is cut into chunks of the same size so it can be monitored; the last
    chunk carries the remainder.
    """
    total = dataset.total_size
    size = max(min(config.chunk_fraction * total, config.chunk_cap), dataset.avg_file_size)
    if size >= total:
        return [total]
    n_full = int(math.floor(total / size + 1e-9))
    chunks = [size] * n_full
    rest = total - size * n_full
    if rest > 1e-6 * size:
        chunks.append(rest)
    else:
        chunks[-1] += rest
    return chunks


def accuracy(predicted: float, achieved: float) -> tuple[float, float]:
    """(relative error %, accuracy %) with accuracy = 100 - min(100, error)."""
    if not predicted > 0:
        raise ValueError(f"predicted throughput must be > 0, got {predicted}")
    err = abs(achieved - predicted) / predicted * 100.0
    return err, 100.0 - min(100.0, err)


@dataclass(frozen=True)
class TranscriptRow:
    chunk_idx: int
    params: ParamTriple
    predicted: float
    achieved: float
    elapsed: float
    event: str              # sample | converged | retune
    surface: int            # index into the sorted surface list
    region_member: str | None = None
    nbytes: float = 0.0


@dataclass
class Transcript:
    rows: list[TranscriptRow] = field(default_factory=list)
    pinned: bool = False        # converged by falling back to the nearest surface
    aborted: bool = False
    error: str | None = None

    @property
    def sample_count(self) -> int:
        return sum(r.event == "sample" for r in self.rows)

    @property
    def converged(self) -> bool:
        return any(r.event != "sample" for r in self.rows)

    def bulk_rows(self) -> list[TranscriptRow]:
        return [r for r in self.rows if r.event != "sample"]

    def retune_indices(self) -> list[int]:
        return [r.chunk_idx for r in self.rows if r.event == "retune"]

    def bulk_throughput(self, rows: Sequence[TranscriptRow] | None = None) -> float:
        """Bytes over transfer time of the given rows, parameter-change cost excluded."""
        rows = self.bulk_rows() if rows is None else rows
        if not rows:
            return math.nan
        bits = sum(r.nbytes * 8.0 for r in rows)
        secs = sum(r.nbytes * 8.0 / (r.achieved * 1e6) for r in rows)
        return bits / secs / 1e6

    def accuracy(self) -> float:
        """Mean accuracy (100 - error %) over post-convergence chunks."""
        rows = self.bulk_rows()
        if not rows:
            return math.nan
        return float(np.mean([accuracy(r.predicted, r.achieved)[1] for r in rows]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRANSCRIPT_COLUMNS)
        for r in self.rows:
            w.writerow([r.chunk_idx, r.params.cc, r.params.p, r.params.pp,
                        f"{r.predicted:.6f}", f"{r.achieved:.6f}", f"{r.elapsed:.6f}", r.event])
        return buf.getvalue()


def _transfer(backend: TransferBackend, nbytes: float, params: ParamTriple,
              retries: int) -> ChunkResult:
    for attempt in range(retries + 1):
        try:
            return backend.transfer(nbytes, params)
        except BackendError as exc:
            log.warning("chunk transfer failed (attempt %d): %s", attempt + 1, exc)
            last = exc
    raise last


def _nearest(surfaces, idx: Sequence[int], params: ParamTriple, achieved: float) -> int:
    """Surface in ``idx`` whose prediction at ``params`` is closest to ``achieved``."""
    errs = [abs(surfaces[i](params) - achieved) for i in idx]
    return idx[int(np.argmin(errs))]


def adaptive_sampling(surfaces: Sequence[ThroughputSurface], region: SamplingRegion | None,
                      load_tags: Sequence[float] | None, dataset: DatasetProfile,
                      backend: TransferBackend, config: SamplerConfig = SamplerConfig()
                      ) -> Transcript:
    """Drive one transfer.

    Surfaces are ordered by ascending load tag (lighter load last).  The
    first probe uses the lower-median surface.  A probe outside the
    surface's confidence band discards that surface and every surface on
    the wrong side of it; the next probe uses the remaining surface whose
    prediction at the probed parameters is closest to what was achieved
    (``selection="median"`` takes the window median instead).  If nothing
    is left, the nearest surface overall is pinned.  After convergence the
    mean of the last ``window`` chunks is checked against the band; when it
    leaves the band the surface is re-selected from the latest rate.
    """
    if not surfaces:
        raise ValueError("no surfaces to sample from")
    if config.selection not in ("closest", "median"):
        raise ValueError(f"unknown selection rule {config.selection!r}")
    tags = list(load_tags) if load_tags is not None else [s.load_tag for s in surfaces]
    order = sorted(range(len(surfaces)), key=lambda i: (tags[i], i))
    surfs = [surfaces[i] for i in order]
    everything = list(range(len(surfs)))
    lo, hi = 0, len(surfs) - 1
    cur = (lo + hi) // 2
    converged = False
    retuned = False
    window: list[float] = []
    out = Transcript()

    def in_band(s: ThroughputSurface, params: ParamTriple, value: float) -> bool:
        mu, sig = s.envelope(params, config.floor_frac)
        return abs(value - mu) <= config.z * sig

    for idx, nbytes in enumerate(plan_chunks(dataset, config)):
        surf = surfs[cur]
        params = surf.precomputed_argmax[0]
        predicted = surf(params)
        try:
            res = _transfer(backend, nbytes, params, config.retries)
        except BackendError as exc:
            out.aborted, out.error = True, str(exc)
            return out
        if not converged:
            event = "sample"
        else:
            event = "retune" if retuned else "converged"
            retuned = False
        member = region.member_of(params) if region is not None else None
        out.rows.append(TranscriptRow(idx, params, predicted, res.achieved, res.elapsed,
                                      event, order[cur], member, nbytes))
        achieved = res.achieved
        if not converged:
            if in_band(surf, params, achieved):
                converged, window = True, [achieved]
                continue
            if achieved > predicted:
                lo = cur + 1
            else:
                hi = cur - 1
            if lo > hi:
                cur = _nearest(surfs, everything, params, achieved)
                out.pinned = True
                converged, window = True, [achieved]
            elif config.selection == "closest":
                cur = _nearest(surfs, list(range(lo, hi + 1)), params, achieved)
            else:
                cur = (lo + hi) // 2
            continue
        window = (window + [achieved])[-config.window:]
        if len(window) == config.window and not in_band(surf, params, float(np.mean(window))):
            new = _nearest(surfs, everything, params, achieved)
            if new != cur:
                log.info("chunk %d: load shift detected, surface %d -> %d", idx,
                         order[cur], order[new])
                cur, retuned, window = new, True, []
    return out
