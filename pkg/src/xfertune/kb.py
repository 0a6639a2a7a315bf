"""Knowledge base: the persisted product of offline analysis.

Build pipeline: load tagging -> clustering -> per-cluster load bands ->
grid + surface fit per band -> argmax -> sampling region per cluster.
Everything a query needs is precomputed, so a query is a nearest-centroid
lookup.
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _codec
from .clustering import (FEATURES, Normalizer, ch_index, cluster, entry_features,
                         nearest_centroid, raw_features, select_k)
from .core import DEFAULT_LATTICE, DatasetProfile, Lattice, NetworkProfile, ParamTriple
from .core import TransferLogEntry
from .ingest import ObservationGroup, load_intensity
from .maxima import surface_argmax
from .regions import Ball, SamplingRegion, sampling_region
from .regions import DEFAULT_GAMMA, DEFAULT_LAMBDA, DEFAULT_RADIUS
from .surface import ThroughputSurface, fit_surface

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
BAND_WIDTH = 0.1
N_BANDS = 10


class KnowledgeBaseError(ValueError):
    pass


@dataclass(frozen=True)
class KBConfig:
    m_range: tuple[int, int] = (2, 8)
    method: str = "kmeanspp"
    seed: int = 0
    restarts: int = 8
    radius: int = DEFAULT_RADIUS
    gamma: int = DEFAULT_GAMMA
    lam: int = DEFAULT_LAMBDA
    recluster_threshold: float = 0.2
    lattice: Lattice = DEFAULT_LATTICE
    built_at: float | None = None

    def to_dict(self) -> dict:
        return {"m_range": list(self.m_range), "method": self.method, "seed": self.seed,
                "restarts": self.restarts, "radius": self.radius, "gamma": self.gamma,
                "lambda": self.lam, "recluster_threshold": self.recluster_threshold,
                "lattice": [self.lattice.cc_max, self.lattice.p_max, self.lattice.pp_max]}

    @classmethod
    def from_dict(cls, d: dict) -> KBConfig:
        return cls(tuple(d["m_range"]), d["method"], int(d["seed"]), int(d["restarts"]),
                   int(d["radius"]), int(d["gamma"]), int(d["lambda"]),
                   float(d["recluster_threshold"]), Lattice(*d["lattice"]))


def band_index(i_s: float) -> int:
    """Load band of width 0.1; I_s = 1 falls in the top band."""
    return min(int(math.floor(i_s / BAND_WIDTH + 1e-9)), N_BANDS - 1)


# ---------------------------------------------------------------------------
# per-band sufficient statistics, so updates never need the original logs

@dataclass
class PointStats:
    params: ParamTriple
    n: int
    mean: float
    sigma: float

    def merge(self, samples: Sequence[float]) -> PointStats:
        """Pool with new samples (population variance, parallel-axis form)."""
        arr = np.asarray(samples, dtype=float)
        n2 = len(arr)
        if n2 == 0:
            return self
        m2 = float(arr.mean())
        ss2 = float(((arr - m2) ** 2).sum())
        n = self.n + n2
        mean = (self.n * self.mean + n2 * m2) / n
        ss = (self.n * self.sigma ** 2 + ss2 + self.n * (self.mean - mean) ** 2
              + n2 * (m2 - mean) ** 2)
        return PointStats(self.params, n, mean, math.sqrt(max(ss / n, 0.0)))

    def as_group(self) -> ObservationGroup:
        """Group whose samples reproduce (n, mean, sigma)."""
        return ObservationGroup(None, self.params, _pseudo_samples(self.n, self.mean, self.sigma),
                                self.mean, self.sigma)


def _pseudo_samples(n: int, mean: float, sigma: float) -> list[float]:
    if n == 1 or sigma == 0.0:
        return [mean] * n
    z = np.array([1.0 if k % 2 == 0 else -1.0 for k in range(n)])
    if n % 2:
        z[-1] = 0.0
    z *= math.sqrt(n / float((z ** 2).sum()))
    return list(mean + sigma * z)


def _stats_from_entries(entries: Sequence[TransferLogEntry]) -> dict[ParamTriple, PointStats]:
    by: dict[ParamTriple, list[float]] = {}
    for e in entries:
        by.setdefault(e.params, []).append(e.throughput)
    out = {}
    for prm, vals in by.items():
        arr = np.asarray(vals)
        mu = float(arr.mean())
        out[prm] = PointStats(prm, len(arr), mu, float(np.sqrt(np.mean((arr - mu) ** 2))))
    return out


@dataclass
class Band:
    index: int
    n_entries: int
    load_tag: float                 # mean I_s of the entries
    stats: dict[ParamTriple, PointStats]
    surface: ThroughputSurface

    @property
    def i_s_range(self) -> tuple[float, float]:
        return (self.index * BAND_WIDTH, (self.index + 1) * BAND_WIDTH)


@dataclass
class Cluster:
    id: int
    centroid: np.ndarray    # normalized features
    n: float                # weighted entry count
    within: float           # within-cluster sum of squares
    bands: dict[int, Band] = field(default_factory=dict)
    region: SamplingRegion = field(default_factory=SamplingRegion)

    def surfaces(self) -> list[ThroughputSurface]:
        return [self.bands[k].surface for k in sorted(self.bands, key=lambda k: (
            self.bands[k].load_tag, k))]


@dataclass
class QueryResult:
    cluster_id: int
    surfaces: list[ThroughputSurface]   # ascending load tag
    load_tags: list[float]
    region: SamplingRegion
    distance: float


@dataclass
class KnowledgeBase:
    normalizer: Normalizer
    clusters: list[Cluster]
    config: KBConfig = field(default_factory=KBConfig)
    built_at: float = 0.0
    batches: list[dict] = field(default_factory=list)
    version: int = FORMAT_VERSION

    # -- queries --------------------------------------------------------
    def features(self, dataset: DatasetProfile, network: NetworkProfile) -> np.ndarray:
        return self.normalizer.transform(raw_features(network, dataset))

    def query(self, dataset: DatasetProfile, network: NetworkProfile) -> QueryResult:
        """Surfaces of the nearest cluster (ties: lowest cluster id)."""
        if not self.clusters:
            raise KnowledgeBaseError("knowledge base is empty")
        x = self.features(dataset, network)
        cents = np.array([c.centroid for c in self.clusters])
        k = nearest_centroid(cents, x)
        c = self.clusters[k]
        surfaces = c.surfaces()
        return QueryResult(c.id, surfaces, [s.load_tag for s in surfaces], c.region,
                           float(np.sqrt(((cents[k] - x) ** 2).sum())))

    # -- persistence ----------------------------------------------------
    def to_dict(self) -> dict:
        enc = _codec.enc_float
        clusters = []
        for c in self.clusters:
            bands = []
            for k in sorted(c.bands):
                b = c.bands[k]
                surf = b.surface.to_dict()
                prm = b.surface.precomputed_argmax[0]
                surf["region"] = {"ball": {"cc": prm.cc, "p": prm.p, "pp": prm.pp,
                                           "radius": self.config.radius},
                                  "member": c.region.member_of(prm)}
                bands.append({
                    "index": b.index,
                    "i_s_range": [enc(v) for v in b.i_s_range],
                    "load_tag": enc(b.load_tag),
                    "n_entries": b.n_entries,
                    "stats": [[s.params.cc, s.params.p, s.params.pp, s.n, enc(s.mean),
                               enc(s.sigma)] for s in sorted(b.stats.values(),
                                                            key=lambda s: s.params)],
                    "surface": surf,
                })
            clusters.append({"id": c.id, "centroid": [enc(v) for v in c.centroid],
                             "n": enc(c.n), "within": enc(c.within), "bands": bands,
                             "region": c.region.to_dict()})
        return {
            "version": self.version,
            "normalization": {"features": list(FEATURES),
                              "lo": [enc(v) for v in self.normalizer.lo],
                              "hi": [enc(v) for v in self.normalizer.hi]},
            "config": self.config.to_dict(),
            "clusters": clusters,
            "built_at": enc(self.built_at),
            "batches": self.batches,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> KnowledgeBase:
        if d.get("version") != FORMAT_VERSION:
            raise KnowledgeBaseError(f"unsupported knowledge base version {d.get('version')!r}"
                                     f" (expected {FORMAT_VERSION})")
        norm = Normalizer(tuple(float(v) for v in d["normalization"]["lo"]),
                          tuple(float(v) for v in d["normalization"]["hi"]))
        clusters = []
        for cd in d["clusters"]:
            bands = {}
            for bd in cd["bands"]:
                stats = {}
                for cc, p, pp, n, mu, sig in bd["stats"]:
                    prm = ParamTriple(cc, p, pp)
                    stats[prm] = PointStats(prm, int(n), float(mu), float(sig))
                sd = dict(bd["surface"])
                sd.pop("region", None)
                bands[int(bd["index"])] = Band(int(bd["index"]), int(bd["n_entries"]),
                                               float(bd["load_tag"]), stats,
                                               ThroughputSurface.from_dict(sd))
            clusters.append(Cluster(int(cd["id"]), np.array([float(v) for v in cd["centroid"]]),
                                    float(cd["n"]), float(cd["within"]), bands,
                                    SamplingRegion.from_dict(cd["region"])))
        return cls(norm, clusters, KBConfig.from_dict(d["config"]), float(d["built_at"]),
                   list(d["batches"]), int(d["version"]))

    @classmethod
    def loads(cls, text: str) -> KnowledgeBase:
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        atomic_write(path, self.dumps())

    @classmethod
    def load(cls, path) -> KnowledgeBase:
        return cls.loads(Path(path).read_text())


def atomic_write(path, text: str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# building

def _fit_band(index: int, stats: dict[ParamTriple, PointStats], n_entries: int,
              load_tag: float, cluster_id: int, config: KBConfig) -> Band:
    groups = [stats[k].as_group() for k in sorted(stats)]
    surf = fit_surface(groups, cluster_id, load_tag, config.lattice)
    surf.precomputed_argmax = surface_argmax(surf, config.lattice)
    return Band(index, n_entries, load_tag, stats, surf)


def _bands_from_entries(entries: Sequence[TransferLogEntry]
                        ) -> dict[int, tuple[list[TransferLogEntry], list[float]]]:
    out: dict[int, tuple[list, list]] = {}
    for e in entries:
        i_s = load_intensity(e)
        es, ls = out.setdefault(band_index(i_s), ([], []))
        es.append(e)
        ls.append(i_s)
    return out


def _refresh_region(c: Cluster, config: KBConfig) -> None:
    c.region = sampling_region(c.surfaces(), config.radius, config.gamma, config.lam,
                               config.seed, config.lattice)


def _make_cluster(cid: int, centroid, n, within, entries, config: KBConfig) -> Cluster:
    c = Cluster(cid, np.asarray(centroid, dtype=float), float(n), float(within))
    for k, (es, ls) in sorted(_bands_from_entries(entries).items()):
        c.bands[k] = _fit_band(k, _stats_from_entries(es), len(es), float(np.mean(ls)),
                               cid, config)
    _refresh_region(c, config)
    return c


def _unique_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows, inverse, counts = np.unique(x, axis=0, return_inverse=True, return_counts=True)
    return rows, inverse.ravel(), counts.astype(float)


def _cluster_points(x: np.ndarray, config: KBConfig):
    """(labels per row of x, centroids, sizes, within SS per cluster)."""
    rows, inverse, counts = _unique_rows(x)
    if len(rows) < 2:
        labels = np.zeros(len(rows), dtype=int)
        cents = rows[:1].copy()
    elif len(rows) == 2 or counts.sum() < 3:
        labels = np.arange(len(rows))
        cents = rows.copy()
    else:
        _, cl, _ = select_k(rows, config.m_range, config.method, config.seed, counts,
                            config.restarts)
        labels, cents = cl.assignments, cl.centroids
    m = len(cents)
    sizes = np.array([counts[labels == k].sum() for k in range(m)])
    within = np.array([(counts[labels == k] * ((rows[labels == k] - cents[k]) ** 2).sum(axis=1)
                        ).sum() for k in range(m)])
    return labels[inverse], cents, sizes, within


def build(log_batches: Sequence[tuple[str, Sequence[TransferLogEntry]]],
          config: KBConfig = KBConfig()) -> KnowledgeBase:
    """Offline analysis over one or more named batches of log entries."""
    entries = [e for _, batch in log_batches for e in batch]
    if not entries:
        raise KnowledgeBaseError("no log entries to analyze")
    raw = entry_features(entries)
    norm = Normalizer.fit(raw)
    x = norm.transform(raw)
    labels, cents, sizes, within = _cluster_points(x, config)
    clusters = []
    for k in range(len(cents)):
        members = [e for e, lab in zip(entries, labels) if lab == k]
        clusters.append(_make_cluster(k, cents[k], sizes[k], within[k], members, config))
        log.info("cluster %d: %d entries, %d load bands", k, len(members),
                 len(clusters[-1].bands))
    built_at = config.built_at if config.built_at is not None else max(e.timestamp
                                                                        for e in entries)
    batches = [{"id": bid, "entries": len(b)} for bid, b in log_batches]
    return KnowledgeBase(norm, clusters, config, float(built_at), batches)


# ---------------------------------------------------------------------------
# additive update

def _summary_ch(n: np.ndarray, cents: np.ndarray, within: np.ndarray) -> float:
    """CH index from per-cluster (count, centroid, within SS) summaries."""
    m = len(n)
    total = n.sum()
    if m < 2 or total <= m:
        return math.nan
    mean = (n[:, None] * cents).sum(axis=0) / total
    between = float((n * ((cents - mean) ** 2).sum(axis=1)).sum())
    w = float(within.sum())
    if w <= 1e-300:
        return math.inf
    return (between / (m - 1)) / (w / (total - m))


def _absorb(n, cent, within, pts):
    """Summary of a cluster after adding points (parallel-axis theorem)."""
    if len(pts) == 0:
        return n, cent, within
    k = len(pts)
    pm = pts.mean(axis=0)
    pss = float(((pts - pm) ** 2).sum())
    tot = n + k
    new_c = (n * cent + k * pm) / tot
    new_w = within + pss + n * float(((cent - new_c) ** 2).sum()) + k * float(
        ((pm - new_c) ** 2).sum())
    return tot, new_c, new_w


def _degrades(before: float, after: float, threshold: float) -> bool:
    if math.isnan(before) or math.isnan(after):
        return False
    if math.isinf(before):
        return not math.isinf(after)
    return after < (1.0 - threshold) * before


def update(kb: KnowledgeBase, new_batch: Sequence[TransferLogEntry],
           batch_id: str = "update") -> KnowledgeBase:
    """Fold a new batch into a copy of ``kb``.

    Entries join their nearest cluster unless doing so lowers the CH index of
    the cluster summary by more than the configured threshold; then the
    batch is clustered on its own and appended as new clusters.  Only bands
    that receive entries are refit.
    """
    if kb.version != FORMAT_VERSION:
        raise KnowledgeBaseError(f"unsupported knowledge base version {kb.version!r}")
    new_batch = list(new_batch)
    out = KnowledgeBase.from_dict(kb.to_dict())
    if not new_batch:
        return out
    cfg = out.config
    x = out.normalizer.transform(entry_features(new_batch))
    cents = np.array([c.centroid for c in out.clusters])
    nearest = np.array([nearest_centroid(cents, xi) for xi in x])
    n = np.array([c.n for c in out.clusters])
    w = np.array([c.within for c in out.clusters])
    before = _summary_ch(n, cents, w)
    n2, c2, w2 = n.copy(), cents.copy(), w.copy()
    for k in range(len(out.clusters)):
        n2[k], c2[k], w2[k] = _absorb(n[k], cents[k], w[k], x[nearest == k])
    if len(out.clusters) >= 2:
        recluster = _degrades(before, _summary_ch(n2, c2, w2), cfg.recluster_threshold)
    else:
        spread_before = w.sum() / max(n.sum(), 1.0)
        spread_after = w2.sum() / max(n2.sum(), 1.0)
        recluster = spread_after > (1.0 + cfg.recluster_threshold) * max(spread_before, 1e-12)
    if recluster:
        log.info("new batch degrades cluster separation; clustering it separately")
        labels, cts, sizes, within = _cluster_points(x, cfg)
        base = max(c.id for c in out.clusters) + 1
        for k in range(len(cts)):
            members = [e for e, lab in zip(new_batch, labels) if lab == k]
            out.clusters.append(_make_cluster(base + k, cts[k], sizes[k], within[k],
                                              members, cfg))
    else:
        for k, c in enumerate(out.clusters):
            members = [e for e, lab in zip(new_batch, nearest) if lab == k]
            if not members:
                continue
            c.n, c.centroid, c.within = float(n2[k]), c2[k], float(w2[k])
            for bi, (es, ls) in sorted(_bands_from_entries(members).items()):
                old = c.bands.get(bi)
                stats = dict(old.stats) if old else {}
                fresh: dict[ParamTriple, list[float]] = {}
                for e in es:
                    fresh.setdefault(e.params, []).append(e.throughput)
                for prm, vals in fresh.items():
                    if prm in stats:
                        stats[prm] = stats[prm].merge(vals)
                    else:
                        arr = np.asarray(vals)
                        mu = float(arr.mean())
                        stats[prm] = PointStats(prm, len(arr), mu,
                                                float(np.sqrt(np.mean((arr - mu) ** 2))))
                n_old = old.n_entries if old else 0
                tag_old = old.load_tag if old else 0.0
                n_tot = n_old + len(es)
                tag = (n_old * tag_old + float(np.sum(ls))) / n_tot
                c.bands[bi] = _fit_band(bi, stats, n_tot, tag, c.id, cfg)
            _refresh_region(c, cfg)
    out.batches.append({"id": batch_id, "entries": len(new_batch)})
    out.built_at = max(out.built_at, max(e.timestamp for e in new_batch))
    return out
