"""Clustering of transfer profiles: k-means++, centroid-linkage HAC and the
Calinski-Harabasz index for choosing the cluster count.

All routines accept optional per-point ``weights`` so that a corpus with many
repeated feature vectors can be clustered through its distinct rows; the
results equal clustering the expanded corpus.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .core import DatasetProfile, NetworkProfile, TransferLogEntry

log = logging.getLogger(__name__)

FEATURES = ("bandwidth", "rtt", "tcp_buffer", "log10_avg_file_size", "log10_num_files")
LLOYD_MAX_ITER = 100
RESTARTS = 8


def raw_features(network: NetworkProfile, dataset: DatasetProfile) -> np.ndarray:
    return np.array([network.bandwidth, network.rtt, network.tcp_buffer,
                     math.log10(dataset.avg_file_size), math.log10(dataset.num_files)])


def entry_features(entries: Iterable[TransferLogEntry]) -> np.ndarray:
    rows = [raw_features(e.network, e.dataset) for e in entries]
    return np.array(rows, dtype=float).reshape(-1, len(FEATURES))


@dataclass(frozen=True)
class Normalizer:
    """Min-max scaling fitted on a corpus; constant columns map to 0."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    @classmethod
    def fit(cls, raw: np.ndarray) -> Normalizer:
        raw = np.asarray(raw, dtype=float)
        return cls(tuple(float(v) for v in raw.min(axis=0)),
                   tuple(float(v) for v in raw.max(axis=0)))

    def transform(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=float)
        lo, hi = np.array(self.lo), np.array(self.hi)
        span = np.where(hi > lo, hi - lo, 1.0)
        return np.where(hi > lo, (raw - lo) / span, 0.0)


@dataclass
class Clustering:
    assignments: np.ndarray     # label per point, 0-based
    centroids: np.ndarray       # (m, d)
    sizes: np.ndarray           # weighted member count per cluster
    inertia: float = 0.0        # weighted within-cluster sum of squares
    merge_distances: list[float] = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.centroids)


def _weights(points: np.ndarray, weights) -> np.ndarray:
    if weights is None:
        return np.ones(len(points))
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(points),) or np.any(w <= 0):
        raise ValueError("weights must be positive, one per point")
    return w


def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def _n_distinct(points: np.ndarray) -> int:
    return len(np.unique(points, axis=0))


def _finish(points, w, labels, m) -> Clustering:
    cents = np.zeros((m, points.shape[1]))
    sizes = np.zeros(m)
    for k in range(m):
        mk = labels == k
        sizes[k] = w[mk].sum()
        cents[k] = (w[mk, None] * points[mk]).sum(axis=0) / sizes[k]
    inertia = float((w * ((points - cents[labels]) ** 2).sum(axis=1)).sum())
    return Clustering(labels, cents, sizes, inertia)


def _kmeans_once(points: np.ndarray, w: np.ndarray, m: int, rng: np.random.Generator,
                 max_iter: int) -> Clustering:
    n = len(points)
    # D^2 seeding
    centers = [points[rng.choice(n, p=w / w.sum())]]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, m):
        prob = w * d2
        tot = prob.sum()
        idx = rng.choice(n, p=prob / tot) if tot > 0 else rng.choice(n, p=w / w.sum())
        centers.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    cents = np.array(centers)
    labels = np.full(n, -1)
    for _ in range(max_iter):
        dist = _sqdist(points, cents)
        new = np.argmin(dist, axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
        for k in range(m):
            mk = labels == k
            if not mk.any():
                # reseed at the point worst served by its centroid
                far = int(np.argmax(dist[np.arange(n), labels]))
                labels[far] = k
                mk = labels == k
            cents[k] = (w[mk, None] * points[mk]).sum(axis=0) / w[mk].sum()
    return _finish(points, w, labels, m)


def kmeans_pp(points, m: int, seed: int = 0, weights=None, restarts: int = 1,
              max_iter: int = LLOYD_MAX_ITER) -> Clustering:
    """k-means++ seeding followed by Lloyd iterations; best of ``restarts`` runs."""
    pts = np.asarray(points, dtype=float)
    w = _weights(pts, weights)
    if m < 1:
        raise ValueError("m must be >= 1")
    distinct = _n_distinct(pts)
    if distinct == 1:
        if m > 1:
            log.warning("all points identical; returning a single cluster")
        return _finish(pts, w, np.zeros(len(pts), dtype=int), 1)
    if m > distinct:
        raise ValueError(f"m={m} exceeds the {distinct} distinct points")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        c = _kmeans_once(pts, w, m, rng, max_iter)
        if best is None or c.inertia < best.inertia:
            best = c
    return best


def hac_upgma(points, m: int, weights=None) -> Clustering:
    """Agglomerative clustering merging the pair with the closest centroids.

    The proximity matrix row and column of a merged cluster are refreshed
    from its new (weighted) centroid.  Merge distances are recorded.
    """
    pts = np.asarray(points, dtype=float)
    w = _weights(pts, weights)
    n = len(pts)
    if m < 1 or m > n:
        raise ValueError(f"need 1 <= m <= n={n}, got {m}")
    cents = pts.copy()
    mass = w.copy()
    members = [[i] for i in range(n)]
    alive = np.ones(n, dtype=bool)
    prox = np.sqrt(_sqdist(cents, cents))
    np.fill_diagonal(prox, np.inf)
    merges = []
    for _ in range(n - m):
        flat = int(np.argmin(prox))
        i, j = divmod(flat, n)
        if i > j:
            i, j = j, i
        merges.append(float(prox[i, j]))
        cents[i] = (mass[i] * cents[i] + mass[j] * cents[j]) / (mass[i] + mass[j])
        mass[i] += mass[j]
        members[i].extend(members[j])
        members[j] = []
        alive[j] = False
        prox[j, :] = np.inf
        prox[:, j] = np.inf
        row = np.sqrt(((cents - cents[i]) ** 2).sum(axis=1))
        row[~alive] = np.inf
        row[i] = np.inf
        prox[i, :] = row
        prox[:, i] = row
    labels = np.empty(n, dtype=int)
    live = sorted((min(mem), k) for k, mem in enumerate(members) if mem)
    for lab, (_, k) in enumerate(live):
        labels[members[k]] = lab
    out = _finish(pts, w, labels, len(live))
    out.merge_distances = merges
    return out


def ch_index(points, clustering: Clustering, weights=None) -> float:
    """Calinski-Harabasz score: (B / (m - 1)) / (W / (n - m)); larger is better.

    Returns ``inf`` when the within-cluster dispersion vanishes.
    """
    pts = np.asarray(points, dtype=float)
    w = _weights(pts, weights)
    labels = np.asarray(clustering.assignments)
    ks = np.unique(labels)
    m = len(ks)
    n = w.sum()
    if not 2 <= m <= n - 1:
        raise ValueError(f"CH index needs 2 <= m <= n-1 (m={m}, n={n:g})")
    mean = (w[:, None] * pts).sum(axis=0) / n
    between = within = 0.0
    for k in ks:
        mk = labels == k
        nk = w[mk].sum()
        ck = (w[mk, None] * pts[mk]).sum(axis=0) / nk
        between += nk * float(((ck - mean) ** 2).sum())
        within += float((w[mk] * ((pts[mk] - ck) ** 2).sum(axis=1)).sum())
    if within <= 1e-300:
        return math.inf
    return (between / (m - 1)) / (within / (n - m))


def cluster(points, m: int, method: str = "kmeanspp", seed: int = 0, weights=None,
            restarts: int = RESTARTS) -> Clustering:
    if method == "kmeanspp":
        return kmeans_pp(points, m, seed, weights, restarts)
    if method == "hac":
        return hac_upgma(points, m, weights)
    raise ValueError(f"unknown clustering method {method!r}")


def select_k(points, m_range: tuple[int, int], method: str = "kmeanspp", seed: int = 0,
             weights=None, restarts: int = RESTARTS
             ) -> tuple[int, Clustering, dict[int, float]]:
    """Cluster count in ``m_range`` (inclusive) maximizing CH; ties pick the smaller m.

    The upper end is capped at the number of distinct points and n - 1.
    Returns ``(m_star, clustering, scores)``.
    """
    pts = np.asarray(points, dtype=float)
    w = _weights(pts, weights)
    lo, hi = m_range
    hi = min(hi, _n_distinct(pts), int(w.sum()) - 1)
    if lo < 2 or lo > hi:
        raise ValueError(f"empty cluster-count range [{m_range[0]}, {m_range[1]}] "
                         f"for {len(pts)} points")
    scores: dict[int, float] = {}
    best_m, best_c, best_s = None, None, -math.inf
    for m in range(lo, hi + 1):
        c = cluster(pts, m, method, seed, w, restarts)
        if c.m < 2:
            continue
        s = ch_index(pts, c, w)
        scores[m] = s
        if s > best_s:
            best_m, best_c, best_s = m, c, s
    if best_c is None:
        raise ValueError("no valid clustering in range")
    return best_m, best_c, scores


def nearest_centroid(centroids: np.ndarray, x: np.ndarray) -> int:
    """Index of the closest centroid; ties resolve to the lowest index."""
    d = ((np.asarray(centroids) - np.asarray(x)) ** 2).sum(axis=1)
    return int(np.argmin(d))
