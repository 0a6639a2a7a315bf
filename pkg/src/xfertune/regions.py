"""Sampling regions: balls around surface maxima plus points where the
surfaces of one cluster are most distinguishable."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import DEFAULT_LATTICE, Lattice, ParamTriple
from .surface import ThroughputSurface

log = logging.getLogger(__name__)

DEFAULT_RADIUS = 2
DEFAULT_GAMMA = 256
DEFAULT_LAMBDA = 8


@dataclass(frozen=True)
class Ball:
    """Chebyshev ball on the integer lattice."""

    center: ParamTriple
    radius: int

    def contains(self, params: ParamTriple) -> bool:
        c = self.center
        return max(abs(params.cc - c.cc), abs(params.p - c.p),
                   abs(params.pp - c.pp)) <= self.radius


@dataclass
class SamplingRegion:
    maxima: list[Ball] = field(default_factory=list)
    separation: list[tuple[ParamTriple, float]] = field(default_factory=list)
    separation_undefined: bool = False

    def points(self) -> list[ParamTriple]:
        """Distinct representative points: ball centres then separation points."""
        seen, out = set(), []
        for p in [b.center for b in self.maxima] + [p for p, _ in self.separation]:
            if p not in seen:
                seen.add(p)
                out.append(p)
        return out

    def member_of(self, params: ParamTriple) -> str | None:
        for i, b in enumerate(self.maxima):
            if b.contains(params):
                return f"R_m[{i}]"
        for i, (p, _) in enumerate(self.separation):
            if p == params:
                return f"R_c[{i}]"
        return None

    def to_dict(self) -> dict:
        return {
            "maxima": [{"cc": b.center.cc, "p": b.center.p, "pp": b.center.pp,
                        "radius": b.radius} for b in self.maxima],
            "separation": [{"cc": p.cc, "p": p.p, "pp": p.pp, "score": format(s, ".17g")}
                           for p, s in self.separation],
            "separation_undefined": self.separation_undefined,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SamplingRegion:
        return cls([Ball(ParamTriple(b["cc"], b["p"], b["pp"]), int(b["radius"]))
                    for b in d["maxima"]],
                   [(ParamTriple(s["cc"], s["p"], s["pp"]), float(s["score"]))
                    for s in d["separation"]],
                   bool(d["separation_undefined"]))


def maxima_neighborhoods(surfaces: list[ThroughputSurface],
                         radius: int = DEFAULT_RADIUS) -> list[Ball]:
    """One ball per surface argmax; identical centres merge."""
    balls: list[Ball] = []
    seen = set()
    for s in surfaces:
        if s.precomputed_argmax is None:
            raise ValueError("surface has no precomputed argmax")
        c = s.precomputed_argmax[0]
        if c not in seen:
            seen.add(c)
            balls.append(Ball(c, radius))
    return balls


def separation_scores(surfaces: list[ThroughputSurface], p, cc, pp) -> np.ndarray:
    """Smallest pairwise |f_i - f_j| at each query point."""
    vals = np.stack([s.evaluate(p, cc, pp) for s in surfaces])
    n = len(surfaces)
    best = np.full(vals.shape[1], np.inf)
    for i in range(n):
        for j in range(i + 1, n):
            best = np.minimum(best, np.abs(vals[i] - vals[j]))
    return best


def maxmin_separation(surfaces: list[ThroughputSurface], gamma: int = DEFAULT_GAMMA,
                      lam: int = DEFAULT_LAMBDA, seed: int = 0,
                      lattice: Lattice = DEFAULT_LATTICE
                      ) -> tuple[list[tuple[ParamTriple, float]], bool]:
    """Top-``lam`` of ``gamma`` uniform lattice samples by min pairwise separation.

    Returns ``(points_with_scores, undefined)``; ``undefined`` is set (and the
    list empty) when fewer than two surfaces exist.
    """
    if not 1 < lam < gamma:
        raise ValueError(f"need 1 < lambda < gamma, got lambda={lam}, gamma={gamma}")
    if len(surfaces) < 2:
        return [], True
    rng = np.random.default_rng(seed)
    cc = rng.integers(1, lattice.cc_max + 1, size=gamma)
    p = rng.integers(1, lattice.p_max + 1, size=gamma)
    pp = rng.integers(1, lattice.pp_max + 1, size=gamma)
    scores = separation_scores(surfaces, p, cc, pp)
    order = np.argsort(-scores, kind="stable")[:lam]
    return [(ParamTriple(int(cc[k]), int(p[k]), int(pp[k])), float(scores[k]))
            for k in order], False


def sampling_region(surfaces: list[ThroughputSurface], radius: int = DEFAULT_RADIUS,
                    gamma: int = DEFAULT_GAMMA, lam: int = DEFAULT_LAMBDA, seed: int = 0,
                    lattice: Lattice = DEFAULT_LATTICE) -> SamplingRegion:
    balls = maxima_neighborhoods(surfaces, radius)
    sep, undefined = maxmin_separation(surfaces, gamma, lam, seed, lattice)
    return SamplingRegion(balls, sep, undefined)
