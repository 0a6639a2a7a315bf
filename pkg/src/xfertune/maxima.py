"""Surface maxima via the second partial derivative test, plus a brute-force
lattice oracle used to cross-check it."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .core import Lattice, ParamTriple
from .surface import ThroughputSurface

NEWTON_ITERS = 40


@dataclass(frozen=True)
class CriticalPoint:
    location: tuple[float, float, float]  # (p, cc, pp)
    value: float
    classification: str                   # max | min | saddle | degenerate
    boundary: bool = False


def hessian_at(surface: ThroughputSurface, point) -> np.ndarray:
    """Analytic 3x3 Hessian at ``point = (p, cc, pp)``.

    Seams use the patch to the right (left-closed cells).
    """
    p, cc, pp = point
    return surface.derivatives(float(p), float(cc), float(pp))[2][0]


def classify(h: np.ndarray, rel_tol: float = 1e-10, abs_tol: float = 1e-9) -> str:
    """Sylvester test on the leading principal minors.

    A Hessian whose largest entry is below ``abs_tol`` is round-off of a
    flat or affine patch and counts as degenerate.
    """
    scale = float(np.max(np.abs(h)))
    if scale <= abs_tol:
        return "degenerate"
    d1 = h[0, 0]
    d2 = h[0, 0] * h[1, 1] - h[0, 1] * h[1, 0]
    d3 = float(np.linalg.det(h))
    if abs(d3) <= rel_tol * scale ** 3:
        return "degenerate"
    if d1 < 0 and d2 > 0 and d3 < 0:
        return "max"
    if d1 > 0 and d2 > 0 and d3 > 0:
        return "min"
    return "saddle"


def _patch_boxes(surface: ThroughputSurface) -> np.ndarray:
    """Boxes (n, 3, 2) of the polynomial patches: p cell x cc cell x pp interval."""
    axes = [surface.p_knots, surface.cc_knots, surface.pp_knots]
    spans = []
    for ax in axes:
        if len(ax) == 1:
            spans.append([(ax[0], ax[0])])
        else:
            spans.append(list(zip(ax[:-1], ax[1:])))
    boxes = [list(b) for b in itertools.product(*spans)]
    return np.array(boxes, dtype=float)


def _interior_critical_points(surface: ThroughputSurface) -> list[tuple[np.ndarray, float]]:
    """Newton on the gradient from a 2x2x2 pattern inside every patch.

    Iterates move freely across the hull with steps capped at one patch
    width per axis; points that stop moving or are pushed onto the hull wall drop
    out of the active set.
    """
    boxes = _patch_boxes(surface)
    lo, hi = boxes[..., 0], boxes[..., 1]
    starts = [lo + np.array(t) * (hi - lo) for t in itertools.product((0.3, 0.7), repeat=3)]
    x = np.concatenate(starts)
    width = np.tile(hi - lo, (8, 1))
    (a, b), (c, d), (e, f) = surface.hull()
    hlo, hhi = np.array([a, c, e]), np.array([b, d, f])
    # single-knot axes carry no freedom
    free = np.broadcast_to(hhi > hlo, x.shape)
    mask2 = free[:, :, None] & free[:, None, :]
    active = np.arange(len(x))
    for _ in range(NEWTON_ITERS):
        xa = x[active]
        fa = free[active]
        v, g, h = surface.derivatives(xa[:, 0], xa[:, 1], xa[:, 2])
        g = np.where(fa, g, 0.0)
        h = np.where(mask2[active], h, 0.0) + np.eye(3) * (~fa)[:, :, None]
        done = np.all(np.abs(g) * width[active] <= 1e-12 * max(1.0, float(np.max(np.abs(v)))),
                      axis=1)
        det = np.linalg.det(h)
        good = np.abs(det) > 1e-300
        step = np.zeros_like(xa)
        if good.any():
            step[good] = np.linalg.solve(h[good], g[good][..., None])[..., 0]
        step = np.clip(np.nan_to_num(step), -width[active], width[active])
        x_new = np.clip(xa - step, hlo, hhi)
        moved = np.max(np.abs(x_new - xa), axis=1)
        x[active] = x_new
        # points pushed onto the hull wall are heading for a boundary maximum
        at_wall = np.any(((x_new <= hlo) | (x_new >= hhi)) & fa & (step != 0), axis=1)
        active = active[(moved >= 1e-13) & ~at_wall & ~done]
        if len(active) == 0:
            break
    vals, g, _ = surface.derivatives(x[:, 0], x[:, 1], x[:, 2])
    g = np.where(free, g, 0.0)
    scale = max(1.0, float(np.max(np.abs(vals))))
    spans = np.where(free, width, 1.0)
    ok = np.all(np.abs(g) * spans <= 1e-8 * scale, axis=1)
    found: list[tuple[np.ndarray, float]] = []
    for xi, v in zip(x[ok], vals[ok]):
        if any(np.max(np.abs(xi - y)) < 1e-6 for y, _ in found):
            continue
        found.append((xi, float(v)))
    return found


def _lattice_values(surface: ThroughputSurface, lattice: Lattice):
    cc, p, pp = lattice.arrays()
    return cc, p, pp, surface.evaluate(p, cc, pp)


def _boundary_maxima(surface: ThroughputSurface, lattice: Lattice) -> list[CriticalPoint]:
    cc, p, pp, vals = _lattice_values(surface, lattice)
    v = vals.reshape(lattice.cc_max, lattice.p_max, lattice.pp_max)
    ge_all = np.ones(v.shape, dtype=bool)
    gt_any = np.zeros(v.shape, dtype=bool)
    for ax in range(3):
        for shift in (1, -1):
            nb = np.roll(v, shift, axis=ax)
            valid = np.ones(v.shape, dtype=bool)
            edge = [slice(None)] * 3
            edge[ax] = 0 if shift == 1 else -1
            valid[tuple(edge)] = False
            ge_all &= ~valid | (v >= nb)
            gt_any |= valid & (v > nb)
    on_edge = np.zeros(v.shape, dtype=bool)
    for ax in range(3):
        for k in (0, -1):
            sl = [slice(None)] * 3
            sl[ax] = k
            on_edge[tuple(sl)] = True
    sel = (ge_all & gt_any & on_edge).ravel()
    return [CriticalPoint((float(p[i]), float(cc[i]), float(pp[i])), float(vals[i]), "max",
                          boundary=True) for i in np.nonzero(sel)[0]]


def local_maxima(surface: ThroughputSurface, lattice: Lattice | None = None,
                 include_all: bool = False) -> list[CriticalPoint]:
    """Critical points of the surface plus discrete maxima on the domain boundary.

    Interior points come from Newton's method on the gradient started inside
    every polynomial patch.  The Hessian classifies each one.  Only maxima
    and degenerate points are returned unless ``include_all`` is set.
    """
    lattice = lattice or surface.lattice
    out: list[CriticalPoint] = []
    if surface.fallback is None:
        found = _interior_critical_points(surface)
        if found:
            pts = np.array([x for x, _ in found])
            hess = surface.derivatives(pts[:, 0], pts[:, 1], pts[:, 2])[2]
            for (x, v), h in zip(found, hess):
                cls = classify(h)
                if include_all or cls in ("max", "degenerate"):
                    out.append(CriticalPoint(tuple(float(c) for c in x), v, cls))
    out.extend(_boundary_maxima(surface, lattice))
    return out


def _snap_candidates(loc, lattice: Lattice) -> list[ParamTriple]:
    p, cc, pp = loc
    cands = set()
    for fp, fc, fq in itertools.product((np.floor, np.ceil), repeat=3):
        cand = (int(np.clip(fc(cc), 1, lattice.cc_max)), int(np.clip(fp(p), 1, lattice.p_max)),
                int(np.clip(fq(pp), 1, lattice.pp_max)))
        cands.add(ParamTriple(*cand))
    return sorted(cands)


def surface_argmax(surface: ThroughputSurface, lattice: Lattice | None = None
                   ) -> tuple[ParamTriple, float]:
    """Best integer parameter triple.

    Candidates are the lattice corners around every local maximum together
    with every lattice point; ties go to the smallest (cc, p, pp).
    """
    lattice = lattice or surface.lattice
    cc, p, pp, vals = _lattice_values(surface, lattice)
    best_i = int(np.argmax(vals))          # first max == lexicographic smallest
    best = (ParamTriple(int(cc[best_i]), int(p[best_i]), int(pp[best_i])), float(vals[best_i]))
    for cp in local_maxima(surface, lattice):
        if cp.classification != "max":
            continue
        for cand in _snap_candidates(cp.location, lattice):
            # lattice arrays are lexicographic, so the flat index is direct;
            # batch and scalar evaluation agree bit for bit
            k = ((cand.cc - 1) * lattice.p_max + cand.p - 1) * lattice.pp_max + cand.pp - 1
            val = float(vals[k])
            if val > best[1] or (val == best[1] and cand < best[0]):
                best = (cand, val)
    return best


def grid_argmax_oracle(surface: ThroughputSurface, lattice: Lattice | None = None
                       ) -> tuple[ParamTriple, float]:
    """Exhaustive scan of the lattice; same tie-break as :func:`surface_argmax`.

    Values come from one batch evaluation; the scan itself is an explicit
    nested loop keeping the first strictly larger value.
    """
    lattice = lattice or surface.lattice
    cc, p, pp = np.meshgrid(np.arange(1, lattice.cc_max + 1), np.arange(1, lattice.p_max + 1),
                            np.arange(1, lattice.pp_max + 1), indexing="ij")
    cube = surface.evaluate(p, cc, pp).tolist()
    best_key, best_val = None, -np.inf
    for i, plane in enumerate(cube):
        for j, row in enumerate(plane):
            for k, val in enumerate(row):
                if val > best_val:
                    best_key, best_val = (i + 1, j + 1, k + 1), val
    return ParamTriple(*best_key), float(best_val)
