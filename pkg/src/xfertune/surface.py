"""Throughput models: relaxed cubic splines, bicubic (p, cc) sheets stacked over
pp, least-squares regression baselines and Gaussian confidence envelopes.

Conventions
-----------
Sheets are indexed ``[p, cc]``.  Coefficients are stored in local coordinates
(offset from the left knot of each piece/cell), which keeps the systems well
conditioned at large pp; :meth:`CubicSpline1D.global_coefficients` converts to
the plain power basis when needed.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from . import _codec
from .core import DEFAULT_LATTICE, Lattice, ParamTriple, TransferLogEntry
from .ingest import ObservationGroup, group_observations, sigma_with_floor

log = logging.getLogger(__name__)

DEFAULT_Z = 1.96
SIGMA_FLOOR_FRAC = 0.05
MAX_FILL_FRACTION = 0.5


# ---------------------------------------------------------------------------
# 1-D relaxed (natural) cubic spline

def _natural_second_derivatives(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Second derivatives at the knots of the natural spline through (x, y).

    ``y`` may carry trailing batch dimensions; the tridiagonal system is
    solved once for all of them (Thomas algorithm).
    """
    n = len(x)
    m = np.zeros_like(y, dtype=float)
    if n < 3:
        return m
    h = np.diff(x)
    slope = np.diff(y, axis=0) / h.reshape((-1,) + (1,) * (y.ndim - 1))
    rhs = 6.0 * np.diff(slope, axis=0)  # interior rows 1..n-2
    diag = 2.0 * (h[:-1] + h[1:])
    sub = h[1:-1].copy()  # off-diagonals
    k = n - 2
    # forward sweep
    cp = np.zeros(k)
    dp = np.zeros_like(rhs, dtype=float)
    cp[0] = sub[0] / diag[0] if k > 1 else 0.0
    dp[0] = rhs[0] / diag[0]
    for i in range(1, k):
        denom = diag[i] - sub[i - 1] * cp[i - 1]
        if i < k - 1:
            cp[i] = sub[i] / denom
        dp[i] = (rhs[i] - sub[i - 1] * dp[i - 1]) / denom
    sol = np.zeros_like(rhs, dtype=float)
    sol[k - 1] = dp[k - 1]
    for i in range(k - 2, -1, -1):
        sol[i] = dp[i] - cp[i] * sol[i + 1]
    m[1:-1] = sol
    return m


def _piece_coefficients(x: np.ndarray, y: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Local coefficients (a, b, c, d) per piece from knot values and M."""
    h = np.diff(x).reshape((-1,) + (1,) * (y.ndim - 1))
    a = y[:-1]
    b = (y[1:] - y[:-1]) / h - h * (2.0 * m[:-1] + m[1:]) / 6.0
    c = m[:-1] / 2.0
    d = (m[1:] - m[:-1]) / (6.0 * h)
    return np.stack([a, b, c, d], axis=1)  # (n-1, 4, ...)


def _poly_powers(u: np.ndarray, deriv: int) -> np.ndarray:
    """Rows [d^k/du^k u^j for j=0..3] evaluated at u, shape (len(u), 4)."""
    u = np.asarray(u, dtype=float)
    out = np.zeros(u.shape + (4,))
    for j in range(deriv, 4):
        fact = 1.0
        for t in range(deriv):
            fact *= j - t
        out[..., j] = fact * u ** (j - deriv)
    return out


def _dot4(powers: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """Row-wise dot of (n, 4) powers with (n, 4) coefficients in fixed order."""
    return ((powers[:, 0] * coef[:, 0] + powers[:, 1] * coef[:, 1])
            + powers[:, 2] * coef[:, 2]) + powers[:, 3] * coef[:, 3]


def _bidot(pu: np.ndarray, coef: np.ndarray, pv: np.ndarray) -> np.ndarray:
    """sum_mn pu[:, m] coef[:, m, n] pv[:, n], elementwise and order-fixed."""
    out = np.zeros(len(pu))
    for m in range(4):
        out = out + pu[:, m] * _dot4(pv, coef[:, m, :])
    return out


def _locate(knots: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Piece index for each query, left-closed; the right end joins the last piece."""
    idx = np.searchsorted(knots, q, side="right") - 1
    return np.clip(idx, 0, len(knots) - 2)


@dataclass
class CubicSpline1D:
    """Piecewise cubic through ``knots``; piece i is
    ``a + b u + c u^2 + d u^3`` with ``u = x - knots[i]``."""

    knots: np.ndarray
    values: np.ndarray
    coefficients: np.ndarray  # (n-1, 4)
    linear_fallback: bool = False

    @property
    def n_pieces(self) -> int:
        return len(self.knots) - 1

    def __call__(self, x, deriv: int = 0) -> np.ndarray | float:
        scalar = np.ndim(x) == 0
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if len(self.knots) == 1:
            out = np.full(x.shape, self.values[0] if deriv == 0 else 0.0)
        else:
            xc = np.clip(x, self.knots[0], self.knots[-1])
            i = _locate(self.knots, xc)
            u = xc - self.knots[i]
            out = _dot4(_poly_powers(u, deriv), self.coefficients[i])
            if deriv == 0:
                exact = np.searchsorted(self.knots, xc)
                hit = (exact < len(self.knots)) & (
                    self.knots[np.minimum(exact, len(self.knots) - 1)] == xc)
                out[hit] = self.values[exact[hit]]
        return float(out[0]) if scalar else out

    def global_coefficients(self) -> np.ndarray:
        """Per-piece (c0, c1, c2, c3) with g_i(x) = c0 + c1 x + c2 x^2 + c3 x^3."""
        out = np.zeros_like(self.coefficients)
        for i, (a, b, c, d) in enumerate(self.coefficients):
            s = self.knots[i]
            out[i] = (a - b * s + c * s * s - d * s ** 3,
                      b - 2 * c * s + 3 * d * s * s,
                      c - 3 * d * s,
                      d)
        return out

    def to_dict(self) -> dict:
        return {"knots": _codec.enc_array(self.knots),
                "values": _codec.enc_array(self.values),
                "coefficients": _codec.enc_array(self.coefficients),
                "linear_fallback": self.linear_fallback}

    @classmethod
    def from_dict(cls, d: dict) -> CubicSpline1D:
        coef = _codec.dec_array(d["coefficients"]).reshape(-1, 4)
        return cls(_codec.dec_array(d["knots"]), _codec.dec_array(d["values"]), coef,
                   bool(d["linear_fallback"]))


def _dedupe(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D arrays of equal length")
    ux, inv = np.unique(x, return_inverse=True)
    if len(ux) == len(x):
        order = np.argsort(x, kind="stable")
        return x[order], y[order]
    sums = np.bincount(inv, weights=y)
    counts = np.bincount(inv)
    return ux, sums / counts


def fit_spline_1d(x, y) -> CubicSpline1D:
    """Relaxed cubic spline (zero end curvature) through the points.

    Repeated x are averaged.  Fewer than three distinct knots yields a
    piecewise-linear (or constant) curve with ``linear_fallback`` set.
    """
    xs, ys = _dedupe(x, y)
    n = len(xs)
    if n == 0:
        raise ValueError("need at least one point")
    if n < 3:
        if n == 1:
            coef = np.zeros((0, 4))
        else:
            coef = np.array([[ys[0], (ys[1] - ys[0]) / (xs[1] - xs[0]), 0.0, 0.0]])
        return CubicSpline1D(xs, ys, coef, linear_fallback=True)
    # N interpolation + (N-2) continuity + 2(N-2) derivative matching + 2 ends
    constraints = n + (n - 2) + 2 * (n - 2) + 2
    assert constraints == 4 * (n - 1)
    m = _natural_second_derivatives(xs, ys)
    coef = _piece_coefficients(xs, ys, m)
    assert coef.shape == (n - 1, 4)
    return CubicSpline1D(xs, ys, coef)


def _spline_knot_slopes(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """First derivatives at the knots of the natural spline(s) along axis 0."""
    n = len(x)
    if n == 1:
        return np.zeros_like(y, dtype=float)
    if n == 2:
        s = (y[1] - y[0]) / (x[1] - x[0])
        return np.stack([s, s])
    m = _natural_second_derivatives(x, y)
    coef = _piece_coefficients(x, y, m)  # (n-1, 4, ...)
    h = np.diff(x).reshape((-1,) + (1,) * (y.ndim - 1))
    out = np.empty_like(y, dtype=float)
    out[:-1] = coef[:, 1]
    out[-1] = coef[-1, 1] + 2 * coef[-1, 2] * h[-1] + 3 * coef[-1, 3] * h[-1] ** 2
    return out


# ---------------------------------------------------------------------------
# bicubic sheets

def _hermite_matrix(h: np.ndarray) -> np.ndarray:
    """Maps [g(0), g(h), g'(0), g'(h)] -> power coefficients, batched over h."""
    h = np.asarray(h, dtype=float)
    c = np.zeros(h.shape + (4, 4))
    c[..., 0, 0] = 1.0
    c[..., 1, 2] = 1.0
    c[..., 2, 0] = -3.0 / h ** 2
    c[..., 2, 1] = 3.0 / h ** 2
    c[..., 2, 2] = -2.0 / h
    c[..., 2, 3] = -1.0 / h
    c[..., 3, 0] = 2.0 / h ** 3
    c[..., 3, 1] = -2.0 / h ** 3
    c[..., 3, 2] = 1.0 / h ** 2
    c[..., 3, 3] = 1.0 / h ** 2
    return c


@dataclass
class BicubicGridSurface:
    """Tensor-product relaxed spline over an N x M (p, cc) grid.

    ``coefficients[i, j, m, n]`` multiplies ``u**m * v**n`` on cell
    ``[p_i, p_{i+1}] x [cc_j, cc_{j+1}]`` with ``u = p - p_i``, ``v = cc - cc_j``.
    """

    p_knots: np.ndarray
    cc_knots: np.ndarray
    values: np.ndarray
    coefficients: np.ndarray

    def evaluate(self, p, cc, dp: int = 0, dcc: int = 0) -> np.ndarray:
        p = np.clip(np.asarray(p, dtype=float), self.p_knots[0], self.p_knots[-1])
        cc = np.clip(np.asarray(cc, dtype=float), self.cc_knots[0], self.cc_knots[-1])
        p, cc = np.broadcast_arrays(p, cc)
        shape = p.shape
        p, cc = p.ravel(), cc.ravel()
        i = _locate(self.p_knots, p)
        j = _locate(self.cc_knots, cc)
        pu = _poly_powers(p - self.p_knots[i], dp)
        pv = _poly_powers(cc - self.cc_knots[j], dcc)
        out = _bidot(pu, self.coefficients[i, j], pv)
        if dp == 0 and dcc == 0:
            # vertices return stored data exactly
            ii = np.searchsorted(self.p_knots, p)
            jj = np.searchsorted(self.cc_knots, cc)
            ii_c = np.minimum(ii, len(self.p_knots) - 1)
            jj_c = np.minimum(jj, len(self.cc_knots) - 1)
            hit = (self.p_knots[ii_c] == p) & (self.cc_knots[jj_c] == cc)
            out[hit] = self.values[ii_c[hit], jj_c[hit]]
        return out.reshape(shape)

    def __call__(self, p, cc):
        return self.evaluate(p, cc)

    def evaluate_orders(self, p: np.ndarray, cc: np.ndarray, orders) -> dict:
        """Several raw partials at once for flat, in-hull arrays (shared cell lookup)."""
        i = _locate(self.p_knots, p)
        j = _locate(self.cc_knots, cc)
        u = p - self.p_knots[i]
        v = cc - self.cc_knots[j]
        coef = self.coefficients[i, j]
        pu = {d: _poly_powers(u, d) for d in {o[0] for o in orders}}
        pv = {d: _poly_powers(v, d) for d in {o[1] for o in orders}}
        return {o: _bidot(pu[o[0]], coef, pv[o[1]]) for o in orders}

    def to_dict(self) -> dict:
        return {"p_knots": _codec.enc_array(self.p_knots),
                "cc_knots": _codec.enc_array(self.cc_knots),
                "values": _codec.enc_array(self.values),
                "coefficients": _codec.enc_array(self.coefficients)}

    @classmethod
    def from_dict(cls, d: dict) -> BicubicGridSurface:
        return cls(_codec.dec_array(d["p_knots"]), _codec.dec_array(d["cc_knots"]),
                   _codec.dec_array(d["values"]), _codec.dec_array(d["coefficients"]))


def fit_surface_2d(p_knots, cc_knots, values) -> BicubicGridSurface:
    """Bicubic sheet interpolating ``values[i, j]`` at ``(p_knots[i], cc_knots[j])``.

    Knot slopes come from relaxed splines along rows, columns and (for the
    twist) along cc of the p-slopes; each cell is then the bicubic Hermite
    patch of that data, which is exactly the tensor-product spline.
    """
    x = np.asarray(p_knots, dtype=float)
    y = np.asarray(cc_knots, dtype=float)
    z = np.asarray(values, dtype=float)
    if z.shape != (len(x), len(y)):
        raise ValueError(f"values shape {z.shape} != ({len(x)}, {len(y)})")
    if len(x) < 3 or len(y) < 3:
        raise ValueError("grid must be at least 3 x 3")
    if np.any(np.diff(x) <= 0) or np.any(np.diff(y) <= 0):
        raise ValueError("knots must be strictly increasing")
    if not np.all(np.isfinite(z)):
        raise ValueError("incomplete grid: fill holes before fitting")
    zx = _spline_knot_slopes(x, z)
    zy = _spline_knot_slopes(y, z.T).T
    zxy = _spline_knot_slopes(y, zx.T).T

    def corners(a):
        return a[:-1, :-1], a[:-1, 1:], a[1:, :-1], a[1:, 1:]

    f00, f01, f10, f11 = corners(z)
    x00, x01, x10, x11 = corners(zx)
    y00, y01, y10, y11 = corners(zy)
    t00, t01, t10, t11 = corners(zxy)
    data = np.stack([
        np.stack([f00, f01, y00, y01], axis=-1),
        np.stack([f10, f11, y10, y11], axis=-1),
        np.stack([x00, x01, t00, t01], axis=-1),
        np.stack([x10, x11, t10, t11], axis=-1),
    ], axis=-2)  # (N-1, M-1, 4, 4)
    hx = np.diff(x)[:, None] * np.ones(len(y) - 1)[None, :]
    hy = np.ones(len(x) - 1)[:, None] * np.diff(y)[None, :]
    cx = _hermite_matrix(hx)
    cy = _hermite_matrix(hy)
    coef = np.einsum("abmr,abrs,abns->abmn", cx, data, cy)
    return BicubicGridSurface(x, y, z, coef)


# ---------------------------------------------------------------------------
# regression baselines

def _monomials(degree: int) -> list[tuple[int, int, int]]:
    terms = [e for e in itertools.product(range(degree + 1), repeat=3) if sum(e) <= degree]
    return sorted(terms, key=lambda e: (-sum(e), [-v for v in e]))


_KIND_DEGREE = {"constant": 0, "linear": 1, "quadratic": 2, "cubic": 3}


def _term_name(e: tuple[int, int, int]) -> str:
    parts = []
    for name, k in zip(("p", "cc", "pp"), e):
        if k == 1:
            parts.append(name)
        elif k > 1:
            parts.append(f"{name}^{k}")
    return "*".join(parts) or "1"


class RankDeficientError(ValueError):
    def __init__(self, terms: list[str]):
        super().__init__("rank-deficient design; unidentifiable terms: " + ", ".join(terms))
        self.terms = terms


@dataclass
class RegressionModel:
    """Polynomial least-squares surface in (p, cc, pp)."""

    kind: str
    terms: list[tuple[int, int, int]]
    coefficients: np.ndarray
    r2: float = float("nan")

    @property
    def term_names(self) -> list[str]:
        return [_term_name(t) for t in self.terms]

    def design(self, p, cc, pp) -> np.ndarray:
        p, cc, pp = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (p, cc, pp))
        return np.stack([p ** a * cc ** b * pp ** c for a, b, c in self.terms], axis=-1)

    def predict(self, p, cc, pp, clamp: bool = True) -> np.ndarray:
        out = self.design(p, cc, pp) @ self.coefficients
        return np.maximum(out, 0.0) if clamp else out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "terms": [list(t) for t in self.terms],
                "coefficients": _codec.enc_array(self.coefficients),
                "r2": _codec.enc_float(self.r2)}

    @classmethod
    def from_dict(cls, d: dict) -> RegressionModel:
        return cls(d["kind"], [tuple(t) for t in d["terms"]],
                   _codec.dec_array(d["coefficients"]), float(d["r2"]))


def fit_regression(points, kind: str = "quadratic") -> RegressionModel:
    """Ordinary least squares fit of a full polynomial in (p, cc, pp).

    ``points`` is an (n, 4) array-like of (p, cc, pp, th).  Positivity is
    enforced at prediction time by clamping, not during the fit.
    """
    if kind not in _KIND_DEGREE:
        raise ValueError(f"unknown regression kind {kind!r}")
    pts = np.asarray(points, dtype=float).reshape(-1, 4)
    terms = _monomials(_KIND_DEGREE[kind])
    model = RegressionModel(kind, terms, np.zeros(len(terms)))
    if len(pts) < len(terms):
        raise ValueError(f"{kind} regression needs >= {len(terms)} points, got {len(pts)}")
    a = model.design(pts[:, 0], pts[:, 1], pts[:, 2])
    y = pts[:, 3]
    scale = np.linalg.norm(a, axis=0)
    scale[scale == 0] = 1.0
    a_s = a / scale
    _, s, vt = np.linalg.svd(a_s, full_matrices=False)
    tol = s[0] * max(a_s.shape) * 1e-12 if s.size else 0.0
    rank = int(np.sum(s > tol))
    if rank < len(terms):
        null = vt[rank:]
        bad = [model.term_names[k] for k in range(len(terms))
               if np.max(np.abs(null[:, k])) > 1e-6]
        raise RankDeficientError(bad)
    q, r = np.linalg.qr(a_s)
    coef = np.linalg.solve(r, q.T @ y) / scale
    model.coefficients = coef
    resid = y - a @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid ** 2))
    model.r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res < 1e-18 else 0.0)
    return model


def fit_best_regression(points) -> RegressionModel:
    """Richest regression the data supports: cubic, quadratic, linear, then constant."""
    for kind in ("cubic", "quadratic", "linear", "constant"):
        try:
            return fit_regression(points, kind)
        except ValueError:
            continue
    raise ValueError("no points to fit")


# ---------------------------------------------------------------------------
# lattice grids from scattered observations

@dataclass
class Grid:
    """Rectangular (p, cc, pp) lattice of averaged observations."""

    p_knots: np.ndarray
    cc_knots: np.ndarray
    pp_knots: np.ndarray
    mu: np.ndarray        # (Np, Ncc, Npp)
    sigma: np.ndarray
    counts: np.ndarray    # observations per point; 0 marks a filled hole
    fill_fraction: float = 0.0

    @property
    def observed(self) -> np.ndarray:
        return self.counts > 0

    @property
    def low_confidence(self) -> bool:
        return self.fill_fraction > MAX_FILL_FRACTION

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.mu.shape


def _neighbour_weights(coords: list[np.ndarray], idx: tuple[int, ...],
                       weighted: bool) -> list[tuple[tuple[int, ...], float]]:
    """Face-neighbour weights for one grid point.

    weighted: average of per-axis linear interpolations over axes where the
    point has both neighbours (exact on affine data); corners fall back to a
    plain mean.  Otherwise a plain mean of all face neighbours.
    """
    plain, axis_terms = [], []
    for ax, c in enumerate(coords):
        k = idx[ax]
        lo = k - 1 >= 0
        hi = k + 1 < len(c)
        if lo:
            plain.append(idx[:ax] + (k - 1,) + idx[ax + 1:])
        if hi:
            plain.append(idx[:ax] + (k + 1,) + idx[ax + 1:])
        if lo and hi:
            t = (c[k] - c[k - 1]) / (c[k + 1] - c[k - 1])
            axis_terms.append([(idx[:ax] + (k - 1,) + idx[ax + 1:], 1 - t),
                               (idx[:ax] + (k + 1,) + idx[ax + 1:], t)])
    if weighted and axis_terms:
        w = 1.0 / len(axis_terms)
        return [(nb, w * tw) for pair in axis_terms for nb, tw in pair]
    if not plain:
        return []
    return [(nb, 1.0 / len(plain)) for nb in plain]


def fill_holes(values: np.ndarray, known: np.ndarray, coords=None,
               weighted: bool = True) -> np.ndarray:
    """Fill unknown grid cells with the fixpoint of neighbour averaging.

    Every hole equals the (weighted) average of its face neighbours, known
    or filled.  The fixpoint is computed directly as the solution of that
    linear system rather than by sweeping.
    """
    values = np.array(values, dtype=float)
    known = np.asarray(known, dtype=bool)
    holes = list(zip(*np.nonzero(~known)))
    if not holes:
        return values
    if not known.any():
        raise ValueError("cannot fill a grid with no observations")
    if coords is None:
        coords = [np.arange(s, dtype=float) for s in values.shape]
    pos = {h: k for k, h in enumerate(holes)}
    n = len(holes)
    a = np.eye(n)
    b = np.zeros(n)
    for k, h in enumerate(holes):
        for nb, w in _neighbour_weights(coords, tuple(int(v) for v in h), weighted):
            if nb in pos:
                a[k, pos[nb]] -= w
            else:
                b[k] += w * values[nb]
    sol = np.linalg.solve(a, b)
    for k, h in enumerate(holes):
        values[h] = sol[k]
    return values


def build_grid(entries: list[TransferLogEntry] | list[ObservationGroup],
               lattice: Lattice = DEFAULT_LATTICE) -> Grid:
    """Quantize observations onto a rectangular lattice and fill the holes.

    Knots along each axis are the distinct observed coordinates.  Repeated
    observations at one point are averaged (population stddev kept).
    """
    groups = _as_groups(entries, lattice)
    if not groups:
        raise ValueError("no observations")
    ps = np.array(sorted({g.params.p for g in groups}), dtype=float)
    ccs = np.array(sorted({g.params.cc for g in groups}), dtype=float)
    pps = np.array(sorted({g.params.pp for g in groups}), dtype=float)
    shape = (len(ps), len(ccs), len(pps))
    mu = np.full(shape, np.nan)
    sigma = np.full(shape, np.nan)
    counts = np.zeros(shape, dtype=int)
    pi = {v: k for k, v in enumerate(ps)}
    ci = {v: k for k, v in enumerate(ccs)}
    qi = {v: k for k, v in enumerate(pps)}
    for g in groups:
        ix = (pi[g.params.p], ci[g.params.cc], qi[g.params.pp])
        mu[ix] = g.mean
        sigma[ix] = g.stddev
        counts[ix] = g.n
    known = counts > 0
    coords = [ps, ccs, pps]
    mu = fill_holes(mu, known, coords, weighted=True)
    sigma = fill_holes(sigma, known, coords, weighted=False)
    fill = float(1.0 - known.mean())
    grid = Grid(ps, ccs, pps, mu, sigma, counts, fill)
    if grid.low_confidence:
        log.warning("grid is %.0f%% synthetic; marked low-confidence", 100 * fill)
    return grid


def _quantize(params: ParamTriple, lattice: Lattice) -> ParamTriple:
    return lattice.clamp(params)


def _as_groups(items, lattice: Lattice) -> list[ObservationGroup]:
    items = list(items)
    if items and isinstance(items[0], ObservationGroup):
        merged: dict[ParamTriple, ObservationGroup] = {}
        for g in items:
            k = _quantize(g.params, lattice)
            tgt = merged.setdefault(k, ObservationGroup(None, k))
            tgt.samples.extend(g.samples)
        out = list(merged.values())
        for g in out:
            g.recompute()
        return out
    quantized = []
    for e in items:
        q = _quantize(e.params, lattice)
        quantized.append(e if q == e.params else _replace_params(e, q))
    return group_observations(quantized, key=None)


def _replace_params(e: TransferLogEntry, params: ParamTriple) -> TransferLogEntry:
    from dataclasses import replace
    return replace(e, params=params)


# ---------------------------------------------------------------------------
# confidence envelopes

@dataclass(frozen=True)
class Envelope:
    mu: float
    sigma: float
    n: int
    synthetic: bool = False


def confidence_envelope(groups: list[ObservationGroup], axes=None
                        ) -> dict[ParamTriple, Envelope]:
    """Per-lattice-point (mu, sigma).

    Observed points pass through unchanged.  With ``axes=(p, cc, pp)`` the
    remaining points of that grid are added with sigma equal to the mean of
    their face neighbours (iterated to a fixpoint) and flagged synthetic.
    """
    env: dict[ParamTriple, Envelope] = {}
    for g in groups:
        env[g.params] = Envelope(g.mean, g.stddev, g.n)
    if axes is None or not env:
        return env
    ps, ccs, pps = (np.asarray(a, dtype=int) for a in axes)
    shape = (len(ps), len(ccs), len(pps))
    sig = np.full(shape, np.nan)
    known = np.zeros(shape, dtype=bool)
    for i, p in enumerate(ps):
        for j, cc in enumerate(ccs):
            for k, pp in enumerate(pps):
                e = env.get(ParamTriple(int(cc), int(p), int(pp)))
                if e is not None:
                    sig[i, j, k] = e.sigma
                    known[i, j, k] = True
    if known.all():
        return env
    filled = fill_holes(sig, known, weighted=False)
    for i, j, k in zip(*np.nonzero(~known)):
        env[ParamTriple(int(ccs[j]), int(ps[i]), int(pps[k]))] = Envelope(
            float("nan"), float(filled[i, j, k]), 0, synthetic=True)
    return env


# ---------------------------------------------------------------------------
# composed (p, cc, pp) surface

def _cardinal_basis(pp_knots: np.ndarray) -> np.ndarray:
    """Coefficients (K, K-1, 4) of the relaxed-spline cardinal functions on pp."""
    k = len(pp_knots)
    if k < 2:
        return np.zeros((k, 0, 4))
    eye = np.eye(k)
    if k == 2:
        return np.stack([fit_spline_1d(pp_knots, e).coefficients for e in eye])
    m = _natural_second_derivatives(pp_knots, eye)  # (K, K) batched over columns
    coef = _piece_coefficients(pp_knots, eye, m)    # (K-1, 4, K)
    return np.moveaxis(coef, -1, 0)


@dataclass
class ThroughputSurface:
    """Predicted throughput over (p, cc, pp) for one cluster and load band.

    Off-knot pp values combine the sheets with the relaxed-spline cardinal
    functions of the pp knots, i.e. pp is splined pointwise across sheets.
    Averaged over the (p, cc) grid this reproduces ``pp_curve`` exactly.
    A surface without enough grid support carries a regression ``fallback``
    instead of sheets.
    """

    pp_knots: np.ndarray
    sheets: list[BicubicGridSurface]
    pp_curve: CubicSpline1D | None
    sigma_grid: np.ndarray | None = None   # (Np, Ncc, Npp), raw population stddev
    count_grid: np.ndarray | None = None
    cluster_id: int = 0
    load_tag: float = 0.0
    fill_fraction: float = 0.0
    low_confidence: bool = False
    fallback: RegressionModel | None = None
    fallback_sigma: float = 0.0
    lattice: Lattice = DEFAULT_LATTICE
    precomputed_argmax: tuple[ParamTriple, float] | None = None
    _basis: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.pp_knots = np.asarray(self.pp_knots, dtype=float)
        if self._basis is None:
            self._basis = _cardinal_basis(self.pp_knots)

    # -- hull -----------------------------------------------------------
    @property
    def p_knots(self) -> np.ndarray:
        return self.sheets[0].p_knots if self.sheets else np.array([1.0, self.lattice.p_max])

    @property
    def cc_knots(self) -> np.ndarray:
        return self.sheets[0].cc_knots if self.sheets else np.array([1.0, self.lattice.cc_max])

    def hull(self) -> tuple[tuple[float, float], tuple[float, float], tuple[float, float]]:
        """((p_lo, p_hi), (cc_lo, cc_hi), (pp_lo, pp_hi))."""
        if self.fallback is not None:
            return ((1.0, float(self.lattice.p_max)), (1.0, float(self.lattice.cc_max)),
                    (1.0, float(self.lattice.pp_max)))
        return ((self.p_knots[0], self.p_knots[-1]), (self.cc_knots[0], self.cc_knots[-1]),
                (self.pp_knots[0], self.pp_knots[-1]))

    def in_hull(self, p, cc, pp) -> np.ndarray:
        (a, b), (c, d), (e, f) = self.hull()
        p, cc, pp = (np.asarray(v, dtype=float) for v in (p, cc, pp))
        return (p >= a) & (p <= b) & (cc >= c) & (cc <= d) & (pp >= e) & (pp <= f)

    # -- evaluation -----------------------------------------------------
    def _pp_basis(self, pp: np.ndarray, deriv: int) -> np.ndarray:
        k = len(self.pp_knots)
        if k == 1:
            return np.full((1, len(pp)), 1.0 if deriv == 0 else 0.0)
        i = _locate(self.pp_knots, pp)
        u = pp - self.pp_knots[i]
        powers = _poly_powers(u, deriv)                        # (n, 4)
        out = np.stack([_dot4(powers, self._basis[b, i, :]) for b in range(k)])
        if deriv == 0:
            hit = self._knot_hits(pp)
            if hit.any():
                pos = np.minimum(np.searchsorted(self.pp_knots, pp), k - 1)
                out[:, hit] = 0.0
                out[pos[hit], np.nonzero(hit)[0]] = 1.0
        return out

    def _knot_hits(self, pp: np.ndarray) -> np.ndarray:
        pos = np.minimum(np.searchsorted(self.pp_knots, pp), len(self.pp_knots) - 1)
        return self.pp_knots[pos] == pp

    @staticmethod
    def _blend(weights: np.ndarray, vals: list[np.ndarray], deriv: int,
               hit: np.ndarray) -> np.ndarray:
        """Combine sheet values with pp weights, anchored on the first sheet.

        The weights sum to one (zero for derivatives), so anchoring keeps a
        pp-constant surface exactly constant.  At pp knots the weights are
        one-hot and the plain sum returns the sheet value bit for bit.
        """
        base = vals[0]
        total = base.copy() if deriv == 0 else np.zeros_like(base)
        for k in range(1, len(vals)):
            total += weights[k] * (vals[k] - base)
        if deriv == 0 and hit.any():
            plain = np.zeros_like(base)
            for k in range(len(vals)):
                plain += weights[k] * vals[k]
            total = np.where(hit, plain, total)
        return total

    def partial(self, p, cc, pp, dp: int = 0, dcc: int = 0, dpp: int = 0) -> np.ndarray:
        """Raw (unclamped) model value or partial derivative; inputs clamped to the hull."""
        (a, b), (c, d), (e, f) = self.hull()
        p, cc, pp = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (p, cc, pp)))
        shape = p.shape
        p = np.clip(p.ravel(), a, b)
        cc = np.clip(cc.ravel(), c, d)
        pp = np.clip(pp.ravel(), e, f)
        if self.fallback is not None:
            out = _regression_partial(self.fallback, p, cc, pp, dp, dcc, dpp)
            return out.reshape(shape)
        basis = self._pp_basis(pp, dpp)                       # (K, n)
        vals = [sheet.evaluate(p, cc, dp, dcc) for sheet in self.sheets]
        return self._blend(basis, vals, dpp, self._knot_hits(pp)).reshape(shape)

    def evaluate(self, p, cc, pp) -> np.ndarray:
        """Predicted throughput, clamped at zero."""
        return np.maximum(self.partial(p, cc, pp), 0.0)

    def __call__(self, params: ParamTriple) -> float:
        return float(self.evaluate(params.p, params.cc, params.pp))

    def derivatives(self, p, cc, pp) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Raw value, gradient (n, 3) and Hessian (n, 3, 3) at flat arrays, one pass."""
        (a, b), (c, d), (e, f) = self.hull()
        p = np.clip(np.asarray(p, dtype=float).ravel(), a, b)
        cc = np.clip(np.asarray(cc, dtype=float).ravel(), c, d)
        pp = np.clip(np.asarray(pp, dtype=float).ravel(), e, f)
        if self.fallback is not None:
            return (self.partial(p, cc, pp), self.gradient(p, cc, pp), self.hessian(p, cc, pp))
        sheet_orders = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
        bases = {z: self._pp_basis(pp, z) for z in range(3)}
        hit = self._knot_hits(pp)
        per_sheet = [sheet.evaluate_orders(p, cc, sheet_orders) for sheet in self.sheets]
        acc = {(x, y, z): self._blend(bases[z], [v[x, y] for v in per_sheet], z, hit)
               for x, y in sheet_orders for z in range(3) if x + y + z <= 2}
        g = np.stack([acc[1, 0, 0], acc[0, 1, 0], acc[0, 0, 1]], axis=-1)
        h = np.empty((len(p), 3, 3))
        h[:, 0, 0] = acc[2, 0, 0]
        h[:, 1, 1] = acc[0, 2, 0]
        h[:, 2, 2] = acc[0, 0, 2]
        h[:, 0, 1] = h[:, 1, 0] = acc[1, 1, 0]
        h[:, 0, 2] = h[:, 2, 0] = acc[1, 0, 1]
        h[:, 1, 2] = h[:, 2, 1] = acc[0, 1, 1]
        return acc[0, 0, 0], g, h

    def gradient(self, p, cc, pp) -> np.ndarray:
        """Gradient in (p, cc, pp) order, shape (..., 3)."""
        return np.stack([self.partial(p, cc, pp, 1, 0, 0),
                         self.partial(p, cc, pp, 0, 1, 0),
                         self.partial(p, cc, pp, 0, 0, 1)], axis=-1)

    def hessian(self, p, cc, pp) -> np.ndarray:
        """Hessian in (p, cc, pp) order, shape (..., 3, 3)."""
        d = {}
        for o in ((2, 0, 0), (1, 1, 0), (1, 0, 1), (0, 2, 0), (0, 1, 1), (0, 0, 2)):
            d[o] = self.partial(p, cc, pp, *o)
        h = np.stack([
            np.stack([d[2, 0, 0], d[1, 1, 0], d[1, 0, 1]], axis=-1),
            np.stack([d[1, 1, 0], d[0, 2, 0], d[0, 1, 1]], axis=-1),
            np.stack([d[1, 0, 1], d[0, 1, 1], d[0, 0, 2]], axis=-1),
        ], axis=-2)
        return h

    # -- confidence -----------------------------------------------------
    def sigma_at(self, p, cc, pp) -> np.ndarray:
        """Raw stddev at (p, cc, pp): trilinear over the grid, constant for fallbacks."""
        if self.sigma_grid is None:
            return np.full(np.shape(p), self.fallback_sigma, dtype=float)
        return _trilinear((self.p_knots, self.cc_knots, self.pp_knots), self.sigma_grid,
                          p, cc, pp)

    def envelope(self, params: ParamTriple, floor_frac: float = SIGMA_FLOOR_FRAC
                 ) -> tuple[float, float]:
        """(mu, sigma) used for membership tests, sigma floored at a fraction of mu."""
        mu = self(params)
        sig = float(self.sigma_at(params.p, params.cc, params.pp))
        return mu, sigma_with_floor(mu, sig, floor_frac)

    # -- persistence ----------------------------------------------------
    def to_dict(self) -> dict:
        d = {
            "cluster_id": self.cluster_id,
            "load_tag": _codec.enc_float(self.load_tag),
            "pp_knots": _codec.enc_array(self.pp_knots),
            "sheets": [s.to_dict() for s in self.sheets],
            "pp_curve": self.pp_curve.to_dict() if self.pp_curve is not None else None,
            "confidence": {
                "sigma": _codec.enc_array(self.sigma_grid) if self.sigma_grid is not None else None,
                "counts": self.count_grid.astype(int).ravel().tolist()
                if self.count_grid is not None else None,
                "fallback_sigma": _codec.enc_float(self.fallback_sigma),
            },
            "fill_fraction": _codec.enc_float(self.fill_fraction),
            "low_confidence": self.low_confidence,
            "fallback": self.fallback.to_dict() if self.fallback is not None else None,
            "lattice": [self.lattice.cc_max, self.lattice.p_max, self.lattice.pp_max],
            "argmax": None,
        }
        if self.precomputed_argmax is not None:
            prm, val = self.precomputed_argmax
            d["argmax"] = {"cc": prm.cc, "p": prm.p, "pp": prm.pp,
                           "value": _codec.enc_float(val)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ThroughputSurface:
        conf = d["confidence"]
        sigma = _codec.dec_array(conf["sigma"]) if conf["sigma"] is not None else None
        counts = None
        if conf["counts"] is not None and sigma is not None:
            counts = np.array(conf["counts"], dtype=int).reshape(sigma.shape)
        lat = Lattice(*[int(v) for v in d["lattice"]])
        surf = cls(
            pp_knots=_codec.dec_array(d["pp_knots"]),
            sheets=[BicubicGridSurface.from_dict(s) for s in d["sheets"]],
            pp_curve=CubicSpline1D.from_dict(d["pp_curve"]) if d["pp_curve"] else None,
            sigma_grid=sigma, count_grid=counts, cluster_id=int(d["cluster_id"]),
            load_tag=float(d["load_tag"]), fill_fraction=float(d["fill_fraction"]),
            low_confidence=bool(d["low_confidence"]),
            fallback=RegressionModel.from_dict(d["fallback"]) if d["fallback"] else None,
            fallback_sigma=float(conf["fallback_sigma"]), lattice=lat)
        if d["argmax"] is not None:
            a = d["argmax"]
            surf.precomputed_argmax = (ParamTriple(a["cc"], a["p"], a["pp"]),
                                       float(a["value"]))
        return surf


def _trilinear(axes, grid, p, cc, pp) -> np.ndarray:
    pts = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (p, cc, pp)))
    shape = pts[0].shape
    idx, frac = [], []
    for ax, q in zip(axes, pts):
        q = np.clip(q.ravel(), ax[0], ax[-1])
        if len(ax) == 1:
            idx.append(np.zeros(len(q), dtype=int))
            frac.append(np.zeros(len(q)))
            continue
        i = _locate(ax, q)
        idx.append(i)
        frac.append((q - ax[i]) / (ax[i + 1] - ax[i]))
    out = np.zeros(len(idx[0]))
    for corner in itertools.product((0, 1), repeat=3):
        w = np.ones(len(out))
        ix = []
        for a, (c, i, t) in enumerate(zip(corner, idx, frac)):
            w = w * (t if c else 1 - t)
            ix.append(np.minimum(i + c, grid.shape[a] - 1))
        out += w * grid[ix[0], ix[1], ix[2]]
    return out.reshape(shape)


def _regression_partial(model: RegressionModel, p, cc, pp, dp, dcc, dpp) -> np.ndarray:
    out = np.zeros(len(p))
    for coef, (a, b, c) in zip(model.coefficients, model.terms):
        if a < dp or b < dcc or c < dpp:
            continue
        fa = np.prod(np.arange(a - dp + 1, a + 1)) if dp else 1
        fb = np.prod(np.arange(b - dcc + 1, b + 1)) if dcc else 1
        fc = np.prod(np.arange(c - dpp + 1, c + 1)) if dpp else 1
        out += coef * fa * fb * fc * p ** (a - dp) * cc ** (b - dcc) * pp ** (c - dpp)
    return out


def surface_from_grid(grid: Grid, cluster_id: int = 0, load_tag: float = 0.0,
                      lattice: Lattice = DEFAULT_LATTICE) -> ThroughputSurface:
    """Fit one bicubic sheet per pp knot plus the pp curve of sheet means."""
    sheets = [fit_surface_2d(grid.p_knots, grid.cc_knots, grid.mu[:, :, k])
              for k in range(len(grid.pp_knots))]
    means = grid.mu.mean(axis=(0, 1))
    pp_curve = fit_spline_1d(grid.pp_knots, means)
    return ThroughputSurface(
        pp_knots=grid.pp_knots, sheets=sheets, pp_curve=pp_curve,
        sigma_grid=grid.sigma, count_grid=grid.counts, cluster_id=cluster_id,
        load_tag=load_tag, fill_fraction=grid.fill_fraction,
        low_confidence=grid.low_confidence, lattice=lattice)


def fallback_surface(entries: list[TransferLogEntry] | list[ObservationGroup],
                     cluster_id: int = 0, load_tag: float = 0.0,
                     lattice: Lattice = DEFAULT_LATTICE) -> ThroughputSurface:
    """Regression-backed surface for slices too sparse for a spline grid."""
    groups = _as_groups(entries, lattice)
    pts = []
    for g in groups:
        for s in g.samples:
            pts.append((g.params.p, g.params.cc, g.params.pp, s))
    pts = np.array(pts, dtype=float)
    model = fit_best_regression(pts)
    resid = pts[:, 3] - model.predict(pts[:, 0], pts[:, 1], pts[:, 2], clamp=False)
    sigma = float(np.sqrt(np.mean(resid ** 2))) if len(pts) > 1 else 0.0
    return ThroughputSurface(pp_knots=np.array([1.0]), sheets=[], pp_curve=None,
                             cluster_id=cluster_id, load_tag=load_tag,
                             low_confidence=True, fallback=model, fallback_sigma=sigma,
                             lattice=lattice)


def fit_surface(entries, cluster_id: int = 0, load_tag: float = 0.0,
                lattice: Lattice = DEFAULT_LATTICE) -> ThroughputSurface:
    """Spline surface when the observations span a >= 3 x 3 (p, cc) grid, else fallback."""
    groups = _as_groups(entries, lattice)
    ps = {g.params.p for g in groups}
    ccs = {g.params.cc for g in groups}
    if len(ps) >= 3 and len(ccs) >= 3:
        grid = build_grid(groups, lattice)
        return surface_from_grid(grid, cluster_id, load_tag, lattice)
    log.warning("cluster %s band %.2f: %d observation points, using regression fallback",
                cluster_id, load_tag, len(groups))
    return fallback_surface(groups, cluster_id, load_tag, lattice)


def within_confidence(surface: ThroughputSurface, params: ParamTriple, observed: float,
                      z: float = DEFAULT_Z, floor_frac: float = SIGMA_FLOOR_FRAC) -> bool:
    """True iff ``observed`` lies within mu +/- z*sigma of the surface at ``params``."""
    if z <= 0:
        raise ValueError("z must be positive")
    mu, sig = surface.envelope(params, floor_frac)
    return abs(observed - mu) <= z * sig
