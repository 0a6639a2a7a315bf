import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xfertune.core import DatasetProfile, Lattice, NetworkProfile, ParamTriple, TransferLogEntry
from xfertune.ingest import ObservationGroup, group_observations
from xfertune.surface import (BicubicGridSurface, CubicSpline1D, RankDeficientError,
                              ThroughputSurface, build_grid, confidence_envelope, fill_holes,
                              fit_regression, fit_spline_1d, fit_surface, fit_surface_2d,
                              surface_from_grid, within_confidence)

from oracles import dense_spline_coefficients, eval_local_poly, scipy_natural, tensor_natural

NET = NetworkProfile(100000.0, 10.0, 1 << 20)
DS = DatasetProfile(1e6, 10)


def knots_strategy(min_size=3, max_size=12):
    return st.lists(st.floats(0.5, 64.0), min_size=min_size, max_size=max_size,
                    unique=True).filter(lambda xs: np.min(np.diff(sorted(xs))) > 1e-2)


# -- 1-D ---------------------------------------------------------------------

def test_collinear_data_gives_the_line():
    s = fit_spline_1d([1, 2, 3, 4], [2, 4, 6, 8])
    assert np.allclose(s.coefficients[:, 2:], 0.0, atol=1e-12)
    xs = np.linspace(1, 4, 31)
    assert np.allclose(s(xs), 2 * xs, atol=1e-12)
    g = s.global_coefficients()
    assert np.allclose(g, [[0, 2, 0, 0]] * 3, atol=1e-12)


def test_three_point_hand_case_against_dense_system():
    x, y = [1, 2, 3], [1, 3, 2]
    s = fit_spline_1d(x, y)
    want = dense_spline_coefficients(x, y)
    assert np.allclose(s.coefficients, want, atol=1e-13)
    # hand solve: interior second derivative M satisfies 4M = 6*(-1 - 2) -> M = -4.5
    assert s(2.0, deriv=2) == pytest.approx(-4.5)
    assert s(1.0, deriv=2) == pytest.approx(0.0, abs=1e-12)
    assert s(3.0, deriv=2) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(knots_strategy(), st.data())
def test_matches_independent_oracles(xs, data):
    xs = np.sort(np.array(xs))
    ys = np.array(data.draw(st.lists(st.floats(-1e3, 1e3), min_size=len(xs),
                                     max_size=len(xs))))
    s = fit_spline_1d(xs, ys)
    scale = max(1.0, np.max(np.abs(ys)))
    dense = dense_spline_coefficients(xs, ys)
    assert np.allclose(s.coefficients, dense, rtol=1e-7, atol=1e-7 * scale * 10)
    ref = scipy_natural(xs, ys)
    q = np.linspace(xs[0], xs[-1], 57)
    assert np.allclose(s(q), ref(q), atol=1e-8 * scale * 10)


@settings(max_examples=60, deadline=None)
@given(knots_strategy(), st.data())
def test_spline_invariants(xs, data):
    xs = np.sort(np.array(xs))
    ys = np.array(data.draw(st.lists(st.floats(-1e3, 1e3), min_size=len(xs),
                                     max_size=len(xs))))
    s = fit_spline_1d(xs, ys)
    scale = max(1.0, np.max(np.abs(ys)))
    # interpolation at knots
    assert np.all(np.abs(s(xs) - ys) <= 1e-9 * np.maximum(1.0, np.abs(ys)))
    # C2 at interior knots, comparing the two adjacent pieces directly
    for i in range(1, len(xs) - 1):
        h = xs[i] - xs[i - 1]
        left = s.coefficients[i - 1]
        right = s.coefficients[i]
        v = [eval_local_poly(left, h), left[1] + 2 * left[2] * h + 3 * left[3] * h * h,
             2 * left[2] + 6 * left[3] * h]
        w = [right[0], right[1], 2 * right[2]]
        for a, b in zip(v, w):
            assert abs(a - b) <= 1e-6 * scale
    assert abs(s(xs[0], deriv=2)) <= 1e-6 * scale / 1e-3
    assert abs(2 * s.coefficients[0, 2]) <= 1e-9 * scale
    last = s.coefficients[-1]
    h = xs[-1] - xs[-2]
    assert abs(2 * last[2] + 6 * last[3] * h) <= 1e-6 * scale


def test_global_coefficients_agree_with_local():
    rng = np.random.default_rng(3)
    xs = np.array([1.0, 2.0, 4.0, 8.0, 16.0, 32.0])
    s = fit_spline_1d(xs, rng.uniform(0, 100, 6))
    g = s.global_coefficients()
    for i in range(5):
        q = np.linspace(xs[i], xs[i + 1], 7)
        assert np.allclose(np.polyval(g[i][::-1], q), s(q), rtol=1e-10, atol=1e-8)


def test_short_inputs_fall_back_to_linear():
    s = fit_spline_1d([1, 3], [0, 4])
    assert s.linear_fallback and s(2.0) == pytest.approx(2.0)
    one = fit_spline_1d([5], [7])
    assert one.linear_fallback and one(100.0) == 7.0
    avg = fit_spline_1d([1, 1, 2, 3], [0, 2, 5, 5])
    assert avg(1.0) == 1.0


def test_spline_round_trip():
    s = fit_spline_1d([1, 2, 5, 9], [3.1, 0.2, 7.7, 1 / 3])
    back = CubicSpline1D.from_dict(s.to_dict())
    q = np.linspace(1, 9, 50)
    assert np.array_equal(back(q), s(q))


# -- 2-D ---------------------------------------------------------------------

def _grid(n=5, m=6, seed=0):
    rng = np.random.default_rng(seed)
    px = np.cumsum(rng.uniform(0.5, 3, n)) + 1
    cy = np.cumsum(rng.uniform(0.5, 3, m)) + 1
    return px, cy, rng.uniform(0, 1000, (n, m))


def test_plane_reproduction():
    px = np.array([1.0, 2.0, 4.0, 8.0])
    cy = np.array([1.0, 3.0, 4.0, 16.0])
    z = 2 * px[:, None] + 3 * cy[None, :]
    s = fit_surface_2d(px, cy, z)
    p, c = np.meshgrid(np.linspace(1, 8, 41), np.linspace(1, 16, 43), indexing="ij")
    assert np.max(np.abs(s(p, c) - (2 * p + 3 * c))) < 1e-8


def test_vertices_and_tensor_oracle():
    px, cy, z = _grid()
    s = fit_surface_2d(px, cy, z)
    P, C = np.meshgrid(px, cy, indexing="ij")
    assert np.array_equal(s(P, C), z)
    rng = np.random.default_rng(1)
    p = rng.uniform(px[0], px[-1], 200)
    c = rng.uniform(cy[0], cy[-1], 200)
    ref = np.array([tensor_natural(px, cy, z, a, b) for a, b in zip(p, c)])
    assert np.allclose(s(p, c), ref, rtol=1e-10, atol=1e-9)


def test_separable_rows_match_1d_spline():
    px = np.array([1.0, 2.0, 3.0, 5.0, 8.0])
    cy = np.array([1.0, 2.0, 4.0, 8.0, 16.0])
    sp = np.array([3.0, 7.0, 2.0, 9.0, 4.0])
    z = np.repeat(sp[:, None], 5, axis=1)
    s = fit_surface_2d(px, cy, z)
    ref = fit_spline_1d(px, sp)
    q = np.linspace(1, 8, 29)
    for c in (1.0, 3.3, 16.0):
        assert np.allclose(s(q, np.full_like(q, c)), ref(q), atol=1e-10)


def test_cross_edge_c2():
    px, cy, z = _grid(6, 6, seed=4)
    s = fit_surface_2d(px, cy, z)
    eps = 1e-9
    for xk in px[1:-1]:
        for c in np.linspace(cy[0], cy[-1], 9):
            for dp in (0, 1, 2):
                a = s.evaluate(xk - eps, c, dp=dp)
                b = s.evaluate(xk + eps, c, dp=dp)
                assert abs(a - b) <= 1e-6 * max(1.0, abs(a))


def test_incomplete_grid_is_rejected():
    px, cy, z = _grid(3, 3)
    z[1, 1] = np.nan
    with pytest.raises(ValueError, match="fill holes"):
        fit_surface_2d(px, cy, z)
    with pytest.raises(ValueError):
        fit_surface_2d(px[:2], cy, z[:2])


def test_bicubic_round_trip():
    px, cy, z = _grid()
    s = fit_surface_2d(px, cy, z)
    b = BicubicGridSurface.from_dict(s.to_dict())
    assert np.array_equal(b.coefficients, s.coefficients)


# -- regression --------------------------------------------------------------

def _points(fn, n=200, seed=0):
    rng = np.random.default_rng(seed)
    p = rng.integers(1, 17, n).astype(float)
    cc = rng.integers(1, 17, n).astype(float)
    pp = rng.integers(1, 33, n).astype(float)
    return np.column_stack([p, cc, pp, fn(p, cc, pp)])


def test_exact_quadratic_recovered():
    def fn(p, cc, pp):
        return 5 + 2 * p - cc + 0.5 * pp + 0.1 * p * p - 0.2 * p * cc + 0.03 * pp * pp
    m = fit_regression(_points(fn), "quadratic")
    assert m.r2 == pytest.approx(1.0)
    want = {"1": 5, "p": 2, "cc": -1, "pp": 0.5, "p^2": 0.1, "p*cc": -0.2, "pp^2": 0.03}
    for name, coef in zip(m.term_names, m.coefficients):
        assert coef == pytest.approx(want.get(name, 0.0), abs=1e-6)


def test_constant_data_only_intercept():
    m = fit_regression(_points(lambda p, cc, pp: np.full_like(p, 42.0)), "cubic")
    for name, coef in zip(m.term_names, m.coefficients):
        assert coef == pytest.approx(42.0 if name == "1" else 0.0, abs=1e-8)


def test_rank_deficiency_names_terms():
    pts = _points(lambda p, cc, pp: p + cc)
    pts[:, 2] = 4.0   # pp never varies
    with pytest.raises(RankDeficientError) as exc:
        fit_regression(pts, "quadratic")
    assert "pp" in exc.value.terms and "pp^2" in exc.value.terms
    with pytest.raises(ValueError):
        fit_regression(pts[:5], "cubic")


def test_regression_clamps_negative_predictions():
    m = fit_regression(_points(lambda p, cc, pp: 10 - p), "linear")
    assert m.predict(16, 1, 1)[0] == 0.0
    assert m.predict(16, 1, 1, clamp=False)[0] == pytest.approx(-6.0)


# -- grids, envelopes and the composed surface ------------------------------

def _entries(fn, ps, ccs, pps, skip=(), repeats=1, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for p in ps:
        for cc in ccs:
            for pp in pps:
                if (p, cc, pp) in skip:
                    continue
                for _ in range(repeats):
                    v = fn(p, cc, pp) * (1 + noise * rng.standard_normal())
                    out.append(TransferLogEntry(NET, DS, ParamTriple(cc, p, pp), max(v, 0.0)))
    return out


def test_complete_grid_is_unchanged():
    fn = lambda p, cc, pp: 10.0 * p + cc + pp          # noqa: E731
    g = build_grid(_entries(fn, [1, 2, 4], [1, 3, 5], [1, 8]))
    assert g.fill_fraction == 0.0 and g.observed.all()
    assert g.mu[1, 2, 1] == fn(2, 5, 8)


def test_plane_hole_filled_exactly():
    fn = lambda p, cc, pp: 3.0 * p + 2.0 * cc + 0.5 * pp   # noqa: E731
    g = build_grid(_entries(fn, [1, 2, 4, 8], [1, 3, 5, 9], [1, 4, 16], skip={(2, 3, 4)}))
    assert not g.observed[1, 1, 1]
    assert g.mu[1, 1, 1] == pytest.approx(fn(2, 3, 4), abs=1e-9)
    assert g.fill_fraction == pytest.approx(1 / 48)


def test_holes_on_smooth_data_within_ten_percent():
    rng = np.random.default_rng(8)
    fn = lambda p, cc, pp: 1000 * np.sqrt(p * cc) / (1 + 0.02 * p * cc)  # noqa: E731
    ks = [1, 2, 3, 4, 5]
    holes = set()
    while len(holes) < 3:
        holes.add((int(rng.choice(ks[1:-1])), int(rng.choice(ks[1:-1])), 1))
    g = build_grid(_entries(fn, ks, ks, [1], skip=holes))
    for p, cc, _ in holes:
        assert g.mu[ks.index(p), ks.index(cc), 0] == pytest.approx(fn(p, cc, 1), rel=0.10)


def test_mostly_synthetic_grid_is_low_confidence():
    fn = lambda p, cc, pp: p + cc   # noqa: E731
    es = [e for e in _entries(fn, [1, 8, 16], [1, 8, 16], [1])
          if e.params.p == e.params.cc]
    g = build_grid(es)
    assert g.fill_fraction == pytest.approx(6 / 9) and g.low_confidence
    assert fit_surface(es).low_confidence


def test_fill_holes_neighbour_mean_for_sigma():
    v = np.array([[1.0, 2.0, 3.0], [4.0, np.nan, 6.0], [7.0, 8.0, 9.0]])
    known = np.isfinite(v)
    out = fill_holes(v, known, weighted=False)
    assert out[1, 1] == pytest.approx((2 + 4 + 6 + 8) / 4)


def test_confidence_envelope():
    assert confidence_envelope([]) == {}
    fn = lambda p, cc, pp: 100.0  # noqa: E731
    es = _entries(fn, [1, 2, 3], [1], [1], repeats=2)
    groups = group_observations(es, key=None)
    groups[0].samples = [90.0, 110.0]
    groups[0].recompute()
    groups[2].samples = [95.0, 105.0]
    groups[2].recompute()
    groups = [groups[0], groups[2]]
    env = confidence_envelope(groups, axes=([1, 2, 3], [1], [1]))
    assert env[ParamTriple(1, 1, 1)].sigma == 10.0 and not env[ParamTriple(1, 1, 1)].synthetic
    hole = env[ParamTriple(1, 2, 1)]
    assert hole.synthetic and hole.sigma == pytest.approx(7.5)


def _smooth_surface(noise=0.0, with_entries=False):
    fn = lambda p, cc, pp: 500 + 40 * p + 30 * cc - 1.5 * p * p - cc * cc + 20 * np.log(pp)  # noqa
    es = _entries(fn, [1, 2, 4, 8, 12, 16], [1, 2, 4, 8, 12, 16], [1, 4, 8, 16, 32],
                  repeats=2, noise=noise)
    if with_entries:
        return fit_surface(es), fn, es
    return fit_surface(es), fn


def test_surface_exact_at_lattice_observations():
    s, fn, es = _smooth_surface(noise=0.05, with_entries=True)
    for prm in [ParamTriple(4, 8, 16), ParamTriple(1, 1, 1), ParamTriple(16, 16, 32)]:
        k = list(s.pp_knots).index(prm.pp)
        assert s(prm) == s.sheets[k](float(prm.p), float(prm.cc))
        obs = [e.throughput for e in es if e.params == prm]
        assert s(prm) == pytest.approx(np.mean(obs), rel=1e-12)


def test_pp_knot_is_pure_sheet_and_midcell_matches_coefficients():
    s, _ = _smooth_surface(noise=0.02)
    p, cc, pp = 5.3, 9.7, 8.0
    k = list(s.pp_knots).index(8.0)
    assert s.evaluate(p, cc, pp) == s.sheets[k](p, cc)
    # dense re-evaluation from stored coefficients, independent of the evaluator
    p, cc, pp = 5.3, 9.7, 11.0
    sheet_vals = []
    for sh in s.sheets:
        i = np.searchsorted(sh.p_knots, p) - 1
        j = np.searchsorted(sh.cc_knots, cc) - 1
        u, v = p - sh.p_knots[i], cc - sh.cc_knots[j]
        c = sh.coefficients[i, j]
        sheet_vals.append(sum(c[m, n] * u ** m * v ** n for m in range(4) for n in range(4)))
    from scipy.interpolate import CubicSpline
    want = CubicSpline(s.pp_knots, np.array(sheet_vals), bc_type="natural")(pp)
    assert s.evaluate(p, cc, pp) == pytest.approx(float(want), rel=1e-10)


def test_pp_curve_is_sheet_average():
    s, _ = _smooth_surface(noise=0.05)
    p, cc = np.meshgrid(s.p_knots, s.cc_knots, indexing="ij")
    for pp in (3.0, 10.0, 20.0):
        vals = s.partial(p.ravel(), cc.ravel(), np.full(p.size, pp))
        assert vals.mean() == pytest.approx(float(s.pp_curve(pp)), rel=1e-9)


def test_eval_is_clamped_non_negative_and_to_hull():
    fn = lambda p, cc, pp: 100.0 - 60.0 * (p == 2) * (cc == 2)  # noqa: E731
    es = _entries(lambda p, cc, pp: max(fn(p, cc, pp) - 90 * (p == 3), 0.0),
                  [1, 2, 3, 4], [1, 2, 3, 4], [1, 2])
    s = fit_surface(es)
    P, C, Q = np.meshgrid(np.linspace(1, 4, 31), np.linspace(1, 4, 31), [1.0, 1.5, 2.0],
                          indexing="ij")
    assert np.all(s.evaluate(P, C, Q) >= 0.0)
    assert not s.in_hull(16, 1, 1)
    assert s.evaluate(16, 1, 1) == s.evaluate(4, 1, 1)


def test_sparse_cluster_uses_regression_fallback():
    es = _entries(lambda p, cc, pp: 100.0 + p, [1, 2], [1, 2], [1, 4, 8], repeats=1)
    s = fit_surface(es)
    assert s.fallback is not None and s.low_confidence
    assert s(ParamTriple(1, 1, 1)) >= 0
    single = fit_surface(_entries(lambda *a: 50.0, [1], [1], [1]))
    assert single.fallback.kind == "constant" and single(ParamTriple(3, 3, 3)) == 50.0


def test_within_confidence():
    s, _ = _smooth_surface(noise=0.05)
    prm = ParamTriple(4, 8, 16)
    mu, sig = s.envelope(prm)
    assert within_confidence(s, prm, mu, z=0.01)
    assert not within_confidence(s, prm, mu + 3 * sig, z=1.96)
    assert within_confidence(s, prm, mu + 1.5 * sig, z=1.96)
    with pytest.raises(ValueError):
        within_confidence(s, prm, mu, z=0)


def test_sigma_floor_applies_to_single_observations():
    es = _entries(lambda p, cc, pp: 100.0 * p, [1, 2, 3], [1, 2, 3], [1])
    s = fit_surface(es)
    mu, sig = s.envelope(ParamTriple(2, 2, 1))
    assert mu == 200.0 and sig == pytest.approx(10.0)


def test_surface_round_trip_is_bit_exact():
    s, _ = _smooth_surface(noise=0.05)
    s.precomputed_argmax = (ParamTriple(3, 4, 5), 1.0 / 3.0)
    back = ThroughputSurface.from_dict(s.to_dict())
    rng = np.random.default_rng(0)
    q = rng.uniform(1, 16, (3, 100))
    q[2] *= 2
    assert np.array_equal(back.evaluate(*q), s.evaluate(*q))
    assert np.array_equal(back.sigma_at(*q), s.sigma_at(*q))
    assert back.precomputed_argmax == s.precomputed_argmax


def test_scalar_and_batch_evaluation_agree_bitwise():
    s, _ = _smooth_surface(noise=0.05)
    rng = np.random.default_rng(6)
    q = np.column_stack([rng.uniform(1, 16, 60), rng.uniform(1, 16, 60), rng.uniform(1, 32, 60)])
    q[:10] = np.round(q[:10])
    batch = s.evaluate(q[:, 0], q[:, 1], q[:, 2])
    for row, b in zip(q, batch):
        assert float(s.evaluate(*row)) == b
    vals, grads, _ = s.derivatives(q[:, 0], q[:, 1], q[:, 2])
    assert np.array_equal(vals, s.partial(q[:, 0], q[:, 1], q[:, 2]))


def test_pp_constant_surface_is_exactly_constant():
    es = _entries(lambda p, cc, pp: 10.0 * p + cc, [1, 2, 4, 8], [1, 3, 9], [1, 4, 16, 32])
    s = fit_surface(es)
    for pp in (1.0, 2.5, 7.0, 31.0):
        assert float(s.evaluate(3.0, 5.0, pp)) == float(s.evaluate(3.0, 5.0, 1.0))
