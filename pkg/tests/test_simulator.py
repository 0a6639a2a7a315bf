import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xfertune.core import DEFAULT_LATTICE, DatasetProfile, NetworkProfile, ParamTriple, max_achievable
from xfertune.ingest import group_observations, load_intensity
from xfertune.simulator import (DEFAULT_COVERAGE, BackendError, Coverage, SimBackend, SimScenario,
                                generate_corpus, mean_throughput, oracle_optimum,
                                sim_throughput)
from xfertune.surface import fit_surface

WAN = NetworkProfile(10000.0, 40.0, 4 << 20, 1200.0, 1200.0)
BIG = DatasetProfile(1 << 30, 16)
SMALL = DatasetProfile(1 << 20, 3000)


def test_fully_loaded_link_gives_zero():
    sc = SimScenario(WAN, [(0.0, 1.0)])
    assert sim_throughput(sc, ParamTriple(8, 8, 8), BIG) == 0.0


def test_asymptote_is_max_achievable():
    net = NetworkProfile(1000.0, 10.0, 4 << 20)
    huge = DatasetProfile(1e12, 10)
    v = float(mean_throughput(net, huge, 0.0, 1e5, 1e5, 1e6))
    assert v == pytest.approx(max_achievable(net), rel=1e-3)
    assert v <= max_achievable(net)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 16), st.integers(1, 15), st.integers(1, 31), st.floats(0, 0.99),
       st.floats(0.0, 0.5), st.sampled_from([SMALL, BIG]))
def test_monotonicity_and_ceiling(cc, p, pp, i_ext, di, ds):
    f = lambda c, q, r, i: float(mean_throughput(WAN, ds, i, c, q, r))  # noqa: E731
    base = f(cc, p, pp, i_ext)
    assert base <= max_achievable(WAN)
    assert f(cc, p + 1, pp, i_ext) >= base
    assert f(cc, p, pp + 1, i_ext) >= base
    assert f(cc, p, pp, min(i_ext + di, 1.0)) <= base


def test_backend_is_deterministic():
    sc = SimScenario(WAN, [(0.0, 0.2), (5.0, 0.6)], noise=0.05, seed=3)
    runs = []
    for _ in range(2):
        be = SimBackend(sc, BIG)
        runs.append([be.transfer(64 << 20, ParamTriple(c, 4, 4)) for c in (1, 2, 8, 8, 8)])
    assert runs[0] == runs[1]


def test_backend_slow_start_penalty_and_stall():
    sc = SimScenario(WAN, [(0.0, 0.0)], noise=0.0)
    be = SimBackend(sc, BIG)
    a = be.transfer(1e8, ParamTriple(2, 2, 1))
    b = be.transfer(1e8, ParamTriple(2, 2, 1))
    assert a.elapsed - b.elapsed == pytest.approx(10 * 0.04 * 4)
    c = be.transfer(1e8, ParamTriple(4, 2, 1))
    assert c.elapsed == pytest.approx(1e8 * 8 / (c.achieved * 1e6) + 10 * 0.04 * 4)
    dead = SimBackend(SimScenario(WAN, [(0.0, 1.0)], noise=0.0), BIG)
    with pytest.raises(BackendError):
        dead.transfer(1e6, ParamTriple(1, 1, 1))


def test_schedule_validation_and_lookup():
    with pytest.raises(ValueError):
        SimScenario(WAN, [(1.0, 0.1), (1.0, 0.2)])
    with pytest.raises(ValueError):
        SimScenario(WAN, [(0.0, 1.5)])
    sc = SimScenario(WAN, [(0.0, 0.1), (10.0, 0.7)])
    assert sc.load_at(-1) == 0.1 and sc.load_at(9.99) == 0.1 and sc.load_at(10.0) == 0.7
    assert SimScenario.from_dict(sc.to_dict()).schedule == sc.schedule


def test_corpus_count():
    sc = SimScenario(WAN, [(0.0, 0.3)], seed=1, dataset=BIG)
    es = generate_corpus([sc], Coverage.full(pp=(1, 8, 16, 32)), repeats=3, seed=1)
    assert len(es) == 3072
    es1 = generate_corpus([sc], DEFAULT_COVERAGE, repeats=1, seed=1)
    assert all(g.n == 1 for g in group_observations(es1, key=None))
    assert load_intensity(es1[0]) == pytest.approx(0.7)


def test_corpus_refit_reproduces_mean():
    sc = SimScenario(NetworkProfile(1000.0, 20.0, 1 << 20, 900.0, 900.0), [(0.0, 0.2)],
                     noise=0.05, seed=2, dataset=DatasetProfile(8 << 20, 400))
    es = generate_corpus([sc], Coverage.full(pp=(1, 8, 16, 32)), repeats=3, seed=2)
    s = fit_surface(es)
    cc, p, pp = DEFAULT_LATTICE.arrays()
    truth = mean_throughput(sc.network, sc.dataset, 0.2, cc, p, pp)
    ok = np.abs(s.evaluate(p, cc, pp) - truth) <= 2 * sc.noise * truth
    assert ok.mean() >= 0.95


def test_oracle_monotone_regime_hits_corner():
    sc = SimScenario(NetworkProfile(100000.0, 100.0, 64 << 10), [(0.0, 0.0)])
    prm, _ = oracle_optimum(sc, SMALL)
    assert prm == ParamTriple(16, 16, 32)


def test_oracle_plateau_takes_smallest_triple():
    net = NetworkProfile(10000.0, 1.0, 16 << 20, 10.0, 10.0)   # disk bound at 80 Mbps
    sc = SimScenario(net, [(0.0, 0.0)])
    prm, val = oracle_optimum(sc, BIG)
    assert val == pytest.approx(80.0)
    cc, p, pp = DEFAULT_LATTICE.arrays()
    vals = mean_throughput(net, BIG, 0.0, cc, p, pp)
    first = int(np.flatnonzero(vals == vals.max())[0])
    assert prm == ParamTriple(int(cc[first]), int(p[first]), int(pp[first]))
    assert prm == min(ParamTriple(int(a), int(b), int(c))
                      for a, b, c, v in zip(cc, p, pp, vals) if v == vals.max())


def test_oracle_beats_random_search():
    rng = np.random.default_rng(0)
    for net, ds in [(WAN, SMALL), (WAN, BIG), (NetworkProfile(1000.0, 10.0, 256 << 10, 90, 90),
                                                SMALL)]:
        sc = SimScenario(net, [(0.0, 0.35)])
        _, best = oracle_optimum(sc, ds)
        for _ in range(500):
            prm = ParamTriple(*(int(v) for v in rng.integers(1, [17, 17, 33])))
            assert sim_throughput(sc, prm, ds) <= best
