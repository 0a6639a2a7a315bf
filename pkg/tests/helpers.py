"""Shared builders for tests."""

import numpy as np

from xfertune.core import DEFAULT_LATTICE, ParamTriple
from xfertune.surface import Grid, surface_from_grid

P_KNOTS = np.array([1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 11.0, 16.0])
CC_KNOTS = P_KNOTS.copy()
PP_KNOTS = np.array([1.0, 2.0, 4.0, 8.0, 16.0, 32.0])


def surface_of(fn, p_knots=P_KNOTS, cc_knots=CC_KNOTS, pp_knots=PP_KNOTS, sigma=1.0,
               load_tag=0.0, argmax=None):
    """Spline surface through fn(p, cc, pp) sampled on a full knot grid."""
    P, C, Q = np.meshgrid(p_knots, cc_knots, pp_knots, indexing="ij")
    mu = np.asarray(fn(P, C, Q), dtype=float) * np.ones_like(P)
    grid = Grid(np.asarray(p_knots, float), np.asarray(cc_knots, float),
                np.asarray(pp_knots, float), mu, np.full(mu.shape, sigma),
                np.ones(mu.shape, dtype=int), 0.0)
    s = surface_from_grid(grid, load_tag=load_tag, lattice=DEFAULT_LATTICE)
    if argmax is not None:
        s.precomputed_argmax = argmax
    return s


def with_argmax(s):
    from xfertune.maxima import surface_argmax
    s.precomputed_argmax = surface_argmax(s)
    return s


def pt(cc, p, pp):
    return ParamTriple(cc, p, pp)
