"""Independent reference implementations used only by the tests."""

import numpy as np
from scipy.interpolate import CubicSpline


def dense_spline_coefficients(x, y):
    """Solve the full 4(N-1) system for a relaxed cubic spline, local coordinates."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    n = len(x) - 1
    a = np.zeros((4 * n, 4 * n))
    b = np.zeros(4 * n)
    row = 0
    for i in range(n):
        h = x[i + 1] - x[i]
        a[row, 4 * i] = 1.0
        b[row] = y[i]
        row += 1
        a[row, 4 * i:4 * i + 4] = [1, h, h * h, h ** 3]
        b[row] = y[i + 1]
        row += 1
    for i in range(n - 1):
        h = x[i + 1] - x[i]
        a[row, 4 * i:4 * i + 4] = [0, 1, 2 * h, 3 * h * h]
        a[row, 4 * (i + 1) + 1] = -1.0
        row += 1
        a[row, 4 * i:4 * i + 4] = [0, 0, 2, 6 * h]
        a[row, 4 * (i + 1) + 2] = -2.0
        row += 1
    a[row, 2] = 2.0
    row += 1
    h = x[-1] - x[-2]
    a[row, 4 * (n - 1):4 * n] = [0, 0, 2, 6 * h]
    row += 1
    assert row == 4 * n
    return np.linalg.solve(a, b).reshape(n, 4)


def scipy_natural(x, y):
    return CubicSpline(x, y, bc_type="natural")


def tensor_natural(px, cy, z, p, cc):
    """Tensor-product natural spline: splines along p per cc column, then along cc."""
    col = CubicSpline(px, z, axis=0, bc_type="natural")(p)   # values at p for each cc knot
    return CubicSpline(cy, col, bc_type="natural")(cc)


def eval_local_poly(coef, u):
    return sum(coef[k] * u ** k for k in range(4))
