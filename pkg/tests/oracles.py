"""Independent reference implementations the package is checked against."""

import math
import warnings

import cvxpy as cp
import numpy as np

_PROBLEMS = {}
_TIGHT = dict(tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)


def qp_projection(v, p, eps):
    """Euclidean projection onto the Lp ball solved as a conic QP (one compiled problem per size and norm)."""
    v = np.asarray(v, dtype=np.float64)
    key = (v.size, p)
    if key not in _PROBLEMS:
        x, c, r = cp.Variable(v.size), cp.Parameter(v.size), cp.Parameter(nonneg=True)
        norm = cp.norm(x, 1 if p == 1 else 2 if p == 2 else "inf")
        _PROBLEMS[key] = (cp.Problem(cp.Minimize(cp.sum_squares(x - c)), [norm <= r]), x, c, r)
    prob, x, c, r = _PROBLEMS[key]
    c.value, r.value = v, float(eps)
    with warnings.catch_warnings():
        # tight tolerances sometimes end on an "inaccurate" status; callers compare numerically anyway
        warnings.simplefilter("ignore", UserWarning)
        prob.solve(solver=cp.CLARABEL, **_TIGHT)
    return x.value


def random_projection_cases(n, seed, dims=(2, 64)):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        yield rng.normal(size=rng.integers(dims[0], dims[1] + 1)) * rng.uniform(0.1, 5), rng.uniform(0.05, 3)


def central_difference(loss, x, idx, h=1e-3):
    """Central differences of a scalar ``loss(x)`` at coordinates ``idx``."""
    out = []
    for i in idx:
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        out.append((loss(up) - loss(down)) / (2 * h))
    return np.array(out)


INF = math.inf
