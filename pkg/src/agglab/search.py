"""Numerical infimum helpers shared by certificate checks and calibration.

Two routes are provided.  Piecewise-linear objectives (weighted sums of
maxima of affine functions) are minimized exactly on a box, optionally
inside a polyhedral decode region, via an epigraph linear program.  Smooth
objectives fall back to a dense grid filtered to the region followed by
coordinate descent with step halving; dimensions above the grid guard use
multi-start descent only.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.optimize import linprog

GRID_GUARD = 10**7


class SearchError(ValueError):
    pass


def lp_weighted_max_affine(
    groups,
    weights,
    dim: int,
    radius: float,
    region=None,
):
    """Minimize sum_g w_g * max_i (b_gi + <a_gi, s>) over the box [-r, r]^dim.

    groups: sequence of (biases, gradients) pairs, gradients of shape (n_i, dim).
    region: optional (A, b) with the constraint A @ s >= b.
    Returns (value, s_star).  Raises SearchError when infeasible.
    """
    weights = np.asarray(weights, dtype=float)
    n_groups = len(groups)
    n_var = dim + n_groups
    c = np.concatenate([np.zeros(dim), weights])

    rows, rhs = [], []
    for g, (biases, grads) in enumerate(groups):
        biases = np.asarray(biases, dtype=float)
        grads = np.atleast_2d(np.asarray(grads, dtype=float))
        for b_i, a_i in zip(biases, grads):
            row = np.zeros(n_var)
            row[:dim] = a_i
            row[dim + g] = -1.0
            rows.append(row)
            rhs.append(-b_i)
    if region is not None:
        A, b = region
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.asarray(b, dtype=float)
        for a_i, b_i in zip(A, b):
            row = np.zeros(n_var)
            row[:dim] = -a_i
            rows.append(row)
            rhs.append(-b_i)

    bounds = [(-radius, radius)] * dim + [(None, None)] * n_groups
    res = linprog(
        c,
        A_ub=np.asarray(rows),
        b_ub=np.asarray(rhs),
        bounds=bounds,
        method="highs",
    )
    if not res.success:
        raise SearchError(f"LP failed: {res.message}")
    return float(res.fun), res.x[:dim]


def feasible_point(region, dim: int, radius: float):
    """Strictly feasible point of A @ s >= b inside the box, or None.

    Maximizes the margin mu subject to A s >= b + mu.
    """
    A, b = region
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float)
    n_var = dim + 1
    rows = np.hstack([-A, np.ones((len(A), 1))])
    rhs = -b
    c = np.zeros(n_var)
    c[dim] = -1.0
    bounds = [(-radius, radius)] * dim + [(None, 1.0)]
    res = linprog(c, A_ub=rows, b_ub=rhs, bounds=bounds, method="highs")
    if not res.success or res.x[dim] <= 1e-12:
        return None
    return res.x[:dim]


def grid_points(dim: int, radius: float, grid_n: int) -> np.ndarray:
    if grid_n**dim > GRID_GUARD:
        raise SearchError(
            f"grid of {grid_n}^{dim} points exceeds the {GRID_GUARD} guard; "
            "use a smaller instance or the multi-start route"
        )
    axis = np.linspace(-radius, radius, grid_n)
    return np.array(list(itertools.product(axis, repeat=dim)))


def coordinate_descent(
    fun,
    x0: np.ndarray,
    radius: float,
    feasible=None,
    iters: int = 200,
    step0: float | None = None,
    tol: float = 1e-12,
):
    """Coordinate descent with step halving; infeasible moves are rejected."""
    x = np.array(x0, dtype=float)
    best = fun(x)
    step = step0 if step0 is not None else radius / 4.0
    dim = len(x)
    for _ in range(iters):
        improved = False
        for i in range(dim):
            for direction in (1.0, -1.0):
                cand = x.copy()
                cand[i] = np.clip(cand[i] + direction * step, -radius, radius)
                if feasible is not None and not feasible(cand):
                    continue
                val = fun(cand)
                if val < best - tol:
                    x, best = cand, val
                    improved = True
        if not improved:
            step *= 0.5
            if step < 1e-12:
                break
    return best, x


def minimize_on_box(
    fun,
    dim: int,
    radius: float,
    grid_n: int = 41,
    region=None,
    starts=None,
    refine_iters: int = 200,
):
    """Grid search plus coordinate-descent refinement on a box.

    ``region`` is an optional (A, b) polyhedron A s >= b; grid points outside
    it are discarded and descent moves leaving it are rejected.  For
    dimensions whose grid would exceed the guard, only multi-start descent
    from ``starts`` (plus a feasible LP point) runs.
    Returns (value, argmin, boundary_hit).
    """
    feasible = None
    if region is not None:
        A, b = region
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.asarray(b, dtype=float)
        feasible = lambda s: bool(np.all(A @ s >= b - 1e-12))

    candidates = []
    if grid_n**dim <= GRID_GUARD:
        pts = grid_points(dim, radius, grid_n)
        if feasible is not None:
            mask = np.all(pts @ A.T >= b[None, :] - 1e-12, axis=1)
            pts = pts[mask]
        if len(pts):
            vals = np.array([fun(p) for p in pts])
            order = np.argsort(vals)
            candidates.extend(pts[order[:3]])
    if starts is not None:
        for s in starts:
            s = np.asarray(s, dtype=float)
            if feasible is None or feasible(s):
                candidates.append(np.clip(s, -radius, radius))
    if region is not None:
        fp = feasible_point(region, dim, radius)
        if fp is not None:
            candidates.append(fp)
    if not candidates:
        raise SearchError("no feasible starting point found")

    best_val, best_x = np.inf, None
    for x0 in candidates:
        val, x = coordinate_descent(fun, x0, radius, feasible, iters=refine_iters)
        if val < best_val:
            best_val, best_x = val, x
    boundary_hit = bool(np.any(np.abs(best_x) >= radius - 1e-9))
    return best_val, best_x, boundary_hit


def convex_hull_minorant(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Greatest convex minorant of the points (xs, ys), evaluated at xs.

    xs must be strictly increasing.  The result is the lower convex hull;
    for nondecreasing ys it is itself nondecreasing.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    hull = []  # indices of hull vertices
    for i in range(len(xs)):
        while len(hull) >= 2:
            i0, i1 = hull[-2], hull[-1]
            cross = (xs[i1] - xs[i0]) * (ys[i] - ys[i0]) - (xs[i] - xs[i0]) * (
                ys[i1] - ys[i0]
            )
            if cross <= 1e-15:
                hull.pop()
            else:
                break
        hull.append(i)
    out = np.empty_like(ys)
    for a, b in zip(hull[:-1], hull[1:]):
        t = (xs[a:b + 1] - xs[a]) / (xs[b] - xs[a]) if xs[b] > xs[a] else 0.0
        out[a:b + 1] = ys[a] + t * (ys[b] - ys[a])
    out[hull[-1]] = ys[hull[-1]]
    return out
