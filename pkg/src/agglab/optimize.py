"""Deterministic finite-dimensional convex minimization.

``minimize`` is full-gradient descent with Armijo backtracking for smooth
objectives and a subgradient method with Polyak averaging for nonsmooth
ones.  ``minimize_smooth`` wraps scipy's L-BFGS-B for the ill-conditioned
smooth experiment objectives; both are deterministic given their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize as _scipy_minimize


@dataclass
class LinearHypothesis:
    """Parameter matrix with an optional structural constraint.

    structure "free": all entries free.  "last_zero": the matrix holds the
    k-1 free columns, the final column is identically zero.  "sum_zero":
    the stored columns are free and the implied last column is their
    negative sum.
    """

    matrix: np.ndarray
    structure: str = "free"

    def __post_init__(self):
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("parameters must be finite")
        if self.structure not in ("free", "last_zero", "sum_zero"):
            raise ValueError(f"unknown structure {self.structure!r}")

    def full_matrix(self) -> np.ndarray:
        if self.structure == "free":
            return self.matrix
        if self.structure == "last_zero":
            return np.hstack([self.matrix, np.zeros((self.matrix.shape[0], 1))])
        return np.hstack([self.matrix, -self.matrix.sum(axis=1, keepdims=True)])


class Objective:
    """Weighted finite sum of surrogate losses of linear scores plus a ridge.

    terms: sequence of (weight, x, aggregate); scores are Theta^T x with
    Theta flattened column-major into the optimization vector.
    """

    def __init__(self, spec, terms, d_x: int, d_s: int, ridge: float = 0.0):
        self.spec = spec
        self.terms = list(terms)
        self.d_x = d_x
        self.d_s = d_s
        self.ridge = float(ridge)
        w = np.array([t[0] for t in self.terms], dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("term weights must be a probability vector")

    @property
    def dim(self) -> int:
        return self.d_x * self.d_s

    def unpack(self, theta: np.ndarray) -> np.ndarray:
        return theta.reshape(self.d_x, self.d_s, order="F")

    def value_and_grad(self, theta: np.ndarray):
        Theta = self.unpack(theta)
        val = self.ridge * float(theta @ theta)
        grad = 2.0 * self.ridge * theta.reshape(-1).copy()
        G = grad.reshape(self.d_x, self.d_s, order="F")
        for w, x, a in self.terms:
            x = np.asarray(x, dtype=float)
            s = Theta.T @ x
            val += w * self.spec.value(s, a)
            G += w * np.outer(x, self.spec.subgrad(s, a))
        return val, grad


@dataclass
class MinimizeResult:
    theta: np.ndarray
    value: float
    grad_norm: float
    converged: bool
    n_iters: int
    trace: list = field(default_factory=list)


def _as_fun(obj):
    if isinstance(obj, Objective):
        return obj.value_and_grad
    return obj


def minimize(
    obj,
    init,
    max_iters: int = 1000,
    tol: float = 1e-8,
    step0: float = 1.0,
    armijo: float = 1e-4,
    record_trace: bool = False,
) -> MinimizeResult:
    """Gradient descent with backtracking line search; returns the best iterate.

    obj is an Objective or a callable theta -> (value, gradient).  The
    accepted steps never increase the objective, and identical inputs give
    bit-identical iterates.
    """
    fun = _as_fun(obj)
    x = np.asarray(init, dtype=float).reshape(-1).copy()
    val, grad = fun(x)
    if not np.isfinite(val):
        raise ValueError(f"objective not finite at the initial point: {val}")
    best_x, best_val = x.copy(), val
    trace = []
    step = step0
    n = 0
    prev_dir = None
    for n in range(1, max_iters + 1):
        gnorm = float(np.linalg.norm(grad))
        if record_trace:
            drift = 0.0
            norm = np.linalg.norm(x)
            if norm > 0:
                direction = x / norm
                if prev_dir is not None:
                    drift = float(np.linalg.norm(direction - prev_dir))
                prev_dir = direction
            trace.append((n - 1, val, gnorm, drift))
        if gnorm <= tol:
            return MinimizeResult(best_x, best_val, gnorm, True, n - 1, trace)
        step = min(step * 2.0, 1e12)
        accepted = False
        while step > 1e-18:
            cand = x - step * grad
            cand_val, cand_grad = fun(cand)
            if not np.isfinite(cand_val):
                raise ValueError(f"objective not finite at iterate {cand!r}")
            if cand_val <= val - armijo * step * gnorm**2:
                x, val, grad = cand, cand_val, cand_grad
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        if val < best_val:
            best_val, best_x = val, x.copy()
    gnorm = float(np.linalg.norm(grad))
    return MinimizeResult(best_x, best_val, gnorm, gnorm <= tol, n, trace)


def minimize_subgradient(
    obj,
    init,
    max_iters: int = 5000,
    step_c: float = 0.5,
) -> MinimizeResult:
    """Subgradient method with c/sqrt(t) steps and Polyak averaging."""
    fun = _as_fun(obj)
    x = np.asarray(init, dtype=float).reshape(-1).copy()
    avg = np.zeros_like(x)
    best_val = np.inf
    best_x = x.copy()
    for t in range(1, max_iters + 1):
        val, grad = fun(x)
        if not np.isfinite(val):
            raise ValueError("objective not finite during subgradient descent")
        if val < best_val:
            best_val, best_x = val, x.copy()
        gnorm = np.linalg.norm(grad)
        if gnorm == 0:
            break
        x = x - (step_c / np.sqrt(t)) * grad / gnorm
        avg += (x - avg) / t
    avg_val, avg_grad = fun(avg)
    if avg_val < best_val:
        best_val, best_x = avg_val, avg
    return MinimizeResult(
        best_x, best_val, float(np.linalg.norm(avg_grad)), True, max_iters, []
    )


def minimize_smooth(
    obj,
    init,
    max_iters: int = 2000,
    tol: float = 1e-10,
) -> MinimizeResult:
    """L-BFGS-B wrapper for smooth convex objectives (deterministic)."""
    fun = _as_fun(obj)
    res = _scipy_minimize(
        fun,
        np.asarray(init, dtype=float).reshape(-1),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iters, "gtol": tol, "ftol": 1e-16},
    )
    val, grad = fun(res.x)
    return MinimizeResult(
        res.x, float(val), float(np.linalg.norm(grad)), bool(res.success), int(res.nit), []
    )


def grid_infimum_1d(fun, radius: float = 20.0, n: int = 4001) -> float:
    """Grid oracle for one-dimensional objectives (values only)."""
    xs = np.linspace(-radius, radius, n)
    return float(min(fun(np.array([x]))[0] for x in xs))


def eps_argmin_check(obj, theta, eps: float, lower_bound: float | None = None) -> dict:
    """Whether theta is an eps-approximate minimizer.

    A certified lower bound on the infimum comes from strong convexity when
    the objective carries a positive ridge, from an explicit
    ``lower_bound``, or from a grid oracle when the dimension is at most 2.
    Without any of these the result is reported as unknown.
    """
    fun = _as_fun(obj)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    val, grad = fun(theta)
    if lower_bound is None:
        if isinstance(obj, Objective) and obj.ridge > 0:
            lower_bound = val - float(grad @ grad) / (4.0 * obj.ridge)
        elif len(theta) <= 2:
            if len(theta) == 1:
                lower_bound = grid_infimum_1d(fun)
            else:
                xs = np.linspace(-20, 20, 201)
                lower_bound = min(
                    fun(np.array([a, b]))[0] for a in xs for b in xs
                )
        else:
            return {"certified": False, "result": None, "lower_bound": None}
    ok = bool(val <= lower_bound + eps)
    return {"certified": True, "result": ok, "lower_bound": float(lower_bound)}
