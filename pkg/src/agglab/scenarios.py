"""Constructive synthetic distributions and deterministic samplers.

Sampling is reproducible across runs and thread counts: every stream is a
counter-based Philox generator keyed by (seed, point key, trial index),
and normal variates are produced by the inverse CDF applied to the
uniform stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc, gammaln, ndtri

from .aggregate import _compositions, _n_compositions, majority_vote_law
from .core import FiniteDist, FiniteSupportModel, LabelSpace, TaskLoss, as_probs, transition_matrix


def stream(seed: int, x_key: int = 0, trial: int = 0) -> np.random.Generator:
    """Philox stream keyed by (seed, point, trial)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(x_key), int(trial)))
    return np.random.Generator(np.random.Philox(ss))


def sample_labels(p, m: int, seed: int, x_key: int = 0, trial: int = 0) -> np.ndarray:
    """m i.i.d. labels from p via inverse CDF on the keyed uniform stream."""
    if m < 1:
        raise ValueError("m must be at least 1")
    probs = as_probs(p)
    cdf = np.cumsum(probs)
    u = stream(seed, x_key, trial).random(m)
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(probs) - 1)


def gaussian_draws(n: int, d: int, seed: int, x_key: int = 0, trial: int = 0) -> np.ndarray:
    """Standard normal draws via the inverse CDF (fixed, documented algorithm)."""
    u = stream(seed, x_key, trial).random((n, d))
    return ndtri(u)


# ---------------------------------------------------------------------------
# Majority-vote laws


def rho_m(p, m: int, max_outcomes: int = 10**6) -> np.ndarray:
    """Exact law of the plain majority vote of m draws (ties to lowest index)."""
    space = LabelSpace.plain(len(as_probs(p)))
    return majority_vote_law(p, m, TaskLoss.zero_one(space), max_outcomes)


majority_vote_distribution = rho_m


def rho_m_batch(P, m: int, chunk: int | None = None, max_outcomes: int = 10**6) -> np.ndarray:
    """rho_m applied row-wise to a (n, k) matrix of probability vectors."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    n, k = P.shape
    n_comp = _n_compositions(m, k)
    if n_comp > max_outcomes:
        raise ValueError("exact majority-vote law too large; use Monte Carlo")
    if chunk is None:
        chunk = max(1, int(2e7) // n_comp)  # keep the pmf block near 160 MB
    counts = _compositions(m, k).astype(float)
    winners = np.argmax(counts, axis=1)
    onehot = np.zeros((len(counts), k))
    onehot[np.arange(len(counts)), winners] = 1.0
    log_fact = gammaln(m + 1) - gammaln(counts + 1).sum(axis=1)

    out = np.empty_like(P)
    for lo in range(0, n, chunk):
        block = P[lo : lo + chunk]
        lp = np.log(np.clip(block, 1e-300, None))
        log_pmf = log_fact[None, :] + lp @ counts.T  # (chunk, n_comp)
        infeasible = (block <= 0) @ (counts.T > 0)
        pmf = np.exp(log_pmf)
        pmf[infeasible] = 0.0
        laws = pmf @ onehot
        out[lo : lo + chunk] = laws / laws.sum(axis=1, keepdims=True)
    return out


def binary_mv_positive_prob(p_plus, m: int):
    """P(majority vote lands on the positive class) for binary labels.

    Ties (even m) go to the positive class, which is the lowest index.
    """
    p = np.asarray(p_plus, dtype=float)
    # ties at exactly m/2 positives resolve positive, so for even m the
    # positive class needs only m/2 votes
    j = m // 2 if m % 2 == 0 else (m + 1) // 2
    if j == 0:
        return np.ones_like(p)
    return betainc(j, m - j + 1, p)


# ---------------------------------------------------------------------------
# Ranking cycle


@dataclass
class RankingCycleDist:
    """Pair distribution supported on the cycle 0 -> 1 -> ... -> k-1 -> 0."""

    k: int
    q: np.ndarray = None

    def __post_init__(self):
        if self.q is None:
            self.q = np.full(self.k, 1.0 / self.k)
        self.q = as_probs(self.q)
        if len(self.q) != self.k:
            raise ValueError("one cycle weight per item required")
        if np.any(self.q <= 0):
            raise ValueError("cycle weights must be strictly positive")
        self.space = LabelSpace.ranking_pairs(self.k)

    def pair_probs(self) -> np.ndarray:
        p = np.zeros(self.space.size_k)
        for l in range(self.k):
            p[self.space.pair_label(l, (l + 1) % self.k)] = self.q[l]
        return p

    def pair_matrix(self) -> np.ndarray:
        P = np.zeros((self.k, self.k))
        for l in range(self.k):
            P[l, (l + 1) % self.k] = self.q[l]
        return P


def cycle_transition_scores(dist) -> np.ndarray:
    """Row sums of the normalized transition matrix (all ones on a cycle)."""
    if isinstance(dist, RankingCycleDist):
        return transition_matrix(dist.pair_probs(), dist.k) @ np.ones(dist.k)
    raise TypeError("expected a RankingCycleDist; use transition_scores for raw pairs")


def transition_scores(pair_probs, n_items: int) -> np.ndarray:
    return transition_matrix(pair_probs, n_items) @ np.ones(n_items)


def perturbed_cycle(dist: RankingCycleDist, target_order, level: float) -> np.ndarray:
    """Cycle distribution tilted so the transition scores order by target_order.

    Adds b_i / level to every off-diagonal entry of row i, then
    renormalizes.  To first order in 1/level the transition score of item i
    moves by k((k-1) b_i + b_{i+1}), so the row weights solve the cyclic
    system (k-1) b_i + b_{i+1} = k - rank(i); a plain decreasing weight per
    rank would let the successor term scramble adjacent ranks.
    """
    k = dist.k
    target_order = list(target_order)
    if sorted(target_order) != list(range(k)):
        raise ValueError("target_order must be a permutation of the items")
    rank = np.empty(k)
    for r, item in enumerate(target_order):
        rank[item] = r
    targets = k - rank
    M = (k - 1.0) * np.eye(k) + np.roll(np.eye(k), -1, axis=0)
    b = np.linalg.solve(M, targets)
    b = b - b.min() + 0.25 * (b.max() - b.min() + 1.0)  # keep additions positive
    b = b / b.max()

    P = dist.pair_matrix()
    add = np.tile((b / level)[:, None], (1, k))
    np.fill_diagonal(add, 0.0)
    P2 = P + add
    P2 = P2 / P2.sum()
    p = np.zeros(dist.space.size_k)
    for i in range(k):
        for j in range(k):
            if i != j:
                p[dist.space.pair_label(i, j)] = P2[i, j]
    return p


# ---------------------------------------------------------------------------
# Binary near-orthogonality construction


@dataclass
class BinaryOrthoConstruction:
    """Two labeled points nearly orthogonal to the signal direction, mixed
    with a Gaussian bulk whose labels follow the same conditional law."""

    d: int = 3
    alpha: float = 1.0
    beta: float = 238.0
    delta_mix: float = 0.05

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("need at least two dimensions")
        if self.alpha <= 0.5:
            raise ValueError("alpha must exceed 1/2")
        if not 0 <= self.delta_mix < 1:
            raise ValueError("Gaussian weight must lie in [0, 1)")
        self.x1 = np.zeros(self.d)
        self.x1[0] = 1.0 / 6.0
        self.x2 = np.zeros(self.d)
        self.x2[0] = -1.0 / (12.0 * self.alpha)
        self.x2[1] = (2.0 * self.alpha - 1.0) / self.beta

    @staticmethod
    def from_target_angle(eps_angle: float, alpha: float = 1.0, **kw) -> "BinaryOrthoConstruction":
        """beta = (1/C) sqrt(1/eps^2 - 1) with C = 1/(24 alpha (2 alpha - 1))."""
        c_phi = 1.0 / (24.0 * alpha * (2.0 * alpha - 1.0))
        beta = math.sqrt(1.0 / eps_angle**2 - 1.0) / c_phi
        return BinaryOrthoConstruction(alpha=alpha, beta=beta, **kw)

    def eta(self, X) -> np.ndarray:
        """P(Y = +1 | X = x): clamp(1/2 + x_1 (beta |x_2| + 1), 0, 1)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        raw = 0.5 + X[:, 0] * (self.beta * np.abs(X[:, 1]) + 1.0)
        return np.clip(raw, 0.0, 1.0)

    def gaussian_xs(self, n: int, seed: int, trial: int = 0) -> np.ndarray:
        return gaussian_draws(n, self.d, seed, x_key=1, trial=trial)

    def theta_star(self) -> np.ndarray:
        e1 = np.zeros(self.d)
        e1[0] = 1.0
        return e1


def build_binary_ortho(cfg: BinaryOrthoConstruction) -> BinaryOrthoConstruction:
    """Validate the derived points and return the construction itself."""
    eta = cfg.eta(np.vstack([cfg.x1, cfg.x2]))
    if abs(eta[0] - 2.0 / 3.0) > 1e-15 or abs(eta[1] - 1.0 / 3.0) > 1e-15:
        raise AssertionError("derived points do not hit the 2/3 and 1/3 levels")
    return cfg


def estimate_minimizer_interval(margin_value, lo=-10.0, hi=10.0, n=20001):
    """[a, b] = argmin of (2/3) phi(t) + (1/3) phi(-t) by grid + refinement."""
    ts = np.linspace(lo, hi, n)
    g = np.array([2.0 / 3.0 * margin_value(t) + 1.0 / 3.0 * margin_value(-t) for t in ts])
    gmin = g.min()
    close = ts[g <= gmin + 1e-12]
    return float(close.min()), float(close.max())


# ---------------------------------------------------------------------------
# Bipartite matching noise


def bipartite_noise_model(N: int, eta: float, n_points: int | None = None) -> FiniteSupportModel:
    """Matchings observed correctly with rate 1-eta, else an adjacent
    transposition uniformly at random; one support point per true matching."""
    if not 0 <= eta < 0.5:
        raise ValueError("corruption rate must lie in [0, 1/2)")
    space = LabelSpace.bipartite_matching(N)
    matchings = space.matchings()
    if n_points is None:
        n_points = min(space.size_k, 3)
    dists = []
    for i in range(n_points):
        true = matchings[i]
        p = np.zeros(space.size_k)
        p[i] = 1.0 - eta
        if eta > 0:
            for pos in range(N - 1):
                swapped = list(true)
                swapped[pos], swapped[pos + 1] = swapped[pos + 1], swapped[pos]
                p[matchings.index(tuple(swapped))] += eta / (N - 1)
        dists.append(p)
    weights = np.full(n_points, 1.0 / n_points)
    return FiniteSupportModel(space, weights, np.array(dists))


# ---------------------------------------------------------------------------
# Misspecified multiclass link


def sigma_lr(T) -> np.ndarray:
    """Softmax link on k-1 free scores; returns all k class probabilities."""
    T = np.atleast_2d(np.asarray(T, dtype=float))
    full = np.hstack([T, np.zeros((len(T), 1))])
    full = full - full.max(axis=1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class MultiIndexLogisticModel:
    """Linear multiclass model with a logistic or locally corrupted link.

    link kinds: "logistic" (well specified); "corrupted" (exactly uniform
    labels on a box in link space, which zeroes the margin there, so
    majority vote cannot denoise that region); "corrupted_mix" (labels on
    the box are flattened toward uniform by 1-gamma but keep the argmax,
    so the margin stays positive and aggregation recovers the direction).
    """

    d: int
    k: int
    theta_star: np.ndarray
    link: str = "logistic"  # logistic | corrupted | corrupted_mix
    box_center: np.ndarray | None = None
    box_halfwidth: np.ndarray | None = None
    gamma: float = 0.5
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta_star = np.asarray(self.theta_star, dtype=float)
        if self.theta_star.shape != (self.d, self.k - 1):
            raise ValueError("parameter matrix must be d x (k-1)")
        if self.link not in ("logistic", "corrupted", "corrupted_mix"):
            raise ValueError(f"unknown link {self.link!r}")
        if self.link != "logistic":
            self.box_center = np.asarray(self.box_center, dtype=float)
            self.box_halfwidth = np.asarray(self.box_halfwidth, dtype=float)
            if self.box_center.shape != (self.k - 1,) or self.box_halfwidth.shape != (
                self.k - 1,
            ):
                raise ValueError("box center and halfwidth must live in link space")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")

    def scores(self, X) -> np.ndarray:
        return np.atleast_2d(np.asarray(X, dtype=float)) @ self.theta_star

    def in_box(self, T) -> np.ndarray:
        if self.link == "logistic":
            return np.zeros(len(np.atleast_2d(T)), dtype=bool)
        T = np.atleast_2d(np.asarray(T, dtype=float))
        return np.all(np.abs(T - self.box_center[None, :]) <= self.box_halfwidth[None, :], axis=1)

    def link_probs(self, T) -> np.ndarray:
        """sigma(t) off the corruption box; uniform (or the argmax-preserving
        flattening) inside it."""
        probs = sigma_lr(T)
        if self.link == "corrupted":
            probs[self.in_box(T)] = 1.0 / self.k
        elif self.link == "corrupted_mix":
            mask = self.in_box(T)
            probs[mask] = (1.0 - self.gamma) / self.k + self.gamma * probs[mask]
        return probs

    def label_probs(self, X) -> np.ndarray:
        return self.link_probs(self.scores(X))

    def box_measure(self) -> float:
        """Lebesgue measure of the corruption box in link space."""
        if self.link != "corrupted":
            return 0.0
        return float(np.prod(2.0 * self.box_halfwidth))

    def sample_xs(self, n: int, seed: int, trial: int = 0) -> np.ndarray:
        return gaussian_draws(n, self.d, seed, x_key=2, trial=trial)

    def corruption_trace_mc(self, n: int = 200000, seed: int = 0):
        """MC estimate (mean, stderr) of tr of E[t (sigma(t) - uniform)^T 1{box}].

        A strictly positive value certifies the corruption term tilts the
        stationarity equation away from zero.
        """
        X = self.sample_xs(n, seed, trial=997)
        T = self.scores(X)
        mask = self.in_box(T)
        dev = sigma_lr(T)[:, : self.k - 1] - 1.0 / self.k
        vals = np.where(mask, (T * dev).sum(axis=1), 0.0)
        return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))
