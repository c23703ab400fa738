"""Noise statistics, calibration functions, and comparison-inequality checks.

The pointwise calibration function of a surrogate/aggregator pair is
computed from exact per-decode-region infima of the aggregated conditional
risk: the task excess depends on a score only through its decoded label,
so the constraint set {task excess >= eps} is a finite union of decode
regions and the curve is a step function over region infima.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import search
from .aggregate import (
    STAR,
    ScoreVector,
    majority_vote_law,
    ranking_frequency_aggregate,
    _compositions,
    _n_compositions,
)
from .core import FiniteSupportModel, TaskLoss, as_probs
from .surrogate import IdentifiabilityCert, MulticlassLogistic, SquaredVsScore, SurrogateLoss


# ---------------------------------------------------------------------------
# Noise profiles


@dataclass
class ProfilePoint:
    x_id: object
    delta: float
    kappa: float
    y_star: int
    weight: float


@dataclass
class NoiseProfile:
    points: list
    alpha: float
    beta: float
    c_mt: float
    excluded: list = field(default_factory=list)

    def kappa_tail(self, M: float) -> float:
        """Probability mass of points with condition number above M."""
        return sum(pt.weight for pt in self.points if pt.kappa > M)

    def delta_min(self) -> float:
        return min(pt.delta for pt in self.points)


def beta_of_alpha(alpha: float) -> float:
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    return math.inf if alpha == 1 else alpha / (1 - alpha)


def noise_profile(
    model: FiniteSupportModel,
    loss: TaskLoss,
    decoder=None,
    alpha: float = 0.0,
    tie_tol: float = 1e-12,
) -> NoiseProfile:
    """Per-point margin and condition number, plus a fitted tail constant.

    The decoder argument documents which decoder realizes the labels; the
    enumeration below is over labels, which every shipped decoder can
    produce.  Points with zero margin are excluded with a warning.  The
    constant c_mt is the smallest making the margin-tail condition hold on
    the support at beta = alpha/(1-alpha).
    """
    L = loss.matrix()
    ambiguous = []
    points = []
    excluded = []
    for idx in range(model.n_points):
        risks = L @ model.dists[idx]
        order = np.sort(risks)
        y_star = int(np.argmin(risks))
        if model.space.size_k > 1 and order[1] - order[0] <= tie_tol:
            ambiguous.append(model.x_ids[idx])
            continue
        delta = float(order[1] - order[0])
        kappa = float((order[-1] - order[0]) / delta)
        points.append(
            ProfilePoint(model.x_ids[idx], delta, kappa, y_star, float(model.weights[idx]))
        )
    if ambiguous:
        raise ValueError(f"non-unique optimal label at support points {ambiguous}")
    kept = []
    for pt in points:
        if pt.delta <= tie_tol:
            excluded.append(pt.x_id)
        else:
            kept.append(pt)
    if excluded:
        warnings.warn(f"excluding zero-margin support points {excluded}")
    if not kept:
        raise ValueError("no support points with positive margin")

    beta = beta_of_alpha(alpha)
    deltas = np.array([pt.delta for pt in kept])
    weights = np.array([pt.weight for pt in kept])
    weights = weights / weights.sum()
    if beta == 0:
        c_mt = 1.0
    elif math.isinf(beta):
        c_mt = 1.0 / deltas.min()
    else:
        order = np.argsort(deltas)
        cdf = np.cumsum(weights[order])
        c_mt = float(np.max(cdf ** (1.0 / beta) / deltas[order]))
    return NoiseProfile(kept, alpha, beta, c_mt, excluded)


# ---------------------------------------------------------------------------
# Aggregators as risk components


class MajorityVoteAggregator:
    """Generalized majority vote mapped through certificate witnesses."""

    def __init__(self, loss: TaskLoss, cert: IdentifiabilityCert):
        self.loss = loss
        self.cert = cert

    def witness_law(self, p, m: int, max_outcomes: int = 10**6) -> np.ndarray:
        return majority_vote_law(p, m, self.loss, max_outcomes)


class RankingFrequencyAggregator:
    """Pairwise frequency aggregate; emits score vectors or the star tag."""

    def __init__(self, space):
        if space.structure != "ranking_pairs":
            raise ValueError("needs a ranking_pairs label space")
        self.space = space

    def exact_components(self, p, m: int, max_outcomes: int = 10**6):
        """(pmf, star_mask, vectors) over all count vectors of m comparisons."""
        probs = as_probs(p)
        kp = len(probs)
        if _n_compositions(m, kp) > max_outcomes:
            raise ValueError("exact ranking enumeration too large; use Monte Carlo")
        counts = _compositions(m, kp)
        from scipy.special import gammaln

        log_p = np.full(kp, -np.inf)
        pos = probs > 0
        log_p[pos] = np.log(probs[pos])
        with np.errstate(invalid="ignore"):
            contrib = np.where(counts > 0, counts * log_p[None, :], 0.0)
        log_pmf = gammaln(m + 1) - gammaln(counts + 1).sum(axis=1) + contrib.sum(axis=1)
        feasible = ~np.any((counts > 0) & ~pos[None, :], axis=1)
        pmf = np.where(feasible, np.exp(log_pmf), 0.0)

        n = self.space.n_items
        winners = np.zeros((kp,), dtype=int)
        losers = np.zeros((kp,), dtype=int)
        for lbl in range(kp):
            winners[lbl], losers[lbl] = self.space.pair_of_label(lbl)
        vectors = np.zeros((len(counts), n))
        star = np.zeros(len(counts), dtype=bool)
        for row, cvec in enumerate(counts):
            wins = np.zeros((n, n))
            wins[winners, losers] = cvec
            per_item_losses = wins.sum(axis=0)
            if np.any(per_item_losses == 0):
                star[row] = True
            else:
                vectors[row] = (wins / per_item_losses[None, :]).sum(axis=1)
        return pmf, star, vectors


# ---------------------------------------------------------------------------
# Aggregated conditional risks


class AggregatedConditional:
    """Conditional aggregated surrogate risk at one support point."""

    def __init__(self, spec: SurrogateLoss, aggregator, p, m: int):
        self.spec = spec
        self.aggregator = aggregator
        self.m = m
        if isinstance(aggregator, MajorityVoteAggregator):
            self.q = aggregator.witness_law(p, m)
            self._mode = "witness"
        elif isinstance(aggregator, RankingFrequencyAggregator):
            if not isinstance(spec, SquaredVsScore):
                raise ValueError("ranking aggregation pairs with the squared surrogate")
            pmf, star, vectors = aggregator.exact_components(p, m)
            keep = pmf > 0
            self._p_ns = float(pmf[keep & ~star].sum())
            w = pmf[keep & ~star]
            v = vectors[keep & ~star]
            self._first_moment = (w[:, None] * v).sum(axis=0)
            self._second_moment = float((w * (v * v).sum(axis=1)).sum())
            self._mode = "ranking"
        else:
            raise TypeError(f"unsupported aggregator {type(aggregator).__name__}")

    # -- risk evaluation ----------------------------------------------------
    def risk(self, s) -> float:
        if self._mode == "witness":
            return float(
                sum(
                    q_y * self.spec.value(s, w)
                    for q_y, w in zip(self.q, self.aggregator.cert.witnesses)
                    if q_y > 0
                )
            )
        s = np.asarray(s, dtype=float)
        return float(
            self._p_ns * (s @ s) - 2.0 * (s @ self._first_moment) + self._second_moment
        )

    # -- infima ---------------------------------------------------------------
    def infimum(self, radius: float = 5.0, grid_n: int = 41) -> float:
        if self._mode == "ranking":
            return self._ranking_infimum()
        spec, witnesses = self.spec, self.aggregator.cert.witnesses
        if isinstance(spec, MulticlassLogistic):
            labels = self.aggregator.cert.witness_labels()
            q_full = np.zeros(spec.space.size_k)
            for q_y, lbl in zip(self.q, labels):
                q_full[lbl] += q_y
            return spec.conditional_infimum(q_full)
        if spec.linear_pieces(witnesses[0]) is not None:
            groups, weights = [], []
            for q_y, w in zip(self.q, witnesses):
                if q_y <= 0:
                    continue
                pieces = spec.linear_pieces(w)
                groups.append(([b for b, _ in pieces], np.array([g for _, g in pieces])))
                weights.append(q_y)
            val, _ = search.lp_weighted_max_affine(
                groups, weights, spec.score_dim, radius, region=None
            )
            return float(val)
        anchors = getattr(self.aggregator.cert, "anchors", None)
        val, _, boundary = search.minimize_on_box(
            self.risk,
            spec.score_dim,
            radius,
            grid_n=1001 if spec.score_dim == 1 else grid_n,
            starts=anchors,
        )
        if boundary:
            val2, _, _ = search.minimize_on_box(
                self.risk,
                spec.score_dim,
                2 * radius,
                grid_n=1001 if spec.score_dim == 1 else grid_n,
                starts=anchors,
            )
            val = min(val, val2)
        return float(val)

    def _ranking_infimum(self) -> float:
        if self._p_ns == 0:
            return 0.0
        mu = self._first_moment / self._p_ns
        return float(self._second_moment - self._p_ns * (mu @ mu))

    def ranking_minimizer(self) -> np.ndarray:
        if self._mode != "ranking":
            raise ValueError("not a ranking conditional")
        if self._p_ns == 0:
            return np.zeros(self.spec.score_dim)
        return self._first_moment / self._p_ns

    def region_infimum(self, label: int, radius: float = 5.0, grid_n: int = 41) -> float:
        """Infimum over the closure of the decode region of a label."""
        if self._mode != "witness":
            raise ValueError("region infima are defined for witness aggregation")
        spec = self.spec
        witnesses = self.aggregator.cert.witnesses
        region = spec.region(label)

        pieces0 = spec.linear_pieces(witnesses[0])
        if pieces0 is not None:
            groups, weights = [], []
            for q_y, w in zip(self.q, witnesses):
                if q_y <= 0:
                    continue
                pieces = spec.linear_pieces(w)
                groups.append(([b for b, _ in pieces], np.array([g for _, g in pieces])))
                weights.append(q_y)
            val, _ = search.lp_weighted_max_affine(
                groups, weights, spec.score_dim, radius, region=region
            )
            return float(val)

        grid_eff = 1001 if spec.score_dim == 1 else grid_n
        anchors = getattr(self.aggregator.cert, "anchors", None)
        val, _, boundary = search.minimize_on_box(
            self.risk, spec.score_dim, radius, grid_n=grid_eff, region=region, starts=anchors
        )
        if boundary:
            val2, _, _ = search.minimize_on_box(
                self.risk,
                spec.score_dim,
                2 * radius,
                grid_n=grid_eff,
                region=region,
                starts=anchors,
            )
            val = min(val, val2)
        return float(val)

    def excess(self, s, radius: float = 5.0, grid_n: int = 41) -> float:
        return self.risk(s) - self.infimum(radius, grid_n)


def excess_agg_surrogate(
    spec: SurrogateLoss,
    aggregator,
    model: FiniteSupportModel,
    m: int,
    s,
    x_id,
    mode: str = "exact",
    trials: int = 20000,
    seed: int = 0,
    radius: float = 5.0,
    grid_n: int = 41,
):
    """Pointwise excess aggregated surrogate risk at a support point.

    Exact mode enumerates multinomial count vectors (guarded); Monte Carlo
    mode estimates the risk term by sampling tuples and returns
    (estimate, standard_error) with the infimum taken from the exact law.
    """
    idx = model.x_ids.index(x_id)
    p = model.dists[idx]
    cond = AggregatedConditional(spec, aggregator, p, m)
    if mode == "exact":
        return cond.excess(s, radius, grid_n)
    if mode != "mc":
        raise ValueError("mode must be 'exact' or 'mc'")
    from .scenarios import sample_labels

    vals = np.empty(trials)
    loss = aggregator.loss
    for t in range(trials):
        z = sample_labels(p, m, seed=seed, x_key=idx, trial=t)
        from .aggregate import mv_to_witness

        vals[t] = spec.value(s, mv_to_witness(z, loss, aggregator.cert))
    inf_val = cond.infimum(radius, grid_n)
    est = float(vals.mean()) - inf_val
    stderr = float(vals.std(ddof=1) / math.sqrt(trials))
    return est, stderr


# ---------------------------------------------------------------------------
# Calibration curves


@dataclass
class CalibrationCurve:
    epsilons: np.ndarray
    psi_raw: np.ndarray
    psi_convex: np.ndarray
    x_id: object = None
    truncated_at: int | None = None  # index of the first infeasible epsilon

    def csv_rows(self):
        label = "all" if self.x_id is None else self.x_id
        n = len(self.epsilons) if self.truncated_at is None else self.truncated_at
        for i in range(n):
            yield (label, self.epsilons[i], self.psi_raw[i], self.psi_convex[i])


def _pointwise_curve(spec, aggregator, p, m, eps_grid, radius, grid_n):
    loss = aggregator.loss
    risks = loss.matrix() @ as_probs(p)
    label_excess = risks - risks.min()
    cond = AggregatedConditional(spec, aggregator, p, m)
    region_infs = np.array(
        [cond.region_infimum(y, radius, grid_n) for y in range(spec.space.size_k)]
    )
    inf_all = region_infs.min()
    max_excess = label_excess.max()

    psi = np.empty(len(eps_grid))
    truncated_at = None
    for i, eps in enumerate(eps_grid):
        if eps <= 0:
            psi[i] = 0.0
            continue
        if eps > max_excess + 1e-12:
            truncated_at = i
            psi[i:] = np.nan
            break
        feasible = label_excess >= eps - 1e-12
        psi[i] = region_infs[feasible].min() - inf_all
    return psi, truncated_at


def calibration_curve(
    spec: SurrogateLoss,
    aggregator,
    model: FiniteSupportModel,
    m: int,
    x_id=None,
    eps_grid=None,
    radius: float = 5.0,
    grid_n: int = 41,
) -> CalibrationCurve:
    """Pointwise (or, with x_id=None, support-uniform) calibration curve.

    psi_raw(eps) is the smallest aggregated-surrogate excess compatible
    with task excess >= eps; psi_convex is its greatest convex
    nondecreasing minorant on the grid (lower convex hull).
    """
    if eps_grid is None:
        eps_grid = np.linspace(0.0, 1.0, 101)
    eps_grid = np.asarray(eps_grid, dtype=float)

    if x_id is not None:
        idx = model.x_ids.index(x_id)
        psi, truncated_at = _pointwise_curve(
            spec, aggregator, model.dists[idx], m, eps_grid, radius, grid_n
        )
    else:
        acc = np.full(len(eps_grid), np.inf)
        for idx in range(model.n_points):
            psi_i, trunc_i = _pointwise_curve(
                spec, aggregator, model.dists[idx], m, eps_grid, radius, grid_n
            )
            n_ok = len(eps_grid) if trunc_i is None else trunc_i
            acc[:n_ok] = np.minimum(acc[:n_ok], psi_i[:n_ok])
        feasible = np.isfinite(acc)
        truncated_at = None if feasible.all() else int(np.argmin(feasible))
        psi = np.where(feasible, acc, np.nan)

    n_ok = len(eps_grid) if truncated_at is None else truncated_at
    hull = np.full_like(psi, np.nan)
    if n_ok > 0:
        hull[:n_ok] = search.convex_hull_minorant(eps_grid[:n_ok], psi[:n_ok])
    return CalibrationCurve(eps_grid, psi, hull, x_id=x_id, truncated_at=truncated_at)


def curve_lower_bound(eps, m, cert, k, kappa):
    """Concentration lower bound c1 - 2k(c1+c2)exp(-m eps^2 / (2 kappa^2))."""
    eps = np.asarray(eps, dtype=float)
    return cert.c1 - 2.0 * k * (cert.c1 + cert.c2) * np.exp(
        -m * eps**2 / (2.0 * kappa**2)
    )


# ---------------------------------------------------------------------------
# Error function and consistency thresholds


def error_function(t: float, m: int, cert: IdentifiabilityCert, k: int) -> float:
    """Scale at which majority vote over m labels stops being reliable."""
    if m < 1:
        raise ValueError("m must be at least 1")
    return t * math.sqrt(2.0 / m * math.log(4.0 * k * (cert.c1 + cert.c2) / cert.c1))


def xi_threshold(
    m: int, k: int, cert: IdentifiabilityCert, alpha: float, c_mt: float,
    warn_vacuous: bool = True,
) -> float:
    """Task-excess level above which the linear comparison inequality holds.

    Returns 0 in the zero-noise limit once m clears the logarithmic budget,
    and infinity when it does not; values >= 1 make the guarantee vacuous
    for losses bounded by 1.
    """
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    log_k = math.log(4.0 * k * (cert.c1 + cert.c2) / cert.c1)
    if alpha == 1:
        budget = 32.0 * max(c_mt**2, c_mt**4) * log_k
        return 0.0 if m >= budget else math.inf
    if k == 2:
        inner = (32.0 * c_mt**2 / m) * math.log(8.0 * (cert.c1 + cert.c2) / cert.c1)
        xi = inner ** (1.0 / (2.0 * (1.0 - alpha)))
    else:
        inner = (32.0 * c_mt**4 / m) * log_k
        xi = 4.0 * inner ** (alpha / (2.0 * (1.0 - alpha**2)))
    if warn_vacuous and xi >= 1.0:
        warnings.warn(f"threshold {xi:.3g} >= 1 makes the guarantee vacuous")
    return xi


def thm1_threshold(
    M: float, m: int, cert: IdentifiabilityCert, k: int, profile: NoiseProfile
) -> float:
    """Gate 2 P(kappa > M) + (4 c e_m(M))^{1/(1-alpha)} for one cutoff M."""
    tail = 2.0 * profile.kappa_tail(M)
    base = 4.0 * profile.c_mt * error_function(M, m, cert, k)
    if profile.alpha == 1:
        return tail if base < 1.0 else math.inf
    return tail + base ** (1.0 / (1.0 - profile.alpha))


def balanced_M(m: int, cert: IdentifiabilityCert, k: int, alpha: float, c_mt: float) -> float:
    """Cutoff equalizing the tail and concentration terms of the gate."""
    log_k = math.log(4.0 * k * (cert.c1 + cert.c2) / cert.c1)
    inner = (32.0 / m) * log_k
    return inner ** (-1.0 / (2.0 * (1.0 + alpha))) * (c_mt / 2.0) ** (
        -(1.0 - alpha) / (1.0 + alpha)
    )


# ---------------------------------------------------------------------------
# Comparison-inequality verification


@dataclass
class ComparisonRow:
    f_id: int
    task_excess: float
    surrogate_excess: float
    bound_rhs: float
    gated_xi: bool
    gated_thm1: bool
    violated: bool


@dataclass
class ComparisonReport:
    rows: list
    xi: float
    thm1_gate: float
    m: int
    violations: int  # among gated hypotheses
    raw_violations: int  # over all hypotheses, diagnostic only
    max_ratio: float

    def csv_rows(self):
        for r in self.rows:
            yield (
                r.f_id,
                r.task_excess,
                r.surrogate_excess,
                r.bound_rhs,
                int(r.violated),
            )


def verify_comparison(
    model: FiniteSupportModel,
    spec: SurrogateLoss,
    cert: IdentifiabilityCert,
    loss: TaskLoss,
    m: int,
    hypotheses,
    alpha: float = 0.5,
    M_sweep=(1.0, 2.0, 5.0, 10.0),
    radius: float = 5.0,
    grid_n: int = 41,
    tol: float = 1e-9,
) -> ComparisonReport:
    """Check the aggregated comparison inequality over a hypothesis set.

    hypotheses: array (n_f, n_points, d) of score functions on the support.
    Task and surrogate excesses are exact (label-law enumeration plus exact
    conditional infima); the inequality is asserted for hypotheses passing
    either the optimized-cutoff gate or the closed-form threshold gate.
    """
    profile = noise_profile(model, loss, alpha=alpha)
    agg = MajorityVoteAggregator(loss, cert)
    k = loss.space.size_k

    L = loss.matrix()
    task_risks = model.dists @ L.T  # (n_points, k): risk of predicting each label
    best_task = task_risks.min(axis=1)

    conds = [
        AggregatedConditional(spec, agg, model.dists[i], m) for i in range(model.n_points)
    ]
    inf_surr = np.array([c.infimum(radius, grid_n) for c in conds])

    xi = xi_threshold(m, k, cert, profile.alpha, profile.c_mt, warn_vacuous=False)
    Ms = list(M_sweep) + [balanced_M(m, cert, k, profile.alpha, profile.c_mt)]
    thm1 = min(thm1_threshold(M, m, cert, k, profile) for M in Ms)

    slope = 16.0 / cert.c1
    rows = []
    violations = raw_violations = 0
    max_ratio = 0.0
    hypotheses = np.asarray(hypotheses, dtype=float)
    for f_id, f in enumerate(hypotheses):
        task = 0.0
        surr = 0.0
        for i in range(model.n_points):
            w = model.weights[i]
            task += w * (task_risks[i, spec.decode(f[i])] - best_task[i])
            surr += w * (conds[i].risk(f[i]) - inf_surr[i])
        bound = slope * surr
        gated_xi = task >= xi
        gated_thm1 = task >= thm1
        violated = (gated_xi or gated_thm1) and task > bound + tol
        if task > bound + tol:
            raw_violations += 1
        if violated:
            violations += 1
        if surr > tol:
            max_ratio = max(max_ratio, task / surr)
        rows.append(ComparisonRow(f_id, task, surr, bound, gated_xi, gated_thm1, violated))
    return ComparisonReport(rows, xi, thm1, m, violations, raw_violations, max_ratio)


# ---------------------------------------------------------------------------
# Noise-condition diagnostics


@dataclass
class NoiseReport:
    alpha_grid: np.ndarray
    c_n: np.ndarray  # tightest mismatch constants per alpha
    beta_grid: np.ndarray
    c_m: np.ndarray  # tightest tail constants per beta
    delta_values: np.ndarray
    delta_cdf: np.ndarray

    def tightest_alpha(self, c_budget: float) -> float:
        ok = self.alpha_grid[self.c_n <= c_budget]
        return float(ok.max()) if len(ok) else 0.0

    def tightest_beta(self, c_budget: float) -> float:
        ok = self.beta_grid[self.c_m <= c_budget]
        return float(ok.max()) if len(ok) else 0.0


def check_noise_conditions(
    model: FiniteSupportModel,
    loss: TaskLoss,
    spec_decode,
    hypotheses,
    alpha_grid=None,
    beta_grid=None,
) -> NoiseReport:
    """Tightest constants for the mismatch and margin-tail conditions.

    spec_decode maps a per-point score to a label.  For each alpha the
    tightest constant is the largest ratio of decode-mismatch probability
    to excess-risk^alpha over the hypothesis set; for each beta it is the
    sup over the margin distribution of cdf^(1/beta)/delta.
    """
    if alpha_grid is None:
        alpha_grid = np.linspace(0.0, 1.0, 21)
    if beta_grid is None:
        beta_grid = np.concatenate([np.linspace(0.25, 5.0, 20), [math.inf]])
    alpha_grid = np.asarray(alpha_grid, dtype=float)
    beta_grid = np.asarray(beta_grid, dtype=float)

    L = loss.matrix()
    task_risks = model.dists @ L.T
    best = task_risks.min(axis=1)
    y_star = task_risks.argmin(axis=1)
    deltas = np.partition(task_risks, 1, axis=1)[:, 1] - best

    stats = []
    for f in np.asarray(hypotheses, dtype=float):
        mismatch = 0.0
        excess = 0.0
        for i in range(model.n_points):
            y = spec_decode(f[i])
            if y != y_star[i]:
                mismatch += model.weights[i]
            excess += model.weights[i] * (task_risks[i, y] - best[i])
        stats.append((mismatch, excess))

    c_n = np.zeros(len(alpha_grid))
    for a_idx, a in enumerate(alpha_grid):
        worst = 0.0
        for mismatch, excess in stats:
            if mismatch == 0:
                continue
            if excess <= 0:
                worst = math.inf
                break
            worst = max(worst, mismatch / excess**a)
        c_n[a_idx] = worst

    order = np.argsort(deltas)
    dvals = deltas[order]
    cdf = np.cumsum(model.weights[order])
    c_m = np.zeros(len(beta_grid))
    for b_idx, b in enumerate(beta_grid):
        if b == 0:
            c_m[b_idx] = 1.0
        elif math.isinf(b):
            c_m[b_idx] = 1.0 / dvals.min()
        else:
            c_m[b_idx] = float(np.max(cdf ** (1.0 / b) / dvals))
    return NoiseReport(alpha_grid, c_n, beta_grid, c_m, dvals, cdf)
