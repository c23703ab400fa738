"""Surrogate losses, subgradients, and identifiability certificates.

Each loss object evaluates phi(s, a) for scores s and aggregates a
(label witnesses, score vectors, or the star sentinel), provides a
subgradient in s, knows how its scores decode to labels, and describes
its decode regions as linear constraints.  Piecewise-linear losses also
expose their affine pieces, which enables exact infima by linear
programming in certificate checks and calibration curves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from . import search
from .aggregate import STAR, Aggregate, LabelWitness, ScoreVector
from .core import (
    LabelSpace,
    NEGATIVE_LABEL,
    POSITIVE_LABEL,
    TaskLoss,
    as_score,
    label_sign,
)


def _witness_label(a) -> int:
    if isinstance(a, LabelWitness):
        return a.label
    if isinstance(a, (int, np.integer)):
        return int(a)
    if a is STAR:
        raise ValueError("star aggregate passed to a label-witness surrogate")
    raise TypeError(f"expected a label witness, got {type(a).__name__}")


# ---------------------------------------------------------------------------
# Scalar convex margins


class ScalarMargin:
    """Convex scalar function t -> phi0(t) with a zero-side subgradient."""

    name = "scalar"

    def value(self, t: float) -> float:
        raise NotImplementedError

    def deriv(self, t: float) -> float:
        raise NotImplementedError

    def pieces(self):
        """Affine pieces [(bias, slope), ...] when piecewise linear, else None."""
        return None


class HingeMargin(ScalarMargin):
    name = "hinge"

    def value(self, t):
        return max(1.0 - t, 0.0)

    def deriv(self, t):
        return -1.0 if t < 1.0 else 0.0

    def pieces(self):
        return [(1.0, -1.0), (0.0, 0.0)]


class LogisticMargin(ScalarMargin):
    name = "logistic"

    def value(self, t):
        return float(np.logaddexp(0.0, -t))

    def deriv(self, t):
        return float(-expit(-t))


class ExpMargin(ScalarMargin):
    name = "exp"

    def value(self, t):
        return float(np.exp(-t))

    def deriv(self, t):
        return float(-np.exp(-t))


class PiecewiseMargin(ScalarMargin):
    """max of affine pieces; all slopes must be <= 0 with one negative at 0."""

    name = "piecewise"

    def __init__(self, pieces):
        self._pieces = [(float(b), float(a)) for b, a in pieces]
        if any(a > 0 for _, a in self._pieces):
            raise ValueError("margin pieces must be non-increasing")

    def value(self, t):
        return max(b + a * t for b, a in self._pieces)

    def deriv(self, t):
        vals = [b + a * t for b, a in self._pieces]
        top = max(vals)
        # zero-side subgradient: shallowest active slope
        return max(a for (b, a), v in zip(self._pieces, vals) if v >= top - 1e-12)

    def pieces(self):
        return list(self._pieces)


def step_convex(delta: float) -> PiecewiseMargin:
    """Kinked hinge: steep slope -1/delta at 0, then a shallow hinge, then 0."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return PiecewiseMargin([(1.0, -1.0 / delta), (1.0 - delta, -(1.0 - delta)), (0.0, 0.0)])


MARGINS = {
    "hinge": HingeMargin,
    "logistic": LogisticMargin,
    "exp": ExpMargin,
}


def margin_by_name(name: str, delta: float = 0.5) -> ScalarMargin:
    if name == "step_convex":
        return step_convex(delta)
    try:
        return MARGINS[name]()
    except KeyError:
        raise ValueError(f"unknown margin {name!r}") from None


# ---------------------------------------------------------------------------
# Surrogate losses


class SurrogateLoss:
    """Base class: phi(s, a) with subgradient, decoding, and decode regions."""

    score_dim: int
    space: LabelSpace

    def value(self, s, a) -> float:
        raise NotImplementedError

    def subgrad(self, s, a) -> np.ndarray:
        raise NotImplementedError

    def decode(self, s) -> int:
        raise NotImplementedError

    def region(self, label: int):
        """(A, b) with A @ s >= b characterizing closure{decode(s) = label}."""
        raise NotImplementedError

    def linear_pieces(self, a):
        """[(bias, gradient)] with phi(s, a) = max_i(bias_i + <g_i, s>), or None."""
        return None

    def accepts_star(self) -> bool:
        return False


class MarginLoss(SurrogateLoss):
    """Binary margin loss phi0(s * sign(a)) on scalar scores."""

    def __init__(self, phi0: ScalarMargin):
        self.phi0 = phi0
        self.score_dim = 1
        self.space = LabelSpace.plain(2)

    def value(self, s, a):
        t = float(as_score(s)[0]) * label_sign(_witness_label(a))
        return self.phi0.value(t)

    def subgrad(self, s, a):
        sign = label_sign(_witness_label(a))
        t = float(as_score(s)[0]) * sign
        return np.array([self.phi0.deriv(t) * sign])

    def decode(self, s):
        return POSITIVE_LABEL if float(as_score(s)[0]) >= 0 else NEGATIVE_LABEL

    def region(self, label):
        sign = label_sign(label)
        return np.array([[sign]]), np.zeros(1)

    def linear_pieces(self, a):
        pieces = self.phi0.pieces()
        if pieces is None:
            return None
        sign = label_sign(_witness_label(a))
        return [(b, np.array([slope * sign])) for b, slope in pieces]


class MulticlassLogistic(SurrogateLoss):
    """Multiclass logistic loss on k-1 free scores; the last class scores 0."""

    def __init__(self, k: int):
        self.k = k
        self.score_dim = k - 1
        self.space = LabelSpace.plain(k)

    def _full(self, s):
        return np.concatenate([as_score(s), [0.0]])

    def value(self, s, a):
        full = self._full(s)
        y = _witness_label(a)
        return float(logsumexp(full) - full[y])

    def subgrad(self, s, a):
        full = self._full(s)
        y = _witness_label(a)
        soft = np.exp(full - logsumexp(full))
        g = soft.copy()
        g[y] -= 1.0
        return g[: self.k - 1]

    def decode(self, s):
        return int(np.argmax(self._full(s)))

    def region(self, label):
        k, d = self.k, self.score_dim
        rows = []
        full = np.eye(k)
        for j in range(k):
            if j == label:
                continue
            diff = full[label] - full[j]
            rows.append(diff[:d])  # last coordinate is the implicit zero
        return np.array(rows), np.zeros(len(rows))

    def conditional_infimum(self, q) -> float:
        """Exact infimum of sum_y q_y phi(s, y): the entropy of q."""
        q = np.asarray(q, dtype=float)
        pos = q > 0
        return float(-(q[pos] * np.log(q[pos])).sum())


class StructuredHinge(SurrogateLoss):
    """Max-margin loss max_yhat(loss(yhat, y) + <v(yhat) - v(y), s>)."""

    def __init__(self, embedding: np.ndarray, loss: TaskLoss):
        self.table = np.asarray(embedding, dtype=float)
        self.loss = loss
        self.loss_matrix = loss.matrix()
        self.space = loss.space
        if self.table.shape[0] != self.space.size_k:
            raise ValueError("one embedding row per label required")
        self.score_dim = self.table.shape[1]

    def value(self, s, a):
        v = as_score(s)
        y = _witness_label(a)
        margins = self.loss_matrix[:, y] + (self.table - self.table[y]) @ v
        return float(margins.max())

    def subgrad(self, s, a):
        v = as_score(s)
        y = _witness_label(a)
        margins = self.loss_matrix[:, y] + (self.table - self.table[y]) @ v
        y_star = int(np.argmax(margins))
        return self.table[y_star] - self.table[y]

    def decode(self, s):
        return int(np.argmax(self.table @ as_score(s)))

    def region(self, label):
        diffs = self.table[label][None, :] - self.table
        rows = np.delete(diffs, label, axis=0)
        return rows, np.zeros(len(rows))

    def linear_pieces(self, a):
        y = _witness_label(a)
        return [
            (float(self.loss_matrix[yh, y]), self.table[yh] - self.table[y])
            for yh in range(self.space.size_k)
        ]


class SquaredVsScore(SurrogateLoss):
    """||s - q||^2 against score-vector aggregates; star aggregates cost 0."""

    def __init__(self, n_items: int):
        self.score_dim = n_items
        self.space = LabelSpace.ranking_pairs(n_items)

    def value(self, s, a):
        if a is STAR:
            return 0.0
        if not isinstance(a, ScoreVector):
            raise ValueError("squared surrogate expects a score vector or star")
        d = as_score(s) - a.values
        return float(d @ d)

    def subgrad(self, s, a):
        if a is STAR:
            return np.zeros(self.score_dim)
        return 2.0 * (as_score(s) - a.values)

    def decode(self, s):
        from .core import Decoder, decode

        return decode(Decoder("ranking_order", self.space), s)

    def accepts_star(self):
        return True


class PairwiseRanking(SurrogateLoss):
    """Convex pairwise comparison losses on item scores.

    kind "logistic": log(1 + exp(s_j - s_i)) for the pair (i beats j);
    kind "squared_hinge": max(0, 1 - (s_i - s_j))^2.
    """

    def __init__(self, n_items: int, kind: str = "logistic"):
        if kind not in ("logistic", "squared_hinge"):
            raise ValueError(f"unknown pairwise kind {kind!r}")
        self.kind = kind
        self.n_items = n_items
        self.score_dim = n_items
        self.space = LabelSpace.ranking_pairs(n_items)

    def value(self, s, a):
        v = as_score(s)
        i, j = self.space.pair_of_label(_witness_label(a))
        gap = v[i] - v[j]
        if self.kind == "logistic":
            return float(np.logaddexp(0.0, -gap))
        return float(max(0.0, 1.0 - gap) ** 2)

    def subgrad(self, s, a):
        v = as_score(s)
        i, j = self.space.pair_of_label(_witness_label(a))
        gap = v[i] - v[j]
        g = np.zeros(self.n_items)
        if self.kind == "logistic":
            coef = -float(expit(-gap))
        else:
            coef = -2.0 * max(0.0, 1.0 - gap)
        g[i] = coef
        g[j] = -coef
        return g

    def decode(self, s):
        from .core import Decoder, decode

        return decode(Decoder("ranking_order", self.space), s)


def eval_surrogate(spec: SurrogateLoss, s, a) -> float:
    """phi(s, a); star aggregates are only legal for star-aware losses."""
    if a is STAR and not spec.accepts_star():
        raise ValueError("star aggregate passed to a surrogate that rejects it")
    return spec.value(s, a)


def subgradient(spec: SurrogateLoss, s, a) -> np.ndarray:
    if a is STAR and not spec.accepts_star():
        raise ValueError("star aggregate passed to a surrogate that rejects it")
    return spec.subgrad(s, a)


# ---------------------------------------------------------------------------
# Identifiability certificates


@dataclass
class IdentifiabilityCert:
    """Per-label witnesses and anchor scores with separation constants."""

    witnesses: list
    anchors: list
    c1: float
    c2: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("certificate constants must be positive")
        self.anchors = [np.atleast_1d(np.asarray(a, dtype=float)) for a in self.anchors]

    @property
    def n_labels(self) -> int:
        return len(self.witnesses)

    def witness_labels(self) -> list[int]:
        return [_witness_label(w) for w in self.witnesses]

    def to_dict(self) -> dict:
        return {
            "c1": self.c1,
            "c2": self.c2,
            "witnesses": self.witness_labels(),
            "anchors": [a.tolist() for a in self.anchors],
            "meta": dict(self.meta),
        }

    @staticmethod
    def from_dict(d: dict) -> "IdentifiabilityCert":
        return IdentifiabilityCert(
            witnesses=[LabelWitness(int(w)) for w in d["witnesses"]],
            anchors=[np.asarray(a, dtype=float) for a in d["anchors"]],
            c1=float(d["c1"]),
            c2=float(d["c2"]),
            meta=dict(d.get("meta", {})),
        )


def make_cert_margin(phi0: ScalarMargin, delta: float) -> IdentifiabilityCert:
    """Margin-loss certificate: witnesses are the signed classes, anchors
    sit at +-delta, c1 = phi0(0) - phi0(delta), c2 = phi0(-delta)."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    c1 = phi0.value(0.0) - phi0.value(delta)
    if c1 <= 0:
        raise ValueError("margin is not identifying at this delta: phi0(0) = phi0(delta)")
    c2 = phi0.value(-delta)
    return IdentifiabilityCert(
        witnesses=[LabelWitness(POSITIVE_LABEL), LabelWitness(NEGATIVE_LABEL)],
        anchors=[np.array([delta]), np.array([-delta])],
        c1=c1,
        c2=c2,
        meta={"kind": "margin", "phi0": phi0.name, "delta": delta},
    )


def make_cert_bipartite(N: int) -> IdentifiabilityCert:
    """Structured-hinge certificate for bipartite matching: anchors v(y)/N,
    c1 = 1/N, c2 = 2."""
    if N < 2:
        raise ValueError("need at least 2 nodes per side")
    space = LabelSpace.bipartite_matching(N)
    table = space.matching_vectors()
    return IdentifiabilityCert(
        witnesses=[LabelWitness(y) for y in range(space.size_k)],
        anchors=[table[y] / N for y in range(space.size_k)],
        c1=1.0 / N,
        c2=2.0,
        meta={"kind": "bipartite", "N": N},
    )


def bipartite_hinge(N: int) -> StructuredHinge:
    """The structured hinge loss for matchings on 2N vertices."""
    loss = TaskLoss.matching_hamming(N)
    return StructuredHinge(loss.space.matching_vectors(), loss)


def _selecting_score(table: np.ndarray, y: int, radius: float = 1.0):
    """Max-margin score selecting label y strictly, or None if impossible."""
    k, d = table.shape
    diffs = np.delete(table - table[y][None, :], y, axis=0)  # rows v(yh) - v(y)
    # maximize mu subject to diffs @ s <= -mu, |s| <= radius
    from scipy.optimize import linprog

    n_var = d + 1
    A_ub = np.hstack([diffs, np.ones((k - 1, 1))])
    b_ub = np.zeros(k - 1)
    c = np.zeros(n_var)
    c[d] = -1.0
    bounds = [(-radius, radius)] * d + [(None, 1.0)]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if not res.success or res.x[d] <= 1e-9:
        return None
    return res.x[:d]


def _tau_objective(table, loss_matrix, y, s):
    """Ratio spread max/min of loss(yh,y) / <v(y)-v(yh), s> over yh != y."""
    gaps = np.delete((table[y][None, :] - table) @ s, y)
    losses = np.delete(loss_matrix[:, y], y)
    if np.any(gaps <= 1e-12):
        return np.inf
    ratios = losses / gaps
    return float(ratios.max() / ratios.min())


def make_cert_structured(
    embedding: np.ndarray,
    loss: TaskLoss,
    inflation: float = 0.10,
    descent_iters: int = 400,
) -> IdentifiabilityCert:
    """Certificate for the structured hinge via the identifiability gap.

    c1 is the smallest off-diagonal task loss.  When the embedding is 0/1
    valued and the loss is proportional to the pairwise L1 distance of
    embedding rows, the gap is exactly 1 and c2 = 2; otherwise the gap is
    approximated per label by local search and inflated by ``inflation``.
    """
    table = np.asarray(embedding, dtype=float)
    L = loss.matrix()
    k, d = table.shape
    off_diag = L[~np.eye(k, dtype=bool)]
    c1 = float(off_diag.min())
    if c1 <= 0:
        raise ValueError("task loss must be positive off the diagonal")

    is_binary = np.all((table == 0) | (table == 1))
    pairwise_l1 = np.abs(table[:, None, :] - table[None, :, :]).sum(axis=2)
    proportional = False
    if is_binary:
        mask = ~np.eye(k, dtype=bool)
        if np.all(pairwise_l1[mask] > 0):
            ratio = L[mask] / pairwise_l1[mask]
            proportional = np.allclose(ratio, ratio.flat[0], rtol=1e-9, atol=1e-12)

    anchors, taus = [], []
    for y in range(k):
        if proportional:
            scale = float((L[mask] / pairwise_l1[mask]).flat[0])
            s_y = scale * (2.0 * table[y] - 1.0)
            tau_y = 1.0
        else:
            s0 = _selecting_score(table, y)
            if s0 is None:
                raise ValueError(f"no score strictly selects label {y}; empty selector set")
            obj = lambda s: _tau_objective(table, L, y, s)
            starts = [s0, 2.0 * table[y] - table.mean(axis=0)]
            best, s_y = np.inf, None
            for x0 in starts:
                if obj(x0) == np.inf:
                    continue
                val, x = search.coordinate_descent(
                    obj, np.asarray(x0, dtype=float), radius=10.0, iters=descent_iters
                )
                if val < best:
                    best, s_y = val, x
            if s_y is None:
                raise ValueError(f"no score strictly selects label {y}; empty selector set")
            tau_y = best
            # normalize so the largest loss/gap ratio equals 1
            gaps = np.delete((table[y][None, :] - table) @ s_y, y)
            losses = np.delete(L[:, y], y)
            s_y = s_y * float((losses / gaps).max())
        anchors.append(np.asarray(s_y, dtype=float))
        taus.append(tau_y)

    tau_max = max(taus)
    if not proportional:
        tau_max *= 1.0 + inflation
    return IdentifiabilityCert(
        witnesses=[LabelWitness(y) for y in range(k)],
        anchors=anchors,
        c1=c1,
        c2=tau_max + 1.0,
        meta={"kind": "structured", "tau": taus, "exact_gap": bool(proportional)},
    )


# ---------------------------------------------------------------------------
# Certificate checking


@dataclass
class CertReport:
    valid: bool
    worst_slack_1: float
    worst_slack_2: float
    pred_ok: bool
    boundary_hit: bool
    details: list = field(default_factory=list)


def _infimum(spec, witness, region, radius, grid_n, anchors):
    """Infimum of phi(., witness) over a decode region (None = everywhere)."""
    pieces = spec.linear_pieces(witness)
    if pieces is not None:
        biases = [b for b, _ in pieces]
        grads = np.array([g for _, g in pieces])
        val, arg = search.lp_weighted_max_affine(
            [(biases, grads)], [1.0], spec.score_dim, radius, region=region
        )
        boundary = bool(np.any(np.abs(arg) >= radius - 1e-9))
        return val, boundary
    fun = lambda s: spec.value(s, witness)
    val, arg, boundary = search.minimize_on_box(
        fun, spec.score_dim, radius, grid_n=grid_n, region=region, starts=anchors
    )
    return val, boundary


def check_certificate(
    spec: SurrogateLoss,
    cert: IdentifiabilityCert,
    box_radius: float | None = None,
    grid_n: int = 41,
    tol: float = 1e-6,
    max_doublings: int = 3,
) -> CertReport:
    """Validate the two separation inequalities of a certificate numerically.

    Infima over scores are taken on the box [-r, r]^d (default r is five
    times the largest anchor magnitude, at least 5), with a doubling retry
    when a minimizer touches the boundary.
    """
    k = cert.n_labels
    if k != spec.space.size_k:
        raise ValueError("certificate does not cover the label space")
    radius = box_radius
    if radius is None:
        radius = 5.0 * max(1.0, max(float(np.abs(a).max()) for a in cert.anchors))

    pred_ok = all(spec.decode(cert.anchors[y]) == y for y in range(k))
    anchor_vals = np.array(
        [[spec.value(cert.anchors[y], cert.witnesses[w]) for w in range(k)] for y in range(k)]
    )

    boundary_any = False
    worst1, worst2 = np.inf, np.inf
    details = []
    for y in range(k):
        # infimum over all scores not decoding to y
        inf_wrong = np.inf
        for y2 in range(k):
            if y2 == y:
                continue
            for attempt in range(max_doublings + 1):
                r = radius * (2**attempt)
                val, boundary = _infimum(
                    spec, cert.witnesses[y], spec.region(y2), r, grid_n, cert.anchors
                )
                if not boundary:
                    break
            boundary_any |= boundary
            inf_wrong = min(inf_wrong, val)
        slack1 = inf_wrong - anchor_vals[y, y] - cert.c1
        worst1 = min(worst1, slack1)

        for attempt in range(max_doublings + 1):
            r = radius * (2**attempt)
            inf_all, boundary = _infimum(spec, cert.witnesses[y], None, r, grid_n, cert.anchors)
            if not boundary:
                break
        boundary_any |= boundary
        for y2 in range(k):
            if y2 == y:
                continue
            slack2 = inf_all - (anchor_vals[y2, y] - cert.c2)
            worst2 = min(worst2, slack2)
        details.append({"label": y, "inf_wrong": inf_wrong, "inf_all": inf_all})

    valid = pred_ok and worst1 >= -tol and worst2 >= -tol
    return CertReport(
        valid=valid,
        worst_slack_1=float(worst1),
        worst_slack_2=float(worst2),
        pred_ok=pred_ok,
        boundary_hit=boundary_any,
        details=details,
    )
