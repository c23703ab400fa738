"""Aggregation functions collapsing label tuples into cleaned aggregates.

An aggregate is one of three things: a per-label witness, a score vector
(the ranking frequency aggregate), or the sentinel ``STAR`` marking an
uninformative tuple.  Star aggregates only get tagged here; downstream
losses assign them value 0.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .core import FiniteDist, LabelSpace, TaskLoss, as_probs


@dataclass(frozen=True)
class LabelWitness:
    label: int


class _Star:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "STAR"


STAR = _Star()


class ScoreVector:
    __slots__ = ("values",)

    def __init__(self, values):
        self.values = np.asarray(values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("score vector entries must be finite")

    def __repr__(self):
        return f"ScoreVector({np.array2string(self.values, precision=4)})"


Aggregate = LabelWitness | ScoreVector | _Star


@dataclass
class NeighborSample:
    """Anchor point plus labeled neighbors under the euclidean metric."""

    anchor: np.ndarray
    points: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,)
    metric: str = "euclidean"

    def __post_init__(self):
        self.anchor = np.atleast_1d(np.asarray(self.anchor, dtype=float))
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.labels = np.asarray(self.labels, dtype=int)
        if self.points.shape[1] != len(self.anchor):
            raise ValueError("neighbor dimension does not match anchor")
        if len(self.labels) != len(self.points):
            raise ValueError("one label per neighbor required")
        if self.metric != "euclidean":
            raise ValueError("only the euclidean metric is supported")


def generalized_majority_vote(labels, loss: TaskLoss) -> int:
    """Label minimizing the summed task loss against the tuple.

    For the zero-one loss this is plain majority vote; ties resolve to the
    lowest label index.
    """
    z = np.asarray(labels, dtype=int)
    if z.size == 0:
        raise ValueError("cannot aggregate an empty label tuple")
    k = loss.space.size_k
    counts = np.bincount(z, minlength=k).astype(float)
    totals = loss.matrix() @ counts
    return int(np.argmin(totals))


def mv_to_witness(labels, loss: TaskLoss, cert) -> Aggregate:
    """Witness of the generalized majority vote under an identifiability cert."""
    y_hat = generalized_majority_vote(labels, loss)
    return cert.witnesses[y_hat]


def majority_vote_law(p, m: int, loss: TaskLoss, max_outcomes: int = 10**6) -> np.ndarray:
    """Exact law of the generalized majority vote of m i.i.d. draws from p.

    Enumerates multinomial count vectors; the number of such vectors is
    C(m+k-1, k-1) and is guarded by ``max_outcomes``.
    """
    probs = as_probs(p)
    k = len(probs)
    n_outcomes = _n_compositions(m, k)
    if n_outcomes > max_outcomes:
        raise ValueError(
            f"exact mode needs {n_outcomes} count vectors > {max_outcomes}; "
            "use Monte Carlo instead"
        )
    counts = _compositions(m, k)
    log_p = np.full(k, -np.inf)
    pos = probs > 0
    log_p[pos] = np.log(probs[pos])
    from scipy.special import gammaln

    with np.errstate(invalid="ignore"):
        contrib = np.where(counts > 0, counts * log_p[None, :], 0.0)
    log_pmf = gammaln(m + 1) - gammaln(counts + 1).sum(axis=1) + contrib.sum(axis=1)
    feasible = ~np.any((counts > 0) & ~pos[None, :], axis=1)
    pmf = np.where(feasible, np.exp(log_pmf), 0.0)

    L = loss.matrix()
    totals = counts @ L.T  # (n_outcomes, k): summed loss of predicting each label
    winners = np.argmin(totals, axis=1)
    law = np.zeros(k)
    np.add.at(law, winners, pmf)
    return law / law.sum()


def _n_compositions(m: int, k: int) -> int:
    import math

    return math.comb(m + k - 1, k - 1)


def _compositions(m: int, k: int) -> np.ndarray:
    """All nonnegative integer k-vectors summing to m, as an array."""
    out = np.empty((_n_compositions(m, k), k), dtype=np.int64)
    for row, splits in enumerate(itertools.combinations(range(m + k - 1), k - 1)):
        prev = -1
        for col, s in enumerate(splits):
            out[row, col] = s - prev - 1
            prev = s
        out[row, k - 1] = m + k - 2 - prev
    return out


def ranking_frequency_aggregate(labels, space: LabelSpace) -> Aggregate:
    """Frequency aggregate of pairwise comparisons.

    Entry i sums the fraction of comparisons lost by each j that were won
    by i.  Returns ``STAR`` when some item never appears as a loser.
    """
    if space.structure != "ranking_pairs":
        raise ValueError("ranking aggregation needs a ranking_pairs space")
    n = space.n_items
    wins = np.zeros((n, n))
    for lbl in np.asarray(labels, dtype=int):
        i, j = space.pair_of_label(int(lbl))
        wins[i, j] += 1
    losses_per_item = wins.sum(axis=0)
    if np.any(losses_per_item == 0):
        return STAR
    return ScoreVector((wins / losses_per_item[None, :]).sum(axis=1))


def knn_aggregate(sample: NeighborSample, K: int, loss: TaskLoss) -> int:
    """Generalized majority vote over the K nearest neighbors of the anchor.

    Distance ties resolve by original sample index (stable sort).  The
    anchor's own label, if any, is not part of the sample.
    """
    n = len(sample.labels)
    if K < 1 or K > n:
        raise ValueError(f"K must lie in [1, {n}]")
    d = np.linalg.norm(sample.points - sample.anchor[None, :], axis=1)
    order = np.argsort(d, kind="stable")
    return generalized_majority_vote(sample.labels[order[:K]], loss)
