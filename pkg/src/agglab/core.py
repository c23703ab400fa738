"""Label spaces, finite distributions, decoders, and task losses.

Conventions used throughout the package:

* Labels are integer indices ``0 .. k-1``.
* Binary problems map index 0 to the +1 class and index 1 to the -1 class,
  so the sign decoder's "ties go to the positive class" rule coincides with
  the global "ties go to the lowest index" rule.
* Pair labels for ranking problems enumerate ordered pairs ``(i, j)`` with
  ``i != j`` in row-major order (winner i, loser j).
* Bipartite matchings on 2N vertices are identified with permutations of
  ``range(N)`` in lexicographic order.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

PROB_TOL = 1e-12

POSITIVE_LABEL = 0
NEGATIVE_LABEL = 1


def label_sign(label: int) -> float:
    """Signed value (+1 or -1) of a binary label index."""
    if label not in (0, 1):
        raise ValueError(f"binary label expected, got {label}")
    return 1.0 if label == POSITIVE_LABEL else -1.0


# ---------------------------------------------------------------------------
# Label spaces


@dataclass(frozen=True)
class LabelSpace:
    """Finite outcome set with an optional combinatorial structure tag."""

    size_k: int
    structure: str = "plain"  # plain | ranking_pairs | bipartite_matching
    n_items: int = 0  # items being ranked / nodes per side of the matching

    def __post_init__(self):
        if self.size_k < 2:
            raise ValueError("label space needs at least two labels")
        if self.structure == "ranking_pairs":
            if self.size_k != self.n_items * (self.n_items - 1):
                raise ValueError("ranking_pairs(n) must have k = n(n-1)")
        elif self.structure == "bipartite_matching":
            if self.size_k != math.factorial(self.n_items):
                raise ValueError("bipartite_matching(N) must have k = N!")
        elif self.structure != "plain":
            raise ValueError(f"unknown structure {self.structure!r}")

    @staticmethod
    def plain(k: int) -> "LabelSpace":
        return LabelSpace(k)

    @staticmethod
    def ranking_pairs(n_items: int) -> "LabelSpace":
        return LabelSpace(n_items * (n_items - 1), "ranking_pairs", n_items)

    @staticmethod
    def bipartite_matching(n_nodes: int) -> "LabelSpace":
        return LabelSpace(math.factorial(n_nodes), "bipartite_matching", n_nodes)

    # -- pair labels -------------------------------------------------------
    def pair_label(self, i: int, j: int) -> int:
        """Label index of the ordered pair (i beats j)."""
        n = self.n_items
        if not (0 <= i < n and 0 <= j < n and i != j):
            raise ValueError(f"invalid pair ({i}, {j}) for {n} items")
        return i * (n - 1) + (j if j < i else j - 1)

    def pair_of_label(self, label: int) -> tuple[int, int]:
        n = self.n_items
        i, r = divmod(label, n - 1)
        j = r if r < i else r + 1
        return i, j

    # -- matchings ---------------------------------------------------------
    def matchings(self) -> list[tuple[int, ...]]:
        """All matchings as permutations, in lexicographic = label order."""
        if self.structure != "bipartite_matching":
            raise ValueError("not a matching space")
        return list(itertools.permutations(range(self.n_items)))

    def matching_vectors(self) -> np.ndarray:
        """Edge-indicator embedding table, one row of length N^2 per label."""
        n = self.n_items
        out = np.zeros((self.size_k, n * n))
        for idx, perm in enumerate(self.matchings()):
            for u, v in enumerate(perm):
                out[idx, u * n + v] = 1.0
        return out


# ---------------------------------------------------------------------------
# Finite distributions


class FiniteDist:
    """Probability vector over a LabelSpace.

    Entries must be nonnegative and sum to 1 within ``PROB_TOL``; the vector
    is renormalized after validation to guard Monte Carlo drift.
    """

    __slots__ = ("probs", "space")

    def __init__(self, probs, space: LabelSpace | None = None):
        p = np.asarray(probs, dtype=float)
        if p.ndim != 1:
            raise ValueError("probability vector must be 1-d")
        if np.any(p < -PROB_TOL):
            raise ValueError("negative probability entry")
        total = p.sum()
        if abs(total - 1.0) > PROB_TOL:
            raise ValueError(f"probabilities sum to {total}, not 1")
        p = np.clip(p, 0.0, None)
        self.probs = p / p.sum()
        self.space = space if space is not None else LabelSpace.plain(len(p))
        if self.space.size_k != len(p):
            raise ValueError("probability vector length does not match space")

    def __len__(self):
        return len(self.probs)

    def __repr__(self):
        return f"FiniteDist({np.array2string(self.probs, precision=4)})"


def as_probs(p) -> np.ndarray:
    """Validated probability array from a FiniteDist or array-like."""
    if isinstance(p, FiniteDist):
        return p.probs
    return FiniteDist(p).probs


# ---------------------------------------------------------------------------
# Scores


@dataclass
class Score:
    """Real score vector, optionally constrained to sum to zero."""

    s: np.ndarray
    sum_zero: bool = False

    def __post_init__(self):
        self.s = np.atleast_1d(np.asarray(self.s, dtype=float))
        if self.sum_zero and abs(self.s.sum()) > 1e-10:
            raise ValueError("score violates the sum-zero constraint")


def as_score(s) -> np.ndarray:
    if isinstance(s, Score):
        return s.s
    return np.atleast_1d(np.asarray(s, dtype=float))


# ---------------------------------------------------------------------------
# Decoders


@dataclass(frozen=True)
class Decoder:
    """Map from score vectors to labels.

    kinds: ``sign`` (d=1 binary), ``argmax`` (multiclass),
    ``ranking_order`` (permutation index of the descending sort),
    ``matching_argmax`` (maximizes <s, v(y)> over matchings).
    All ties resolve to the lowest label index; for ``sign`` the tie at 0
    goes to the positive class, which is label 0.
    """

    kind: str
    space: LabelSpace

    def __post_init__(self):
        if self.kind not in ("sign", "argmax", "ranking_order", "matching_argmax"):
            raise ValueError(f"unknown decoder kind {self.kind!r}")


def decode(dec: Decoder, s) -> int:
    """Decode a score vector into a label index. Deterministic."""
    v = as_score(s)
    if dec.kind == "sign":
        if v.shape != (1,):
            raise ValueError("sign decoder expects a scalar score")
        return POSITIVE_LABEL if v[0] >= 0 else NEGATIVE_LABEL
    if dec.kind == "argmax":
        if len(v) != dec.space.size_k:
            raise ValueError("argmax decoder dimension mismatch")
        return int(np.argmax(v))
    if dec.kind == "ranking_order":
        n = dec.space.n_items if dec.space.n_items else len(v)
        if len(v) != n:
            raise ValueError("ranking_order decoder dimension mismatch")
        perm = ordering_of(v)
        return permutation_index(perm)
    if dec.kind == "matching_argmax":
        n = dec.space.n_items
        if len(v) != n * n:
            raise ValueError("matching decoder expects an N^2 score vector")
        if n > 8:
            raise ValueError("matching decode enumerates N! labels; N > 8 unsupported")
        table = dec.space.matching_vectors()
        return int(np.argmax(table @ v))
    raise AssertionError(dec.kind)


def ordering_of(s) -> tuple[int, ...]:
    """Descending ordering of score coordinates, ties to lower item index."""
    v = as_score(s)
    return tuple(int(i) for i in np.lexsort((np.arange(len(v)), -v)))


def permutation_index(perm) -> int:
    """Lexicographic rank of a permutation of range(n)."""
    perm = list(perm)
    n = len(perm)
    remaining = sorted(range(n))
    idx = 0
    for pos, p in enumerate(perm):
        r = remaining.index(p)
        idx += r * math.factorial(n - pos - 1)
        remaining.pop(r)
    return idx


# ---------------------------------------------------------------------------
# Task losses


@dataclass(frozen=True)
class TaskLoss:
    """Task loss with values in [0, 1].

    ``zero_one``, ``matching_hamming`` and ``custom_table`` are
    expectation-form losses representable as a k x k matrix.
    ``ranking_disagreement`` depends on the conditional law through the
    normalized transition matrix and is handled separately.
    """

    kind: str
    space: LabelSpace
    table: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in (
            "zero_one",
            "ranking_disagreement",
            "matching_hamming",
            "custom_table",
        ):
            raise ValueError(f"unknown task loss {self.kind!r}")
        if self.kind == "custom_table":
            t = np.asarray(self.table, dtype=float)
            if t.shape != (self.space.size_k, self.space.size_k):
                raise ValueError("custom table must be k x k")
            if t.min() < 0 or t.max() > 1 + 1e-12:
                raise ValueError("task loss values must lie in [0, 1]")
            if np.any(np.diag(t) != 0):
                raise ValueError("custom table must vanish on the diagonal")
            object.__setattr__(self, "table", t)

    @staticmethod
    def zero_one(space: LabelSpace) -> "TaskLoss":
        return TaskLoss("zero_one", space)

    @staticmethod
    def matching_hamming(n_nodes: int) -> "TaskLoss":
        return TaskLoss("matching_hamming", LabelSpace.bipartite_matching(n_nodes))

    @staticmethod
    def custom(space: LabelSpace, table) -> "TaskLoss":
        return TaskLoss("custom_table", space, np.asarray(table, dtype=float))

    @staticmethod
    def ranking(n_items: int) -> "TaskLoss":
        return TaskLoss("ranking_disagreement", LabelSpace.ranking_pairs(n_items))

    def is_expectation_form(self) -> bool:
        return self.kind != "ranking_disagreement"

    def matrix(self) -> np.ndarray:
        """k x k loss matrix L[y_hat, y] for expectation-form losses."""
        k = self.space.size_k
        if self.kind == "zero_one":
            return 1.0 - np.eye(k)
        if self.kind == "custom_table":
            return self.table
        if self.kind == "matching_hamming":
            v = self.space.matching_vectors()
            n = self.space.n_items
            diff = np.abs(v[:, None, :] - v[None, :, :]).sum(axis=2)
            return diff / (2.0 * n)
        raise ValueError("ranking_disagreement has no loss matrix")


# ---------------------------------------------------------------------------
# Conditional risks


def label_risks(loss: TaskLoss, p) -> np.ndarray:
    """Conditional risk of predicting each label: (L @ p)."""
    return loss.matrix() @ as_probs(p)


def bayes_label(loss: TaskLoss, p) -> int:
    """Risk-minimizing label, lowest index on ties."""
    return int(np.argmin(label_risks(loss, p)))


def transition_matrix(p, n_items: int) -> np.ndarray:
    """Column-normalized pairwise-comparison matrix built from pair probabilities.

    Column j is the conditional law of the winner given that j lost;
    empty columns (0/0) are filled with 1/(k-1).
    """
    space = LabelSpace.ranking_pairs(n_items)
    probs = as_probs(p)
    n = n_items
    P = np.zeros((n, n))
    for lbl in range(space.size_k):
        i, j = space.pair_of_label(lbl)
        P[i, j] = probs[lbl]
    col = P.sum(axis=0)
    C = np.zeros((n, n))
    for j in range(n):
        if col[j] > 0:
            C[:, j] = P[:, j] / col[j]
        else:
            C[:, j] = 1.0 / (n - 1)
        C[j, j] = 0.0
    return C


def ranking_task_loss(s, p, n_items: int) -> float:
    """Mis-ordering indicator of a score vector against the transition scores."""
    v = as_score(s)
    c1 = transition_matrix(p, n_items) @ np.ones(n_items)
    for i in range(n_items):
        for j in range(i + 1, n_items):
            gap = c1[i] - c1[j]
            if gap != 0 and (v[i] - v[j]) * gap <= 0:
                return 1.0
    return 0.0


def task_risk_conditional(loss: TaskLoss, dec: Decoder, s, p) -> float:
    """Conditional task risk of score s under label law p."""
    if loss.kind == "ranking_disagreement":
        return ranking_task_loss(s, p, loss.space.n_items)
    risks = label_risks(loss, p)
    return float(risks[decode(dec, s)])


def excess_task_risk(loss: TaskLoss, dec: Decoder, s, p) -> float:
    """Pointwise excess task risk; the infimum enumerates decoded labels."""
    if loss.kind == "ranking_disagreement":
        n = loss.space.n_items
        value = ranking_task_loss(s, p, n)
        best = min(
            ranking_task_loss(score_of_ordering(perm), p, n)
            for perm in itertools.permutations(range(n))
        )
        return value - best
    risks = label_risks(loss, p)
    return float(risks[decode(dec, s)] - risks.min())


def score_of_ordering(perm) -> np.ndarray:
    """A score vector whose descending sort realizes the given ordering."""
    perm = list(perm)
    n = len(perm)
    s = np.empty(n)
    for rank, item in enumerate(perm):
        s[item] = float(n - rank)
    return s


# ---------------------------------------------------------------------------
# Conditional label models on a finite support


@dataclass
class FiniteSupportModel:
    """Covariate distribution on finitely many points with known label laws."""

    space: LabelSpace
    weights: np.ndarray
    dists: np.ndarray  # shape (n_points, k), rows are label laws
    x_ids: list = None
    covariates: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.dists = np.asarray(self.dists, dtype=float)
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise ValueError("support weights must be a probability vector")
        self.weights = self.weights / self.weights.sum()
        if self.dists.shape != (len(self.weights), self.space.size_k):
            raise ValueError("label law table has wrong shape")
        for row in self.dists:
            FiniteDist(row, self.space)  # validates
        if self.x_ids is None:
            self.x_ids = list(range(len(self.weights)))

    @property
    def n_points(self) -> int:
        return len(self.weights)

    def dist(self, idx: int) -> np.ndarray:
        return self.dists[idx]
