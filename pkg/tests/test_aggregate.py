import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agglab.aggregate import (
    STAR,
    LabelWitness,
    NeighborSample,
    ScoreVector,
    generalized_majority_vote,
    knn_aggregate,
    majority_vote_law,
    mv_to_witness,
    ranking_frequency_aggregate,
)
from agglab.core import LabelSpace, TaskLoss
from agglab.scenarios import sample_labels
from agglab.surrogate import HingeMargin, make_cert_margin


def zero_one(k):
    return TaskLoss.zero_one(LabelSpace.plain(k))


def test_plain_majority_vote():
    loss = zero_one(3)
    assert generalized_majority_vote([1, 1, 2], loss) == 1
    assert generalized_majority_vote([0, 1], loss) == 0  # tie to lowest index
    with pytest.raises(ValueError):
        generalized_majority_vote([], loss)


def test_generalized_mv_custom_table():
    # middle label has small loss against both extremes and wins the total
    sp = LabelSpace.plain(3)
    t = np.array([[0.0, 0.4, 1.0], [0.4, 0.0, 0.4], [1.0, 0.4, 0.0]])
    loss = TaskLoss.custom(sp, t)
    z = [0, 0, 2, 2]
    # oracle: enumerate the summed loss for every candidate label
    totals = [sum(t[y, zi] for zi in z) for y in range(3)]
    assert totals == [2.0, 1.6, 2.0]
    assert generalized_majority_vote(z, loss) == 1


@given(st.lists(st.integers(0, 2), min_size=1, max_size=9))
@settings(max_examples=60)
def test_mv_permutation_invariant(z):
    loss = zero_one(3)
    base = generalized_majority_vote(z, loss)
    rng = np.random.default_rng(1)
    perm = rng.permutation(len(z))
    assert generalized_majority_vote(np.array(z)[perm], loss) == base


@given(st.lists(st.integers(0, 2), min_size=1, max_size=9).filter(
    lambda z: np.bincount(z, minlength=3).max() > len(z) / 2))
@settings(max_examples=60)
def test_mv_strict_majority_wins(z):
    loss = zero_one(3)
    counts = np.bincount(z, minlength=3)
    assert generalized_majority_vote(z, loss) == int(np.argmax(counts))


def test_mv_to_witness():
    cert = make_cert_margin(HingeMargin(), 1.0)
    loss = zero_one(2)
    out = mv_to_witness([0, 0, 1], loss, cert)
    assert isinstance(out, LabelWitness) and out.label == 0
    out = mv_to_witness([1, 1, 1], loss, cert)
    assert out.label == 1


def test_ranking_frequency_star_and_cycle():
    space = LabelSpace.ranking_pairs(3)
    # every comparison has item 2 as winner over 0: items 1,2 never lose -> star
    z = [space.pair_label(2, 0)] * 4
    assert ranking_frequency_aggregate(z, space) is STAR
    # one-cycle: each item loses exactly once, each column has one winner
    z = [space.pair_label(0, 1), space.pair_label(1, 2), space.pair_label(2, 0)]
    agg = ranking_frequency_aggregate(z, space)
    assert isinstance(agg, ScoreVector)
    assert np.allclose(agg.values, [1.0, 1.0, 1.0])


def test_ranking_frequency_hand_count():
    space = LabelSpace.ranking_pairs(3)
    pairs = [(0, 1), (0, 1), (0, 2), (1, 2), (2, 0), (1, 0)]
    z = [space.pair_label(i, j) for i, j in pairs]
    agg = ranking_frequency_aggregate(z, space)
    # oracle: independent tally of wins over per-item loss counts
    wins = np.zeros((3, 3))
    for i, j in pairs:
        wins[i, j] += 1
    losses = wins.sum(axis=0)
    expected = (wins / losses[None, :]).sum(axis=1)
    assert np.allclose(agg.values, expected)
    assert np.allclose(agg.values, [1.5, 1.0, 0.5])


def test_knn_aggregate():
    loss = zero_one(2)
    pts = np.array([[0.1], [0.2], [0.9]])
    labels = np.array([1, 1, 0])
    sample = NeighborSample(np.array([0.0]), pts, labels)
    assert knn_aggregate(sample, 1, loss) == 1
    assert knn_aggregate(sample, 2, loss) == 1  # brute-force: two nearest are both 1
    assert knn_aggregate(sample, 3, loss) == 1  # plain majority over all
    with pytest.raises(ValueError):
        knn_aggregate(sample, 0, loss)
    with pytest.raises(ValueError):
        knn_aggregate(sample, 4, loss)


def test_knn_distance_ties_use_sample_order():
    loss = zero_one(2)
    pts = np.array([[1.0], [-1.0], [2.0]])
    labels = np.array([0, 1, 1])
    sample = NeighborSample(np.array([0.0]), pts, labels)
    # distances (1, 1, 2): the tie resolves to index 0, whose label wins at K=1
    assert knn_aggregate(sample, 1, loss) == 0


def test_majority_vote_law_binary():
    law = majority_vote_law([0.8, 0.2], 3, zero_one(2))
    assert np.allclose(law, [0.896, 0.104])


def test_majority_vote_law_guard():
    with pytest.raises(ValueError):
        majority_vote_law(np.full(10, 0.1), 200, zero_one(10), max_outcomes=1000)


def test_majority_vote_law_matches_sampling():
    p = [0.5, 0.3, 0.2]
    loss = zero_one(3)
    m = 5
    law = majority_vote_law(p, m, loss)
    T = 40000
    counts = np.zeros(3)
    labels = sample_labels(p, m * T, seed=3).reshape(T, m)
    for t in range(T):
        counts[generalized_majority_vote(labels[t], loss)] += 1
    freq = counts / T
    se = np.sqrt(law * (1 - law) / T)
    assert np.all(np.abs(freq - law) <= 4 * se + 1e-12)


def test_hoeffding_envelope():
    # empirical MV error rate stays under 2k exp(-m delta^2 / 2) + CI slack
    rng = np.random.default_rng(7)
    T = 20000
    slack = 3 * math.sqrt(math.log(1000.0) / (2 * T))
    for trial in range(4):
        k = int(rng.integers(2, 5))
        m = int(rng.integers(3, 51))
        p = rng.dirichlet(np.ones(k) * 2)
        loss = zero_one(k)
        risks = (1 - np.eye(k)) @ p
        order = np.sort(risks)
        if order[1] - order[0] < 0.05:
            continue
        delta = order[1] - order[0]
        y_star = int(np.argmin(risks))
        bound = 2 * k * math.exp(-m * delta**2 / 2) + slack
        labels = sample_labels(p, m * T, seed=100 + trial).reshape(T, m)
        errs = sum(
            generalized_majority_vote(labels[t], loss) != y_star for t in range(T)
        )
        assert errs / T <= bound


def test_ranking_frequency_unbiased():
    # Monte Carlo mean of non-star aggregates matches the transition scores
    from agglab.core import transition_matrix

    space = LabelSpace.ranking_pairs(3)
    rng = np.random.default_rng(11)
    p = rng.dirichlet(np.ones(6))
    target = transition_matrix(p, 3) @ np.ones(3)
    m, T = 6, 50000
    labels = sample_labels(p, m * T, seed=5).reshape(T, m)
    vals = []
    for t in range(T):
        agg = ranking_frequency_aggregate(labels[t], space)
        if agg is not STAR:
            vals.append(agg.values)
    vals = np.array(vals)
    se = vals.std(axis=0, ddof=1) / math.sqrt(len(vals))
    assert np.all(np.abs(vals.mean(axis=0) - target) <= 3 * se)
