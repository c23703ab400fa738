import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agglab.core import (
    Decoder,
    FiniteDist,
    FiniteSupportModel,
    LabelSpace,
    TaskLoss,
    bayes_label,
    decode,
    excess_task_risk,
    label_risks,
    ordering_of,
    permutation_index,
    ranking_task_loss,
    score_of_ordering,
    task_risk_conditional,
    transition_matrix,
)


def test_label_space_sizes():
    assert LabelSpace.plain(3).size_k == 3
    assert LabelSpace.ranking_pairs(3).size_k == 6
    assert LabelSpace.bipartite_matching(3).size_k == 6
    with pytest.raises(ValueError):
        LabelSpace.plain(1)
    with pytest.raises(ValueError):
        LabelSpace(5, "ranking_pairs", 3)


def test_pair_label_roundtrip():
    space = LabelSpace.ranking_pairs(4)
    seen = set()
    for i in range(4):
        for j in range(4):
            if i == j:
                continue
            lbl = space.pair_label(i, j)
            assert space.pair_of_label(lbl) == (i, j)
            seen.add(lbl)
    assert seen == set(range(12))


def test_finite_dist_validation():
    d = FiniteDist([0.6, 0.4])
    assert d.probs.sum() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        FiniteDist([0.6, 0.5])
    with pytest.raises(ValueError):
        FiniteDist([1.1, -0.1])


def test_decode_argmax_and_sign():
    sp = LabelSpace.plain(3)
    assert decode(Decoder("argmax", sp), [0.2, 0.9, -0.1]) == 1
    b = LabelSpace.plain(2)
    # tie at 0 goes to the positive class, which is label 0
    assert decode(Decoder("sign", b), [0.0]) == 0
    assert decode(Decoder("sign", b), [-0.3]) == 1


def test_decode_matching_against_bruteforce():
    N = 3
    sp = LabelSpace.bipartite_matching(N)
    dec = Decoder("matching_argmax", sp)
    table = sp.matching_vectors()
    perm = (2, 0, 1)
    s = table[sp.matchings().index(perm)].astype(float)
    label = decode(dec, s)
    assert sp.matchings()[label] == perm

    rng = np.random.default_rng(0)
    for _ in range(20):
        s = rng.standard_normal(N * N)
        # oracle: explicit permutation loop over all N! assignments
        best = max(
            range(sp.size_k),
            key=lambda y: sum(s[u * N + v] for u, v in enumerate(sp.matchings()[y])),
        )
        assert decode(dec, s) == best


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.floats(0.1, 50))
def test_decode_scale_invariance(vals, c):
    sp = LabelSpace.plain(3)
    dec = Decoder("argmax", sp)
    s = np.array(vals)
    assert decode(dec, s) == decode(dec, c * s)


def test_task_risk_zero_one():
    sp = LabelSpace.plain(3)
    loss = TaskLoss.zero_one(sp)
    dec = Decoder("argmax", sp)
    assert task_risk_conditional(loss, dec, [2.0, 0.0, 0.0], [0.6, 0.3, 0.1]) == pytest.approx(0.4)
    assert task_risk_conditional(loss, dec, [2.0, 0.0, 0.0], [1.0, 0.0, 0.0]) == 0.0


def test_excess_task_risk_zero_one():
    sp = LabelSpace.plain(3)
    loss = TaskLoss.zero_one(sp)
    dec = Decoder("argmax", sp)
    p = [0.6, 0.3, 0.1]
    s = [0.0, 1.0, 0.0]  # decodes to label 1
    assert excess_task_risk(loss, dec, s, p) == pytest.approx(0.3)
    assert excess_task_risk(loss, dec, [9.0, 0.0, 0.0], p) == 0.0


@given(st.lists(st.floats(0.01, 1), min_size=4, max_size=4),
       st.lists(st.floats(-5, 5), min_size=4, max_size=4))
@settings(max_examples=50)
def test_excess_matches_max_prob_identity(raw_p, s):
    # for the zero-one loss the excess equals max_y p_y - p_decoded
    p = np.array(raw_p) / np.sum(raw_p)
    sp = LabelSpace.plain(4)
    dec = Decoder("argmax", sp)
    loss = TaskLoss.zero_one(sp)
    got = excess_task_risk(loss, dec, np.array(s), p)
    want = p.max() - p[decode(dec, np.array(s))]
    assert got == pytest.approx(want, abs=1e-12)


def test_ranking_uniform_cycle_risk_zero():
    # uniform cycle over 3 items: transition scores are all ones, so no
    # ordering is demanded and every score has zero loss and excess
    sp = LabelSpace.ranking_pairs(3)
    p = np.zeros(6)
    for l in range(3):
        p[sp.pair_label(l, (l + 1) % 3)] = 1 / 3
    C1 = transition_matrix(p, 3) @ np.ones(3)
    assert np.allclose(C1, 1.0)
    loss = TaskLoss.ranking(3)
    dec = Decoder("ranking_order", sp)
    assert task_risk_conditional(loss, dec, [3.0, 2.0, 1.0], p) == 0.0
    for perm in itertools.permutations(range(3)):
        s = score_of_ordering(perm)
        assert excess_task_risk(loss, dec, s, p) == 0.0


def test_matching_hamming_l1_equals_l2_squared():
    for N in (2, 3, 4):
        sp = LabelSpace.bipartite_matching(N)
        v = sp.matching_vectors()
        l1 = np.abs(v[:, None, :] - v[None, :, :]).sum(axis=2) / (2 * N)
        l2 = ((v[:, None, :] - v[None, :, :]) ** 2).sum(axis=2) / (2 * N)
        assert np.allclose(l1, l2)
        loss = TaskLoss.matching_hamming(N)
        assert np.allclose(loss.matrix(), l1)
        assert loss.matrix().max() <= 1.0


def test_ordering_and_permutation_index():
    assert ordering_of([3.0, 1.0, 2.0]) == (0, 2, 1)
    assert ordering_of([1.0, 1.0, 0.0]) == (0, 1, 2)  # ties to lower item
    perms = list(itertools.permutations(range(3)))
    assert [permutation_index(p) for p in perms] == list(range(6))


def test_custom_table_validation():
    sp = LabelSpace.plain(3)
    good = np.array([[0, 0.5, 1.0], [0.5, 0, 0.5], [1.0, 0.5, 0]])
    TaskLoss.custom(sp, good)
    with pytest.raises(ValueError):
        TaskLoss.custom(sp, good + 0.5)  # exceeds 1
    bad = good.copy()
    bad[0, 0] = 0.2
    with pytest.raises(ValueError):
        TaskLoss.custom(sp, bad)  # nonzero diagonal


def test_finite_support_model_validation():
    sp = LabelSpace.plain(2)
    m = FiniteSupportModel(sp, [0.5, 0.5], [[0.7, 0.3], [0.2, 0.8]])
    assert m.n_points == 2
    assert bayes_label(TaskLoss.zero_one(sp), m.dist(0)) == 0
    with pytest.raises(ValueError):
        FiniteSupportModel(sp, [0.5, 0.6], [[0.7, 0.3], [0.2, 0.8]])


def test_label_risks_expectation():
    sp = LabelSpace.plain(3)
    loss = TaskLoss.zero_one(sp)
    p = [0.5, 0.3, 0.2]
    assert np.allclose(label_risks(loss, p), [0.5, 0.7, 0.8])


def test_ranking_loss_penalizes_misordering():
    sp = LabelSpace.ranking_pairs(3)
    # all mass on (0,1): item 0 preferred to 1; columns 2 empty
    p = np.zeros(6)
    p[sp.pair_label(0, 1)] = 1.0
    sc = transition_matrix(p, 3) @ np.ones(3)
    assert np.allclose(sc, [1.5, 1.0, 0.5])
    assert ranking_task_loss([1.0, 2.0, 0.0], p, 3) == 1.0
    assert ranking_task_loss([2.0, 1.5, 1.0], p, 3) == 0.0
