import math

import numpy as np
import pytest

from agglab.aggregate import STAR, LabelWitness, ScoreVector
from agglab.core import LabelSpace, TaskLoss
from agglab.surrogate import (
    ExpMargin,
    HingeMargin,
    IdentifiabilityCert,
    LogisticMargin,
    MarginLoss,
    MulticlassLogistic,
    PairwiseRanking,
    SquaredVsScore,
    StructuredHinge,
    bipartite_hinge,
    check_certificate,
    eval_surrogate,
    make_cert_bipartite,
    make_cert_margin,
    make_cert_structured,
    margin_by_name,
    step_convex,
    subgradient,
)

ALL_SPECS = [
    MarginLoss(HingeMargin()),
    MarginLoss(LogisticMargin()),
    MarginLoss(ExpMargin()),
    MarginLoss(step_convex(0.5)),
    MulticlassLogistic(3),
    bipartite_hinge(2),
    StructuredHinge(np.eye(3), TaskLoss.zero_one(LabelSpace.plain(3))),
    PairwiseRanking(3, "logistic"),
    PairwiseRanking(3, "squared_hinge"),
]


def random_aggregate(spec, rng):
    if isinstance(spec, SquaredVsScore):
        return ScoreVector(rng.standard_normal(spec.score_dim))
    return LabelWitness(int(rng.integers(spec.space.size_k)))


def test_hinge_values():
    spec = MarginLoss(HingeMargin())
    assert eval_surrogate(spec, [1.0], LabelWitness(0)) == 0.0
    assert eval_surrogate(spec, [0.0], LabelWitness(0)) == 1.0
    assert eval_surrogate(spec, [1.0], LabelWitness(1)) == 2.0


def test_structured_hinge_zero_at_anchor():
    for N in (2, 3):
        spec = bipartite_hinge(N)
        table = spec.table
        for y in range(spec.space.size_k):
            s = table[y] / N
            assert eval_surrogate(spec, s, LabelWitness(y)) == pytest.approx(0.0, abs=1e-12)
            assert spec.decode(s) == y
        rng = np.random.default_rng(2)
        for _ in range(20):
            s = rng.standard_normal(spec.score_dim)
            y = int(rng.integers(spec.space.size_k))
            assert eval_surrogate(spec, s, LabelWitness(y)) >= -1e-12


def test_multiclass_logistic_value_and_grad():
    spec = MulticlassLogistic(3)
    assert eval_surrogate(spec, [0.0, 0.0], LabelWitness(2)) == pytest.approx(math.log(3))
    g = subgradient(spec, [0.0, 0.0], LabelWitness(0))
    assert np.allclose(g, [1 / 3 - 1, 1 / 3])


def test_margin_subgradients():
    logi = MarginLoss(LogisticMargin())
    assert subgradient(logi, [0.0], LabelWitness(0))[0] == pytest.approx(-0.5)
    hinge = MarginLoss(HingeMargin())
    assert subgradient(hinge, [2.0], LabelWitness(0))[0] == 0.0  # flat region
    assert subgradient(hinge, [0.5], LabelWitness(0))[0] == -1.0


def test_star_only_for_squared():
    sq = SquaredVsScore(3)
    assert eval_surrogate(sq, [1.0, 2.0, 3.0], STAR) == 0.0
    assert np.allclose(subgradient(sq, [1.0, 2.0, 3.0], STAR), 0.0)
    q = ScoreVector([1.0, 1.0, 1.0])
    assert eval_surrogate(sq, [2.0, 1.0, 1.0], q) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        eval_surrogate(MarginLoss(HingeMargin()), [1.0], STAR)


def test_convexity_midpoint_property():
    rng = np.random.default_rng(3)
    for spec in ALL_SPECS:
        for _ in range(30):
            a = random_aggregate(spec, rng)
            s1 = 4 * rng.standard_normal(spec.score_dim)
            s2 = 4 * rng.standard_normal(spec.score_dim)
            mid = eval_surrogate(spec, (s1 + s2) / 2, a)
            avg = (eval_surrogate(spec, s1, a) + eval_surrogate(spec, s2, a)) / 2
            assert mid <= avg + 1e-9


def test_subgradient_finite_difference():
    # smooth losses only; h = 1e-5, tolerance 1e-4 on the directional slope
    smooth = [
        MarginLoss(LogisticMargin()),
        MarginLoss(ExpMargin()),
        MulticlassLogistic(3),
        PairwiseRanking(3, "logistic"),
        SquaredVsScore(3),
    ]
    rng = np.random.default_rng(4)
    h = 1e-5
    checks = 0
    while checks < 100:
        spec = smooth[checks % len(smooth)]
        a = random_aggregate(spec, rng)
        s = 2 * rng.standard_normal(spec.score_dim)
        u = rng.standard_normal(spec.score_dim)
        u /= np.linalg.norm(u)
        g = subgradient(spec, s, a)
        fd = (eval_surrogate(spec, s + h * u, a) - eval_surrogate(spec, s - h * u, a)) / (2 * h)
        assert abs(fd - float(g @ u)) <= 1e-4
        checks += 1


def test_make_cert_margin_constants():
    cert = make_cert_margin(HingeMargin(), 1.0)
    assert (cert.c1, cert.c2) == (1.0, 2.0)
    cert = make_cert_margin(HingeMargin(), 0.5)
    assert (cert.c1, cert.c2) == (0.5, 1.5)
    logi = LogisticMargin()
    cert = make_cert_margin(logi, 1.0)
    assert cert.c1 == pytest.approx(math.log(2) - math.log(1 + math.exp(-1)))
    assert cert.c2 == pytest.approx(math.log(1 + math.e))
    flat = margin_by_name("hinge")
    with pytest.raises(ValueError):
        make_cert_margin(flat, 0.0)


def test_cert_serialization_roundtrip():
    cert = make_cert_margin(LogisticMargin(), 0.7)
    back = IdentifiabilityCert.from_dict(cert.to_dict())
    assert back.c1 == cert.c1 and back.c2 == cert.c2
    assert back.witness_labels() == cert.witness_labels()
    assert all(np.allclose(a, b) for a, b in zip(back.anchors, cert.anchors))


def test_check_certificate_hinge():
    spec = MarginLoss(HingeMargin())
    cert = make_cert_margin(HingeMargin(), 1.0)
    rep = check_certificate(spec, cert)
    assert rep.valid and rep.pred_ok
    assert rep.worst_slack_1 >= -1e-9
    assert rep.worst_slack_2 >= -1e-9

    inflated = IdentifiabilityCert(cert.witnesses, cert.anchors, 1.5, 2.0)
    rep = check_certificate(spec, inflated)
    assert not rep.valid
    assert rep.worst_slack_1 == pytest.approx(-0.5, abs=1e-6)


def test_check_certificate_smooth_margins():
    for phi in (LogisticMargin(), ExpMargin(), step_convex(0.4)):
        spec = MarginLoss(phi)
        cert = make_cert_margin(phi, 1.0)
        rep = check_certificate(spec, cert)
        assert rep.valid, phi.name
        assert rep.worst_slack_1 >= -1e-6
        assert rep.worst_slack_2 >= -1e-6


def test_make_cert_bipartite():
    for N in (2, 3):
        cert = make_cert_bipartite(N)
        assert cert.c1 == pytest.approx(1.0 / N)
        assert cert.c2 == 2.0
        rep = check_certificate(bipartite_hinge(N), cert)
        assert rep.valid
        assert rep.worst_slack_1 >= -1e-9 and rep.worst_slack_2 >= -1e-9


def test_make_cert_structured_one_hot():
    sp = LabelSpace.plain(3)
    loss = TaskLoss.custom(sp, (1 - np.eye(3)) / 3)
    cert = make_cert_structured(np.eye(3), loss)
    assert cert.c1 == pytest.approx(1 / 3)
    assert cert.c2 == pytest.approx(2.0)
    assert cert.meta["exact_gap"]
    rep = check_certificate(StructuredHinge(np.eye(3), loss), cert)
    assert rep.valid

    plain = TaskLoss.zero_one(sp)
    cert = make_cert_structured(np.eye(3), plain)
    assert (cert.c1, cert.c2) == (1.0, 2.0)
    assert check_certificate(StructuredHinge(np.eye(3), plain), cert).valid


def test_make_cert_structured_matches_bipartite():
    loss = TaskLoss.matching_hamming(2)
    table = loss.space.matching_vectors()
    cert = make_cert_structured(table, loss)
    assert cert.c2 == pytest.approx(2.0)  # gap is exactly 1
    assert check_certificate(StructuredHinge(table, loss), cert).valid


def test_make_cert_structured_general_embedding():
    # non-binary embedding exercises the numeric gap search
    sp = LabelSpace.plain(3)
    loss = TaskLoss.zero_one(sp)
    table = np.array([[1.0, 0.0], [-0.5, 1.0], [-0.5, -1.0]])
    cert = make_cert_structured(table, loss)
    assert not cert.meta["exact_gap"]
    rep = check_certificate(StructuredHinge(table, loss), cert)
    assert rep.valid


def test_make_cert_structured_degenerate():
    sp = LabelSpace.plain(3)
    loss = TaskLoss.zero_one(sp)
    dup = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        make_cert_structured(dup, loss)
