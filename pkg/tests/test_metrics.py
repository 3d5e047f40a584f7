import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhsanet.errors import EvaluationError
from mhsanet.metrics import EmbeddingRecord, average_precision, cmc_map, rank_gallery, records

from oracles import brute_eval


def rec(i, c, f):
    return EmbeddingRecord(i, c, np.asarray(f, dtype=float))


def test_exact_copy_at_other_camera_ranks_first():
    q = rec(1, 0, [0.3, 0.4])
    gallery = [rec(2, 1, [1.0, 1.0]), rec(1, 1, [0.3, 0.4]), rec(3, 0, [0.2, 0.4])]
    assert rank_gallery(q, gallery)[0] == 1


def test_same_id_same_camera_filtered():
    q = rec(1, 0, [0.0])
    gallery = [rec(1, 0, [0.0]), rec(1, 1, [2.0]), rec(2, 0, [1.0])]
    assert list(rank_gallery(q, gallery)) == [2, 1]


def test_random_gallery_order_matches_sort():
    rng = np.random.default_rng(0)
    q = rec(0, 0, rng.normal(size=3))
    gallery = [rec(int(i), 1, rng.normal(size=3)) for i in rng.integers(1, 4, 5)]
    d = [((g.feature - q.feature) ** 2).sum() for g in gallery]
    assert list(rank_gallery(q, gallery)) == sorted(range(5), key=lambda k: (d[k], k))


def test_ties_break_by_index():
    q = rec(0, 0, [0.0])
    gallery = [rec(1, 1, [1.0]), rec(2, 1, [-1.0]), rec(3, 1, [1.0])]
    assert list(rank_gallery(q, gallery)) == [0, 1, 2]


def test_worked_average_precision():
    assert average_precision(np.array([True, False, True, False])) == 5 / 6


def test_worked_ap_through_cmc_map():
    q = [rec(0, 0, [0.0])]
    g = [rec(0, 1, [1.0]), rec(1, 1, [2.0]), rec(0, 1, [3.0]), rec(2, 1, [4.0])]
    rep = cmc_map(q, g)
    assert rep.mAP == 5 / 6 and rep.rank(1) == 1.0


def test_no_valid_queries_is_error():
    with pytest.raises(EvaluationError):
        cmc_map([rec(5, 0, [0.0])], [rec(1, 0, [1.0])])


def test_invalid_queries_counted_and_excluded():
    q = [rec(0, 0, [0.0]), rec(9, 0, [0.0])]
    rep = cmc_map(q, [rec(0, 1, [1.0]), rec(1, 1, [0.5])])
    assert rep.n_valid == 1 and rep.n_invalid == 1


def random_instance(rng, nq, ng, n_ids=4, dim=3):
    qf, gf = rng.normal(size=(nq, dim)), rng.normal(size=(ng, dim))
    return (qf, rng.integers(n_ids, size=nq), rng.integers(2, size=nq),
            gf, rng.integers(n_ids, size=ng), rng.integers(2, size=ng))


def test_matches_brute_force_evaluator():
    rng = np.random.default_rng(1)
    qf, qi, qc, gf, gi, gc = random_instance(rng, 10, 30)
    gi[:4] = np.arange(4)
    gc[:4] = 1 - qc[0]
    rep = cmc_map(records(qf, qi, qc), records(gf, gi, gc))
    cmc, mAP = brute_eval(qf, qi, qc, gf, gi, gc)
    np.testing.assert_allclose(rep.cmc, cmc, atol=1e-12, rtol=0)
    assert abs(rep.mAP - mAP) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_report_invariants(seed):
    rng = np.random.default_rng(seed)
    qf, qi, qc, gf, gi, gc = random_instance(rng, 6, 12)
    gi[:4], gc[:4] = np.arange(4), 2  # camera 2 is never a query camera
    rep = cmc_map(records(qf, qi, qc), records(gf, gi, gc))
    assert np.all(np.diff(rep.cmc) >= 0) and rep.cmc[-1] <= 1.0
    assert 0.0 <= rep.mAP <= 1.0
    assert rep.mAP == pytest.approx(np.mean(rep.ap), abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_ranking_invariant_to_gallery_permutation(seed):
    rng = np.random.default_rng(seed)
    q = rec(0, 0, rng.normal(size=3))
    gallery = [rec(int(i), 1, rng.normal(size=3)) for i in rng.integers(0, 5, 8)]
    perm = rng.permutation(8)
    shuffled = [gallery[k] for k in perm]
    a = [gallery[k].id for k in rank_gallery(q, gallery)]
    b = [shuffled[k].id for k in rank_gallery(q, shuffled)]
    assert a == b


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_far_irrelevant_entry_keeps_rank1(seed):
    rng = np.random.default_rng(seed)
    qf, qi, qc, gf, gi, gc = random_instance(rng, 5, 10)
    gi[:4], gc[:4] = np.arange(4), 2
    before = cmc_map(records(qf, qi, qc), records(gf, gi, gc)).rank(1)
    far = records(np.vstack([gf, np.full((1, 3), 1e6)]), np.append(gi, 99), np.append(gc, 0))
    assert cmc_map(records(qf, qi, qc), far).rank(1) == before


def test_report_csv_and_summary():
    rep = cmc_map([rec(0, 0, [0.0])], [rec(0, 1, [1.0]), rec(1, 1, [0.5])])
    lines = rep.to_csv().splitlines()
    assert lines[0] == "rank,accuracy" and lines[1] == "1,0.0" and lines[-1].startswith("mAP,")
    assert "Rank-1" in rep.summary() and "mAP" in rep.summary()
