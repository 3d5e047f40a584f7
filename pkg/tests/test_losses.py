import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhsanet import losses
from mhsanet import tensor as T
from mhsanet.errors import ConfigError, DataError, NumericError
from mhsanet.losses import BatchFeatures, LossWeights
from mhsanet.tensor import Tensor

from oracles import brute_hard_triplet, brute_ihtl, explicit_fdrt


def pk_labels(rng, B):
    ids = np.repeat(np.arange(B // 2), 2)
    return rng.permutation(ids)


def test_ce_uniform_logits_is_log_n():
    w = Tensor(np.zeros((3, 5)))
    b = Tensor(np.zeros(5))
    val = losses.ce_loss(Tensor(np.ones((4, 3))), np.array([0, 1, 2, 4]), (w, b)).item()
    assert val == pytest.approx(math.log(5), abs=1e-12)


def test_ce_dominant_true_logit_goes_to_zero():
    b = Tensor([60.0, 0.0])
    val = losses.ce_loss(Tensor(np.zeros((2, 1))), np.array([0, 0]), (Tensor(np.zeros((1, 2))), b)).item()
    assert val < 1e-20


def test_ce_label_out_of_range():
    with pytest.raises(DataError):
        losses.ce_loss(Tensor(np.ones((2, 3))), np.array([0, 7]), (Tensor(np.zeros((3, 4))), Tensor(np.zeros(4))))


def test_hard_triplet_satisfied_margin_is_zero():
    # two clusters: intra squared distance 1, inter squared distance 100 (>= 10 apart)
    F = np.array([[0.0, 0], [1, 0], [10, 0], [11, 0]])
    assert losses.hard_triplet(Tensor(F), np.array([0, 0, 1, 1]), 3.0).item() == 0.0


def test_hard_triplet_identical_features_gives_margin():
    assert losses.hard_triplet(Tensor(np.ones((4, 3))), np.array([0, 0, 1, 1]), 3.0).item() == 3.0


def test_hard_triplet_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(10):
        F = rng.normal(size=(8, 5))
        y = pk_labels(rng, 8)
        assert losses.hard_triplet(Tensor(F), y, 3.0).item() == pytest.approx(brute_hard_triplet(F, y, 3.0), abs=1e-10)


def test_triplet_contract_violations():
    with pytest.raises(DataError):
        losses.hard_triplet(Tensor(np.ones((3, 2))), np.array([0, 0, 1]), 1.0)
    with pytest.raises(DataError):
        losses.hard_triplet(Tensor(np.ones((2, 2))), np.array([0, 0]), 1.0)


def test_ihtl_b6_k2_matches_quadruple_loop():
    rng = np.random.default_rng(1)
    P = rng.normal(size=(6, 2, 4))
    y = np.array([0, 1, 2, 0, 1, 2])
    assert losses.ihtl(Tensor(P), y, 3.0).item() == pytest.approx(brute_ihtl(P, y, 3.0), abs=1e-10)


def test_ihtl_identical_embeddings_gives_margin():
    assert losses.ihtl(Tensor(np.ones((4, 3, 2))), np.array([0, 0, 1, 1]), 3.0).item() == 3.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([4, 6, 8]), st.integers(1, 3))
def test_ihtl_dominates_any_fixed_head(seed, B, K):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(B, K, 3))
    y = pk_labels(rng, B)
    full = losses.ihtl(Tensor(P), y, 1.0).item()
    for k in range(K):
        assert full >= losses.hard_triplet(Tensor(P[:, k]), y, 1.0).item() - 1e-12


def test_fdrt_anchors():
    assert losses.fdrt(Tensor(np.eye(3, 5))).item() == pytest.approx(0.0, abs=1e-12)
    assert losses.fdrt(Tensor([[1.0, 2.0], [1.0, 2.0]])).item() == pytest.approx(math.sqrt(2) / 4, abs=1e-12)


def test_fdrt_matches_explicit_gram():
    rng = np.random.default_rng(2)
    P = rng.normal(size=(4, 6))
    assert losses.fdrt(Tensor(P)).item() == pytest.approx(explicit_fdrt(P), abs=1e-12)


def test_fdrt_batched_is_per_image():
    rng = np.random.default_rng(3)
    P = rng.normal(size=(3, 4, 5))
    np.testing.assert_allclose(losses.fdrt(Tensor(P)).data, [explicit_fdrt(p) for p in P], atol=1e-12)


def test_fdrt_zero_row_is_numeric_error():
    with pytest.raises(NumericError):
        losses.fdrt(Tensor([[0.0, 0.0], [1.0, 1.0]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_fdrt_row_rescaling_invariance(seed, c):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(4, 5))
    Q = P.copy()
    Q[rng.integers(4)] *= c
    assert abs(losses.fdrt(Tensor(P)).item() - losses.fdrt(Tensor(Q)).item()) < 1e-10


def test_acm_examples():
    a = np.full((6, 4), 0.25)
    assert losses.acm_term(Tensor(a), 0.1).item() == pytest.approx(6 * 4 * 0.01, abs=1e-15)
    small = np.full((6, 4), 0.25)
    assert losses.acm_term(Tensor(small), 0.5).item() == pytest.approx((small**2).sum(), abs=1e-15)
    assert losses.acm_term(Tensor(np.ones((24, 1))), 1e-3).item() == pytest.approx(2.4e-5, abs=1e-18)


def test_acm_gamma_must_be_positive():
    with pytest.raises(ConfigError):
        losses.acm_term(Tensor(np.ones((2, 2))), 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-4, 1.0), st.floats(1e-4, 1.0))
def test_acm_bounded_and_monotone_in_gamma(seed, g1, g2):
    rng = np.random.default_rng(seed)
    alpha = T.softmax_rows(Tensor(rng.normal(size=(24, 8)) * 3))
    lo, hi = sorted((g1, g2))
    a_lo, a_hi = losses.acm_term(alpha, lo).item(), losses.acm_term(alpha, hi).item()
    assert a_lo <= 24 * 8 * lo**2 + 1e-15
    assert a_lo <= a_hi + 1e-15


def test_loss_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(lambda2=-1.0)
    with pytest.raises(ConfigError):
        LossWeights(gamma=0.0)
    LossWeights(lambda1=1e-4, lambda2=1.0, lambda3=1e-3, gamma=1e-3, margin=3.0)


def _random_batch(rng, B=6, K=3, D=4, n=3):
    y = np.repeat(np.arange(n), B // n)
    cls = {s: (Tensor(rng.normal(size=(D, n))), Tensor(rng.normal(size=n))) for s in "qpz"}
    alpha = T.softmax_rows(Tensor(rng.normal(size=(B, 5, K))))
    return BatchFeatures(y, Tensor(rng.normal(size=(B, D))), cls, Tensor(rng.normal(size=(B, D))),
                         Tensor(rng.normal(size=(B, D))), Tensor(rng.normal(size=(B, K, D))), alpha)


def test_branch_and_total_loss_equal_component_sums():
    rng = np.random.default_rng(4)
    batch = _random_batch(rng)
    w = LossWeights(lambda1=0.3, lambda2=0.7, lambda3=0.2, gamma=0.1)
    y, cls = batch.labels, batch.classifiers
    ce = lambda f, s: losses.ce_loss(f, y, cls[s]).item()  # noqa: E731
    tr = lambda f: brute_hard_triplet(f.data, y, w.margin)  # noqa: E731
    fd = np.mean([explicit_fdrt(p) for p in batch.P.data])
    mhsab = (ce(batch.p_star, "p") + tr(batch.p_star) + w.lambda1 * fd + ce(batch.z, "z") + tr(batch.z)
             + w.lambda2 * brute_ihtl(batch.P.data, y, w.margin))
    acm = np.mean([np.sum(np.minimum(a, w.gamma) ** 2) for a in batch.alpha.data])
    assert losses.branch_loss(batch, w).item() == pytest.approx(mhsab, abs=1e-10)
    assert losses.total_loss(batch, w, True).item() == pytest.approx(mhsab + ce(batch.q_star, "q") + w.lambda3 * acm,
                                                                      abs=1e-10)
    assert losses.total_loss(batch, w, False).item() == pytest.approx(mhsab + w.lambda3 * acm, abs=1e-10)


def test_zero_lambdas_reduce_to_fusion_plus_residual():
    rng = np.random.default_rng(5)
    batch = _random_batch(rng)
    w = LossWeights(0.0, 0.0, 0.0)
    y = batch.labels
    expect = sum(losses.ce_loss(f, y, batch.classifiers[s]).item() + losses.hard_triplet(f, y, 3.0).item()
                 for f, s in ((batch.p_star, "p"), (batch.z, "z")))
    assert losses.branch_loss(batch, w).item() == pytest.approx(expect, abs=1e-12)
    assert losses.total_loss(batch, w, train_gfb_ce=False).item() == pytest.approx(expect, abs=1e-12)


def test_degenerate_uniform_features_give_log_n_plus_margin():
    B, D, n = 4, 3, 2
    y = np.array([0, 0, 1, 1])
    zero = (Tensor(np.zeros((D, n))), Tensor(np.zeros(n)))
    same = Tensor(np.ones((B, D)))
    batch = BatchFeatures(y, same, {"q": zero, "p": zero, "z": zero}, same, same, Tensor(np.ones((B, 2, D))),
                          T.softmax_rows(Tensor(np.zeros((B, 4, 2)))))
    expect = 2 * (math.log(n) + 3.0)
    assert losses.branch_loss(batch, LossWeights(0, 0, 0)).item() == pytest.approx(expect, abs=1e-12)


def test_all_terms_non_negative():
    rng = np.random.default_rng(6)
    for _ in range(5):
        terms = losses.loss_terms(_random_batch(rng), LossWeights())
        assert all(v.item() >= 0 for v in terms.values())
