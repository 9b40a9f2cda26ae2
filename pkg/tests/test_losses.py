import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from oracles import gram_entrywise, sdm_direct, triplet_batch_hard
from svdkd.data_model import Modality
from svdkd.errors import ArgumentError, MiningError
from svdkd.gradcheck import max_relative_error, numeric_grad
from svdkd.losses import (
    TABLE3_CONFIGS,
    LossResult,
    LossWeights,
    TaskLossConfig,
    cosine_loss,
    distill_loss,
    fr_loss,
    id_loss,
    pcm_loss,
    sdm_pair_loss,
    sdm_total,
    task_loss,
    triplet_loss,
)
from svdkd.spectral import ProjectionBasis, thin_svd, top_k_basis

CFG = TaskLossConfig()


def balanced_batch(rng, n_ids=2, per_mod=1, d=16, mods=tuple(Modality)):
    labels, ms = [], []
    for pid in range(n_ids):
        for m in mods:
            labels += [pid] * per_mod
            ms += [int(m)] * per_mod
    return rng.normal(size=(len(labels), d)), np.array(labels), np.array(ms)


# ---------------------------------------------------------------- id loss


def test_id_uniform_logits():
    res = id_loss(np.zeros((5, 4)), np.array([0, 1, 2, 3, 0]))
    assert res.value == pytest.approx(math.log(4), abs=1e-12)


def test_id_peaked_logits_vs_logsumexp():
    expected = math.log(math.exp(10) + 2) - 10
    assert id_loss(np.array([[10.0, 0.0, 0.0]]), np.array([0])).value == pytest.approx(expected, abs=1e-12)


def test_id_rejects_out_of_range_labels():
    with pytest.raises(ArgumentError):
        id_loss(np.zeros((2, 3)), np.array([0, 3]))


# ---------------------------------------------------------------- triplet


def test_triplet_inactive_hinge():
    # every anchor has its positive at squared distance 1 and nearest negative at >= 4
    F = np.array([[0.0], [1.0], [-2.0], [-3.0]])
    labels = np.array([0, 0, 1, 1])
    res = triplet_loss(F, labels, 0.3)
    assert max(1 - 4 + 0.3, 0) == 0
    assert res.value == 0.0
    assert res.info["active"] == 0
    np.testing.assert_array_equal(res.grad_features, np.zeros_like(F))


def test_triplet_identical_features_equal_margin():
    assert triplet_loss(np.ones((6, 3)), np.array([0, 0, 1, 1, 2, 2]), 0.3).value == pytest.approx(0.3)


def test_triplet_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(20):
        F = rng.normal(size=(8, 4))
        labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
        assert triplet_loss(F, labels, 0.3).value == pytest.approx(triplet_batch_hard(F, labels, 0.3), abs=1e-12)


def test_triplet_needs_positive_and_negative():
    with pytest.raises(MiningError):
        triplet_loss(np.eye(3), np.array([0, 1, 1]))


# ---------------------------------------------------------------- sdm


def test_sdm_single_matched_pair():
    res = sdm_pair_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), np.array([0]), np.array([0]), CFG)
    assert abs(res.value) <= 2 * CFG.epsilon


def test_sdm_p_equals_q_minimizer():
    # one positive per query, negatives pushed to near-orthogonal-opposite so p ~ one-hot
    cfg = TaskLossConfig(tau=1e-3)
    Fm = np.array([[1.0, 0.0], [0.0, 1.0]])
    res = sdm_pair_loss(Fm, Fm.copy(), np.array([0, 1]), np.array([0, 1]), cfg)
    assert abs(res.value) < 1e-7


def test_sdm_pair_matches_direct_summation():
    rng = np.random.default_rng(1)
    for _ in range(10):
        Fm, Fn = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
        lm = np.array([0, 0, 1, 1, 2, 2])
        ln = rng.permutation(lm)
        got = sdm_pair_loss(Fm, Fn, lm, ln, CFG).value
        assert got == pytest.approx(sdm_direct(Fm, Fn, lm, ln, CFG.tau, CFG.epsilon), rel=1e-10, abs=1e-10)


def test_sdm_full_batch_has_12_terms():
    F, labels, mods = balanced_batch(np.random.default_rng(2), n_ids=3, per_mod=2)
    res = sdm_total(F, labels, mods, CFG)
    assert res.info["terms"] == 12
    assert len(set(res.info["directions"])) == 12


def test_sdm_two_modality_batch_has_2_terms():
    F, labels, mods = balanced_batch(np.random.default_rng(3), mods=(Modality.RGB, Modality.IR))
    res = sdm_total(F, labels, mods, CFG)
    assert res.info["terms"] == 2
    assert set(res.info["directions"]) == {("rgb", "ir"), ("ir", "rgb")}


def test_sdm_total_is_sum_of_pair_calls():
    F, labels, mods = balanced_batch(np.random.default_rng(4), n_ids=3, per_mod=2, d=6)
    expected = 0.0
    for m in Modality:
        for n in Modality:
            if m != n:
                rm, rn = mods == int(m), mods == int(n)
                expected += sdm_direct(F[rm], F[rn], labels[rm], labels[rn], CFG.tau, CFG.epsilon)
    assert sdm_total(F, labels, mods, CFG).value == pytest.approx(expected, rel=1e-10)


def test_sdm_single_modality_is_degenerate():
    F, labels, mods = balanced_batch(np.random.default_rng(5), mods=(Modality.RGB,), per_mod=2)
    res = sdm_total(F, labels, mods, CFG)
    assert res.value == 0.0 and res.info["terms"] == 0 and res.info["degenerate"]


# ---------------------------------------------------------------- task


def test_task_is_additive():
    rng = np.random.default_rng(6)
    F, labels, mods = balanced_batch(rng, n_ids=2, per_mod=1, d=8)
    logits = rng.normal(size=(len(F), 4))
    res = task_loss(F, logits, labels, mods, CFG)
    parts = id_loss(logits, labels).value + triplet_loss(F, labels).value + sdm_total(F, labels, mods).value
    assert res.value == parts


def test_task_degenerate_composition():
    labels = np.array([0, 0, 1, 1, 2, 2])
    res = task_loss(np.ones((6, 3)), np.zeros((6, 5)), labels, np.zeros(6, dtype=int), CFG)
    assert res.value == pytest.approx(math.log(5) + 0.3, abs=1e-12)


# --------------------------------------------------------------- distillation


def test_cosine_cases():
    F = np.random.default_rng(7).normal(size=(5, 4))
    assert cosine_loss(F, F).value == pytest.approx(0.0, abs=1e-15)
    assert cosine_loss(F, -F).value == pytest.approx(2.0, abs=1e-15)
    assert cosine_loss(F, 3 * F).value == pytest.approx(0.0, abs=1e-15)


def test_pcm_full_basis_is_cosine():
    rng = np.random.default_rng(8)
    for _ in range(20):
        Fc, Fe = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
        basis = ProjectionBasis(ortho_group.rvs(5, random_state=rng))
        assert abs(pcm_loss(Fc, Fe, basis).value - cosine_loss(Fc, Fe).value) < 1e-10


def test_pcm_identity_and_explicit_projection():
    rng = np.random.default_rng(9)
    Fc, Fe = rng.normal(size=(7, 4)), rng.normal(size=(7, 4))
    basis = top_k_basis(thin_svd(Fc), 2)
    assert pcm_loss(Fc, Fc, basis).value == pytest.approx(0.0, abs=1e-15)
    Pc = np.array([[row @ basis.V_k[:, j] for j in range(2)] for row in Fc])
    Pe = np.array([[row @ basis.V_k[:, j] for j in range(2)] for row in Fe])
    expected = np.mean([1 - (a @ b) / np.linalg.norm(a) / np.linalg.norm(b) for a, b in zip(Pc, Pe)])
    assert pcm_loss(Fc, Fe, basis).value == pytest.approx(expected, abs=1e-12)


def test_fr_cases():
    rng = np.random.default_rng(10)
    F = rng.normal(size=(6, 4))
    assert fr_loss(F, F).value < 1e-12
    for _ in range(20):
        Q = ortho_group.rvs(6, random_state=rng)
        assert fr_loss(F, Q @ F).value < 1e-10


def test_fr_matches_entrywise_gram():
    rng = np.random.default_rng(11)
    Fc, Fe = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    a, b = gram_entrywise(Fc).ravel(), gram_entrywise(Fe).ravel()
    expected = 1 - a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    assert fr_loss(Fc, Fe).value == pytest.approx(expected, abs=1e-12)


def test_weights_must_sum_to_one():
    with pytest.raises(ArgumentError):
        LossWeights(0.1, 0.1, 0.1, 0.1)
    with pytest.raises(ArgumentError):
        LossWeights(-0.01, 0.31, 0.35, 0.35)


def _const(v):
    return LossResult(v, np.zeros((2, 2)))


def test_distill_weighting():
    assert distill_loss(_const(1), _const(1), _const(1), _const(1), LossWeights()).value == pytest.approx(1.0)
    b = TABLE3_CONFIGS["b"]
    assert distill_loss(_const(3.0), _const(0.5), _const(7), _const(9), b).value == pytest.approx(0.03 + 0.495)
    assert distill_loss(_const(0.0), _const(0.4), _const(7), _const(9), b).value == 0.99 * 0.4


def test_table3_presets_sum_to_one():
    for w in TABLE3_CONFIGS.values():
        assert w.task + w.cosine + w.pcm + w.fr == pytest.approx(1.0, abs=1e-12)
    assert TABLE3_CONFIGS["e"] == LossWeights(0.01, 0.29, 0.35, 0.35)


# -------------------------------------------------------------- gradients


def _fd_check(fn, X):
    analytic = fn(X).grad_features
    numeric = numeric_grad(lambda x: fn(x).value, X)
    return max_relative_error(analytic, numeric)


def test_gradients_each_loss():
    rng = np.random.default_rng(12)
    cfg = TaskLossConfig(tau=0.5)
    F, labels, mods = balanced_batch(rng, n_ids=2, per_mod=1, d=16)
    T = rng.normal(size=F.shape)
    basis = top_k_basis(thin_svd(T), 4)
    logits = rng.normal(size=(8, 4))
    assert max_relative_error(id_loss(logits, labels).grad_features, numeric_grad(lambda z: id_loss(z, labels).value, logits)) < 1e-4
    assert _fd_check(lambda x: triplet_loss(x, labels), F) < 1e-4
    assert _fd_check(lambda x: sdm_total(x, labels, mods, cfg), F) < 1e-4
    assert _fd_check(lambda x: cosine_loss(T, x), F) < 1e-4
    assert _fd_check(lambda x: pcm_loss(T, x, basis), F) < 1e-4
    assert _fd_check(lambda x: fr_loss(T, x), F) < 1e-4


def test_sdm_pair_gradient_both_sides():
    rng = np.random.default_rng(13)
    cfg = TaskLossConfig(tau=0.3)
    Fm, Fn = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    lm, ln = np.array([0, 1, 2, 3]), np.array([1, 0, 3, 2])
    res = sdm_pair_loss(Fm, Fn, lm, ln, cfg)
    assert max_relative_error(res.grad_features, numeric_grad(lambda x: sdm_pair_loss(x, Fn, lm, ln, cfg).value, Fm)) < 1e-4
    assert max_relative_error(res.grad_aux, numeric_grad(lambda x: sdm_pair_loss(Fm, x, lm, ln, cfg).value, Fn)) < 1e-4


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_fr_and_cosine_scale_invariance(seed):
    rng = np.random.default_rng(seed)
    Fc, Fe = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    s = float(rng.uniform(0.1, 10))
    assert cosine_loss(Fc, s * Fe).value == pytest.approx(cosine_loss(Fc, Fe).value, abs=1e-12)
    assert fr_loss(Fc, s * Fe).value == pytest.approx(fr_loss(Fc, Fe).value, abs=1e-12)
