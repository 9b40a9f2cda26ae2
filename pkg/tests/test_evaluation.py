import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ranking_metrics
from svdkd.data_model import EmbeddingSet, Modality
from svdkd.errors import ArgumentError, EvalError
from svdkd.evaluation import (
    CSV_HEADER,
    EvalMode,
    EvalTask,
    evaluate_query,
    evaluate_retrieval,
    metrics_csv,
)

SK_RGB = EvalTask(Modality.SKETCH, Modality.RGB)


def gallery_from_sims(sims, ids):
    """Gallery rows on the unit circle whose cosine with the query [1, 0] equals ``sims``."""
    sims = np.asarray(sims, dtype=float)
    rows = np.stack([sims, np.sqrt(1 - sims**2)], axis=1)
    return EmbeddingSet.from_arrays(rows, ids, ["rgb"] * len(ids))


def test_two_positives_ranked_1_and_3_of_5():
    g = gallery_from_sims([0.9, 0.8, 0.7, 0.6, 0.5], [7, 1, 7, 2, 3])
    ap, inp, first = evaluate_query(np.array([1.0, 0.0]), 7, g)
    assert ap == pytest.approx(5 / 6, abs=1e-15)
    assert inp == pytest.approx(2 / 3, abs=1e-15)
    assert first == 1


def test_all_positives():
    g = gallery_from_sims([0.9, 0.5, 0.1], [4, 4, 4])
    ap, inp, first = evaluate_query(np.array([1.0, 0.0]), 4, g)
    assert (ap, inp, first) == (1.0, 1.0, 1)


def test_single_positive_last_of_10():
    sims = np.linspace(0.9, 0.0, 10)
    ids = [1] * 9 + [5]
    ap, inp, first = evaluate_query(np.array([1.0, 0.0]), 5, gallery_from_sims(sims, ids))
    assert ap == pytest.approx(0.1, abs=1e-15)
    assert inp == pytest.approx(0.1, abs=1e-15)
    assert first == 10


def test_query_without_match_is_argument_error():
    with pytest.raises(ArgumentError):
        evaluate_query(np.array([1.0, 0.0]), 9, gallery_from_sims([0.5], [1]))


def test_ties_broken_by_sample_id():
    # identical gallery rows: the positive has the larger sample_id, so it ranks second
    rows = np.array([[1.0, 0.0], [1.0, 0.0]])
    g = EmbeddingSet.from_arrays(rows, [2, 1], ["rgb", "rgb"], sample_ids=[10, 11])
    _, _, first = evaluate_query(np.array([1.0, 0.0]), 1, g)
    assert first == 2


def random_instance(rng, n_q=10, n_g=30, n_ids=5, d=4):
    g_ids = np.concatenate([np.arange(n_ids), rng.integers(0, n_ids, n_g - n_ids)])
    q_ids = rng.integers(0, n_ids, n_q)
    G = rng.normal(size=(n_g, d))
    Q = rng.normal(size=(n_q, d))
    if rng.random() < 0.5:
        # force exact similarity ties so the sample_id rule matters
        G[rng.integers(0, n_g, 5)] = G[0]
    query = EmbeddingSet.from_arrays(Q, q_ids, ["sketch"] * n_q, sample_ids=np.arange(1000, 1000 + n_q))
    gallery = EmbeddingSet.from_arrays(G, g_ids, ["rgb"] * n_g, sample_ids=rng.permutation(n_g))
    return query, gallery


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        query, gallery = random_instance(rng)
        m = evaluate_retrieval(query, gallery, SK_RGB, "c2c")
        expected = ranking_metrics(query.features, query.identity_ids, gallery.features, gallery.identity_ids, gallery.sample_ids)
        got = (m.rank1, m.rank5, m.rank10, m.map, m.minp)
        assert np.max(np.abs(np.subtract(got, expected))) <= 1e-12


def test_self_retrieval_is_perfect():
    rng = np.random.default_rng(1)
    rows = rng.normal(size=(6, 5))
    ids = np.arange(6)
    q = EmbeddingSet.from_arrays(rows, ids, ["ir"] * 6, sample_ids=np.arange(6))
    g = EmbeddingSet.from_arrays(rows.copy(), ids, ["rgb"] * 6, sample_ids=np.arange(6, 12))
    m = evaluate_retrieval(q, g, EvalTask(Modality.IR, Modality.RGB), EvalMode.C2C)
    assert m.rank1 == m.map == m.minp == 1.0


def test_e2c_rejects_cloud_query():
    q, g = random_instance(np.random.default_rng(2))
    with pytest.raises(ArgumentError, match="E2C contract"):
        evaluate_retrieval(q.with_features(q.features, "cloud"), g.with_features(g.features, "cloud"), SK_RGB, "e2c")


def test_e2c_accepts_edge_query_and_cloud_gallery():
    q, g = random_instance(np.random.default_rng(3))
    m = evaluate_retrieval(q.with_features(q.features, "edge"), g, SK_RGB, "e2c")
    assert m.n_queries == 10


def test_no_eligible_query():
    q, g = random_instance(np.random.default_rng(4))
    with pytest.raises(EvalError):
        evaluate_retrieval(q, g, EvalTask(Modality.TEXT, Modality.RGB), "c2c")


def test_task_and_mode_parsing():
    assert EvalTask.parse("sketch:rgb") == SK_RGB
    with pytest.raises(ArgumentError):
        EvalTask.parse("rgb:rgb")
    with pytest.raises(ArgumentError):
        EvalMode.parse("x2y")
    assert len(EvalMode) == 3


def test_csv_columns():
    q, g = random_instance(np.random.default_rng(5))
    text = metrics_csv([(SK_RGB, EvalMode.C2C, evaluate_retrieval(q, g, SK_RGB, "c2c"))])
    header, row = text.strip().split("\n")
    assert tuple(header.split(",")) == CSV_HEADER
    assert row.startswith("sketch:rgb,c2c,")


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 100))
def test_invariances(seed, scale):
    rng = np.random.default_rng(seed)
    q, g = random_instance(rng)
    base = evaluate_retrieval(q, g, SK_RGB, "c2c")
    assert base.rank1 <= base.rank5 <= base.rank10
    assert 0 <= base.minp <= 1 and 0 <= base.map <= 1
    perm = rng.permutation(g.n)
    assert evaluate_retrieval(q, g.subset(perm), SK_RGB, "c2c") == base
    scaled = evaluate_retrieval(q.with_features(q.features * scale, "cloud"), g, SK_RGB, "c2c")
    np.testing.assert_allclose(
        [scaled.rank1, scaled.map, scaled.minp], [base.rank1, base.map, base.minp], atol=1e-12
    )
