import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import comp_attribute_loops, gram_schmidt, spearman_by_hand
from vitdecomp.attribution import (AttributionError, Feature, ScoreMatrix, comp_attribute, component_ordering,
                                   cosine_proxy, feature_ordering, ordering_to_ranks, orthogonalize,
                                   pearson_columns, planted_synthetic, score_gaps, score_matrix, select_by_gap,
                                   spearman)


def random_case(seed, n=30, d=6, k=3):
    rng = np.random.default_rng(seed)
    C = rng.normal(size=(n, d))
    Z = C + rng.normal(size=(n, d))
    return C, Z, rng.normal(size=(k, d))


@pytest.mark.parametrize("seed", range(5))
def test_matches_brute_force(seed):
    C, Z, B = random_case(seed)
    assert comp_attribute(C, Z, B) == pytest.approx(comp_attribute_loops(C.tolist(), Z.tolist(), B.tolist()),
                                                    abs=1e-9)


def test_orthogonalize_examples():
    B = np.array([[3.0, 0, 0], [1, 1, 0], [2, 2, 0]])
    Q = orthogonalize(B)
    assert Q.shape == (2, 3)
    np.testing.assert_allclose(Q, [[1, 0, 0], [0, 1, 0]], atol=1e-12)
    np.testing.assert_allclose(Q, gram_schmidt(B.tolist()), atol=1e-12)
    with pytest.raises(AttributionError):
        orthogonalize(np.zeros((2, 3)))


def test_degenerate_columns_flagged():
    C = np.zeros((10, 3))
    Z = np.random.default_rng(0).normal(size=(10, 3))
    s, all_deg, count = comp_attribute(C, Z, np.eye(3), return_flags=True)
    assert s == 0.0 and all_deg and count == 3
    r, deg = pearson_columns(np.ones((5, 1)), np.arange(5.0)[:, None])
    assert r[0] == 0 and deg[0]


def test_perfect_and_anti_correlation():
    rng = np.random.default_rng(1)
    Z = rng.normal(size=(20, 4))
    B = rng.normal(size=(2, 4))
    assert comp_attribute(2 * Z + 1, Z, B) == pytest.approx(1.0)
    assert comp_attribute(-Z, Z, B) == pytest.approx(-1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.01, 100.0), st.floats(-5, 5))
def test_invariances(seed, a, shift):
    C, Z, B = random_case(seed)
    s = comp_attribute(C, Z, B)
    assert comp_attribute(a * C + shift, Z, B) == pytest.approx(s, abs=1e-9)
    perm = np.random.default_rng(seed).permutation(len(C))
    assert comp_attribute(C[perm], Z[perm], B) == pytest.approx(s, abs=1e-9)
    assert comp_attribute(C, Z, 3.0 * B) == pytest.approx(s, abs=1e-9)
    assert -1 - 1e-12 <= s <= 1 + 1e-12


def test_shape_errors():
    with pytest.raises(AttributionError):
        comp_attribute(np.zeros((5, 3)), np.zeros((5, 4)), np.eye(3))
    with pytest.raises(AttributionError):
        comp_attribute(np.zeros((2, 3)), np.zeros((2, 3)), np.eye(3))
    with pytest.raises(AttributionError):
        Feature("x", ("a",), np.zeros((1, 3)))
    with pytest.raises(AttributionError):
        Feature("x", ("a", "b"), np.ones((1, 3)))


def small_matrix():
    S = np.array([[0.9, 0.1, 0.0],
                  [0.5, 0.6, 0.2],
                  [0.2, 0.8, 0.1],
                  [0.4, 0.0, 0.3]])
    return ScoreMatrix(S, ["a", "b", "c", "d"], ["p", "q", "r"], np.zeros_like(S, bool))


def test_orderings_and_gaps():
    S = small_matrix()
    assert component_ordering(S, "p") == [0, 1, 3, 2]
    assert feature_ordering(S, "b") == [1, 0, 2]
    np.testing.assert_allclose(score_gaps(S, "p"), [0.8, -0.1, -0.6, 0.1])
    np.testing.assert_allclose(score_gaps(S, "p", ["q"]), [0.8, -0.1, -0.6, 0.4])
    assert select_by_gap(S, "p", 2) == [0, 3]
    assert select_by_gap(S, "p", 0) == []
    with pytest.raises(AttributionError):
        select_by_gap(S, "p", 5)
    with pytest.raises(AttributionError):
        component_ordering(S, "missing")


def test_ties_keep_index_order():
    S = ScoreMatrix(np.zeros((3, 2)), ["a", "b", "c"], ["p", "q"], np.zeros((3, 2), bool))
    assert component_ordering(S, "p") == [0, 1, 2]


def test_json_roundtrip():
    S = small_matrix()
    S2 = ScoreMatrix.from_json(S.to_json())
    np.testing.assert_allclose(S2.scores, S.scores.astype(np.float32))
    assert S2.components == S.components and S2.features == S.features
    assert json.loads(S.to_json())["format"] == "vitdecomp-scores/1"


def test_spearman_examples():
    assert spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=12), rng.normal(size=12)
    assert spearman(a, b) == pytest.approx(spearman_by_hand(a, b))
    np.testing.assert_array_equal(ordering_to_ranks([2, 0, 1]), [1, 2, 0])
    with pytest.raises(AttributionError):
        spearman([1], [1])


def test_score_matrix_sums():
    aligned, feats, _, _ = planted_synthetic(n=200, seed=0)
    S = score_matrix(aligned, feats)
    assert S.scores.shape == (10, 3)
    assert np.all(np.abs(S.scores) <= 1)
    assert S.provenance["n_images"] == 200


@pytest.mark.parametrize("seed", range(3))
def test_planted_component_ranks_first(seed):
    aligned, feats, _, planted = planted_synthetic(seed=seed)
    S = score_matrix(aligned, feats)
    for p, i in enumerate(planted):
        assert component_ordering(S, p)[0] == i


def test_cosine_proxy_agrees():
    aligned, feats, _, _ = planted_synthetic(seed=4)
    S = score_matrix(aligned, feats)
    for p, f in enumerate(feats):
        proxy = cosine_proxy(aligned, aligned.sum(1), f.B)
        assert spearman(S.scores[:, p], proxy) >= 0.8
