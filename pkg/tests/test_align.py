import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import align_loss_loops, penalty_loops
from vitdecomp.align import (AlignError, Aligner, AlignTrainConfig, align_loss, check_rank_ordering, cosine_distance,
                             hidden_orthogonal_task, orthogonal_init, orthogonality_report, pair_violates, penalty,
                             penalty_grad, random_orthogonal, single_map_baseline, train_compalign)


def instance(seed, n=16, N=3, d=8, d_ref=8):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(N, d_ref, d)), rng.normal(size=(n, N, d)), rng.normal(size=(n, d_ref))


def test_loss_matches_loops():
    maps, C, Z = instance(0, n=5)
    loss, _ = align_loss(maps, C, Z, 0.3)
    assert loss == pytest.approx(align_loss_loops(maps, C, Z, 0.3), rel=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed):
    maps, C, Z = instance(seed)
    lam = 0.2
    _, g, _ = align_loss(maps, C, Z, lam, with_grad=True)
    fd = np.zeros_like(maps)
    h = 1e-6
    for idx in np.ndindex(maps.shape):
        m = maps.copy()
        m[idx] += h
        up = align_loss(m, C, Z, lam)[0]
        m[idx] -= 2 * h
        fd[idx] = (up - align_loss(m, C, Z, lam)[0]) / (2 * h)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-6


def test_penalty_examples():
    d = 5
    assert penalty(np.stack([np.eye(d)])) == 0
    assert penalty(np.stack([2 * np.eye(d)])) == pytest.approx(3 * np.sqrt(d))
    assert penalty(np.stack([3 * np.eye(d)])) == pytest.approx(8 * np.sqrt(d))
    rep = orthogonality_report(np.stack([3 * np.eye(d)]))[0]
    assert rep["k"] == pytest.approx(9.0)
    assert rep["relative_k_deviation"] == pytest.approx(0.0, abs=1e-12)


def test_penalty_matches_loops():
    maps = np.random.default_rng(3).normal(size=(2, 6, 4))
    assert penalty(maps) == pytest.approx(penalty_loops(maps), rel=1e-10)


def test_penalty_gradient_at_identity_is_zero():
    np.testing.assert_array_equal(penalty_grad(np.stack([np.eye(4), 2 * np.eye(4)]))[0], 0.0)
    g = penalty_grad(np.stack([2 * np.eye(4)]))[0]
    np.testing.assert_allclose(g, 2 * 2 * 3 * np.eye(4) / (3 * 2), atol=1e-12)


def test_orthogonal_init_columns():
    q = orthogonal_init(2, 10, 6, np.random.default_rng(1))
    for f in q:
        np.testing.assert_allclose(f.T @ f, np.eye(6), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.1, 10.0))
def test_scaled_orthogonal_preserves_order_and_cosine(seed, k):
    rng = np.random.default_rng(seed)
    f = np.sqrt(k) * random_orthogonal(8, rng)
    assert check_rank_ordering(f, trials=500, seed=seed) == 0
    u, v = rng.normal(size=(2, 8))
    cos = u @ v / np.linalg.norm(u) / np.linalg.norm(v)
    fu, fv = f @ u, f @ v
    assert fu @ fv / np.linalg.norm(fu) / np.linalg.norm(fv) == pytest.approx(cos, abs=1e-9)


def test_non_orthogonal_counterexample():
    f = np.diag([10.0, 0.1])
    assert pair_violates(f, np.array([1.0, 0.0]), np.array([0.0, 1.1]))
    assert check_rank_ordering(f, trials=2000) >= 1


def test_training_reduces_loss_and_stays_orthogonal():
    C, Z, Ct, Zt, R = hidden_orthogonal_task(n=400, n_components=3, d=8, d_ref=8, n_test=100, seed=2)
    al = train_compalign(C, Z, AlignTrainConfig(epochs=40, lr=3e-3, seed=0))
    start = train_compalign(C, Z, AlignTrainConfig(epochs=0, seed=0))
    curve = al.log["loss_curve"]
    assert curve[-1] < curve[0]
    assert max(r["relative_k_deviation"] for r in orthogonality_report(al)) < 0.2
    assert cosine_distance(al, Ct, Zt) < 0.5 * cosine_distance(start, Ct, Zt)


def test_single_map_is_tied():
    C, Z, _, _, _ = hidden_orthogonal_task(n=200, n_components=3, d=8, d_ref=8, n_test=10, seed=0)
    al = single_map_baseline(C, Z, AlignTrainConfig(epochs=3, seed=0))
    assert al.tied
    np.testing.assert_array_equal(al.maps[0], al.maps[1])
    np.testing.assert_array_equal(al.maps[0], al.maps[2])


def test_training_deterministic():
    C, Z, _, _, _ = hidden_orthogonal_task(n=100, n_components=2, d=4, d_ref=4, n_test=10, seed=0)
    a = train_compalign(C, Z, AlignTrainConfig(epochs=3, seed=5))
    b = train_compalign(C, Z, AlignTrainConfig(epochs=3, seed=5))
    assert a.maps.tobytes() == b.maps.tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_checkpoint():
    C, Z, _, _, _ = hidden_orthogonal_task(n=64, n_components=2, d=4, d_ref=4, n_test=10, seed=0)
    C = C.copy()
    C[5, 0, 0] = np.inf
    with pytest.raises(AlignError) as e:
        train_compalign(C, Z, AlignTrainConfig(epochs=2, seed=0))
    assert isinstance(e.value.checkpoint, Aligner)
    assert np.all(np.isfinite(e.value.checkpoint.maps))


def test_config_validation():
    with pytest.raises(ValueError):
        AlignTrainConfig(lr=0).validate()
    with pytest.raises(ValueError):
        AlignTrainConfig(lam=-1).validate()
    assert AlignTrainConfig().resolved_lam(16) == pytest.approx(1 / 16)
    assert AlignTrainConfig(use_penalty=False).resolved_lam(16) == 0.0


def test_transform_shape_checks():
    al = Aligner(np.zeros((2, 3, 4), np.float32), ["a", "b"], 0.1)
    assert al.transform(np.ones((5, 2, 4))).shape == (5, 2, 3)
    with pytest.raises(Exception):
        al.transform(np.ones((5, 3, 4)))
