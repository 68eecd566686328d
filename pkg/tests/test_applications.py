import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitdecomp.align import Aligner, orthogonal_init
from vitdecomp.applications import (ApplicationError, LinearHead, ZeroShotHead, ablated_contributions,
                                    ablation_curve, component_means, default_k, group_accuracy, mean_ablate,
                                    mitigate_spurious, positive_mass_fraction, retrieve_image, retrieve_text,
                                    token_heatmap)
from vitdecomp.attribution import ScoreMatrix
from vitdecomp.decompose import COMPONENT_TOKEN, decompose_images, reduce_decomposition
from vitdecomp.models import ModelConfig, build_model
from vitdecomp.models.train import init_heads


def images(n, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, 32, 32, 3)).astype(np.float32)


@pytest.fixture(scope="module")
def world():
    m = build_model(ModelConfig(depth=2, heads=2, dim=16, seed=1))
    x = images(40, 2)
    dec = decompose_images(m, x)
    dt = decompose_images(m, x[:6], COMPONENT_TOKEN)
    names = [str(k) for k in dec.keys]
    al = Aligner(orthogonal_init(len(names), 12, 16, np.random.default_rng(0)).astype(np.float32), names, 0.1)
    return m, dec, dt, al


@pytest.mark.parametrize("variant", ["vanilla-cls", "vanilla-meanpool", "windowed", "gridblock"])
def test_heatmap_identity_and_sign_flip(variant):
    m = build_model(ModelConfig(variant=variant, depth=2, heads=2, dim=16, seed=2))
    x = images(3, 5)
    dt = decompose_images(m, x, COMPONENT_TOKEN)
    dc = decompose_images(m, x)
    names = [str(c) for c in dt.components]
    al = Aligner(orthogonal_init(len(names), 10, dt.d, np.random.default_rng(1)).astype(np.float32), names, 0.1)
    u = np.random.default_rng(3).normal(size=10)
    hm = token_heatmap(dt, al, u)
    direct = np.einsum("nie,e->n", al.transform(dc.vectors), u)
    np.testing.assert_allclose(hm.token_sum(), direct, atol=1e-5 * max(1, np.abs(direct).max()))
    np.testing.assert_allclose(hm.totals, direct, atol=1e-5 * max(1, np.abs(direct).max()))
    flip = token_heatmap(dt, al, -u)
    np.testing.assert_array_equal(flip.grid, -hm.grid)
    np.testing.assert_array_equal(flip.cls, -hm.cls)
    assert hm.grid.shape == (3, 4, 4)
    assert np.all(hm.bounds >= 0)


def test_heatmap_component_subset(world):
    _, _, dt, al = world
    u = np.ones(12)
    sub = ["L00.h00", "L01.mlp"]
    hm = token_heatmap(dt, al, u, sub)
    comp = reduce_decomposition(dt, "tokens")
    idx = [[str(k) for k in comp.keys].index(c) for c in sub]
    direct = np.einsum("nie,e->n", al.transform(comp.vectors)[:, idx], u)
    np.testing.assert_allclose(hm.token_sum(), direct, atol=1e-5)
    with pytest.raises(ApplicationError):
        token_heatmap(dt, al, u, ["L09.h00"])


def test_heatmap_needs_tokens(world):
    _, dec, _, al = world
    with pytest.raises(ApplicationError):
        token_heatmap(dec, al, np.ones(12))


def test_positive_mass_fraction():
    g = np.array([[1.0, -1.0], [3.0, 0.0]])
    region = np.array([[True, False], [False, False]])
    assert positive_mass_fraction(g, region) == pytest.approx(0.25)
    assert positive_mass_fraction(-np.abs(g), region) == 0.0


def test_mean_ablate_empty_and_all(world):
    m, dec, _, _ = world
    np.testing.assert_array_equal(mean_ablate(dec, []), dec.z.astype(np.float64))
    z = mean_ablate(dec, [str(k) for k in dec.keys])
    np.testing.assert_allclose(z, np.broadcast_to(component_means(dec).sum(0), z.shape), atol=1e-6)
    with pytest.raises(ApplicationError):
        mean_ablate(dec, ["L07.mlp"])


@settings(max_examples=25, deadline=None)
@given(st.sets(st.integers(0, 6)), st.sets(st.integers(0, 6)))
def test_ablation_linearity(a, b):
    m = build_model(ModelConfig(depth=2, heads=2, dim=16, seed=1))
    dec = decompose_images(m, images(8, 2))
    b = b - a
    union = mean_ablate(dec, sorted(a | b))
    stepwise = mean_ablate(dec, sorted(a))
    stepwise = stepwise - mean_ablate(dec, []) + mean_ablate(dec, sorted(b))
    np.testing.assert_allclose(union, stepwise, atol=1e-5)
    v = ablated_contributions(dec, sorted(a | b))
    np.testing.assert_allclose(v.sum(1), union, atol=1e-5)


def test_dead_component_ablation(world):
    _, dec, _, _ = world
    dead = dec.vectors.copy()
    dead[:, 1] = dead[:, 1].mean(0)
    from dataclasses import replace

    d2 = replace(dec, vectors=dead, z=dead.sum(1))
    head = init_heads({"y": 3}, 16, 0)
    labels = np.arange(dec.n_images) % 3
    before = LinearHead.from_heads(head).predict(d2, d2.vectors.astype(np.float64))
    after = LinearHead.from_heads(head).predict(d2, ablated_contributions(d2, [1]))
    assert (before == after).mean() >= 0.995
    assert group_accuracy(before, labels, labels % 2).worst <= group_accuracy(before, labels, labels % 2).average


def test_ablation_curve_endpoints(world):
    _, dec, _, _ = world
    head = init_heads({"y": 4}, 16, 3)
    labels = np.random.default_rng(0).integers(0, 4, dec.n_images)
    curve = ablation_curve(dec, head, labels)
    pred = LinearHead.from_heads(head).predict_z(dec.z)
    assert curve.accuracy[0] == float((pred == labels).mean())
    assert curve.steps == [0, 1, 2, 3]
    assert curve.ablated[0] == []
    assert len(curve.ablated[-1]) == len(dec.keys)
    assert curve.accuracy[-1] in {float((labels == c).mean()) for c in range(4)}


def test_retrieve_text_sorted_unique(world):
    _, dec, _, al = world
    aligned = al.transform(dec.vectors)
    u = np.random.default_rng(1).normal(size=12)
    res = retrieve_text(aligned, u, [0, 2, 3], top_images=None)
    assert np.all(np.diff(res.scores) <= 0)
    assert len(set(res.ids.tolist())) == len(res.ids) == dec.n_images
    with pytest.raises(ApplicationError):
        retrieve_text(aligned, np.zeros(12), [0])


def test_retrieve_text_orthogonal_query_uninformative():
    aligned = np.zeros((5, 2, 3))
    aligned[..., 0] = np.random.default_rng(0).normal(size=(5, 2))
    res = retrieve_text(aligned, np.array([0.0, 1.0, 0.0]), [0, 1])
    assert not res.informative


def test_retrieve_text_zero_norm_excluded():
    aligned = np.random.default_rng(0).normal(size=(4, 2, 3))
    aligned[2] = 0
    res = retrieve_text(aligned, np.ones(3), [0, 1])
    assert 2 not in res.ids and res.excluded == [2]


def test_retrieve_image_all_components_is_nearest_neighbour(world):
    _, dec, _, _ = world
    res = retrieve_image(dec.vectors, list(range(len(dec.keys))), 0, top_images=None)
    z = dec.z.astype(np.float64)
    cos = z @ z[0] / np.linalg.norm(z, axis=1) / np.linalg.norm(z[0])
    expect = [i for i in np.argsort(-cos, kind="stable") if i != 0]
    assert res.ids.tolist() == expect
    with pytest.raises(ApplicationError):
        retrieve_image(dec.vectors, [], 0)
    with pytest.raises(ApplicationError):
        retrieve_image(dec.vectors, [0], 99)


def test_mitigation_k0_is_identity(world):
    _, dec, _, al = world
    names = [str(k) for k in dec.keys]
    S = ScoreMatrix(np.random.default_rng(0).uniform(-1, 1, (len(names), 2)), names, ["shape", "background"],
                    np.zeros((len(names), 2), bool))
    labels = np.arange(dec.n_images) % 4
    group = (np.arange(dec.n_images) // 4) % 2
    head = init_heads({"y": 4}, 16, 0)
    rep = mitigate_spurious(dec, S, head, labels, group, "background", k=0)
    assert rep.before.to_dict() == rep.after.to_dict()
    assert rep.ablated == []
    protos = np.random.default_rng(1).normal(size=(4, 12))
    rep = mitigate_spurious(dec, S, ZeroShotHead(al, protos), labels, group, "background", k=0)
    assert rep.before.groups == rep.after.groups
    rep = mitigate_spurious(dec, S, head, labels, group, "background")
    assert rep.k == default_k(len(names)) and len(rep.ablated) == rep.k
    with pytest.raises(ApplicationError):
        mitigate_spurious(dec, S, head, labels, group[:3], "background")


def test_default_k():
    assert default_k(30) == 10
    assert default_k(66) == 10
    assert default_k(21) == 3
    assert default_k(7) == 2


def test_group_accuracy_bounds():
    rng = np.random.default_rng(0)
    labels, group, pred = rng.integers(0, 3, 50), rng.integers(0, 2, 50), rng.integers(0, 3, 50)
    g = group_accuracy(pred, labels, group)
    assert g.worst <= g.average <= g.best
    assert len(g.groups) == 6
