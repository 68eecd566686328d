import numpy as np
import pytest
from scipy.stats import chi2_contingency

from vitdecomp.graph import KINDS, LINEAR_REDUCTION, NONLINEAR
from vitdecomp.models import VARIANTS, ConfigError, ModelConfig, build_model
from vitdecomp.models.data import DatasetError, DataRecipe, Split, SyntheticDataset, gen_synthetic
from vitdecomp.models.train import Hyper, TrainingError, backward, forward, train_toy

SMALL = dict(depth=2, heads=2, dim=16)


def images(n, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, 32, 32, 3)).astype(np.float32)


def test_vanilla_structure():
    m = build_model(ModelConfig())
    z, tape = m.forward(images(2))
    assert z.shape == (2, 32)
    comps = [n.scope.get("component") for n in tape.nodes if n.op == "softmax"]
    assert comps == ["attn"] * 4
    assert sum(1 for n in tape.nodes if n.op == "gelu") == 4


@pytest.mark.parametrize("variant", VARIANTS)
def test_no_unknown_nodes(variant):
    m = build_model(ModelConfig(variant=variant, **SMALL))
    _, tape = m.forward(images(2))
    assert all(n.kind in KINDS for n in tape.nodes)


def test_windowed_has_patch_merge():
    m = build_model(ModelConfig(variant="windowed", **SMALL))
    _, tape = m.forward(images(1))
    merges = [n for n in tape.nodes if n.op == "patch_merge"]
    assert merges and all(n.kind == LINEAR_REDUCTION for n in merges)


def test_gridblock_alternates_and_has_opaque_conv():
    m = build_model(ModelConfig(variant="gridblock", **SMALL))
    assert [s.get("attn") for s in m.layers[:3]] == ["conv", "block", "grid"]
    _, tape = m.forward(images(1))
    conv = [n for n in tape.nodes if n.op == "opaque"]
    assert len(conv) == 2 and all(n.kind == NONLINEAR for n in conv)


def test_meanpool_is_token_mean():
    m = build_model(ModelConfig(variant="vanilla-meanpool", **SMALL))
    z, tape = m.forward(images(3))
    ln = [n for n in tape.nodes if n.op == "layernorm"][-1]
    np.testing.assert_allclose(z.data, ln.value.mean(-2), atol=1e-6)
    assert tape[z.node].kind == LINEAR_REDUCTION


def test_windowed_full_window_matches_vanilla():
    cfg_w = ModelConfig(variant="windowed", depth=2, heads=2, dim=16, stages=1, window=4, shift=False, seed=4)
    cfg_v = ModelConfig(variant="vanilla-meanpool", depth=2, heads=2, dim=16, seed=4)
    w = build_model(cfg_w)
    v = build_model(cfg_v)
    assert set(w.params) == set(v.params)
    v.params = dict(w.params)
    x = images(3)
    np.testing.assert_allclose(w.forward(x)[0].data, v.forward(x)[0].data, atol=1e-5)


def test_config_errors():
    with pytest.raises(ConfigError):
        ModelConfig(variant="resnet").validate()
    with pytest.raises(ConfigError):
        ModelConfig(dim=30, heads=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(variant="windowed", patch_grid=4, window=3).validate()


def test_config_roundtrip_and_id():
    c = ModelConfig(variant="gridblock", seed=7)
    assert ModelConfig.from_dict(c.to_dict()) == c
    assert c.model_id != ModelConfig(variant="gridblock", seed=8).model_id


@pytest.mark.parametrize("variant", ["vanilla-cls", "vanilla-meanpool"])
def test_trainer_forward_matches_tape(variant):
    m = build_model(ModelConfig(variant=variant, **SMALL))
    x = images(4)
    np.testing.assert_allclose(forward(m.params, m.cfg, x), m.forward(x)[0].data, atol=2e-5)


@pytest.mark.parametrize("variant", ["vanilla-cls", "vanilla-meanpool"])
def test_backward_matches_finite_differences(variant):
    m = build_model(ModelConfig(variant=variant, depth=1, heads=2, dim=8, patch_grid=2))
    P = {k: v.astype(np.float64) for k, v in m.params.items()}
    x = images(2)
    r = np.random.default_rng(1).normal(size=(2, 8))
    _, cache = forward(P, m.cfg, x, cache=True)
    G = backward(P, m.cfg, cache, r)
    rng = np.random.default_rng(2)
    for name in ("embed.W", "pos", "blocks.0.q.W", "blocks.0.v.b", "blocks.0.ln1.g", "blocks.0.fc1.W", "norm.b"):
        for _ in range(3):
            i = tuple(rng.integers(0, s) for s in P[name].shape)
            old = P[name][i]
            P[name][i] = old + 1e-6
            up = (forward(P, m.cfg, x) * r).sum()
            P[name][i] = old - 1e-6
            dn = (forward(P, m.cfg, x) * r).sum()
            P[name][i] = old
            fd = (up - dn) / 2e-6
            assert abs(fd - G[name][i]) <= 1e-5 * max(1.0, abs(fd)), name


def test_training_refuses_unsupported_variant():
    m = build_model(ModelConfig(variant="windowed", **SMALL))
    with pytest.raises(TrainingError):
        train_toy(m, images(4), {"y": np.zeros(4, dtype=int)}, Hyper(epochs=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts():
    m = build_model(ModelConfig(**SMALL))
    with pytest.raises(TrainingError):
        train_toy(m, images(8), {"y": np.arange(8) % 2}, Hyper(epochs=3, lr=1e12))


def test_untrained_accuracy_near_chance():
    ds = gen_synthetic(DataRecipe(splits=(Split("val", 400, 0.5),)), 3)
    from vitdecomp.models.train import init_heads, predict

    accs = []
    for s in range(5):
        m = build_model(ModelConfig(seed=s))
        h = init_heads({"y": 4}, 32, s)
        accs.append((predict(h, forward(m.params, m.cfg, ds.images), "y") == ds.labels).mean())
    assert abs(np.mean(accs) - 0.25) <= 0.05


def test_skewed_split_counts():
    ds = gen_synthetic(DataRecipe(splits=(Split("train", 800, 0.95),)), 0)
    for c in range(4):
        m = ds.labels == c
        assert (ds.group[m] == c % 2).mean() >= 0.93


def test_balanced_split_independent():
    ds = gen_synthetic(DataRecipe(splits=(Split("train", 800, 0.5),)), 1)
    table = np.zeros((4, 2))
    np.add.at(table, (ds.labels, ds.group), 1)
    assert chi2_contingency(table)[1] > 0.01


def test_dataset_deterministic_and_roundtrip(tmp_path):
    recipe = DataRecipe(splits=(Split("a", 40, 0.7), Split("b", 20, 0.5)), layout="split")
    d1 = gen_synthetic(recipe, 5)
    d2 = gen_synthetic(recipe, 5)
    assert d1.images.tobytes() == d2.images.tobytes()
    assert np.array_equal(d1.labels, d2.labels) and np.array_equal(d1.group, d2.group)
    assert gen_synthetic(recipe, 6).images.tobytes() != d1.images.tobytes()
    d1.save(tmp_path / "ds")
    d3 = SyntheticDataset.load(tmp_path / "ds")
    assert d3.images.tobytes() == d1.images.tobytes()
    assert d3.recipe == d1.recipe
    np.testing.assert_array_equal(d3.split("b"), d1.split("b"))


def test_dataset_errors(tmp_path):
    with pytest.raises(DatasetError):
        gen_synthetic(DataRecipe(foregrounds=()), 0)
    with pytest.raises(DatasetError):
        gen_synthetic(DataRecipe(foregrounds=("hexagon",)), 0)
    with pytest.raises(DatasetError):
        SyntheticDataset.load(tmp_path)


@pytest.mark.slow
def test_trained_classifier_accuracy():
    ds = gen_synthetic(DataRecipe(), 0)
    tr, va = ds.split("train"), ds.split("val")
    m = build_model(ModelConfig(seed=0))
    res = train_toy(m, ds.images[tr], {"y": ds.labels[tr]}, Hyper(epochs=15),
                    val=(ds.images[va], {"y": ds.labels[va]}))
    assert res.val_accuracy["y"] >= 0.90


@pytest.mark.slow
def test_teacher_prototypes(teacher, teacher_data):
    va = teacher_data.split("val")
    z = teacher.encode(teacher_data.images[va]).astype(np.float64)
    for attr, labels in teacher_data.attributes.items():
        P = teacher.prototypes[attr]
        np.testing.assert_allclose(np.linalg.norm(P, axis=1), 1.0, atol=1e-5)
        for c in range(len(P)):
            mean = z[labels[va] == c].mean(0)
            assert P[c] @ mean / np.linalg.norm(mean) >= 0.9
