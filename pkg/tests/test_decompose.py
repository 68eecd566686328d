import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import single_block
from vitdecomp import ops
from vitdecomp.decompose import (COMPONENT, COMPONENT_TOKEN, ComponentId, DecompositionError, ReconstructionError,
                                 UnclassifiableNodeError, decompose_images, reduce_decomposition, rep_decompose)
from vitdecomp.graph import Tape, detach, leaf
from vitdecomp.models import VARIANTS, ModelConfig, build_model

SMALL = dict(depth=2, heads=2, dim=16)


def images(n, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, 32, 32, 3)).astype(np.float32)


@pytest.mark.parametrize("gran", [COMPONENT, COMPONENT_TOKEN])
@pytest.mark.parametrize("variant", VARIANTS)
def test_reconstruction(variant, gran):
    m = build_model(ModelConfig(variant=variant, **SMALL))
    dec = decompose_images(m, images(6), gran)
    assert dec.residual().max() <= 1e-5
    np.testing.assert_allclose(dec.z, m.encode(images(6)), atol=1e-6)


def test_component_table_vanilla():
    m = build_model(ModelConfig(**SMALL))
    dec = decompose_images(m, images(2))
    assert [str(k) for k in dec.keys] == ["init", "L00.h00", "L00.h01", "L00.mlp", "L01.h00", "L01.h01", "L01.mlp"]


def test_component_table_gridblock_has_opaque_conv():
    m = build_model(ModelConfig(variant="gridblock", depth=1, heads=2, dim=16))
    names = [str(k) for k in decompose_images(m, images(2)).keys]
    assert "L02.conv" in names and "L01.h00" in names and "L00.mlp" in names


@pytest.mark.parametrize("gran", [COMPONENT, COMPONENT_TOKEN])
def test_single_block_oracle(gran):
    m = build_model(ModelConfig(depth=1, heads=4, dim=16, seed=3))
    x = images(5, 1)
    z, comp, tok = single_block(m.params, x, 4, 4)
    dec = decompose_images(m, x, gran)
    ref = comp if gran == COMPONENT else tok
    assert [str(k) for k in dec.keys] == list(ref)
    np.testing.assert_allclose(dec.vectors, np.stack(list(ref.values()), 1), atol=1e-5)
    np.testing.assert_allclose(dec.z, z, atol=1e-5)


@pytest.mark.parametrize("variant", VARIANTS)
def test_tokens_sum_to_components(variant):
    m = build_model(ModelConfig(variant=variant, **SMALL))
    x = images(3)
    dc = decompose_images(m, x, COMPONENT)
    dt = decompose_images(m, x, COMPONENT_TOKEN)
    red = reduce_decomposition(dt, "tokens")
    assert [str(k) for k in red.keys] == [str(k) for k in dc.keys]
    np.testing.assert_allclose(red.vectors, dc.vectors, atol=1e-6)


def test_reduce_levels():
    m = build_model(ModelConfig(**SMALL))
    dec = decompose_images(m, images(3))
    heads = reduce_decomposition(dec, "heads")
    assert [str(k) for k in heads.keys] == ["init", "L00.attn", "L00.mlp", "L01.attn", "L01.mlp"]
    layers = reduce_decomposition(dec, "layers")
    assert [str(k) for k in layers.keys] == ["init", "L00.layer", "L01.layer"]
    total = reduce_decomposition(dec, "all")
    np.testing.assert_allclose(total.vectors[:, 0], dec.z, atol=1e-5)
    with pytest.raises(DecompositionError):
        reduce_decomposition(dec, "tokens")


@pytest.mark.parametrize("k", [0, 1, 2])
def test_partial_depth(k):
    m = build_model(ModelConfig(**SMALL))
    dec = decompose_images(m, images(3), layers_to_decompose=k)
    layers = {c.layer for c in dec.components if c.kind != "init"}
    assert layers == set(range(k))
    assert dec.residual().max() <= 1e-5
    if k == 0:
        assert [str(c) for c in dec.components] == ["init"]


def test_partial_depth_out_of_range():
    m = build_model(ModelConfig(**SMALL))
    with pytest.raises(DecompositionError):
        decompose_images(m, images(1), layers_to_decompose=3)


def test_direct_contribution_of_mlp():
    m = build_model(ModelConfig(depth=1, heads=2, dim=8, patch_grid=2, seed=5))
    x = images(2)
    z, tape = m.forward(x)
    dec = rep_decompose(tape)
    mlp = dec.vectors[:, [str(k) for k in dec.keys].index("L00.mlp")]
    assert np.linalg.norm(mlp) > 0
    fc2 = [n for n in tape.nodes if n.op == "linear" and n.scope.get("component") == "mlp"][-1]
    t2 = tape.with_value(fc2.id, np.zeros_like(fc2.value))
    vals = t2.replay({fc2.id: np.zeros_like(fc2.value)})
    ln = [n for n in tape.nodes if n.op == "layernorm"][-1]
    # replay keeps the recorded LayerNorm statistics, so the final LayerNorm is affine here
    n_rows = len(dec.keys)
    g, b, mu, sd = ln.meta["gamma"], ln.meta["beta"], ln.meta["mu"][:, 0], ln.meta["sigma"][:, 0]
    expected = z.data - (mlp - (b / n_rows - g * mu / sd / n_rows))
    np.testing.assert_allclose(vals[z.node], expected, atol=1e-5)


def test_reconstruction_failure_reports_nodes():
    m = build_model(ModelConfig(**SMALL))
    _, tape = m.forward(images(2))
    with pytest.raises(ReconstructionError) as e:
        rep_decompose(tape, tol=0.0)
    assert e.value.residuals


def test_custom_op_is_unclassifiable():
    with Tape() as tape:
        x = leaf(np.ones((3, 4)))
        y = ops.custom(lambda a: a * 2, ops.linear(x, np.eye(4)))
        z = ops.linear(y, np.eye(4))
        tape.mark_output(z)
    with pytest.raises(UnclassifiableNodeError):
        rep_decompose(tape)


def test_detach_is_terminal_and_tape_without_marks():
    with Tape() as tape:
        x = leaf(np.arange(8.0).reshape(2, 4))
        with tape.scope(component="mlp", layer=0):
            h = ops.gelu(detach(x))
        y = ops.add(x, h)
        tape.mark_output(ops.mean(y))
    dec = rep_decompose(tape)
    names = [str(k) for k in dec.keys]
    assert "L00.mlp" in names
    assert dec.residual().max() <= 1e-6


def test_zero_leaf_gives_empty_stack():
    with Tape() as tape:
        x = leaf(np.zeros((2, 3)))
        tape.mark_output(ops.mean(x))
    dec = rep_decompose(tape)
    np.testing.assert_array_equal(dec.vectors, 0)


def test_no_output_marked():
    tape = Tape()
    with tape:
        leaf(np.ones(3))
    with pytest.raises(DecompositionError):
        rep_decompose(tape)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 20), st.integers(-1, 5), st.sampled_from(["init", "head", "mlp", "opaque"]))
def test_component_id_roundtrip(layer, head, kind):
    c = {"init": ComponentId.init(), "head": ComponentId.head_of(layer, max(head, 0)),
         "mlp": ComponentId.mlp(layer), "opaque": ComponentId.opaque(layer)}[kind]
    assert ComponentId.parse(str(c)) == c


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from(VARIANTS))
def test_reconstruction_property(seed, variant):
    m = build_model(ModelConfig(variant=variant, depth=2, heads=2, dim=16, seed=seed % 1000))
    x = np.random.default_rng(seed).uniform(0, 1, (2, 32, 32, 3)).astype(np.float32)
    assert decompose_images(m, x, COMPONENT_TOKEN).residual().max() <= 1e-5
