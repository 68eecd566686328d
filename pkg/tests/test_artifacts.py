import numpy as np
import pytest

from vitdecomp import artifacts as art
from vitdecomp.decompose import decompose_images
from vitdecomp.models import ModelConfig, build_model


def test_array_roundtrip(tmp_path):
    a = np.arange(12, dtype=np.float32).reshape(3, 4)
    art.write_artifact(tmp_path / "x", "thing", {"a": a, "s": np.float32(2.5)}, meta={"n": 3}, config={"seed": 1})
    header, arrays = art.read_artifact(tmp_path / "x", "thing")
    np.testing.assert_array_equal(arrays["a"], a)
    assert arrays["s"].shape == () and float(arrays["s"]) == 2.5
    assert header["meta"] == {"n": 3} and header["config_hash"] == art.config_hash({"seed": 1})
    with pytest.raises(art.ArtifactError):
        art.read_artifact(tmp_path / "x", "other")


def test_not_an_artifact(tmp_path):
    (tmp_path / "junk").write_bytes(b"hello world, not an artifact")
    with pytest.raises(art.ArtifactError):
        art.read_artifact(tmp_path / "junk")


def test_decomposition_roundtrip(tmp_path):
    m = build_model(ModelConfig(depth=2, heads=2, dim=16))
    x = np.random.default_rng(0).uniform(0, 1, (3, 32, 32, 3)).astype(np.float32)
    dec = decompose_images(m, x)
    art.save_decomposition(tmp_path / "d", dec)
    back, _ = art.load_decomposition(tmp_path / "d")
    assert back.keys == dec.keys
    np.testing.assert_array_equal(back.vectors, dec.vectors)
    np.testing.assert_array_equal(back.z, dec.z)


def test_config_hash_is_order_free():
    assert art.config_hash({"a": 1, "b": 2}) == art.config_hash({"b": 2, "a": 1})
    assert art.config_hash({"a": 1}) != art.config_hash({"a": 2})
