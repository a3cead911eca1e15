from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from accelopt.contexts import (OP_COUNT_SCALE, ContextVector, builtin_library, load_contexts,
                               normalize, resolve, save_contexts)
from accelopt.design_space import (AcceleratorConfig, DecodeError, DesignSpace, DesignSpaceError,
                                   ParamSpec, decode_onehot, default_space, encode_onehot,
                                   load_space, sample_uniform, sample_uniform_array, save_space,
                                   total_size)

SPACE = default_space()


def test_default_space_shape():
    assert SPACE.K == 10
    assert SPACE.cardinalities == (10, 10, 7, 7, 11, 10, 4, 5, 7, 6)
    assert total_size(SPACE) == 452_760_000
    assert SPACE.onehot_size == 77


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_onehot_roundtrip(data):
    idx = tuple(data.draw(st.integers(0, c - 1)) for c in SPACE.cardinalities)
    vec = encode_onehot(SPACE, idx)
    assert vec.sum() == SPACE.K
    assert decode_onehot(SPACE, vec) == AcceleratorConfig(idx)


def test_decode_rejects_bad_blocks():
    vec = encode_onehot(SPACE, (0,) * 10)
    vec[1] = 1.0  # two hot entries in block 0
    with pytest.raises(DecodeError, match="block 0"):
        decode_onehot(SPACE, vec)
    vec = encode_onehot(SPACE, (0,) * 10)
    vec[10] = 0.0  # empty block 1
    with pytest.raises(DecodeError, match="block 1"):
        decode_onehot(SPACE, vec)
    with pytest.raises(DecodeError):
        decode_onehot(SPACE, np.zeros(5))


def test_validate_names_parameter():
    with pytest.raises(DesignSpaceError, match="core_memory"):
        SPACE.validate((0, 0, 0, 0, 11, 0, 0, 0, 0, 0))
    with pytest.raises(DesignSpaceError, match="10 parameters"):
        SPACE.validate((0, 0))


def test_param_spec_validation():
    with pytest.raises(DesignSpaceError):
        ParamSpec("x", (1.0,))
    with pytest.raises(DesignSpaceError):
        ParamSpec("x", (2.0, 1.0))
    with pytest.raises(DesignSpaceError):
        DesignSpace((ParamSpec("x", (1, 2)), ParamSpec("x", (1, 2))))


def test_sampling_deterministic_and_uniform():
    a = sample_uniform_array(SPACE, 3, 50_000)
    b = sample_uniform_array(SPACE, 3, 50_000)
    np.testing.assert_array_equal(a, b)
    assert sample_uniform(SPACE, 3, 5) == [AcceleratorConfig(tuple(r)) for r in a[:5]]
    for k, card in enumerate(SPACE.cardinalities):
        counts = np.bincount(a[:, k], minlength=card)
        expected = 50_000 / card
        sigma = np.sqrt(expected * (1 - 1 / card))
        assert np.all(np.abs(counts - expected) < 4 * sigma)


def test_space_file_roundtrip(tmp_path):
    save_space(SPACE, tmp_path / "s.txt")
    assert load_space(tmp_path / "s.txt") == SPACE
    (tmp_path / "bad.txt").write_text("a,1,2\nb,1,zz\n")
    with pytest.raises(DesignSpaceError, match=":2:"):
        load_space(tmp_path / "bad.txt")


def test_context_library_normalization():
    lib = builtin_library()
    assert len(lib) == 9
    feats = np.stack([c.features for c in lib.values()])
    np.testing.assert_allclose(feats[:, 3:].sum(axis=0), 1.0)
    edge = lib["mobilenet_edge"]
    assert edge.features[0] == pytest.approx(45 / OP_COUNT_SCALE)
    assert edge.param_bytes == pytest.approx(3.87 * 1024 * 1024)


def test_context_file_roundtrip(tmp_path):
    lib = builtin_library()
    save_contexts(lib, tmp_path / "c.json")
    assert load_contexts(tmp_path / "c.json") == lib


def test_context_validation_and_resolve():
    with pytest.raises(ValueError, match="conv_ops"):
        ContextVector("x", -1, 0, 0, 1, 1, 1)
    with pytest.raises(ValueError, match="not been normalized"):
        ContextVector("x", 1, 0, 0, 1, 1, 1).features
    with pytest.raises(KeyError, match="unknown application"):
        resolve(["nope"], builtin_library())
    assert normalize([]) == {}
