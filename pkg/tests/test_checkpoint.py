import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from uniflow.checkpoint import (
    Checkpoint,
    FormatError,
    IncompatibleCheckpoint,
    MAGIC,
    load_checkpoint,
    read_ufad,
    save_checkpoint,
    write_ufad,
)
from uniflow.model import ModelConfig, init_params

CFG = ModelConfig(depth=1, embed_size=16, num_heads=2, ffn_mult=2)


@pytest.fixture
def ckpt():
    return Checkpoint.from_params(CFG, init_params(CFG, 3), step=7, rng_state={"seed": 3})


def test_round_trip_bit_exact(tmp_path, ckpt):
    path = tmp_path / "a.ufad"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.config == CFG and back.step == 7 and back.rng_state == {"seed": 3}
    assert list(back.params) == list(ckpt.params)
    for n, a in ckpt.params.items():
        assert back.params[n].dtype == np.float32 and np.array_equal(back.params[n], a)


def test_save_load_save_is_byte_identical(tmp_path, ckpt):
    a, b = tmp_path / "a.ufad", tmp_path / "b.ufad"
    save_checkpoint(ckpt, a)
    save_checkpoint(load_checkpoint(a), b)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes()[:4] == MAGIC


@settings(max_examples=20)
@given(arrays(np.float32, st.tuples(st.integers(0, 4), st.integers(1, 5)), elements=st.floats(-1e6, 1e6, width=32)))
def test_generic_container_round_trip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("u") / "x.ufad"
    write_ufad(path, {"x": arr, "y": np.arange(3.0)}, {"kind": "latent"})
    tensors, meta = read_ufad(path)
    assert meta == {"kind": "latent"}
    assert np.array_equal(tensors["x"], arr) and tensors["x"].shape == arr.shape


def test_corrupt_manifest_byte_rejected(tmp_path, ckpt):
    path = tmp_path / "a.ufad"
    save_checkpoint(ckpt, path)
    raw = bytearray(path.read_bytes())
    raw[20] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="offset 16"):
        load_checkpoint(path)


def test_corrupt_payload_rejected(tmp_path, ckpt):
    path = tmp_path / "a.ufad"
    save_checkpoint(ckpt, path)
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="payload"):
        load_checkpoint(path)


@pytest.mark.parametrize(
    "mutate, match",
    [
        (lambda b: b"XXXX" + b[4:], "magic.*offset 0"),
        (lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:], "version.*offset 4"),
        (lambda b: b[:10], "truncated header"),
        (lambda b: b[:-10], "truncated at offset"),
        (lambda b: b[:40], "manifest truncated"),
    ],
)
def test_header_errors_name_offsets(tmp_path, ckpt, mutate, match):
    path = tmp_path / "a.ufad"
    save_checkpoint(ckpt, path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError, match=match):
        load_checkpoint(path)


def test_cross_config_load_lists_names(tmp_path, ckpt):
    path = tmp_path / "a.ufad"
    save_checkpoint(ckpt, path)
    other = dataclasses.replace(CFG, depth=2, embed_size=8)
    with pytest.raises(IncompatibleCheckpoint) as info:
        load_checkpoint(path, other)
    msg = str(info.value)
    assert "missing=['blocks.1." in msg and "wrong_shape=[" in msg


def test_latent_file_is_not_a_checkpoint(tmp_path):
    path = tmp_path / "z.ufad"
    write_ufad(path, {"latent": np.zeros((3, 8))}, {"kind": "latent"})
    with pytest.raises(FormatError, match="not a checkpoint"):
        load_checkpoint(path)
