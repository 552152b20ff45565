import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hiercap import checkpoint
from hiercap.checkpoint import CheckpointCorruptError, CheckpointFormatError
from hiercap.dataset import build_vocab, generate_dataset
from hiercap.model import Captioner, ConfigMismatchError, default_config, load_rwa, save_rwa
from hiercap.rwa import RegionWordAttention, RwaConfig

f32 = hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                 elements=st.floats(width=32, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.text("abcxyz._", min_size=1, max_size=6), f32, max_size=4))
def test_round_trip_bit_exact(tensors):
    out, cfg = checkpoint.decode(checkpoint.encode(tensors, {"k": [1, "a"]}))
    assert cfg == {"k": [1, "a"]}
    assert list(out) == list(tensors)
    for k, v in tensors.items():
        assert out[k].shape == v.shape
        assert out[k].tobytes() == v.astype("<f4").tobytes()


def test_save_load_save_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    t = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(5)}
    checkpoint.save(tmp_path / "one.hck", t, {"x": 1})
    back, cfg = checkpoint.load(tmp_path / "one.hck")
    checkpoint.save(tmp_path / "two.hck", back, cfg)
    assert (tmp_path / "one.hck").read_bytes() == (tmp_path / "two.hck").read_bytes()


def test_bad_magic():
    blob = bytearray(checkpoint.encode({"a": np.ones(2)}, {}))
    blob[:4] = b"XXXX"
    with pytest.raises(CheckpointFormatError, match="magic"):
        checkpoint.decode(bytes(blob))


def test_bad_version():
    blob = bytearray(checkpoint.encode({"a": np.ones(2)}, {}))
    blob[4:8] = struct.pack("<I", 7)
    with pytest.raises(CheckpointFormatError, match="version"):
        checkpoint.decode(bytes(blob))


def test_short_header():
    with pytest.raises(CheckpointFormatError):
        checkpoint.decode(b"HCK")


def test_truncated_payload_names_tensor():
    blob = checkpoint.encode({"first": np.ones(3), "second": np.ones(4)}, {})
    with pytest.raises(CheckpointCorruptError, match="second"):
        checkpoint.decode(blob[:-2])


def test_overlapping_spans_rejected():
    a = np.arange(4.0)
    manifest = {"config": {}, "tensors": [
        {"name": "p", "shape": [4], "offset": 0, "length": 16},
        {"name": "q", "shape": [2], "offset": 8, "length": 8},
    ]}
    raw = json.dumps(manifest).encode()
    blob = struct.pack("<4sIQ", b"HCK1", 1, len(raw)) + raw + a.astype("<f4").tobytes()
    with pytest.raises(CheckpointCorruptError, match="overlap"):
        checkpoint.decode(blob)


def test_length_shape_disagreement():
    manifest = {"config": {}, "tensors": [{"name": "p", "shape": [3], "offset": 0, "length": 16}]}
    raw = json.dumps(manifest).encode()
    blob = struct.pack("<4sIQ", b"HCK1", 1, len(raw)) + raw + bytes(16)
    with pytest.raises(CheckpointCorruptError, match="'p'"):
        checkpoint.decode(blob)


@pytest.fixture(scope="module")
def tiny():
    samples = generate_dataset(0, 6)
    vocab = build_vocab(s.caption for s in samples)
    return samples, vocab


def test_captioner_round_trip(tmp_path, tiny):
    _, vocab = tiny
    model = Captioner(default_config(len(vocab)), vocab, seed=3)
    model.save(tmp_path / "c.hck")
    back = Captioner.load(tmp_path / "c.hck", expect_vocab=vocab)
    for (na, a), (nb, b) in zip(model.named_parameters(), back.named_parameters()):
        assert na == nb
        assert np.array_equal(a.data.astype(np.float32), b.data)
    assert back.cfg.to_dict() == model.cfg.to_dict()


def test_captioner_vocab_mismatch(tmp_path, tiny):
    _, vocab = tiny
    Captioner(default_config(len(vocab)), vocab).save(tmp_path / "c.hck")
    other = build_vocab(["a purple hexagon"])
    with pytest.raises(ConfigMismatchError):
        Captioner.load(tmp_path / "c.hck", expect_vocab=other)


def test_kind_mismatch(tmp_path, tiny):
    _, vocab = tiny
    save_rwa(RegionWordAttention(RwaConfig(vocab_size=len(vocab)), np.random.default_rng(0)), vocab, tmp_path / "r.hck")
    with pytest.raises(ConfigMismatchError):
        Captioner.load(tmp_path / "r.hck")
    rwa, v = load_rwa(tmp_path / "r.hck")
    assert v.tokens == vocab.tokens and rwa.cfg.vocab_size == len(vocab)


def test_atomic_save_leaves_no_temp(tmp_path):
    checkpoint.save(tmp_path / "x.hck", {"a": np.ones(1)}, {})
    assert [p.name for p in tmp_path.iterdir()] == ["x.hck"]
