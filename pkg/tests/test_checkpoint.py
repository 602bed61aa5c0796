"""
Tests for the GENZ checkpoint container.
"""

import struct

import numpy as np
import pytest
from pathlib import Path
import sys

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.engine import Tensor, no_grad
from src.errors import (
    BadMagicError,
    CheckpointError,
    OverlappingOffsetsError,
    TruncatedPayloadError,
    UnknownVersionError,
    exit_code_for,
)
from src.nn.checkpoint import (
    _HEADER,
    Checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    file_sha256,
    load_checkpoint,
    load_model,
    save_checkpoint,
    save_model,
)
from src.nn.models import model_hash


# name_len + one-byte name + dtype/ndim + one dim + offset/nbytes
ONE_D_ENTRY = 2 + 1 + 2 + 8 + 16


@pytest.fixture
def sample_tensors():
    rng = np.random.default_rng(0)
    return {
        "weights": rng.standard_normal((3, 4)).astype(np.float32),
        "ints": np.arange(6, dtype=np.int32).reshape(2, 3),
        "wide": rng.standard_normal(5),
        "bytes": np.array([1, 2, 255], dtype=np.uint8),
        "longs": np.array([-1, 2**40], dtype=np.int64),
    }


class TestRoundTrip:
    
    def test_tensors_and_metadata(self, tmp_path, sample_tensors):
        path = save_checkpoint(sample_tensors, tmp_path / "a.genz", {"kind": "test", "n": 3})
        ckpt = load_checkpoint(path)
        assert ckpt.metadata == {"kind": "test", "n": 3}
        assert set(ckpt.tensors) == set(sample_tensors)
        for name, value in sample_tensors.items():
            assert ckpt.tensors[name].dtype == value.dtype
            np.testing.assert_array_equal(ckpt.tensors[name], value)
    
    def test_encoding_is_deterministic(self, sample_tensors):
        reordered = dict(reversed(list(sample_tensors.items())))
        assert encode_checkpoint(Checkpoint(sample_tensors, {"b": 1, "a": 2})) == \
            encode_checkpoint(Checkpoint(reordered, {"a": 2, "b": 1}))
    
    def test_scalar_tensor(self):
        decoded = decode_checkpoint(encode_checkpoint(Checkpoint({"s": np.array(2.5, dtype=np.float32)})))
        assert decoded.tensors["s"].shape == ()
        assert decoded.tensors["s"] == np.float32(2.5)
    
    def test_unsupported_dtype(self):
        with pytest.raises(CheckpointError):
            encode_checkpoint(Checkpoint({"c": np.zeros(2, dtype=np.complex64)}))
    
    def test_no_temp_files_left(self, tmp_path, sample_tensors):
        save_checkpoint(sample_tensors, tmp_path / "a.genz")
        save_checkpoint(sample_tensors, tmp_path / "a.genz")
        assert [p.name for p in tmp_path.iterdir()] == ["a.genz"]
    
    def test_file_hash_stable(self, tmp_path, sample_tensors):
        a = save_checkpoint(sample_tensors, tmp_path / "a.genz", {"x": 1})
        b = save_checkpoint(sample_tensors, tmp_path / "b.genz", {"x": 1})
        assert file_sha256(a) == file_sha256(b)


class TestCorruption:
    
    @pytest.fixture
    def two_tensors(self):
        ckpt = Checkpoint({"a": np.zeros(4, dtype=np.float32), "b": np.ones(4, dtype=np.float32)}, {"k": 1})
        return encode_checkpoint(ckpt)
    
    def test_bad_magic(self, two_tensors):
        with pytest.raises(BadMagicError):
            decode_checkpoint(b"NOPE" + two_tensors[4:])
    
    def test_unknown_version(self, two_tensors):
        raw = bytearray(two_tensors)
        struct.pack_into("<I", raw, 4, 99)
        with pytest.raises(UnknownVersionError):
            decode_checkpoint(bytes(raw))
    
    def test_truncated(self, two_tensors):
        with pytest.raises(TruncatedPayloadError):
            decode_checkpoint(two_tensors[:-5])
    
    def test_truncated_header(self, two_tensors):
        with pytest.raises(TruncatedPayloadError):
            decode_checkpoint(two_tensors[:10])
    
    def test_overlapping_offsets(self, two_tensors):
        raw = bytearray(two_tensors)
        offset_of_b = _HEADER.size + ONE_D_ENTRY + 2 + 1 + 2 + 8
        assert struct.unpack_from("<Q", raw, offset_of_b)[0] == 16
        struct.pack_into("<Q", raw, offset_of_b, 8)
        with pytest.raises(OverlappingOffsetsError):
            decode_checkpoint(bytes(raw))
    
    def test_exit_codes(self):
        assert exit_code_for(BadMagicError("x")) == 4
        assert exit_code_for(FileNotFoundError("x")) == 4
    
    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "missing.genz")


class TestModelCheckpoint:
    
    def test_model_round_trip(self, tmp_path, tiny_model):
        path = save_model(tiny_model, tmp_path / "model.genz", {"note": "x"})
        restored = load_model(path)
        assert model_hash(restored) == model_hash(tiny_model)
        x = Tensor(np.random.default_rng(0).standard_normal((4, 3, 8, 8)).astype(np.float32))
        with no_grad():
            np.testing.assert_array_equal(restored(x).data, tiny_model(x).data)
        assert load_checkpoint(path).metadata["note"] == "x"
    
    def test_bn_buffers_saved(self, tmp_path, tiny_model):
        tiny_model.bn_layers()[0].running_mean[:] = 0.25
        restored = load_model(save_model(tiny_model, tmp_path / "m.genz"))
        np.testing.assert_array_equal(restored.bn_layers()[0].running_mean, 0.25)
    
    def test_wrong_kind(self, tmp_path):
        path = save_checkpoint({"x": np.zeros(1, dtype=np.float32)}, tmp_path / "x.genz", {"kind": "other"})
        with pytest.raises(CheckpointError):
            load_model(path)
