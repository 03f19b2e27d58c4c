import numpy as np
import pytest

from chanfuse.checks import tiny_encoder_config
from chanfuse.errors import DataError, ShapeError
from chanfuse.model import init_model
from chanfuse.tensor_container import (
    ALIGNMENT,
    decode_tensors,
    encode_tensors,
    load_params,
    load_tensors,
    save_params,
    save_tensors,
)


class TestContainer:
    """Named tensors on disk, bit-exact."""

    def test_round_trip_is_exact(self, tmp_path, rng):
        tensors = {
            "log_probs": rng.normal(size=(7, 6)),
            "scalar": np.array(3.5),
            "half": rng.normal(size=(3,)).astype(np.float32),
        }
        loaded = load_tensors(save_tensors(tmp_path / "t.cftn", tensors))
        assert list(loaded) == list(tensors)
        for name, array in tensors.items():
            assert loaded[name].dtype == array.dtype
            assert loaded[name].shape == array.shape
            assert loaded[name].tobytes() == array.tobytes()

    def test_payload_aligned(self, rng):
        blob = encode_tensors({"a": rng.normal(size=3).astype(np.float32), "b": rng.normal(size=2)})
        assert len(blob) % ALIGNMENT == 0

    def test_axes_must_match_rank(self, rng):
        with pytest.raises(DataError):
            encode_tensors({"x": np.zeros((2, 3))}, axes={"x": ["frame"]})
        blob = encode_tensors({"x": np.zeros((2, 3))}, axes={"x": ["frame", "class"]})
        assert b'"axes":["frame","class"]' in blob

    def test_bad_magic(self, rng):
        blob = bytearray(encode_tensors({"x": np.zeros(2)}))
        blob[:4] = b"NOPE"
        with pytest.raises(DataError):
            decode_tensors(bytes(blob))

    def test_truncated(self):
        blob = encode_tensors({"x": np.ones(16)})
        with pytest.raises(DataError):
            decode_tensors(blob[:-8])
        with pytest.raises(DataError):
            decode_tensors(blob[:10])

    def test_integer_dtype_rejected(self):
        with pytest.raises(DataError):
            encode_tensors({"x": np.arange(3)})

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_tensors(tmp_path / "absent.cftn")


class TestParams:
    """Model weights saved and restored through the container."""

    def test_restores_every_parameter(self, tmp_path, rng):
        config = tiny_encoder_config()
        source = init_model(config, rng)
        path = save_params(source, tmp_path / "w.cftn")
        target = init_model(config, np.random.default_rng(99))
        assert load_params(target, path) == len(source)
        for name, value in source.arrays().items():
            np.testing.assert_array_equal(target.value(name), value)

    def test_topology_mismatch(self, tmp_path, rng):
        path = save_params(init_model(tiny_encoder_config(), rng), tmp_path / "w.cftn")
        wider = init_model(tiny_encoder_config(d_model=4), rng)
        with pytest.raises(ShapeError):
            load_params(wider, path)
