import struct

import numpy as np
import pytest

from mgic.data import (
    DatasetHandle,
    decode_idx,
    encode_idx,
    load_idx,
    load_idx_dataset,
    read_idx,
    sample_function_dataset,
    synth_feature_maps,
    target_function,
    write_digits_idx,
    write_idx,
)
from mgic.errors import ConfigurationError, FormatError


@pytest.mark.parametrize("x,y,expected", [(0.0, 0.0, 0.0), (0.5, 0.25, -0.84153), (1.0, np.pi / 40, 0.54030)])
def test_target_function(x, y, expected):
    assert target_function(x, y) == pytest.approx(expected, abs=1e-5)


def test_function_dataset_shape_range_and_determinism():
    a, b = sample_function_dataset(100, seed=3), sample_function_dataset(100, seed=3)
    assert a.inputs.shape == (100, 2, 1, 1) and a.targets.shape == (100,)
    assert (a.inputs >= 0).all() and (a.inputs <= 1).all()
    np.testing.assert_array_equal(a.inputs, b.inputs)
    x, y = a.inputs[:, 0, 0, 0].astype(np.float64), a.inputs[:, 1, 0, 0].astype(np.float64)
    np.testing.assert_allclose(a.targets, np.cos(x) * np.sin(20 * y), atol=1e-6)
    with pytest.raises(ConfigurationError):
        sample_function_dataset(0, seed=0)


def test_handle_rejects_mismatched_lengths():
    with pytest.raises(ConfigurationError):
        DatasetHandle("function-surface", np.zeros((3, 2)), np.zeros(4))


def test_rank_one_maps_are_proportional():
    maps = synth_feature_maps(4, 8, 5, 5, seed=0, rank=1).inputs.astype(np.float64)
    for sample in maps:
        flat = sample.reshape(8, -1)
        assert np.linalg.matrix_rank(flat, tol=1e-4 * np.abs(flat).max()) == 1


def test_feature_map_channel_rank():
    maps = synth_feature_maps(64, 32, 6, 6, seed=1).inputs.astype(np.float64)
    cov = np.cov(maps.transpose(1, 0, 2, 3).reshape(32, -1))
    eig = np.sort(np.linalg.eigvalsh(cov))[::-1]
    assert eig[8:].max() < 1e-5 * eig[0]  # rank c / 4 = 8
    assert eig[7] > 1e-3 * eig[0]


def test_feature_maps_deterministic():
    a = synth_feature_maps(3, 16, 4, 4, seed=9)
    b = synth_feature_maps(3, 16, 4, 4, seed=9)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    assert a.inputs is a.targets or np.array_equal(a.inputs, a.targets)


def _idx_bytes(code, dims, payload):
    return struct.pack(">HBB", 0, code, len(dims)) + struct.pack(f">{len(dims)}I", *dims) + payload


def test_idx_images_and_labels(tmp_path):
    images = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    raw = _idx_bytes(0x08, (2, 3, 4), images.tobytes())
    assert raw[:4] == b"\x00\x00\x08\x03"
    path = tmp_path / "img"
    path.write_bytes(raw)
    tensor = load_idx(path)
    assert tensor.shape == (2, 1, 3, 4)
    np.testing.assert_allclose(tensor.data[:, 0], images / 255.0, rtol=1e-6)

    labels = np.array([3, 1, 4], dtype=np.uint8)
    lpath = tmp_path / "lab"
    lpath.write_bytes(_idx_bytes(0x08, (3,), labels.tobytes()))
    assert lpath.read_bytes()[:4] == b"\x00\x00\x08\x01"
    np.testing.assert_array_equal(load_idx(lpath), labels)


def test_zero_item_idx_file(tmp_path):
    path = tmp_path / "empty"
    path.write_bytes(_idx_bytes(0x08, (0, 28, 28), b""))
    assert load_idx(path).shape == (0, 1, 28, 28)


@pytest.mark.parametrize("raw,offset", [
    (b"\x01\x00\x08\x01\x00\x00\x00\x01\x05", 0),        # bad magic
    (b"\x00\x00\x08\x01\x00\x00", 6),                     # truncated dims
    (b"\x00\x00\x08\x01\x00\x00\x00\x03\x01\x02", 10),    # truncated payload
    (b"\x00\x00\x08\x01\x00\x00\x00\x01\x01\x02", 9),     # trailing bytes
])
def test_idx_format_errors_carry_offset(raw, offset):
    with pytest.raises(FormatError) as info:
        decode_idx(raw)
    assert info.value.offset == offset


@pytest.mark.parametrize("dtype", [np.uint8, np.int8, np.int16, np.int32, np.float32, np.float64])
def test_idx_round_trip_is_byte_identical(tmp_path, dtype):
    array = (np.arange(24).reshape(2, 3, 4) - 5).astype(dtype)
    if np.dtype(dtype).kind == "u":
        array = np.abs(array)
    raw = encode_idx(array)
    path = tmp_path / "x"
    path.write_bytes(raw)
    write_idx(tmp_path / "y", read_idx(path))
    assert (tmp_path / "y").read_bytes() == raw


def test_digits_idx_dataset(tmp_path):
    paths = write_digits_idx(tmp_path, seed=0)
    train = load_idx_dataset(paths["train_images"], paths["train_labels"])
    test = load_idx_dataset(paths["test_images"], paths["test_labels"], split="test")
    assert train.inputs.shape[1:] == (1, 12, 12) and test.inputs.shape[1:] == (1, 12, 12)
    assert len(train) == 4 * (1797 - 1797 // 5) and len(test) == 1797 // 5
    assert set(np.unique(test.targets)) == set(range(10))
    assert 0.0 <= train.inputs.min() and train.inputs.max() <= 1.0
