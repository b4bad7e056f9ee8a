import numpy as np
import pytest

from mgic.autograd import Tensor, no_grad
from mgic.checkpoint import (
    MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from mgic.errors import CorruptionError, FormatError, VersionError
from mgic.models import build_model

ARCH = {"kind": "approx_net", "alpha": 0.2, "block": "mgic", "s_g": 4, "s_c": 4}


def _model(seed=0):
    model = build_model(ARCH, rng=np.random.default_rng(seed))
    for _, buf in model.named_buffers():
        buf[...] = np.random.default_rng(seed + 1).uniform(0.5, 2.0, buf.shape)
    return model


def test_round_trip_is_bit_exact(tmp_path):
    model = _model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.arch == model.arch
    original, restored = model.state_dict(), loaded.state_dict()
    assert list(original) == list(restored)
    for name, value in original.items():
        assert restored[name].dtype == value.dtype
        assert restored[name].tobytes() == value.tobytes(), name


def test_loaded_model_computes_the_same_function(tmp_path):
    model = _model(3).eval()
    save_checkpoint(model, tmp_path / "m.ckpt")
    loaded = load_checkpoint(tmp_path / "m.ckpt").eval()
    x = Tensor(np.random.default_rng(4).uniform(size=(5, 2, 1, 1)).astype(np.float32))
    with no_grad():
        np.testing.assert_array_equal(model(x).data, loaded(x).data)


def test_layout_header():
    raw = encode_checkpoint({"kind": "x"}, [("w", np.ones((2, 3), np.float32))], [])
    assert raw[:4] == MAGIC and raw[4:8] == (1).to_bytes(4, "little")
    arch, params, buffers = decode_checkpoint(raw)
    assert arch == {"kind": "x"} and params["w"].shape == (2, 3) and not buffers


def test_corrupted_byte_is_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(_model(), path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptionError, match="checksum"):
        load_checkpoint(path)


def test_truncated_file_is_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(_model(), path)
    raw = path.read_bytes()
    for cut in (3, 20, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(CorruptionError):
            read_checkpoint(path)


def test_bad_magic():
    raw = bytearray(encode_checkpoint({"kind": "x"}, [], []))
    raw[:4] = b"NOPE"
    with pytest.raises(FormatError) as info:
        decode_checkpoint(bytes(raw))
    assert info.value.offset == 0


def test_unknown_version():
    import struct
    import zlib

    raw = encode_checkpoint({"kind": "x"}, [], [])
    body = raw[:4] + struct.pack("<I", 99) + raw[8:-4]
    with pytest.raises(VersionError):
        decode_checkpoint(body + struct.pack("<I", zlib.crc32(body)))


def test_model_without_arch_cannot_be_saved(tmp_path):
    from mgic.nn import Linear

    with pytest.raises(FormatError):
        save_checkpoint(Linear(2, 2), tmp_path / "x")


def test_analyze_checkpoint_without_dataset(tmp_path):
    from mgic.experiments import cmd_analyze

    path = tmp_path / "m.ckpt"
    save_checkpoint(_model(), path)
    outcome = cmd_analyze({"checkpoint": str(path)}, seed=0)
    assert outcome.ok
