import struct
from collections import OrderedDict

import numpy as np
import pytest

from multifuse.checkpoint import decode, encode, load_checkpoint, load_model, save_checkpoint, save_model
from multifuse.errors import ChecksumError, FormatError
from multifuse.model import ModelConfig, MultimodalDetector


def tensors(seed=0):
    rng = np.random.default_rng(seed)
    return OrderedDict(
        [
            ("a.weight", rng.standard_normal((3, 2, 3, 3)).astype(np.float32)),
            ("b", np.float32(rng.standard_normal(()))),
            ("héllo.bias", rng.standard_normal(5).astype(np.float32)),
            ("empty", np.zeros((0, 4), np.float32)),
        ]
    )


def test_layout():
    blob = encode(OrderedDict([("w", np.array([1.5, -2.0], np.float32))]))
    assert blob[:4] == b"MMPD"
    assert struct.unpack_from("<II", blob, 4) == (1, 1)
    assert struct.unpack_from("<I", blob, 12) == (1,)
    assert blob[16:17] == b"w"
    assert struct.unpack_from("<II", blob, 17) == (1, 2)
    assert np.frombuffer(blob[25:33], "<f4").tolist() == [1.5, -2.0]
    assert len(blob) == 33 + 8


def test_round_trip(tmp_path):
    src = tensors()
    save_checkpoint(tmp_path / "a.mmpd", src)
    back = load_checkpoint(tmp_path / "a.mmpd")
    assert list(back) == list(src)
    for k in src:
        assert back[k].dtype == np.float32 and np.array_equal(back[k], src[k])
    save_checkpoint(tmp_path / "b.mmpd", back)
    assert (tmp_path / "a.mmpd").read_bytes() == (tmp_path / "b.mmpd").read_bytes()


def test_model_save_load_save_identical(tmp_path):
    model = MultimodalDetector(ModelConfig(), seed=3)
    save_model(tmp_path / "m1.mmpd", model)
    other = MultimodalDetector(ModelConfig(), seed=4)
    assert load_model(tmp_path / "m1.mmpd", other) == OrderedDict()
    save_model(tmp_path / "m2.mmpd", other)
    assert (tmp_path / "m1.mmpd").read_bytes() == (tmp_path / "m2.mmpd").read_bytes()


def test_every_parameter_once(tmp_path):
    model = MultimodalDetector(ModelConfig(), seed=0)
    save_model(tmp_path / "m.mmpd", model, extra={"confidence.w": np.ones(2, np.float32)})
    names = list(load_checkpoint(tmp_path / "m.mmpd"))
    assert len(names) == len(set(names)) == len(model.parameters()) + 1
    extra = load_model(tmp_path / "m.mmpd", MultimodalDetector(ModelConfig(), seed=1))
    assert list(extra) == ["confidence.w"]


def test_extra_collision():
    model = MultimodalDetector(ModelConfig(), seed=0)
    name = next(iter(model.state_dict()))
    with pytest.raises(ValueError):
        save_model("/dev/null", model, extra={name: np.zeros(1, np.float32)})


def test_flipped_payload_bit():
    blob = bytearray(encode(tensors()))
    blob[40] ^= 0x01
    with pytest.raises(ChecksumError):
        decode(bytes(blob))


def test_bad_magic():
    blob = b"XXXX" + encode(tensors())[4:]
    with pytest.raises(FormatError) as info:
        decode(blob)
    assert info.value.offset == 0


def test_truncated():
    with pytest.raises(FormatError):
        decode(b"MMPD")


def test_missing_parameter(tmp_path):
    model = MultimodalDetector(ModelConfig(), seed=0)
    state = model.state_dict()
    state.pop(next(iter(state)))
    save_checkpoint(tmp_path / "m.mmpd", state)
    with pytest.raises(Exception):
        load_model(tmp_path / "m.mmpd", MultimodalDetector(ModelConfig(), seed=0))
