import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsrem import checkpoint as C
from capsrem.capsnet import CapsNetModel
from capsrem.errors import (CheckpointCRCError, CheckpointError, CheckpointMagicError,
                            CheckpointTruncatedError, CheckpointVersionError)
from capsrem.training import Adam, optimizer_step


@pytest.fixture
def ckpt(small_config):
    model = CapsNetModel(small_config, seed=5)
    opt = Adam(0.001)
    grads = {k: np.ones_like(v.data) for k, v in model.params.items()}
    optimizer_step(model.params, grads, opt)
    frozen = {n: np.zeros(model.params[n].shape, bool) for n in model.prunable_names()}
    frozen["caps.W"][0, 0] = True
    return C.Checkpoint(model_config=small_config.to_dict(), params=model.state_dict(),
                        optimizer=opt.state_dict(), frozen=frozen, epoch=7, r=3, best_val_loss=0.125,
                        rng_state=np.random.default_rng(3).bit_generator.state,
                        train_config={"lr": 0.001}, extra={"note": "x"})


def assert_same(a, b):
    assert a.params.keys() == b.params.keys()
    for k in a.params:
        assert a.params[k].dtype == b.params[k].dtype
        assert a.params[k].tobytes() == b.params[k].tobytes()
    for k in a.frozen:
        assert np.array_equal(a.frozen[k], b.frozen[k])
    for k in a.optimizer["tensors"]:
        assert a.optimizer["tensors"][k].tobytes() == b.optimizer["tensors"][k].tobytes()
    assert (a.epoch, a.r, a.best_val_loss) == (b.epoch, b.r, b.best_val_loss)
    assert a.rng_state == b.rng_state
    assert a.model_config == b.model_config
    assert a.extra == b.extra


def test_round_trip_is_bit_exact(ckpt, tmp_path):
    C.save(ckpt, tmp_path / "m.ckpt")
    back = C.load(tmp_path / "m.ckpt")
    assert_same(ckpt, back)
    assert C.dumps(back) == C.dumps(ckpt)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["float32", "float64", "uint8", "bool", "int64"]),
                          st.lists(st.integers(0, 4), max_size=3)), min_size=1, max_size=5),
       st.integers(0, 2**31 - 1))
def test_round_trip_property(specs, seed):
    rng = np.random.default_rng(seed)
    params = {}
    for n, (dtype, shape) in enumerate(specs):
        params[f"t{n}"] = (rng.standard_normal(shape) * 100).astype(dtype)
    ck = C.Checkpoint(model_config={}, params=params)
    back = C.loads(C.dumps(ck))
    for k, v in params.items():
        assert back.params[k].dtype == v.dtype and back.params[k].shape == v.shape
        assert back.params[k].tobytes() == v.tobytes()


def test_header_layout(ckpt):
    raw = C.dumps(ckpt)
    assert raw[:4] == b"CAPS"
    assert struct.unpack("<I", raw[4:8])[0] == C.FORMAT_VERSION
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])
    count, name_len = struct.unpack("<II", raw[8:16])
    assert count == len(ckpt.params) + len(ckpt.frozen)
    first = raw[16:16 + name_len].decode()
    assert first.startswith("param/")


def test_flipped_payload_byte_is_crc_error(ckpt):
    raw = bytearray(C.dumps(ckpt))
    raw[200] ^= 0x01
    with pytest.raises(CheckpointCRCError):
        C.loads(bytes(raw))


def test_future_version_is_version_error(ckpt):
    raw = bytearray(C.dumps(ckpt))
    raw[4:8] = struct.pack("<I", C.FORMAT_VERSION + 1)
    with pytest.raises(CheckpointVersionError):
        C.loads(bytes(raw))


def test_bad_magic(ckpt):
    with pytest.raises(CheckpointMagicError):
        C.loads(b"NOPE" + C.dumps(ckpt)[4:])


@pytest.mark.parametrize("keep", [0, 5, 11, 100])
def test_truncation(ckpt, keep):
    with pytest.raises(CheckpointError):
        C.loads(C.dumps(ckpt)[:keep])


def test_truncated_but_crc_consistent_record_is_detected():
    body = C.MAGIC + struct.pack("<I", C.FORMAT_VERSION) + struct.pack("<I", 3)
    raw = body + struct.pack("<I", zlib.crc32(body))
    with pytest.raises(CheckpointTruncatedError):
        C.loads(raw)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        C.load(tmp_path / "absent.ckpt")


def test_model_from_checkpoint(ckpt, small_config):
    model = C.model_from_checkpoint(ckpt)
    assert model.config == small_config
    for k, v in ckpt.params.items():
        np.testing.assert_array_equal(model.params[k].data, v)
