import json
import struct

import numpy as np
import pytest

from hogformer import tensor as T
from hogformer.checkpoint import (
    CheckpointError,
    checkpoint_bytes,
    load_checkpoint,
    save_checkpoint,
)
from hogformer.config import preset
from hogformer.losses import total_loss
from hogformer.model import build_model
from hogformer.optim import Adam
from hogformer.tensor import ConfigurationError, Tensor


@pytest.fixture
def saved(tmp_path):
    model = build_model(preset("tiny"), seed=3)
    path = str(tmp_path / "m.hogf")
    save_checkpoint(model, path, step=7)
    return model, path


def test_save_load_save_identical_bytes(saved, tmp_path):
    model, path = saved
    ck = load_checkpoint(path)
    assert ck.step == 7 and ck.optimizer is None
    again = str(tmp_path / "again.hogf")
    save_checkpoint(ck.model, again, step=ck.step)
    assert open(path, "rb").read() == open(again, "rb").read()
    for (n, a), (_, b) in zip(model.named_parameters(), ck.model.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=n)


def test_header_layout(saved):
    _, path = saved
    data = open(path, "rb").read()
    magic, version, hlen = struct.unpack_from("<4sII", data)
    assert magic == b"HOGF" and version == 1
    header = json.loads(data[12 : 12 + hlen])
    assert header["config"] == preset("tiny").to_dict()
    first = header["blobs"][0]
    assert set(first) == {"name", "shape", "offset", "length", "crc32"}


def test_flipped_payload_byte(saved):
    _, path = saved
    data = bytearray(open(path, "rb").read())
    data[-5] ^= 0x01
    open(path, "wb").write(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_truncated_blob(saved):
    _, path = saved
    data = open(path, "rb").read()
    open(path, "wb").write(data[:-100])
    with pytest.raises(CheckpointError, match="truncated blob"):
        load_checkpoint(path)


def test_corrupt_header(saved):
    _, path = saved
    data = bytearray(open(path, "rb").read())
    data[12] = ord("#")
    open(path, "wb").write(bytes(data))
    with pytest.raises(CheckpointError, match="corrupt header"):
        load_checkpoint(path)


def test_bad_magic_and_empty(tmp_path):
    p = tmp_path / "x.hogf"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(str(p))
    p.write_bytes(b"")
    with pytest.raises(CheckpointError, match="too short"):
        load_checkpoint(str(p))


def _rewrite_header(path, edit):
    data = open(path, "rb").read()
    _, _, hlen = struct.unpack_from("<4sII", data)
    header = json.loads(data[12 : 12 + hlen])
    edit(header)
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    open(path, "wb").write(struct.pack("<4sII", b"HOGF", 1, len(hb)) + hb + data[12 + hlen :])


def test_unknown_parameter_name(saved):
    _, path = saved
    _rewrite_header(path, lambda h: h["blobs"][0].update(name="stem.bogus"))
    with pytest.raises(CheckpointError, match="unknown parameter"):
        load_checkpoint(path)


def test_config_conflict(saved):
    _, path = saved
    with pytest.raises(ConfigurationError, match="config conflict: n_bin"):
        load_checkpoint(path, expected_config=preset("tiny", n_bin=6))
    assert load_checkpoint(path, expected_config=preset("tiny")).step == 7


def test_optimizer_state_roundtrip(tmp_path, rng):
    model = build_model(preset("tiny"), seed=0)
    opt = Adam(model.named_parameters())
    x = rng.random((1, 3, 16, 16)).astype(np.float32)
    total_loss(model(Tensor(x)), Tensor(np.clip(x + 0.1, 0, 1))).total.backward()
    opt.step(1e-3)
    path = str(tmp_path / "o.hogf")
    save_checkpoint(model, path, step=1, optimizer=opt)
    ck = load_checkpoint(path)
    assert ck.optimizer.step == 1
    for name, _ in model.named_parameters():
        np.testing.assert_array_equal(ck.optimizer.m[name], opt.state.m[name].astype(np.float32))
        np.testing.assert_array_equal(ck.optimizer.v[name], opt.state.v[name].astype(np.float32))
    assert checkpoint_bytes(ck.model, 1) == checkpoint_bytes(model, 1)


def test_atomic_write_leaves_no_temp(saved, tmp_path):
    assert [p.name for p in tmp_path.iterdir()] == ["m.hogf"]


def test_loaded_model_matches_original_forward(saved, rng):
    model, path = saved
    ck = load_checkpoint(path)
    x = Tensor(rng.random((1, 3, 16, 16)).astype(np.float32))
    with T.no_grad():
        np.testing.assert_array_equal(ck.model(x).data, model(x).data)
