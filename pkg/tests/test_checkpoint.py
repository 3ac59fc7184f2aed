import struct
import zlib

import numpy as np
import pytest

from stylized_dialogue.checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointError,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)


def sample() -> Checkpoint:
    rng = np.random.default_rng(0)
    return Checkpoint(
        config={"model.hidden": "8", "train.lr": "0.001"},
        vocab=["[PAD]", "x", "y z"],
        params={"a": rng.normal(size=(2, 3)), "b": rng.normal(size=()), "c": np.zeros((0, 4))},
        optimizer={"m.a": rng.normal(size=(2, 3)), "t": np.array(4)},
        meta={"step": "7", "ablation": "none"},
        rng={"data": "{'bit_generator': 'PCG64'}"},
        loop={"perm": np.arange(5)},
    )


def assert_same(a: Checkpoint, b: Checkpoint) -> None:
    assert (a.config, a.vocab, a.meta, a.rng, a.version) == (b.config, b.vocab, b.meta, b.rng, b.version)
    for x, y in ((a.params, b.params), (a.optimizer, b.optimizer), (a.loop, b.loop)):
        assert x.keys() == y.keys()
        for k in x:
            assert x[k].dtype == y[k].dtype and x[k].shape == y[k].shape
            assert np.array_equal(x[k], y[k])


def test_roundtrip_is_bit_exact(tmp_path):
    ck = sample()
    save_checkpoint(ck, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert_same(ck, back)
    assert back.step == 7
    assert to_bytes(back) == to_bytes(ck)


def test_bad_magic():
    data = bytearray(to_bytes(sample()))
    data[:4] = b"NOPE"
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(bytes(data))


def test_unsupported_version():
    data = bytearray(to_bytes(sample()))
    struct.pack_into("<I", data, 4, 99)
    with pytest.raises(CheckpointError, match="version 99"):
        from_bytes(bytes(data))


def test_truncated_file():
    data = to_bytes(sample())
    with pytest.raises(CheckpointError, match="truncated"):
        from_bytes(data[:-5])
    with pytest.raises(CheckpointError):
        from_bytes(data[:10])


def test_corrupted_payload():
    data = bytearray(to_bytes(sample()))
    data[-1] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        from_bytes(bytes(data))


def test_missing_section():
    name = b"meta"
    body = b""
    payload = struct.pack("<H", len(name)) + name + struct.pack("<Q", len(body)) + body
    data = MAGIC + struct.pack("<IIQ", 1, zlib.crc32(payload), len(payload)) + payload
    with pytest.raises(CheckpointError, match="missing section"):
        from_bytes(data)


def test_unsupported_dtype():
    ck = sample()
    ck.params["s"] = np.array(["a"])
    with pytest.raises(CheckpointError, match="dtype"):
        to_bytes(ck)
