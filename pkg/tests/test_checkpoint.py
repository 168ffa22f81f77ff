import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from codecdenoise.checkpoint import ALIGN, Checkpoint, CheckpointFormatError, load_checkpoint, save_checkpoint


def _ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint(
        config={"unet": {"levels": 2}, "name": "x"},
        tensors={"a": rng.standard_normal((3, 5)).astype(np.float32), "b/c": np.arange(7, dtype=np.float32)},
        state={"epoch": 4, "history": [{"lr": 1e-4}]},
    )


def test_round_trip(tmp_path):
    p = tmp_path / "m.adnc"
    ck = _ckpt()
    save_checkpoint(p, ck)
    back = load_checkpoint(p)
    assert back.config == ck.config and back.state == ck.state
    assert set(back.tensors) == set(ck.tensors)
    for k in ck.tensors:
        assert back.tensors[k].tobytes() == ck.tensors[k].tobytes()
        assert back.tensors[k].shape == ck.tensors[k].shape


def test_layout_is_documented_format(tmp_path):
    p = tmp_path / "m.adnc"
    save_checkpoint(p, _ckpt())
    raw = p.read_bytes()
    assert raw[:4] == b"ADNC"
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    assert version == 1
    header = json.loads(raw[16 : 16 + hlen])
    start = -(-(16 + hlen) // ALIGN) * ALIGN
    for name, meta in header["tensors"].items():
        assert meta["dtype"] == "f32" and meta["offset"] % ALIGN == 0
        got = np.frombuffer(raw, "<f4", meta["nbytes"] // 4, start + meta["offset"])
        assert got.tobytes() == _ckpt().tensors[name].astype("<f4").tobytes()


def test_save_is_deterministic(tmp_path):
    save_checkpoint(tmp_path / "a", _ckpt())
    save_checkpoint(tmp_path / "b", _ckpt())
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


@settings(max_examples=30, deadline=None)
@given(cut=st.integers(0, 10_000))
def test_truncation_is_a_format_error(tmp_path_factory, cut):
    d = tmp_path_factory.mktemp("t")
    save_checkpoint(d / "m", _ckpt())
    raw = (d / "m").read_bytes()
    if cut >= len(raw):
        return
    (d / "cut").write_bytes(raw[:cut])
    try:
        ck = load_checkpoint(d / "cut")
    except CheckpointFormatError:
        return
    # a cut inside trailing alignment padding still leaves every tensor intact
    for k, v in _ckpt().tensors.items():
        assert ck.tensors[k].tobytes() == v.tobytes()


def test_bad_magic_and_version(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(tmp_path / "x")
    save_checkpoint(tmp_path / "v", _ckpt())
    raw = bytearray((tmp_path / "v").read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    (tmp_path / "v").write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError, match="version"):
        load_checkpoint(tmp_path / "v")


def test_truncated_header_message(tmp_path):
    save_checkpoint(tmp_path / "m", _ckpt())
    (tmp_path / "m").write_bytes((tmp_path / "m").read_bytes()[:30])
    with pytest.raises(CheckpointFormatError, match="truncated header"):
        load_checkpoint(tmp_path / "m")
