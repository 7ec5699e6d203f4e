import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from svrecon import checkpoint as ckpt


def sample(rng):
    return {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": rng.normal(size=5),
            "scalar": np.array(2.5), "idx": np.arange(4, dtype=np.int64)}


def test_roundtrip_bit_exact(tmp_path, rng):
    arrs = sample(rng)
    ckpt.save(tmp_path / "x.ckpt", arrs, {"epoch": 3, "best_val": 0.1})
    back, state = ckpt.load(tmp_path / "x.ckpt")
    assert list(back) == list(arrs)
    for k in arrs:
        assert back[k].dtype == arrs[k].dtype
        np.testing.assert_array_equal(back[k], arrs[k])
    assert state == {"epoch": 3, "best_val": 0.1}


def test_save_load_save_identical_bytes(tmp_path, rng):
    ckpt.save(tmp_path / "1.ckpt", sample(rng), {"step": 7})
    a, s = ckpt.load(tmp_path / "1.ckpt")
    ckpt.save(tmp_path / "2.ckpt", a, s)
    assert (tmp_path / "1.ckpt").read_bytes() == (tmp_path / "2.ckpt").read_bytes()


def test_layout_header(rng):
    buf = ckpt.encode(sample(rng))
    assert buf[:4] == b"M3DC"
    assert struct.unpack_from("<I", buf, 4)[0] == ckpt.VERSION


def test_corruption_detected(rng):
    buf = bytearray(ckpt.encode(sample(rng)))
    buf[-10] ^= 0xFF
    with pytest.raises(ckpt.ChecksumError):
        ckpt.decode(bytes(buf))
    buf = bytearray(ckpt.encode(sample(rng)))
    buf[-1] ^= 0x01
    with pytest.raises(ckpt.ChecksumError):
        ckpt.decode(bytes(buf))


def test_version_and_truncation(rng):
    buf = bytearray(ckpt.encode(sample(rng)))
    bad = bytes(buf[:4]) + struct.pack("<I", 99) + bytes(buf[8:])
    with pytest.raises(ckpt.VersionError):
        ckpt.decode(bad)
    with pytest.raises(ckpt.TruncatedError):
        ckpt.decode(bytes(buf[:-20]))
    with pytest.raises(ckpt.TruncatedError):
        ckpt.decode(b"M3DC")
    with pytest.raises(ckpt.CheckpointError):
        ckpt.decode(b"XXXX" + bytes(buf[4:]))


@given(st.dictionaries(st.text("abc/.", min_size=1, max_size=6),
                       arrays(st.sampled_from([np.float32, np.float64, np.int32]),
                              st.tuples(st.integers(0, 3), st.integers(1, 3))),
                       max_size=4))
def test_property_roundtrip(arrs):
    back, _ = ckpt.decode(ckpt.encode(arrs))
    assert set(back) == set(arrs)
    for k, v in arrs.items():
        np.testing.assert_array_equal(back[k], v)
