import io
import struct

import pytest
from hypothesis import given, strategies as st

from inferd.errors import FrameError
from inferd.frames import MAX_FRAME_BYTES, b64d, b64e, decode_body, encode_frame, read_frame

json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-(2**31), 2**31) | st.text(max_size=20),
    lambda children: st.lists(children, max_size=4)
    | st.dictionaries(st.text(max_size=8), children, max_size=4),
    max_leaves=12,
)


def roundtrip(payload):
    return read_frame(io.BytesIO(encode_frame(payload)))


def test_roundtrip_simple():
    assert roundtrip({"op": "ping", "n": 3}) == {"op": "ping", "n": 3}


@given(st.dictionaries(st.text(min_size=1, max_size=10), json_values, max_size=6))
def test_roundtrip_any_object(payload):
    assert roundtrip(payload) == payload


def test_clean_eof_returns_none():
    assert read_frame(io.BytesIO(b"")) is None


def test_truncated_header_raises():
    with pytest.raises(FrameError):
        read_frame(io.BytesIO(b"\x00\x00"))


def test_truncated_body_raises():
    buf = encode_frame({"a": 1})[:-2]
    with pytest.raises(FrameError):
        read_frame(io.BytesIO(buf))


def test_oversized_length_rejected():
    hdr = struct.pack(">I", MAX_FRAME_BYTES + 1)
    with pytest.raises(FrameError):
        read_frame(io.BytesIO(hdr + b"x"))


def test_non_json_body_raises():
    body = b"not json"
    buf = struct.pack(">I", len(body)) + body
    with pytest.raises(FrameError):
        read_frame(io.BytesIO(buf))


def test_length_prefix_is_big_endian_u32():
    buf = encode_frame({})
    assert struct.unpack(">I", buf[:4])[0] == len(buf) - 4


def test_two_frames_back_to_back():
    stream = io.BytesIO(encode_frame({"i": 1}) + encode_frame({"i": 2}))
    assert read_frame(stream) == {"i": 1}
    assert read_frame(stream) == {"i": 2}
    assert read_frame(stream) is None


@given(st.binary(max_size=64))
def test_b64_roundtrip(data):
    assert b64d(b64e(data)) == data


def test_decode_body_matches_read_frame():
    payload = {"x": [1, 2, 3]}
    buf = encode_frame(payload)
    assert decode_body(buf[4:]) == payload
