import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ksprecon import wire
from ksprecon.wire import (
    Acquisition,
    Annotations,
    Close,
    Config,
    Image,
    IncompleteMessageError,
    MalformedMessageError,
    ProtocolError,
    Report,
    decode_message,
    encode_message,
    iter_messages,
    read_message,
)


def test_close_golden_bytes():
    assert encode_message(Close()) == bytes.fromhex("00 00 00 00 00 00")
    assert decode_message(bytes(6)) == Close()


def test_acquisition_golden_bytes():
    msg = Acquisition(1, 0, 5, 0, np.array([[1 + 0j, 0 + 1j]]))
    # fixed fields: u32 + 4*u16 + u32 = 16 bytes, samples 2*8 = 16 bytes, payload 32 = 0x20
    expected = bytes.fromhex(
        "02 00 20 00 00 00"
        "01 00 00 00 00 00 05 00 01 00 00 00 02 00 00 00"
        "00 00 80 3f 00 00 00 00 00 00 00 00 00 00 80 3f"
    )
    assert struct.pack("<f", 1.0) == bytes.fromhex("00 00 80 3f")
    assert encode_message(msg) == expected
    assert decode_message(expected) == msg


def test_text_messages():
    assert encode_message(Config("hé")) == b"\x01\x00\x03\x00\x00\x00h\xc3\xa9"
    assert decode_message(encode_message(Report("{}"))) == Report("{}")


def test_image_and_annotation_layout():
    img = Image(3, np.array([[0.5, 1.0]], np.float32))
    data = encode_message(img)
    assert data[:6] == struct.pack("<HI", 3, 8 + 8)
    assert data[6:14] == struct.pack("<HHHH", 3, 1, 2, 0)
    assert data[14:] == struct.pack("<ff", 0.5, 1.0)
    ann = Annotations(2, ((1.0, 2.0, 3.0, 4.0, 0.5, 7),))
    data = encode_message(ann)
    assert len(data) == 6 + 4 + 22
    assert decode_message(data) == ann


f32 = st.floats(width=32, allow_nan=False)
u16 = st.integers(0, 2**16 - 1)


@st.composite
def acquisitions(draw):
    coils = draw(st.integers(1, 8))
    samples = draw(st.integers(0, 64 * 1024 // (8 * coils)))
    raw = draw(st.binary(min_size=8 * coils * samples, max_size=8 * coils * samples))
    data = np.frombuffer(raw, dtype="<f4").copy()
    data[~np.isfinite(data)] = 0  # arbitrary finite samples
    return Acquisition(draw(st.integers(0, 2**32 - 1)), draw(u16), draw(u16), draw(u16),
                       data.view("<c8").reshape(coils, samples))


@st.composite
def images(draw):
    rows, cols = draw(st.integers(0, 64)), draw(st.integers(0, 64))
    px = draw(st.lists(f32, min_size=rows * cols, max_size=rows * cols))
    return Image(draw(u16), np.array(px, np.float32).reshape(rows, cols))


annotation_entries = st.tuples(f32, f32, f32, f32, f32, u16)

messages = st.one_of(
    st.just(Close()),
    st.text(max_size=200).map(Config),
    st.text(max_size=200).map(Report),
    acquisitions(),
    images(),
    st.builds(Annotations, u16, st.lists(annotation_entries, max_size=20).map(tuple)),
)


@settings(max_examples=200, deadline=None)
@given(messages)
def test_round_trip(msg):
    data = encode_message(msg)
    assert len(data) == 6 + struct.unpack_from("<I", data, 2)[0]
    assert decode_message(data) == msg


@settings(max_examples=50, deadline=None)
@given(st.lists(messages, max_size=6))
def test_stream_round_trip(msgs):
    stream = io.BytesIO(b"".join(encode_message(m) for m in msgs))
    assert list(iter_messages(stream)) == msgs


def test_truncated_stream():
    data = encode_message(Acquisition(0, 0, 0, 0, np.ones((2, 4))))
    for cut in (3, 6, len(data) - 1):
        stream = io.BytesIO(data[:cut])
        with pytest.raises(IncompleteMessageError):
            read_message(stream)
    assert read_message(io.BytesIO(b"")) is None


def test_unknown_id():
    with pytest.raises(ProtocolError, match="9"):
        decode_message(struct.pack("<HI", 9, 0))


def test_malformed_payloads():
    good = encode_message(Acquisition(0, 0, 0, 0, np.ones((1, 2))))
    bad = struct.pack("<HI", 2, len(good) - 6 - 8) + good[6:-8]  # drop one sample, keep fields
    with pytest.raises(MalformedMessageError, match="fields imply"):
        decode_message(bad)
    with pytest.raises(MalformedMessageError):
        decode_message(struct.pack("<HI", 0, 1) + b"x")
    with pytest.raises(MalformedMessageError):
        decode_message(struct.pack("<HI", 5, 1) + b"\xff")
    with pytest.raises(MalformedMessageError, match="trailing"):
        decode_message(encode_message(Close()) + b"\x00")


def test_encode_range_checks():
    with pytest.raises(MalformedMessageError):
        encode_message(Acquisition(0, 70000, 0, 0, np.ones((1, 1))))


def test_flags():
    acq = Acquisition(0, 0, 0, wire.FLAG_ACS | wire.FLAG_LAST_IN_SLICE, np.ones((1, 1)))
    assert acq.is_acs and acq.is_last_in_slice
    assert not Acquisition(0, 0, 0, 0, np.ones((1, 1))).is_acs


def test_detection_annotation_conversion():
    from ksprecon.detection import BoundingBox, Detection

    dets = [Detection(4, BoundingBox(1.0, 2.0, 3.0, 4.5), 0.75, 1)]
    msg = decode_message(encode_message(wire.annotations_from_detections(4, dets)))
    assert wire.detections_from_annotations(msg) == dets
