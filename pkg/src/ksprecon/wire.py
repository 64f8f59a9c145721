"""Binary message framing shared by the server, the client and dataset files.

Every message is a little-endian header ``<u16 id, u32 payload_length>``
followed by the payload. A dataset file is just a sequence of messages.

    id  message      payload
    0   Close        (empty)
    1   Config       UTF-8 text
    2   Acquisition  u32 scan, u16 slice, u16 line, u16 coils, u16 flags, u32 samples,
                     coils*samples * (f32 re, f32 im)
    3   Image        u16 slice, u16 rows, u16 cols, u16 pixel_type, rows*cols * f32
    4   Annotations  u16 slice, u16 count, count * (5 * f32, u16 class)
    5   Report       UTF-8 text
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator, Optional, Tuple, Union

import numpy as np

HEADER = struct.Struct("<HI")
ACQ_HEADER = struct.Struct("<IHHHHI")
IMAGE_HEADER = struct.Struct("<HHHH")
ANN_HEADER = struct.Struct("<HH")
ANN_ENTRY = struct.Struct("<fffffH")

ID_CLOSE, ID_CONFIG, ID_ACQUISITION, ID_IMAGE, ID_ANNOTATIONS, ID_REPORT = range(6)

FLAG_ACS = 1 << 0
FLAG_LAST_IN_SLICE = 1 << 1

PIXEL_F32_MAGNITUDE = 0


class WireError(Exception):
    pass


class ProtocolError(WireError):
    """Unknown message id or a message arriving out of session order."""


class IncompleteMessageError(WireError):
    """The stream ended inside a header or payload."""


class MalformedMessageError(WireError):
    """Header and payload disagree, or a field is out of range."""


@dataclass(frozen=True)
class Close:
    message_id = ID_CLOSE


@dataclass(frozen=True)
class Config:
    text: str
    message_id = ID_CONFIG


@dataclass(frozen=True)
class Report:
    text: str
    message_id = ID_REPORT


@dataclass(frozen=True, eq=False)
class Acquisition:
    """One phase-encode line for all coils; ``data`` is (num_coils, num_samples)."""

    scan_counter: int
    slice_index: int
    line_index: int
    flags: int
    data: np.ndarray = field(repr=False)
    message_id = ID_ACQUISITION

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex64)
        if data.ndim != 2:
            raise MalformedMessageError(f"acquisition data must be 2-D, got {data.shape}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def num_coils(self) -> int:
        return self.data.shape[0]

    @property
    def num_samples(self) -> int:
        return self.data.shape[1]

    @property
    def is_acs(self) -> bool:
        return bool(self.flags & FLAG_ACS)

    @property
    def is_last_in_slice(self) -> bool:
        return bool(self.flags & FLAG_LAST_IN_SLICE)

    def __eq__(self, other):
        if not isinstance(other, Acquisition):
            return NotImplemented
        return (
            (self.scan_counter, self.slice_index, self.line_index, self.flags)
            == (other.scan_counter, other.slice_index, other.line_index, other.flags)
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True, eq=False)
class Image:
    slice_index: int
    pixels: np.ndarray = field(repr=False)
    pixel_type: int = PIXEL_F32_MAGNITUDE
    message_id = ID_IMAGE
    # in-process extras (reference image, mask, ...); never serialized
    meta: Optional[dict] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.ndim != 2:
            raise MalformedMessageError(f"image pixels must be 2-D, got {pixels.shape}")
        pixels.flags.writeable = False
        object.__setattr__(self, "pixels", pixels)

    @property
    def rows(self) -> int:
        return self.pixels.shape[0]

    @property
    def cols(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return (
            self.slice_index == other.slice_index
            and self.pixel_type == other.pixel_type
            and self.pixels.shape == other.pixels.shape
            and self.pixels.tobytes() == other.pixels.tobytes()
        )


AnnotationEntry = Tuple[float, float, float, float, float, int]


@dataclass(frozen=True)
class Annotations:
    """Detections for one slice as (x0, y0, x1, y1, confidence, class_id) tuples."""

    slice_index: int
    entries: Tuple[AnnotationEntry, ...] = ()
    message_id = ID_ANNOTATIONS


GadgetMessage = Union[Close, Config, Acquisition, Image, Annotations, Report]


def _check_u16(name: str, v: int):
    if not 0 <= v < 1 << 16:
        raise MalformedMessageError(f"{name}={v} does not fit in u16")


def encode_payload(msg) -> bytes:
    if isinstance(msg, Close):
        return b""
    if isinstance(msg, (Config, Report)):
        return msg.text.encode("utf-8")
    if isinstance(msg, Acquisition):
        for name in ("slice_index", "line_index", "flags"):
            _check_u16(name, getattr(msg, name))
        _check_u16("num_coils", msg.num_coils)
        head = ACQ_HEADER.pack(
            msg.scan_counter, msg.slice_index, msg.line_index, msg.num_coils, msg.flags, msg.num_samples
        )
        return head + msg.data.astype("<c8").tobytes()
    if isinstance(msg, Image):
        _check_u16("slice_index", msg.slice_index)
        _check_u16("rows", msg.rows)
        _check_u16("cols", msg.cols)
        head = IMAGE_HEADER.pack(msg.slice_index, msg.rows, msg.cols, msg.pixel_type)
        return head + msg.pixels.astype("<f4").tobytes()
    if isinstance(msg, Annotations):
        _check_u16("slice_index", msg.slice_index)
        _check_u16("count", len(msg.entries))
        parts = [ANN_HEADER.pack(msg.slice_index, len(msg.entries))]
        parts += [ANN_ENTRY.pack(*e) for e in msg.entries]
        return b"".join(parts)
    raise TypeError(f"not a gadget message: {type(msg).__name__}")


def encode_message(msg) -> bytes:
    payload = encode_payload(msg)
    return HEADER.pack(msg.message_id, len(payload)) + payload


def decode_payload(message_id: int, payload: bytes):
    n = len(payload)
    if message_id == ID_CLOSE:
        if n:
            raise MalformedMessageError(f"Close carries {n} payload bytes")
        return Close()
    if message_id in (ID_CONFIG, ID_REPORT):
        try:
            text = payload.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedMessageError(f"invalid UTF-8 in text payload: {exc}") from None
        return Config(text) if message_id == ID_CONFIG else Report(text)
    if message_id == ID_ACQUISITION:
        if n < ACQ_HEADER.size:
            raise MalformedMessageError(f"acquisition payload of {n} bytes is shorter than its header")
        scan, sl, line, coils, flags, samples = ACQ_HEADER.unpack_from(payload)
        expected = ACQ_HEADER.size + 8 * coils * samples
        if n != expected:
            raise MalformedMessageError(f"acquisition payload is {n} bytes, fields imply {expected}")
        data = np.frombuffer(payload, dtype="<c8", offset=ACQ_HEADER.size).reshape(coils, samples)
        return Acquisition(scan, sl, line, flags, data)
    if message_id == ID_IMAGE:
        if n < IMAGE_HEADER.size:
            raise MalformedMessageError(f"image payload of {n} bytes is shorter than its header")
        sl, rows, cols, ptype = IMAGE_HEADER.unpack_from(payload)
        if ptype != PIXEL_F32_MAGNITUDE:
            raise MalformedMessageError(f"unsupported pixel_type {ptype}")
        expected = IMAGE_HEADER.size + 4 * rows * cols
        if n != expected:
            raise MalformedMessageError(f"image payload is {n} bytes, fields imply {expected}")
        pixels = np.frombuffer(payload, dtype="<f4", offset=IMAGE_HEADER.size).reshape(rows, cols)
        return Image(sl, pixels, ptype)
    if message_id == ID_ANNOTATIONS:
        if n < ANN_HEADER.size:
            raise MalformedMessageError(f"annotations payload of {n} bytes is shorter than its header")
        sl, count = ANN_HEADER.unpack_from(payload)
        expected = ANN_HEADER.size + ANN_ENTRY.size * count
        if n != expected:
            raise MalformedMessageError(f"annotations payload is {n} bytes, fields imply {expected}")
        entries = tuple(ANN_ENTRY.iter_unpack(payload[ANN_HEADER.size :]))
        return Annotations(sl, entries)
    raise ProtocolError(f"unknown message id {message_id}")


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_message(stream: BinaryIO):
    """Read one message; return None on a clean end of stream at a boundary."""
    head = _read_exact(stream, HEADER.size)
    if not head:
        return None
    if len(head) < HEADER.size:
        raise IncompleteMessageError(f"stream ended after {len(head)} of {HEADER.size} header bytes")
    message_id, length = HEADER.unpack(head)
    if message_id > ID_REPORT:
        raise ProtocolError(f"unknown message id {message_id}")
    payload = _read_exact(stream, length)
    if len(payload) < length:
        raise IncompleteMessageError(
            f"stream ended after {len(payload)} of {length} payload bytes (message id {message_id})"
        )
    return decode_payload(message_id, payload)


def decode_message(data: bytes):
    """Decode exactly one message from ``data``; trailing bytes are an error."""
    stream = io.BytesIO(data)
    msg = read_message(stream)
    if msg is None:
        raise IncompleteMessageError("no bytes to decode")
    if stream.tell() != len(data):
        raise MalformedMessageError(f"{len(data) - stream.tell()} trailing bytes after message")
    return msg


def iter_messages(stream: BinaryIO) -> Iterator:
    while True:
        msg = read_message(stream)
        if msg is None:
            return
        yield msg


def annotations_from_detections(slice_index: int, dets) -> Annotations:
    entries = tuple(
        (d.box.x0, d.box.y0, d.box.x1, d.box.y1, d.confidence, d.class_id) for d in dets
    )
    return Annotations(slice_index, entries)


def detections_from_annotations(msg: Annotations):
    from .detection import BoundingBox, Detection

    return [
        Detection(msg.slice_index, BoundingBox(x0, y0, x1, y1), conf, cls)
        for x0, y0, x1, y1, conf, cls in msg.entries
    ]
