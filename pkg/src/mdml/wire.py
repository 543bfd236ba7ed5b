"""Binary framing, message envelope, chunking, and checksums.

Every producer, consumer, and the service itself speak this frame format:

    ┌───────────┬─────────┬──────────┬──────────┬────────────┬─────────────┬─────────┬─────────┐
    │ magic 4B  │ ver 1B  │ type 1B  │ flags 2B │ hdr_len 4B │ pay_len 4B  │ header  │ payload │
    │ "MDML"    │ =1      │ 1|2      │ BE, =0   │ u32 BE     │ u32 BE      │ JSON    │ raw     │
    └───────────┴─────────┴──────────┴──────────┴────────────┴─────────────┴─────────┴─────────┘

Total encoded size is 16 + hdr_len + pay_len. The header is a UTF-8 JSON
object; payloads are raw bytes, never base64 on the wire. CONTROL frames
(type 1) carry no payload; DATA frames (type 2) carry the message payload.

Data frame header keys: ``topic``, ``key`` (base64, optional), ``ts``
(integer nanoseconds), ``hdr`` (string->string map). Control frame headers
carry ``op`` plus an integer ``cid`` correlation id. Frames pushed by the
service additionally carry ``part``/``off``/``sub`` routing keys.

Chunking and reassembly are client-side: payloads larger than the chunk
size travel as multiple DATA messages tagged with ``chunk.*`` headers and
are rebuilt, checksum-verified, on the consumer.
"""

from __future__ import annotations

import base64
import json
import re
import struct
import time
import uuid
import zlib
from dataclasses import dataclass, field
from typing import Iterator

from .errors import (
    BadMagic,
    ChecksumMismatch,
    ChunkConflict,
    InvalidArgument,
    InvalidName,
    MalformedHeader,
    OversizedPayload,
    UnsupportedVersion,
)

MAGIC = b"MDML"
VERSION = 1

FRAME_CONTROL = 1
FRAME_DATA = 2

HEADER_STRUCT = struct.Struct(">4sBBHII")
FIXED_HEADER_SIZE = HEADER_STRUCT.size  # 16

DEFAULT_MAX_PAYLOAD = 1 << 20  # 1 MiB
DEFAULT_CHUNK_SIZE = 1 << 20
# Frame headers are small routing metadata; cap them well below payloads.
MAX_HEADER_LEN = 1 << 20

# Chunk metadata travels in message headers so plain consumers can inspect parts.
CHUNK_ID = "chunk.id"
CHUNK_IDX = "chunk.idx"
CHUNK_CNT = "chunk.cnt"
CHUNK_TOTAL = "chunk.total"
CHUNK_CRC = "chunk.crc32"
CHUNK_KEYS = (CHUNK_ID, CHUNK_IDX, CHUNK_CNT, CHUNK_TOTAL, CHUNK_CRC)

CLAIM_STORE = "claim.store"
CLAIM_KEY = "claim.key"
CLAIM_SIZE = "claim.size"
CLAIM_CRC = "claim.crc32"
CLAIM_KEYS = (CLAIM_STORE, CLAIM_KEY, CLAIM_SIZE, CLAIM_CRC)

# Namespaced topic: mdml.<namespace>.<device>, with optional extra segments
# so derived names like <topic>.dlq remain addressable.
_TOPIC_RE = re.compile(r"mdml\.[a-z0-9_-]+\.[a-z0-9_-]+(\.[a-z0-9_-]+)*\Z")
_SEGMENT_RE = re.compile(r"[a-z0-9_-]+\Z")


def valid_topic(name: str) -> bool:
    return bool(_TOPIC_RE.match(name))


def check_topic(name: str) -> str:
    if not valid_topic(name):
        raise InvalidName(f"invalid topic name: {name!r}")
    return name


def valid_segment(name: str) -> bool:
    """Validate a namespace or device identifier."""
    return bool(_SEGMENT_RE.match(name))


def crc32_hex(payload: bytes | bytearray | memoryview) -> str:
    """CRC-32/ISO-HDLC of the payload as 8 lowercase hex chars."""
    return format(zlib.crc32(payload) & 0xFFFFFFFF, "08x")


def now_ns() -> int:
    return time.time_ns()


@dataclass
class Frame:
    frame_type: int
    header: dict
    payload: bytes = b""

    def encode(self, max_payload: int | None = DEFAULT_MAX_PAYLOAD) -> bytes:
        return encode_frame(self, max_payload)


def encode_frame(frame: Frame, max_payload: int | None = DEFAULT_MAX_PAYLOAD) -> bytes:
    """Serialize a frame to its exact byte layout."""
    header_bytes = json.dumps(frame.header, separators=(",", ":")).encode("utf-8")
    return encode_frame_parts(frame.frame_type, header_bytes, frame.payload, max_payload)


def encode_frame_parts(
    frame_type: int,
    header_bytes: bytes,
    payload: bytes | memoryview = b"",
    max_payload: int | None = DEFAULT_MAX_PAYLOAD,
) -> bytes:
    pay_len = len(payload)
    if max_payload is not None and pay_len > max_payload:
        raise OversizedPayload(f"payload of {pay_len} bytes exceeds limit of {max_payload}")
    if frame_type == FRAME_CONTROL and pay_len:
        raise MalformedHeader("CONTROL frames carry no payload")
    if len(header_bytes) > MAX_HEADER_LEN:
        raise MalformedHeader(f"header of {len(header_bytes)} bytes exceeds {MAX_HEADER_LEN}")
    head = HEADER_STRUCT.pack(MAGIC, VERSION, frame_type, 0, len(header_bytes), pay_len)
    if pay_len:
        return b"".join((head, header_bytes, payload))
    return head + header_bytes


def split_frame(
    buf: bytes | bytearray | memoryview,
    max_payload: int | None = None,
) -> tuple[int, memoryview, memoryview, int] | None:
    """Split one frame off ``buf`` without parsing the header JSON.

    Returns (frame_type, header_view, payload_view, consumed) or None when
    more bytes are needed. Raises the usual decode errors on garbage input.
    """
    mv = memoryview(buf)
    n = len(mv)
    if n >= 4 and mv[:4] != MAGIC:
        raise BadMagic(f"bad magic {bytes(mv[:4])!r}")
    if n < FIXED_HEADER_SIZE:
        return None
    magic, version, frame_type, flags, hdr_len, pay_len = HEADER_STRUCT.unpack_from(mv)
    if version != VERSION:
        raise UnsupportedVersion(f"frame version {version}, expected {VERSION}")
    if frame_type not in (FRAME_CONTROL, FRAME_DATA):
        raise MalformedHeader(f"unknown frame type {frame_type}")
    if frame_type == FRAME_CONTROL and pay_len:
        raise MalformedHeader("CONTROL frame with nonzero payload length")
    if hdr_len > MAX_HEADER_LEN:
        raise MalformedHeader(f"declared header length {hdr_len} exceeds {MAX_HEADER_LEN}")
    if max_payload is not None and pay_len > max_payload:
        raise OversizedPayload(f"payload of {pay_len} bytes exceeds limit of {max_payload}")
    total = FIXED_HEADER_SIZE + hdr_len + pay_len
    if n < total:
        return None
    header_view = mv[FIXED_HEADER_SIZE:FIXED_HEADER_SIZE + hdr_len]
    payload_view = mv[FIXED_HEADER_SIZE + hdr_len:total]
    return frame_type, header_view, payload_view, total


def parse_header(header_view: bytes | memoryview) -> dict:
    try:
        header = json.loads(bytes(header_view).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeader("header JSON must be an object")
    return header


def decode_frame(
    buf: bytes | bytearray | memoryview,
    max_payload: int | None = None,
) -> tuple[Frame, int] | None:
    """Parse one frame from the start of ``buf``.

    Returns (frame, bytes_consumed), or None when the input is incomplete
    (nothing is consumed in that case).
    """
    part = split_frame(buf, max_payload)
    if part is None:
        return None
    frame_type, header_view, payload_view, consumed = part
    return Frame(frame_type, parse_header(header_view), bytes(payload_view)), consumed


def iter_frames(buf: bytes | bytearray | memoryview) -> Iterator[Frame]:
    """Decode back-to-back frames until the buffer is exhausted."""
    pos = 0
    mv = memoryview(buf)
    while pos < len(mv):
        out = decode_frame(mv[pos:])
        if out is None:
            raise MalformedHeader(f"truncated frame at byte {pos}")
        frame, used = out
        yield frame
        pos += used


@dataclass
class DataMessage:
    """One timestamped, headered payload bound to a topic."""

    topic: str
    payload: bytes
    key: bytes | None = None
    ts_pub: int = 0
    headers: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.ts_pub <= 0:
            self.ts_pub = now_ns()

    def data_header(self) -> dict:
        hdr: dict = {"topic": self.topic, "ts": self.ts_pub, "hdr": self.headers}
        if self.key is not None:
            hdr["key"] = base64.b64encode(self.key).decode("ascii")
        return hdr

    def to_frame(self) -> Frame:
        return Frame(FRAME_DATA, self.data_header(), self.payload)

    def encode(self, max_payload: int | None = DEFAULT_MAX_PAYLOAD) -> bytes:
        header_bytes = json.dumps(self.data_header(), separators=(",", ":")).encode("utf-8")
        return encode_frame_parts(FRAME_DATA, header_bytes, self.payload, max_payload)


def message_frame_parts(
    msg: DataMessage,
    max_payload: int | None = DEFAULT_MAX_PAYLOAD,
) -> tuple[bytes, bytes]:
    """Encode a message as (head, payload) frame parts.

    ``head`` is the fixed header plus header JSON; concatenating the two
    parts yields the complete wire frame.
    """
    pay_len = len(msg.payload)
    if max_payload is not None and pay_len > max_payload:
        raise OversizedPayload(f"payload of {pay_len} bytes exceeds limit of {max_payload}")
    header_bytes = json.dumps(msg.data_header(), separators=(",", ":")).encode("utf-8")
    head = HEADER_STRUCT.pack(MAGIC, VERSION, FRAME_DATA, 0, len(header_bytes), pay_len)
    return head + header_bytes, msg.payload


def message_from_header(header: dict, payload: bytes) -> DataMessage:
    try:
        topic = header["topic"]
        ts = int(header["ts"])
        hdr = header.get("hdr") or {}
        key_b64 = header.get("key")
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeader(f"data frame header missing fields: {exc}") from exc
    key = base64.b64decode(key_b64) if key_b64 is not None else None
    return DataMessage(topic=topic, payload=payload, key=key, ts_pub=ts, headers=dict(hdr))


def frame_to_message(frame: Frame) -> DataMessage:
    if frame.frame_type != FRAME_DATA:
        raise MalformedHeader("not a DATA frame")
    return message_from_header(frame.header, frame.payload)


@dataclass(frozen=True)
class ClaimTicket:
    """Reference to a payload parked in an object store.

    A claim-check message carries these fields in its headers and an empty
    payload; the consumer redeems the ticket transparently.
    """

    store: str
    object_key: str
    size: int
    crc32: str

    def to_headers(self) -> dict[str, str]:
        return {
            CLAIM_STORE: self.store,
            CLAIM_KEY: self.object_key,
            CLAIM_SIZE: str(self.size),
            CLAIM_CRC: self.crc32,
        }

    @classmethod
    def from_headers(cls, headers: dict[str, str]) -> "ClaimTicket":
        try:
            return cls(
                store=headers[CLAIM_STORE],
                object_key=headers[CLAIM_KEY],
                size=int(headers[CLAIM_SIZE]),
                crc32=headers[CLAIM_CRC],
            )
        except (KeyError, ValueError) as exc:
            raise MalformedHeader(f"incomplete claim headers: {exc}") from exc


def is_claim(msg: "DataMessage") -> bool:
    return CLAIM_STORE in msg.headers


def strip_claim_headers(headers: dict[str, str]) -> dict[str, str]:
    return {k: v for k, v in headers.items() if k not in CLAIM_KEYS}


def chunk_message(msg: DataMessage, chunk_size: int = DEFAULT_CHUNK_SIZE) -> list[DataMessage]:
    """Split an oversized payload into ordered, checksummed parts.

    Payloads at or under ``chunk_size`` pass through as the single original
    message with no chunk headers.
    """
    if chunk_size < 1:
        raise InvalidArgument(f"chunk_size must be >= 1, got {chunk_size}")
    if not msg.payload:
        raise InvalidArgument("cannot chunk an empty payload")
    total = len(msg.payload)
    if total <= chunk_size:
        return [msg]
    chunk_id = str(uuid.uuid4())
    crc = crc32_hex(msg.payload)
    count = (total + chunk_size - 1) // chunk_size
    view = memoryview(msg.payload)
    parts = []
    for idx in range(count):
        headers = dict(msg.headers)
        headers[CHUNK_ID] = chunk_id
        headers[CHUNK_IDX] = str(idx)
        headers[CHUNK_CNT] = str(count)
        headers[CHUNK_TOTAL] = str(total)
        headers[CHUNK_CRC] = crc
        parts.append(DataMessage(
            topic=msg.topic,
            payload=bytes(view[idx * chunk_size:(idx + 1) * chunk_size]),
            key=msg.key,
            ts_pub=msg.ts_pub,
            headers=headers,
        ))
    return parts


def is_chunk(msg: DataMessage) -> bool:
    return CHUNK_ID in msg.headers


def strip_chunk_headers(headers: dict[str, str]) -> dict[str, str]:
    return {k: v for k, v in headers.items() if k not in CHUNK_KEYS}


@dataclass
class _PartialSet:
    count: int
    total: int
    crc: str
    first_msg: DataMessage
    parts: dict[int, bytes] = field(default_factory=dict)
    deadline: float = 0.0


class Reassembler:
    """Rebuilds chunked messages from an interleaved stream of parts.

    Confined to a single consumer instance; not thread-safe. Partial sets
    older than ``timeout`` seconds are dropped by :meth:`sweep_expired` to
    bound memory.
    """

    def __init__(self, timeout: float = 60.0, clock=time.monotonic):
        self.timeout = timeout
        self._clock = clock
        self._pending: dict[str, _PartialSet] = {}

    def __len__(self) -> int:
        return len(self._pending)

    def feed(self, msg: DataMessage) -> DataMessage | None:
        """Consume one message; return a completed message or None.

        Unchunked messages pass through unchanged. Chunk parts are buffered
        until all ``chunk.cnt`` of a ``chunk.id`` have arrived, then the
        payload is reassembled in index order and CRC-verified.
        """
        if CHUNK_ID not in msg.headers:
            return msg
        try:
            chunk_id = msg.headers[CHUNK_ID]
            idx = int(msg.headers[CHUNK_IDX])
            count = int(msg.headers[CHUNK_CNT])
            total = int(msg.headers[CHUNK_TOTAL])
            crc = msg.headers[CHUNK_CRC]
        except (KeyError, ValueError) as exc:
            raise MalformedHeader(f"incomplete chunk headers: {exc}") from exc

        pending = self._pending.get(chunk_id)
        if pending is None:
            pending = _PartialSet(count=count, total=total, crc=crc, first_msg=msg)
            self._pending[chunk_id] = pending
        pending.deadline = self._clock() + self.timeout

        if idx in pending.parts:
            if pending.parts[idx] != msg.payload:
                raise ChunkConflict(
                    f"chunk {chunk_id}[{idx}] received twice with different bytes")
            return None
        if count != pending.count or total != pending.total or crc != pending.crc:
            raise ChunkConflict(f"chunk {chunk_id} parts disagree on set metadata")
        pending.parts[idx] = msg.payload

        if len(pending.parts) < pending.count:
            return None

        del self._pending[chunk_id]
        payload = b"".join(pending.parts[i] for i in range(pending.count))
        if len(payload) != pending.total:
            raise ChecksumMismatch(
                f"chunk {chunk_id}: reassembled {len(payload)} bytes, expected {pending.total}")
        actual = crc32_hex(payload)
        if actual != pending.crc:
            raise ChecksumMismatch(
                f"chunk {chunk_id}: crc32 {actual} != declared {pending.crc}")
        first = pending.first_msg
        return DataMessage(
            topic=first.topic,
            payload=payload,
            key=first.key,
            ts_pub=first.ts_pub,
            headers=strip_chunk_headers(first.headers),
        )

    def sweep_expired(self, now: float | None = None) -> list[str]:
        """Drop partial sets past their deadline; returns the expired ids."""
        now = self._clock() if now is None else now
        expired = [cid for cid, p in self._pending.items() if p.deadline <= now]
        for cid in expired:
            del self._pending[cid]
        return expired
