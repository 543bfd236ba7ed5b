"""Agent SDK: producer/consumer clients speaking the wire protocol.

Producers pick a transfer path by payload size: a single message up to the
chunk size, chunked messages up to the coat-check threshold, and a
claim-check ticket (payload parked in the object store) beyond it.
Consumers reassemble chunked messages, verify checksums, and redeem claim
tickets transparently before handing messages to user code.

One agent instance is single-threaded from the user's view; scale out by
running multiple instances sharing a group id. Configuration falls back to
the environment: ``MDML_ADDR``, ``MDML_CHUNK_SIZE``,
``MDML_COATCHECK_THRESHOLD``.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from . import wire
from .connectors import FsObjectStore
from .errors import (
    BrokerUnreachable,
    ChecksumMismatch,
    ChunkConflict,
    ClaimNotFound,
    MdmlError,
    NotConnected,
    StaleGeneration,
    NotAssigned,
    TopicExists,
    error_from_code,
)
from .schema import infer_schema_from_payload

logger = logging.getLogger(__name__)

DEFAULT_ADDR = "127.0.0.1:6365"
DEFAULT_CHUNK_SIZE = 1 << 20
DEFAULT_COATCHECK_THRESHOLD = 32 << 20

ENV_ADDR = "MDML_ADDR"
ENV_CHUNK_SIZE = "MDML_CHUNK_SIZE"
ENV_COATCHECK = "MDML_COATCHECK_THRESHOLD"

DLQ_SUFFIX = ".dlq"
DLQ_ERROR_HEADER = "dlq.error"
DLQ_TOPIC_HEADER = "dlq.topic"

_RECV_CHUNK = 1 << 20

# All socket calls use one short kernel timeout and loop until their own
# deadline. Blocking indefinitely inside recv()/send() is unsafe here: a
# wakeup for data arriving while a call is already parked can be lost
# (observed under emulated network stacks), and per-call settimeout() would
# race between the reader and the heartbeat sender threads.
_IO_SLICE = 0.05


def _resolve_addr(addr: str | None) -> tuple[str, int]:
    addr = addr or os.environ.get(ENV_ADDR) or DEFAULT_ADDR
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


class Connection:
    """Frame transport over one TCP connection with a dedicated reader.

    A background thread drains the socket continuously and routes frames:
    control replies to their waiting request, publish acks to a FIFO, and
    everything else (deliveries, subscription control) to the event queue.
    Draining never pauses on behalf of the application, so broker-side
    bursts can always flow regardless of what the owning thread is doing.
    Writes are locked so the heartbeat thread can share the socket.
    """

    def __init__(self, addr: str | None = None, *, token: str | None = None,
                 connect_timeout: float = 5.0, heartbeat: bool = True):
        host, port = _resolve_addr(addr)
        try:
            self._sock = socket.create_connection((host, port), timeout=connect_timeout)
        except OSError as exc:
            raise BrokerUnreachable(f"cannot reach broker at {host}:{port}: {exc}") from exc
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock.settimeout(_IO_SLICE)
        self.addr = f"{host}:{port}"
        self._rbuf = bytearray()
        self._wlock = threading.Lock()
        self._cids = itertools.count(1)
        self._closed = False
        self._cond = threading.Condition()
        self._events: deque = deque()
        self._acks: deque = deque()
        self._replies: dict[int, dict] = {}
        self._reader_error: Exception | None = None
        self._reader = threading.Thread(target=self._read_loop, daemon=True,
                                        name="mdml-conn-reader")
        self._reader.start()
        self._hb_stop = threading.Event()
        self._hb_thread: threading.Thread | None = None
        hello = self.request("hello", {"token": token} if token else {})
        self.session_id = hello.get("session")
        self.max_frame_payload = int(hello.get("max_frame_payload", wire.DEFAULT_MAX_PAYLOAD))
        hb_secs = float(hello.get("heartbeat_secs", 5.0))
        if heartbeat:
            self._hb_thread = threading.Thread(
                target=self._heartbeat_loop, args=(hb_secs,), daemon=True)
            self._hb_thread.start()

    def _heartbeat_loop(self, interval: float) -> None:
        frame = _control({"op": "heartbeat"})
        while not self._hb_stop.wait(interval):
            try:
                self.send_parts([frame])
            except (OSError, NotConnected):
                return

    # -- sending ----------------------------------------------------------

    def _send_buffer(self, buf) -> None:
        # the short socket timeout slices blocking sends; loop to completion
        view = memoryview(buf)
        while len(view):
            try:
                sent = self._sock.send(view)
            except socket.timeout:
                if self._closed:
                    raise NotConnected("connection closed") from None
                continue
            view = view[sent:]

    def send_parts(self, parts: list) -> None:
        if self._closed:
            raise NotConnected("connection closed")
        with self._wlock:
            try:
                total = sum(len(p) for p in parts)
                if total <= 262_144:
                    self._send_buffer(b"".join(
                        bytes(p) if not isinstance(p, bytes) else p for p in parts))
                else:
                    for p in parts:
                        self._send_buffer(p)
            except OSError as exc:
                self._closed = True
                raise NotConnected(f"send failed: {exc}") from exc

    # -- reader thread ------------------------------------------------------

    def _read_loop(self) -> None:
        try:
            while not self._closed:
                try:
                    chunk = self._sock.recv(_RECV_CHUNK)
                except socket.timeout:
                    continue
                except OSError as exc:
                    raise NotConnected(f"recv failed: {exc}") from exc
                if not chunk:
                    raise NotConnected("connection closed by broker")
                self._rbuf += chunk
                while True:
                    frame = self._parse_one()
                    if frame is None:
                        break
                    self._dispatch(frame)
        except Exception as exc:
            self._closed = True
            with self._cond:
                self._reader_error = exc
                self._cond.notify_all()

    def _parse_one(self):
        buf = self._rbuf
        n = len(buf)
        if n >= 4 and bytes(buf[:4]) != wire.MAGIC:
            raise wire.BadMagic(f"bad magic {bytes(buf[:4])!r}")
        if n < wire.FIXED_HEADER_SIZE:
            return None
        _, version, ftype, _, hdr_len, pay_len = wire.HEADER_STRUCT.unpack_from(buf)
        if version != wire.VERSION:
            raise wire.UnsupportedVersion(f"frame version {version}")
        total = wire.FIXED_HEADER_SIZE + hdr_len + pay_len
        if n < total:
            return None
        mv = memoryview(buf)
        blob = bytes(mv[:total])
        mv.release()
        del buf[:total]
        header = wire.parse_header(blob[wire.FIXED_HEADER_SIZE:wire.FIXED_HEADER_SIZE + hdr_len])
        payload = blob[wire.FIXED_HEADER_SIZE + hdr_len:]
        return ftype, header, payload

    def _dispatch(self, frame) -> None:
        ftype, header, _payload = frame
        with self._cond:
            if ftype == wire.FRAME_CONTROL:
                op = header.get("op")
                if op == "reply":
                    self._replies[header.get("cid")] = frame
                elif op == "pub.ack":
                    self._acks.append(frame)
                else:
                    self._events.append(frame)
            else:
                self._events.append(frame)
            self._cond.notify_all()

    def _check_alive(self) -> None:
        if self._reader_error is not None:
            raise self._reader_error
        if self._closed:
            raise NotConnected("connection closed")

    # -- frame consumption ---------------------------------------------------

    def next_event(self, timeout: float | None = None):
        """Next delivery or subscription-control frame."""
        deadline = time.monotonic() + timeout if timeout is not None else None
        with self._cond:
            while not self._events:
                self._check_alive()
                remaining = None
                if deadline is not None:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise TimeoutError("timed out waiting for a frame")
                self._cond.wait(remaining)
            return self._events.popleft()

    def request(self, op: str, data: dict | None = None,
                timeout: float | None = 30.0) -> dict | list | None:
        cid = next(self._cids)
        header: dict = {"op": op, "cid": cid}
        if data is not None:
            header["data"] = data
        self.send_parts([_control(header)])
        deadline = time.monotonic() + timeout if timeout is not None else None
        with self._cond:
            while cid not in self._replies:
                self._check_alive()
                remaining = None
                if deadline is not None:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise TimeoutError(f"no reply to {op} within {timeout}s")
                self._cond.wait(remaining)
            _, hdr, _ = self._replies.pop(cid)
        if hdr.get("ok"):
            return hdr.get("data")
        err = hdr.get("error") or {}
        raise error_from_code(err.get("code", "MdmlError"),
                              err.get("message", "request failed"))

    def await_pub_acks(self, count: int,
                       timeout: float | None = 120.0) -> list[tuple[int, int]]:
        """Collect ``count`` FIFO publish acks."""
        acks: list[tuple[int, int]] = []
        first_error: MdmlError | None = None
        deadline = time.monotonic() + timeout if timeout is not None else None
        while len(acks) < count:
            with self._cond:
                while not self._acks:
                    self._check_alive()
                    remaining = None
                    if deadline is not None:
                        remaining = deadline - time.monotonic()
                        if remaining <= 0:
                            raise TimeoutError(
                                f"got {len(acks)}/{count} publish acks")
                    self._cond.wait(remaining)
                _, hdr, _ = self._acks.popleft()
            if hdr.get("ok"):
                d = hdr.get("data") or {}
                acks.append((int(d.get("partition", -1)), int(d.get("offset", -1))))
            else:
                err = hdr.get("error") or {}
                exc = error_from_code(err.get("code", "MdmlError"),
                                      err.get("message", "publish failed"))
                if first_error is None:
                    first_error = exc
                acks.append((-1, -1))
        if first_error is not None:
            raise first_error
        return acks

    def close(self) -> None:
        self._hb_stop.set()
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        if self._reader is not threading.current_thread():
            self._reader.join(timeout=2)
        self._sock.close()
        with self._cond:
            self._cond.notify_all()


def _control(header: dict) -> bytes:
    body = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return wire.HEADER_STRUCT.pack(wire.MAGIC, wire.VERSION, wire.FRAME_CONTROL,
                                   0, len(body), 0) + body


@dataclass
class PublishReceipt:
    topic: str
    path: str  # "plain" | "chunked" | "claim-check"
    message_count: int
    acks: list[tuple[int, int]] = field(default_factory=list)
    ticket: wire.ClaimTicket | None = None

    @property
    def partition(self) -> int:
        return self.acks[-1][0]

    @property
    def offset(self) -> int:
        return self.acks[-1][1]


class BaseAgent:
    """Connection plus the produce path and control-op helpers."""

    def __init__(self, addr: str | None = None, *,
                 chunk_size: int | None = None,
                 coat_check_threshold: int | None = None,
                 object_store_dir: str | None = None,
                 token: str | None = None,
                 heartbeat: bool = True):
        self.chunk_size = int(chunk_size if chunk_size is not None
                              else os.environ.get(ENV_CHUNK_SIZE, DEFAULT_CHUNK_SIZE))
        self.coat_check_threshold = int(
            coat_check_threshold if coat_check_threshold is not None
            else os.environ.get(ENV_COATCHECK, DEFAULT_COATCHECK_THRESHOLD))
        self.conn = Connection(addr, token=token, heartbeat=heartbeat)
        self.chunk_size = min(self.chunk_size, self.conn.max_frame_payload)
        self._object_store_dir = object_store_dir
        self._object_store: FsObjectStore | None = None

    # -- plumbing -----------------------------------------------------------

    def _store(self) -> FsObjectStore:
        if self._object_store is None:
            root = self._object_store_dir
            if root is None:
                info = self.conn.request("store.info")
                root = info["root"]
            self._object_store = FsObjectStore(root)
        return self._object_store

    def close(self) -> None:
        self.conn.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- produce ------------------------------------------------------------

    def produce(self, topic: str, payload: bytes, headers: dict[str, str] | None = None,
                key: bytes | None = None) -> PublishReceipt:
        """Publish a payload, choosing plain/chunked/claim-check by size."""
        headers = dict(headers or {})
        payload = bytes(payload)
        if len(payload) > self.coat_check_threshold:
            ticket = self._store().put(payload)
            headers.update(ticket.to_headers())
            msg = wire.DataMessage(topic=topic, payload=b"", key=key, headers=headers)
            acks = self._publish_messages([msg])
            return PublishReceipt(topic, "claim-check", 1, acks, ticket=ticket)
        msg = wire.DataMessage(topic=topic, payload=payload, key=key, headers=headers)
        if len(payload) > self.chunk_size:
            parts = wire.chunk_message(msg, self.chunk_size)
            acks = self._publish_messages(parts)
            return PublishReceipt(topic, "chunked", len(parts), acks)
        acks = self._publish_messages([msg])
        return PublishReceipt(topic, "plain", 1, acks)

    def _publish_messages(self, messages: list[wire.DataMessage]) -> list[tuple[int, int]]:
        parts: list = []
        for m in messages:
            head, payload = wire.message_frame_parts(m, self.conn.max_frame_payload)
            parts.append(head)
            if payload:
                parts.append(payload)
        self.conn.send_parts(parts)
        return self.conn.await_pub_acks(len(messages))

    # -- admin / control ------------------------------------------------------

    def create_topic(self, name: str, partitions: int | None = None) -> dict:
        data: dict = {"name": name}
        if partitions is not None:
            data["partitions"] = partitions
        return self.conn.request("topic.create", data)

    def list_registry(self, kind: str):
        return self.conn.request("list", {"kind": kind})

    def attach_schema(self, topic: str, sample_payload: bytes,
                      enforce: bool = False) -> dict:
        body = infer_schema_from_payload(sample_payload)
        return self.conn.request("schema.attach",
                                 {"topic": topic, "body": body, "enforce": enforce})

    def experiment_start(self, topics: list[str]) -> dict:
        return self.conn.request("experiment.start", {"topics": topics})

    def experiment_stop(self, experiment_id: str) -> dict:
        return self.conn.request("experiment.stop", {"experiment_id": experiment_id})

    def experiment_replay(self, experiment_id: str | None = None, *,
                          path: str | None = None, speed: float = 1.0,
                          target: dict[str, str] | None = None,
                          timeout: float | None = None) -> dict:
        data: dict = {"speed": speed}
        if experiment_id is not None:
            data["experiment_id"] = experiment_id
        if path is not None:
            data["path"] = str(path)
        if target:
            data["target"] = target
        return self.conn.request("experiment.replay", data, timeout=timeout)

    def connector_create(self, config: dict) -> dict:
        return self.conn.request("connector.create", {"config": config})

    def connector_delete(self, name: str) -> dict:
        return self.conn.request("connector.delete", {"name": name})


class ProducerAgent(BaseAgent):
    """Instrument-side agent: registers a device, streams its data."""

    def __init__(self, addr: str | None = None, **kwargs):
        super().__init__(addr, **kwargs)
        self.registration: dict | None = None

    @property
    def topic(self) -> str | None:
        return self.registration["topic"] if self.registration else None

    def register(self, namespace: str, device: str,
                 schema: dict | None = None, enforce: bool = False) -> dict:
        data: dict = {"namespace": namespace, "device": device}
        if schema is not None:
            data["schema"] = schema
            data["enforce"] = enforce
        self.registration = self.conn.request("register", data)
        return self.registration

    def produce(self, topic: str | None = None, payload: bytes = b"",
                headers: dict[str, str] | None = None,
                key: bytes | None = None) -> PublishReceipt:
        if topic is None:
            if self.registration is None:
                raise NotConnected("producer has no registration and no explicit topic")
            topic = self.registration["topic"]
        return super().produce(topic, payload, headers, key)


def _default_on_error(exc: Exception, context: dict) -> None:
    logger.warning("consume error %s (%s)", exc, context)


class ConsumerAgent(BaseAgent):
    """Analysis-side agent: subscribes, reassembles, redeems claims."""

    def __init__(self, addr: str | None = None, *, group_id: str | None = None,
                 reassembly_timeout: float = 60.0,
                 on_error=None, **kwargs):
        super().__init__(addr, **kwargs)
        self.group_id = group_id
        self.on_error = on_error or _default_on_error
        self._reassembler = wire.Reassembler(timeout=reassembly_timeout)
        self.sub_id: str | None = None
        self.generation = 0
        self.assignment: list[tuple[str, int]] = []
        self._sub_open = False
        self._chunk_first: dict[str, tuple[str, int, int]] = {}
        self._last_offsets: dict[tuple[str, int], int] = {}
        self._committed: dict[tuple[str, int], int] = {}
        self._events = 0

    # -- subscription ---------------------------------------------------------

    def subscribe(self, topics: list[str] | str, start="latest",
                  mode: str | tuple = "indefinite") -> dict:
        if isinstance(topics, str):
            topics = [topics]
        mode_doc = self._mode_doc(mode)
        data = {
            "topics": topics,
            "start": _start_doc(start),
            "mode": mode_doc,
        }
        if self.group_id:
            data["group"] = self.group_id
        reply = self.conn.request("subscribe", data)
        self.sub_id = reply["sub"]
        self.generation = int(reply.get("generation", 0))
        self.assignment = [tuple(pair) for pair in reply.get("assignment", [])]
        self._sub_open = True
        return reply

    @staticmethod
    def _mode_doc(mode) -> dict:
        if mode == "indefinite":
            return {"kind": "indefinite"}
        if isinstance(mode, tuple) and len(mode) == 2:
            kind, arg = mode
            if kind == "max_count":
                return {"kind": "max_count", "n": int(arg)}
            if kind == "idle_timeout":
                return {"kind": "idle_timeout", "secs": float(arg)}
        raise ValueError(f"bad mode: {mode!r}")

    def unsubscribe(self) -> None:
        if self.sub_id and self._sub_open:
            try:
                self.conn.request("unsubscribe", {"sub": self.sub_id})
            except MdmlError:
                pass
        self._sub_open = False

    # -- consumption ------------------------------------------------------------

    def consume(self, timeout: float | None = None, auto_commit: bool = True):
        """Yield reassembled, claim-resolved messages until the stream ends.

        Messages carry ``partition`` and ``offset`` attributes (of their
        final wire part). With a group subscription and ``auto_commit``,
        each message is committed when control returns to the generator,
        i.e. after the caller finished handling it.
        """
        if not self._sub_open:
            raise NotConnected("subscribe first")
        pending_commit: tuple[str, int] | None = None
        while self._sub_open:
            if pending_commit is not None and auto_commit:
                self._commit_through(*pending_commit)
                pending_commit = None
            try:
                ftype, header, payload = self.conn.next_event(timeout)
            except TimeoutError:
                return
            if ftype == wire.FRAME_CONTROL:
                self._handle_control(header)
                continue
            out = self._ingest(header, payload)
            if out is None:
                continue
            pending_commit = (out.topic, out.partition)
            yield out
        # fell out due to sub.end: commit whatever was handled last
        if pending_commit is not None and auto_commit:
            self._commit_through(*pending_commit)

    def consume_raw(self, timeout: float | None = None):
        """Yield wire-level messages as delivered: chunk parts stay parts,
        claim tickets stay tickets. No commits are issued."""
        if not self._sub_open:
            raise NotConnected("subscribe first")
        while self._sub_open:
            try:
                ftype, header, payload = self.conn.next_event(timeout)
            except TimeoutError:
                return
            if ftype == wire.FRAME_CONTROL:
                self._handle_control(header)
                continue
            msg = wire.message_from_header(header, payload)
            msg.partition = int(header.get("part", -1))
            msg.offset = int(header.get("off", -1))
            yield msg

    def _handle_control(self, header: dict) -> None:
        op = header.get("op")
        data = header.get("data") or {}
        if op == "sub.assign" and data.get("sub") == self.sub_id:
            self.generation = int(data.get("generation", self.generation))
            self.assignment = [tuple(pair) for pair in data.get("assignment", [])]
        elif op == "sub.end" and data.get("sub") == self.sub_id:
            self._sub_open = False
        elif op == "reply":
            logger.debug("dropping stray reply cid=%s", header.get("cid"))

    def _ingest(self, header: dict, payload: bytes) -> wire.DataMessage | None:
        msg = wire.message_from_header(header, payload)
        partition = int(header.get("part", -1))
        offset = int(header.get("off", -1))
        pair = (msg.topic, partition)
        self._last_offsets[pair] = offset
        chunk_id = msg.headers.get(wire.CHUNK_ID)
        if chunk_id is not None and chunk_id not in self._chunk_first:
            self._chunk_first[chunk_id] = (msg.topic, partition, offset)
        self._events += 1
        if self._events % 256 == 0:
            self._reassembler.sweep_expired()
        try:
            out = self._reassembler.feed(msg)
        except (ChecksumMismatch, ChunkConflict) as exc:
            self._chunk_first.pop(chunk_id, None)
            self.on_error(exc, {"topic": msg.topic, "partition": partition})
            return None
        if out is None:
            return None
        if chunk_id is not None:
            self._chunk_first.pop(chunk_id, None)
        if wire.is_claim(out):
            try:
                out = self._resolve_claim(out)
            except (ClaimNotFound, ChecksumMismatch) as exc:
                self.on_error(exc, {"topic": msg.topic, "partition": partition})
                return None
        out.partition = partition
        out.offset = offset
        return out

    def _resolve_claim(self, msg: wire.DataMessage) -> wire.DataMessage:
        ticket = wire.ClaimTicket.from_headers(msg.headers)
        payload = self._store().get(ticket)
        return wire.DataMessage(
            topic=msg.topic,
            payload=payload,
            key=msg.key,
            ts_pub=msg.ts_pub,
            headers=wire.strip_claim_headers(msg.headers),
        )

    def _commit_through(self, topic: str, partition: int) -> None:
        if not self.group_id or self.sub_id is None:
            return
        pair = (topic, partition)
        last = self._last_offsets.get(pair)
        if last is None:
            return
        floor = last + 1
        for (t, p, first_off) in self._chunk_first.values():
            if (t, p) == pair:
                floor = min(floor, first_off)
        if self._committed.get(pair, -1) >= floor:
            return
        try:
            self.conn.request("commit", {
                "sub": self.sub_id, "topic": topic, "partition": partition,
                "offset": floor, "generation": self.generation,
            })
            self._committed[pair] = floor
        except (StaleGeneration, NotAssigned):
            pass  # rebalanced away; the new assignee will redeliver

    # -- analysis loop ------------------------------------------------------------

    def run_analysis_loop(self, handler, result_topic: str | None = None,
                          retries: int = 3, timeout: float | None = None) -> dict:
        """Consume, run ``handler`` per message, publish results, commit after.

        Handler failures retry up to ``retries`` times, then the message is
        dead-lettered to ``<topic>.dlq`` and skipped. Offsets commit only
        after handling (at-least-once).
        """
        stats = {"handled": 0, "failed": 0, "dead_lettered": 0, "results": 0}
        dlq_ready: set[str] = set()
        for msg in self.consume(timeout=timeout, auto_commit=True):
            result = None
            for attempt in range(retries + 1):
                try:
                    result = handler(msg)
                    stats["handled"] += 1
                    break
                except Exception as exc:
                    stats["failed"] += 1
                    if attempt == retries:
                        self._dead_letter(msg, exc, dlq_ready)
                        stats["dead_lettered"] += 1
                        result = None
            if result is not None and result_topic is not None:
                payload = result if isinstance(result, (bytes, bytearray)) else None
                if payload is not None:
                    self.produce(result_topic, bytes(payload))
                elif isinstance(result, wire.DataMessage):
                    self.produce(result_topic, result.payload,
                                 headers=result.headers, key=result.key)
                else:
                    self.produce(result_topic, json.dumps(result).encode("utf-8"),
                                 headers={"content-type": "application/json"})
                stats["results"] += 1
        return stats

    def _dead_letter(self, msg: wire.DataMessage, exc: Exception,
                     dlq_ready: set[str]) -> None:
        dlq_topic = msg.topic + DLQ_SUFFIX
        if dlq_topic not in dlq_ready:
            try:
                self.create_topic(dlq_topic)
            except TopicExists:
                pass
            dlq_ready.add(dlq_topic)
        headers = dict(msg.headers)
        headers[DLQ_ERROR_HEADER] = repr(exc)
        headers[DLQ_TOPIC_HEADER] = msg.topic
        self.produce(dlq_topic, msg.payload, headers=headers, key=msg.key)

    def close(self) -> None:
        try:
            self.unsubscribe()
        except (MdmlError, OSError):
            pass
        super().close()


def _start_doc(start) -> dict:
    from .broker import StartPosition
    return StartPosition.parse(start).to_json()
