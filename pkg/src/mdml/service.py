"""The network-facing broker process.

Accepts agent connections over TCP, speaks the wire frame protocol, and
serves registration, publish/subscribe/fetch, experiment control, and
connector control. One asyncio loop runs all sessions; appends and reads
go through the broker engine, which is also shared with connector threads
and replay workers, so every loop-side wakeup crossing is marshalled with
``call_soon_threadsafe``.

Server-pushed data frames carry three extra header keys over published
ones: ``part`` (partition), ``off`` (offset), and ``sub`` (subscription
id). Control replies are ``{"op": "reply", "cid": N, "ok": ...}``; publish
acknowledgements are ``pub.ack`` frames matched FIFO per session.
"""

from __future__ import annotations

import asyncio
import base64
import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from . import schema as schema_mod
from . import wire
from .broker import BrokerEngine, RoundRobinCursor, StartPosition
from .connectors import ConnectorManager, FsObjectStore
from .errors import (
    AlreadyRegistered,
    AuthFailed,
    BadMagic,
    InvalidArgument,
    InvalidName,
    MalformedHeader,
    MdmlError,
    OffsetOutOfRange,
    OversizedPayload,
    UnknownExperiment,
    UnknownTopic,
    UnsupportedVersion,
)
from .experiment import ExperimentManager, load_archive, replay

logger = logging.getLogger(__name__)

DEFAULT_PORT = 6365
READ_LIMIT = 4 << 20
PUMP_BATCH_RECORDS = 256
PUMP_BATCH_BYTES = 4 << 20
MISSED_HEARTBEATS = 3


@dataclass
class ServiceConfig:
    listen_addr: str = f"127.0.0.1:{DEFAULT_PORT}"
    data_dir: str = "./mdml-data"
    max_frame_payload: int = wire.DEFAULT_MAX_PAYLOAD
    default_partitions: int = 8
    heartbeat_secs: float = 5.0
    archive_dir: str | None = None
    object_store_dir: str | None = None
    auth_token: str | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> "ServiceConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "ServiceConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen_addr.rpartition(":")
        return host or "127.0.0.1", int(port)

    def resolved_archive_dir(self) -> Path:
        return Path(self.archive_dir) if self.archive_dir else Path(self.data_dir) / "_archives"

    def resolved_object_store_dir(self) -> Path:
        return (Path(self.object_store_dir) if self.object_store_dir
                else Path(self.data_dir) / "_objects")


@dataclass
class DeviceRegistration:
    device_id: str
    namespace: str
    topic: str
    registered_at: int
    schema_id: str | None = None

    def to_json(self) -> dict:
        return {
            "device_id": self.device_id,
            "namespace": self.namespace,
            "topic": self.topic,
            "registered_at": self.registered_at,
            "schema_id": self.schema_id,
        }


class Registry:
    """Devices and schemas, persisted as one JSON document."""

    def __init__(self, path: Path):
        self.path = path
        self.devices: dict[tuple[str, str], DeviceRegistration] = {}
        self.schemas: dict[str, list[schema_mod.SchemaDoc]] = {}
        if path.exists():
            doc = json.loads(path.read_text())
            for d in doc.get("devices", []):
                reg = DeviceRegistration(
                    d["device_id"], d["namespace"], d["topic"],
                    d["registered_at"], d.get("schema_id"))
                self.devices[(reg.namespace, reg.device_id)] = reg
            for topic, docs in doc.get("schemas", {}).items():
                self.schemas[topic] = [schema_mod.SchemaDoc.from_json(s) for s in docs]

    def _persist(self) -> None:
        doc = {
            "devices": [r.to_json() for r in self.devices.values()],
            "schemas": {t: [s.to_json() for s in docs] for t, docs in self.schemas.items()},
        }
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=2))
        tmp.replace(self.path)

    def add_schema(self, topic: str, body: dict, enforce: bool) -> schema_mod.SchemaDoc:
        docs = self.schemas.setdefault(topic, [])
        current = docs[-1] if docs else None
        if current is not None and current.body == body and current.enforce == enforce:
            return current
        doc = schema_mod.SchemaDoc(
            schema_id=f"{topic}/v{len(docs) + 1}",
            topic=topic, body=body, version=len(docs) + 1, enforce=enforce)
        docs.append(doc)
        self._persist()
        return doc

    def enforced_schema(self, topic: str) -> schema_mod.SchemaDoc | None:
        docs = self.schemas.get(topic)
        if docs and docs[-1].enforce:
            return docs[-1]
        return None

    def register(self, namespace: str, device_id: str,
                 schema_body: dict | None, enforce: bool) -> DeviceRegistration:
        if not wire.valid_segment(namespace) or not wire.valid_segment(device_id):
            raise InvalidName(f"bad namespace/device: {namespace!r}/{device_id!r}")
        topic = f"mdml.{namespace}.{device_id}"
        existing = self.devices.get((namespace, device_id))
        if existing is not None:
            current = self.schemas.get(topic)
            current_body = current[-1].body if current else None
            if schema_body is not None and current_body != schema_body:
                raise AlreadyRegistered(
                    f"{namespace}/{device_id} already registered with a different schema")
            return existing
        reg = DeviceRegistration(device_id, namespace, topic, time.time_ns())
        if schema_body is not None:
            reg.schema_id = self.add_schema(topic, schema_body, enforce).schema_id
        self.devices[(namespace, device_id)] = reg
        self._persist()
        return reg


@dataclass
class Subscription:
    sub_id: str
    session: "Session"
    topics: list[str]
    start: StartPosition
    mode_kind: str = "indefinite"
    mode_n: int | None = None
    mode_secs: float | None = None
    group_id: str | None = None
    member_id: str | None = None
    generation: int = 0
    cursors: dict[tuple[str, int], int] = field(default_factory=dict)
    remaining: int | None = None
    wake: asyncio.Event = field(default_factory=asyncio.Event)
    closed: bool = False
    ended: bool = False  # delivery finished; membership lingers for final commits
    task: asyncio.Task | None = None
    last_delivery: float = 0.0


@dataclass
class Session:
    session_id: str
    writer: asyncio.StreamWriter
    authed: bool = False
    last_seen: float = 0.0
    cursor: RoundRobinCursor = field(default_factory=RoundRobinCursor)
    subs: dict[str, Subscription] = field(default_factory=dict)

    def has_group_subs(self) -> bool:
        return any(s.group_id for s in self.subs.values())


def _control_frame(header: dict) -> bytes:
    body = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return wire.HEADER_STRUCT.pack(wire.MAGIC, wire.VERSION, wire.FRAME_CONTROL,
                                   0, len(body), 0) + body


def _reply(cid, data: dict | list | None = None) -> bytes:
    header: dict = {"op": "reply", "cid": cid, "ok": True}
    if data is not None:
        header["data"] = data
    return _control_frame(header)


def _error_reply(cid, exc: Exception) -> bytes:
    code = exc.code if isinstance(exc, MdmlError) else "InternalError"
    return _control_frame({
        "op": "reply", "cid": cid, "ok": False,
        "error": {"code": code, "message": str(exc)},
    })


class StreamService:
    """Broker service bound to one listen address and one data directory."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.engine = BrokerEngine(
            config.data_dir,
            default_partitions=config.default_partitions,
            max_frame_payload=config.max_frame_payload,
        )
        self.registry = Registry(Path(config.data_dir) / "registry.json")
        self.experiments = ExperimentManager(self.engine, config.resolved_archive_dir())
        self.object_store = FsObjectStore(config.resolved_object_store_dir())
        self.connectors = ConnectorManager(self.engine)
        self.addr: tuple[str, int] | None = None
        self._server: asyncio.AbstractServer | None = None
        self._loop: asyncio.AbstractEventLoop | None = None
        self._loop_thread_id: int | None = None
        self._sessions: dict[str, Session] = {}
        self._topic_subs: dict[str, tuple[Subscription, ...]] = {}
        self._member_subs: dict[str, Subscription] = {}
        self._reaper_task: asyncio.Task | None = None
        self._active_replays: set[str] = set()
        self.engine.add_append_listener(self._on_append)
        self.engine.groups.add_rebalance_listener(self._on_rebalance)

    # -- lifecycle --------------------------------------------------------

    async def start(self) -> None:
        self._loop = asyncio.get_running_loop()
        self._loop_thread_id = threading.get_ident()
        host, port = self.config.host_port
        self._server = await asyncio.start_server(
            self._handle_conn, host, port, limit=READ_LIMIT)
        sock = self._server.sockets[0]
        self.addr = sock.getsockname()[:2]
        # Discovery for wrapper tooling, notably with an ephemeral port.
        (Path(self.config.data_dir) / "endpoint").write_text(
            f"{self.addr[0]}:{self.addr[1]}")
        self._reaper_task = asyncio.create_task(self._reaper())
        logger.info("listening on %s:%d, data in %s",
                    self.addr[0], self.addr[1], self.config.data_dir)

    async def stop(self) -> None:
        if self._reaper_task:
            self._reaper_task.cancel()
        if self._server:
            self._server.close()
            await self._server.wait_closed()
        await asyncio.to_thread(self.connectors.stop_all)
        for session in list(self._sessions.values()):
            session.writer.close()
        for session in list(self._sessions.values()):
            for sub in list(session.subs.values()):
                await self._close_sub(sub, notify=False)
        await asyncio.sleep(0)
        self.engine.close()

    # -- engine event marshalling ------------------------------------------

    def _on_append(self, topic: str, partition: int, offset: int,
                   ts: int, head, payload) -> None:
        subs = self._topic_subs.get(topic)
        if not subs:
            return
        loop = self._loop
        if loop is None:
            return
        for sub in subs:
            if not sub.wake.is_set():
                loop.call_soon_threadsafe(sub.wake.set)

    def _on_rebalance(self, group_id: str, generation: int,
                      assignment: dict[str, list[tuple[str, int]]]) -> None:
        loop = self._loop
        if loop is None:
            return
        if threading.get_ident() == self._loop_thread_id:
            self._apply_rebalance(group_id, generation, assignment)
        else:
            loop.call_soon_threadsafe(
                self._apply_rebalance, group_id, generation, assignment)

    def _apply_rebalance(self, group_id: str, generation: int,
                         assignment: dict[str, list[tuple[str, int]]]) -> None:
        for member_id, pairs in assignment.items():
            sub = self._member_subs.get(member_id)
            if sub is None or sub.closed or generation <= sub.generation:
                continue
            self._set_assignment(sub, generation, pairs)

    def _set_assignment(self, sub: Subscription, generation: int,
                        pairs: list[tuple[str, int]]) -> None:
        sub.generation = generation
        new_cursors: dict[tuple[str, int], int] = {}
        for t, p in pairs:
            if (t, p) in sub.cursors:
                new_cursors[(t, p)] = sub.cursors[(t, p)]
            else:
                try:
                    new_cursors[(t, p)] = self.engine.resolve_start(
                        sub.group_id, t, p, sub.start)
                except OffsetOutOfRange:
                    new_cursors[(t, p)] = self.engine.next_offset(t, p)
        sub.cursors = new_cursors
        sub.session.writer.write(_control_frame({
            "op": "sub.assign",
            "data": {"sub": sub.sub_id, "generation": generation,
                     "assignment": [[t, p] for t, p in pairs]},
        }))
        sub.wake.set()

    # -- connection handling ------------------------------------------------

    async def _handle_conn(self, reader: asyncio.StreamReader,
                           writer: asyncio.StreamWriter) -> None:
        session = Session(session_id=str(uuid.uuid4()), writer=writer)
        session.authed = self.config.auth_token is None
        session.last_seen = time.monotonic()
        self._sessions[session.session_id] = session
        try:
            frames_seen = 0
            while True:
                frame = await self._read_frame(reader)
                if frame is None:
                    break
                session.last_seen = time.monotonic()
                ftype, head16, header_bytes, payload = frame
                if ftype == wire.FRAME_DATA:
                    self._handle_publish(session, head16, header_bytes, payload)
                else:
                    await self._handle_control(session, header_bytes)
                if writer.transport.get_write_buffer_size() > PUMP_BATCH_BYTES:
                    await writer.drain()
                # readexactly() on buffered input never yields; don't let one
                # flooding session starve the rest of the loop
                frames_seen += 1
                if frames_seen % 16 == 0:
                    await asyncio.sleep(0)
        except (asyncio.IncompleteReadError, ConnectionResetError, BrokenPipeError):
            pass
        except MdmlError as exc:
            logger.info("session %s protocol error: %s", session.session_id, exc)
        except asyncio.CancelledError:
            raise
        except Exception:
            logger.exception("session %s crashed", session.session_id)
        finally:
            await self._cleanup_session(session)

    async def _read_frame(self, reader: asyncio.StreamReader):
        try:
            head16 = await reader.readexactly(wire.FIXED_HEADER_SIZE)
        except asyncio.IncompleteReadError:
            return None
        if head16[:4] != wire.MAGIC:
            raise BadMagic(f"bad magic {head16[:4]!r}")
        _, version, ftype, _, hdr_len, pay_len = wire.HEADER_STRUCT.unpack(head16)
        if version != wire.VERSION:
            raise UnsupportedVersion(f"frame version {version}")
        if hdr_len > wire.MAX_HEADER_LEN:
            raise MalformedHeader(f"header too large: {hdr_len}")
        if pay_len > self.config.max_frame_payload:
            raise OversizedPayload(
                f"payload of {pay_len} bytes exceeds {self.config.max_frame_payload}")
        header_bytes = await reader.readexactly(hdr_len) if hdr_len else b""
        payload = await reader.readexactly(pay_len) if pay_len else b""
        return ftype, head16, header_bytes, payload

    async def _cleanup_session(self, session: Session) -> None:
        self._sessions.pop(session.session_id, None)
        for sub in list(session.subs.values()):
            await self._close_sub(sub, notify=False)
        try:
            session.writer.close()
        except Exception:
            pass

    # -- publish path -------------------------------------------------------

    def _handle_publish(self, session: Session, head16: bytes,
                        header_bytes: bytes, payload: bytes) -> None:
        try:
            header = wire.parse_header(header_bytes)
            topic = header.get("topic")
            if not isinstance(topic, str):
                raise wire.MalformedHeader("data frame without topic")
            if not self.engine.has_topic(topic):
                raise UnknownTopic(f"no such topic: {topic}")
            hdr = header.get("hdr") or {}
            doc = self.registry.enforced_schema(topic)
            if doc is not None:
                schema_mod.validate_payload(doc.body, payload, hdr)
            key_b64 = header.get("key")
            key = base64.b64decode(key_b64) if key_b64 is not None else None
            partition, offset = self.engine.append_frame(
                topic, head16 + header_bytes, payload, key, hdr, session.cursor)
        except Exception as exc:
            if not isinstance(exc, MdmlError):
                logger.exception("publish failed")
            session.writer.write(_control_frame({
                "op": "pub.ack", "ok": False,
                "error": {"code": exc.code if isinstance(exc, MdmlError) else "InternalError",
                          "message": str(exc)},
            }))
            return
        session.writer.write(_control_frame({
            "op": "pub.ack", "ok": True,
            "data": {"partition": partition, "offset": offset},
        }))

    # -- control ops ----------------------------------------------------------

    async def _handle_control(self, session: Session, header_bytes: bytes) -> None:
        header = wire.parse_header(header_bytes)
        op = header.get("op")
        cid = header.get("cid")
        data = header.get("data") or {}
        if op == "heartbeat":
            return
        if not session.authed and op != "hello":
            session.writer.write(_error_reply(cid, AuthFailed("authenticate first")))
            return
        handler = getattr(self, f"_op_{op.replace('.', '_')}", None) if op else None
        if handler is None:
            session.writer.write(_error_reply(
                cid, InvalidArgument(f"unknown op: {op!r}")))
            return
        try:
            result = handler(session, data)
            if asyncio.iscoroutine(result):
                result = await result
            session.writer.write(_reply(cid, result))
        except MdmlError as exc:
            session.writer.write(_error_reply(cid, exc))
        except Exception as exc:
            logger.exception("op %s failed", op)
            session.writer.write(_error_reply(cid, exc))

    def _op_hello(self, session: Session, data: dict) -> dict:
        if self.config.auth_token is not None:
            if data.get("token") != self.config.auth_token:
                raise AuthFailed("bad token")
        session.authed = True
        return {"session": session.session_id, "heartbeat_secs": self.config.heartbeat_secs,
                "max_frame_payload": self.config.max_frame_payload}

    def _op_register(self, session: Session, data: dict) -> dict:
        namespace = data.get("namespace", "")
        device = data.get("device", "")
        schema_body = data.get("schema")
        if schema_body is not None:
            schema_body = schema_mod.check_schema_body(schema_body)
        reg = self.registry.register(namespace, device, schema_body,
                                     bool(data.get("enforce", False)))
        self.engine.ensure_topic(reg.topic)
        return reg.to_json()

    def _op_topic_create(self, session: Session, data: dict) -> dict:
        name = data.get("name", "")
        partitions = data.get("partitions")
        log = self.engine.create_topic(name, partitions)
        return {"name": log.name, "partitions": log.partition_count}

    def _op_schema_attach(self, session: Session, data: dict) -> dict:
        topic = data.get("topic", "")
        if not self.engine.has_topic(topic):
            raise UnknownTopic(f"no such topic: {topic}")
        body = schema_mod.check_schema_body(data.get("body"))
        doc = self.registry.add_schema(topic, body, bool(data.get("enforce", False)))
        return doc.to_json()

    def _op_store_info(self, session: Session, data: dict) -> dict:
        return {"kind": self.object_store.kind, "root": str(self.object_store.root)}

    def _op_list(self, session: Session, data: dict):
        kind = data.get("kind", "topics")
        if kind == "devices":
            return [r.to_json() for r in self.registry.devices.values()]
        if kind == "topics":
            return [{
                "name": t.name,
                "partitions": t.partition_count,
                "created_at": t.created_at,
                "next_offsets": [p.next_offset for p in t.partitions],
            } for t in self.engine.topics()]
        if kind == "groups":
            return self.engine.groups.groups()
        if kind == "experiments":
            return self.experiments.list()
        if kind == "connectors":
            return self.connectors.list()
        raise InvalidArgument(f"unknown listing kind: {kind!r}")

    def _op_subscribe(self, session: Session, data: dict) -> dict:
        topics = data.get("topics") or []
        if not topics:
            raise InvalidArgument("subscribe needs at least one topic")
        for t in topics:
            if not self.engine.has_topic(t):
                raise UnknownTopic(f"no such topic: {t}")
        start = StartPosition.parse(data.get("start", "latest"))
        mode = data.get("mode") or {"kind": "indefinite"}
        kind = mode.get("kind", "indefinite")
        if kind not in ("indefinite", "max_count", "idle_timeout"):
            raise InvalidArgument(f"unknown mode: {kind!r}")
        sub = Subscription(
            sub_id=str(uuid.uuid4()),
            session=session,
            topics=list(topics),
            start=start,
            mode_kind=kind,
            mode_n=int(mode["n"]) if kind == "max_count" else None,
            mode_secs=float(mode["secs"]) if kind == "idle_timeout" else None,
            group_id=data.get("group"),
        )
        if sub.mode_n is not None:
            if sub.mode_n < 1:
                raise InvalidArgument("max_count must be >= 1")
            sub.remaining = sub.mode_n
        if not sub.group_id:
            # resolve before registering anywhere so a bad AT() leaks nothing
            sub.cursors = {
                (t, p): self.engine.resolve_start(None, t, p, start)
                for t in topics
                for p in range(self.engine.topic(t).partition_count)
            }
        session.subs[sub.sub_id] = sub
        for t in topics:
            self._topic_subs[t] = (*self._topic_subs.get(t, ()), sub)
        if sub.group_id:
            sub.member_id = data.get("member") or sub.sub_id
            self._member_subs[sub.member_id] = sub
            generation, assignment = self.engine.groups.join(
                sub.group_id, sub.member_id, topics)
            if sub.generation < generation:
                # the synchronous rebalance callback usually applied it already
                self._set_assignment(sub, generation, assignment)
        sub.last_delivery = time.monotonic()
        sub.task = asyncio.create_task(self._pump(sub))
        return {
            "sub": sub.sub_id,
            "generation": sub.generation,
            "assignment": [[t, p] for t, p in sub.cursors.keys()],
        }

    def _op_unsubscribe(self, session: Session, data: dict):
        sub = session.subs.get(data.get("sub", ""))
        if sub is None:
            raise InvalidArgument("unknown subscription")
        return self._close_sub(sub, notify=False)

    def _op_commit(self, session: Session, data: dict) -> dict:
        sub = session.subs.get(data.get("sub", ""))
        if sub is None or sub.group_id is None:
            raise InvalidArgument("commit needs a group subscription")
        offset = self.engine.groups.commit(
            sub.group_id, sub.member_id,
            data["topic"], int(data["partition"]), int(data["offset"]),
            generation=int(data["generation"]),
        )
        return {"committed": offset}

    def _op_experiment_start(self, session: Session, data: dict) -> dict:
        exp = self.experiments.start(data.get("topics") or [])
        return exp.to_json()

    def _op_experiment_stop(self, session: Session, data: dict) -> dict:
        return self.experiments.stop(data.get("experiment_id", ""))

    async def _op_experiment_replay(self, session: Session, data: dict) -> dict:
        speed = float(data.get("speed", 1.0))
        target = data.get("target")
        path = data.get("path")
        if path is None:
            exp_id = data.get("experiment_id", "")
            path = self.experiments.archive_path(exp_id)
            if not Path(path).exists():
                raise UnknownExperiment(f"no archive for experiment {exp_id}")
        archive = await asyncio.to_thread(load_archive, path)
        if archive.experiment_id in self._active_replays:
            raise InvalidArgument(
                f"archive {archive.experiment_id} is already replaying")
        self._active_replays.add(archive.experiment_id)
        try:
            report = await asyncio.to_thread(
                replay, archive, self.engine, speed, target)
        finally:
            self._active_replays.discard(archive.experiment_id)
        return report.to_json()

    def _op_connector_create(self, session: Session, data: dict) -> dict:
        return self.connectors.create(data.get("config") or data)

    def _op_connector_delete(self, session: Session, data: dict) -> dict:
        self.connectors.delete(data.get("name", ""))
        return {"deleted": data.get("name")}

    # -- delivery pump ---------------------------------------------------------

    def _delivery_parts(self, sub: Subscription, topic: str, partition: int,
                        rec) -> tuple[bytes, memoryview]:
        split = wire.split_frame(rec.frame)
        assert split is not None
        _, header_view, payload_view, _ = split
        header = wire.parse_header(header_view)
        header["part"] = partition
        header["off"] = rec.offset
        header["sub"] = sub.sub_id
        body = json.dumps(header, separators=(",", ":")).encode("utf-8")
        head = wire.HEADER_STRUCT.pack(wire.MAGIC, wire.VERSION, wire.FRAME_DATA,
                                       0, len(body), len(payload_view))
        return head + body, payload_view

    async def _end_sub(self, sub: Subscription, reason: str) -> None:
        """Finish delivery but keep the sub (and group membership) until the
        session unsubscribes or disconnects, so final commits still land."""
        if sub.ended or sub.closed:
            return
        sub.ended = True
        try:
            sub.session.writer.write(_control_frame({
                "op": "sub.end", "data": {"sub": sub.sub_id, "reason": reason}}))
            await sub.session.writer.drain()
        except (ConnectionResetError, BrokenPipeError, RuntimeError):
            pass

    async def _close_sub(self, sub: Subscription, notify: bool,
                         reason: str = "closed") -> None:
        if sub.closed:
            return
        sub.closed = True
        sub.wake.set()
        sub.session.subs.pop(sub.sub_id, None)
        for t in sub.topics:
            remaining = tuple(s for s in self._topic_subs.get(t, ()) if s is not sub)
            if remaining:
                self._topic_subs[t] = remaining
            else:
                self._topic_subs.pop(t, None)
        if sub.member_id:
            self._member_subs.pop(sub.member_id, None)
            self.engine.groups.leave(sub.group_id, sub.member_id)
        if notify:
            await self._end_sub(sub, reason)
        if sub.task is not None and sub.task is not asyncio.current_task():
            sub.task.cancel()

    async def _pump(self, sub: Subscription) -> None:
        writer = sub.session.writer
        try:
            while not sub.closed:
                sub.wake.clear()
                progressed = False
                for pair in list(sub.cursors.keys()):
                    if sub.closed:
                        return
                    if sub.remaining is not None and sub.remaining <= 0:
                        break
                    cursor = sub.cursors.get(pair)
                    if cursor is None:
                        continue
                    topic, partition = pair
                    limit = PUMP_BATCH_RECORDS
                    if sub.remaining is not None:
                        limit = min(limit, sub.remaining)
                    try:
                        records = self.engine.read_raw(
                            topic, partition, cursor, limit, PUMP_BATCH_BYTES)
                    except OffsetOutOfRange:
                        sub.cursors[pair] = self.engine.next_offset(topic, partition)
                        continue
                    if not records:
                        continue
                    progressed = True
                    for rec in records:
                        head, payload = self._delivery_parts(sub, topic, partition, rec)
                        writer.write(head)
                        if len(payload):
                            writer.write(payload)
                    if sub.cursors.get(pair) == cursor:
                        sub.cursors[pair] = records[-1].offset + 1
                    if sub.remaining is not None:
                        sub.remaining -= len(records)
                    sub.last_delivery = time.monotonic()
                    await writer.drain()
                    # drain() returns without yielding while the socket keeps
                    # up; yield explicitly so control frames stay responsive
                    await asyncio.sleep(0)
                if sub.remaining is not None and sub.remaining <= 0:
                    await self._end_sub(sub, "max_count")
                    return
                if not progressed:
                    timeout = None
                    if sub.mode_kind == "idle_timeout":
                        timeout = sub.mode_secs - (time.monotonic() - sub.last_delivery)
                        if timeout <= 0:
                            await self._end_sub(sub, "idle_timeout")
                            return
                    try:
                        await asyncio.wait_for(sub.wake.wait(), timeout)
                    except asyncio.TimeoutError:
                        pass
        except (ConnectionResetError, BrokenPipeError):
            pass
        except asyncio.CancelledError:
            raise
        except Exception:
            logger.exception("pump for sub %s crashed", sub.sub_id)

    # -- liveness -----------------------------------------------------------

    async def _reaper(self) -> None:
        hb = self.config.heartbeat_secs
        while True:
            await asyncio.sleep(hb)
            deadline = time.monotonic() - MISSED_HEARTBEATS * hb
            for session in list(self._sessions.values()):
                if session.has_group_subs() and session.last_seen < deadline:
                    logger.info("session %s missed heartbeats; evicting",
                                session.session_id)
                    session.writer.close()


async def serve(config: ServiceConfig) -> StreamService:
    service = StreamService(config)
    await service.start()
    return service


class ServiceThread:
    """Runs a StreamService on a dedicated loop thread (tests, benches)."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.service: StreamService | None = None
        self._thread: threading.Thread | None = None
        self._loop: asyncio.AbstractEventLoop | None = None
        self._stop_event: asyncio.Event | None = None
        self._stopped = threading.Event()
        self._ready = threading.Event()
        self._startup_error: BaseException | None = None

    @property
    def addr(self) -> str:
        assert self.service is not None and self.service.addr is not None
        host, port = self.service.addr
        return f"{host}:{port}"

    def start(self) -> "ServiceThread":
        self._thread = threading.Thread(target=self._run, name="mdml-service", daemon=True)
        self._thread.start()
        self._ready.wait(timeout=30)
        if self._startup_error is not None:
            raise self._startup_error
        return self

    def _run(self) -> None:
        async def main():
            try:
                self.service = StreamService(self.config)
                await self.service.start()
            except BaseException as exc:
                self._startup_error = exc
                self._ready.set()
                return
            self._loop = asyncio.get_running_loop()
            self._stop_event = asyncio.Event()
            self._ready.set()
            await self._stop_event.wait()
            await self.service.stop()

        asyncio.run(main())
        self._stopped.set()

    def stop(self) -> None:
        if self._loop is not None and self._stop_event is not None:
            self._loop.call_soon_threadsafe(self._stop_event.set)
        self._stopped.wait(timeout=30)
        if self._thread is not None:
            self._thread.join(timeout=30)

    def __enter__(self) -> "ServiceThread":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
