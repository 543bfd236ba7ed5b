"""Connectors bridge topics to external storage and back.

Shipped backends: an NDJSON file sink (topic -> file, one record per line
in the same shape as archive event files), a directory-watch source
(file -> topic, exactly once per item identity via a dedup journal), and
the filesystem object store behind the claim-check scheme.

Each connector runs as an independent loop supervised by the service;
crashed connectors restart with exponential backoff (1 s doubling to 60 s).
"""

from __future__ import annotations

import logging
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path

from . import wire
from .broker import EARLIEST, BrokerEngine, RoundRobinCursor
from .errors import (
    BackendUnreachable,
    ChecksumMismatch,
    ClaimNotFound,
    DuplicateName,
    InvalidConfig,
    StoreUnavailable,
    UnknownConnector,
    UnknownTopic,
)
from .experiment import CaptureRecord

logger = logging.getLogger(__name__)

SOURCE_PATH_HEADER = "source.path"
JOURNAL_NAME = ".mdml-source-journal"

BACKOFF_INITIAL = 1.0
BACKOFF_MAX = 60.0


class FsObjectStore:
    """Content-addressed filesystem object store for the coat-check scheme.

    Keys are ``<crc32>-<size>-<uuid>``; ``get(put(data)) == data`` with the
    CRC verified on the way out.
    """

    kind = "object-fs"

    def __init__(self, root: str | Path):
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StoreUnavailable(f"cannot create object store root: {exc}") from exc

    def put(self, data: bytes | memoryview) -> wire.ClaimTicket:
        crc = wire.crc32_hex(data)
        key = f"{crc}-{len(data)}-{uuid.uuid4()}"
        tmp = self.root / f".{key}.tmp"
        try:
            with open(tmp, "wb") as f:
                f.write(data)
            tmp.replace(self.root / key)
        except OSError as exc:
            raise StoreUnavailable(f"object store write failed: {exc}") from exc
        return wire.ClaimTicket(store=self.kind, object_key=key,
                                size=len(data), crc32=crc)

    def get(self, ticket: wire.ClaimTicket) -> bytes:
        path = self.root / ticket.object_key
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise ClaimNotFound(f"no object for key {ticket.object_key}") from None
        except OSError as exc:
            raise StoreUnavailable(f"object store read failed: {exc}") from exc
        crc = wire.crc32_hex(data)
        if crc != ticket.crc32 or len(data) != ticket.size:
            raise ChecksumMismatch(
                f"object {ticket.object_key}: crc {crc}/{len(data)}B "
                f"!= ticket {ticket.crc32}/{ticket.size}B")
        return data

    def delete(self, key: str) -> None:
        (self.root / key).unlink(missing_ok=True)


@dataclass
class ConnectorConfig:
    name: str
    direction: str  # "sink" | "source"
    topic: str
    backend: dict
    group_id: str | None = None

    @classmethod
    def from_json(cls, doc: dict) -> "ConnectorConfig":
        try:
            cfg = cls(
                name=doc["name"],
                direction=doc["direction"],
                topic=doc["topic"],
                backend=dict(doc["backend"]),
                group_id=doc.get("group_id"),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidConfig(f"connector config missing field: {exc}") from exc
        if cfg.direction not in ("sink", "source"):
            raise InvalidConfig(f"direction must be sink or source, got {cfg.direction!r}")
        if cfg.group_id is None:
            cfg.group_id = f"connector.{cfg.name}"
        return cfg

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "direction": self.direction,
            "topic": self.topic,
            "backend": self.backend,
            "group_id": self.group_id,
        }


class _StopFlag:
    def __init__(self):
        self._event = threading.Event()

    def stop(self) -> None:
        self._event.set()

    @property
    def stopped(self) -> bool:
        return self._event.is_set()

    def wait(self, timeout: float) -> bool:
        return self._event.wait(timeout)


class FileSinkConnector:
    """Consume a topic (own group, from EARLIEST) into an NDJSON file.

    Offsets commit through the group coordinator after each flushed batch,
    so delete/recreate resumes without duplication.
    """

    def __init__(self, engine: BrokerEngine, config: ConnectorConfig):
        self.engine = engine
        self.config = config
        path = config.backend.get("path")
        if not path:
            raise InvalidConfig("file sink backend needs a 'path'")
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "ab"):
                pass
        except OSError as exc:
            raise BackendUnreachable(f"sink file not writable: {exc}") from exc
        self.member_id = f"{config.name}/{uuid.uuid4()}"
        self.flag = _StopFlag()

    def run(self) -> None:
        topic = self.config.topic
        group = self.config.group_id
        generation, assignment = self.engine.groups.join(group, self.member_id, [topic])
        cursors = {
            (t, p): self.engine.resolve_start(group, t, p, EARLIEST)
            for t, p in assignment
        }
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            out = open(self.path, "ab")
        except OSError as exc:
            raise BackendUnreachable(f"cannot open sink file: {exc}") from exc
        try:
            while not self.flag.stopped:
                wrote = False
                for (t, p), start in list(cursors.items()):
                    records = self.engine.read_raw(t, p, start, 256)
                    if not records:
                        continue
                    for rec in records:
                        decoded = wire.decode_frame(rec.frame)
                        assert decoded is not None
                        msg = wire.frame_to_message(decoded[0])
                        line = CaptureRecord(
                            topic=t, partition=p, offset=rec.offset,
                            ts_pub=msg.ts_pub, ts_capture=rec.ts_append,
                            headers=msg.headers, payload=msg.payload, key=msg.key,
                        ).to_json_line()
                        out.write(line)
                    out.flush()
                    cursors[(t, p)] = records[-1].offset + 1
                    self.engine.groups.commit(
                        group, self.member_id, t, p, cursors[(t, p)], generation)
                    wrote = True
                if not wrote:
                    self.flag.wait(0.05)
        finally:
            out.close()
            self.engine.groups.leave(group, self.member_id)


class DirWatchSourceConnector:
    """Publish each new file in a watched directory to a topic, exactly once.

    Item identity is (path, size, mtime); seen identities persist in a
    dot-prefixed journal inside the watched directory, which the watcher
    itself ignores along with any other hidden file.
    """

    def __init__(self, engine: BrokerEngine, config: ConnectorConfig):
        self.engine = engine
        self.config = config
        path = config.backend.get("path")
        if not path:
            raise InvalidConfig("dir-watch source backend needs a 'path'")
        self.watch_dir = Path(path)
        if not self.watch_dir.is_dir():
            raise BackendUnreachable(f"watched directory missing: {self.watch_dir}")
        self.poll_secs = float(config.backend.get("poll_secs", 0.2))
        self.journal_path = self.watch_dir / JOURNAL_NAME
        self.flag = _StopFlag()
        self._seen: set[str] = set()
        self._cursor = RoundRobinCursor()

    def _load_journal(self) -> None:
        if self.journal_path.exists():
            self._seen = set(self.journal_path.read_text().splitlines())

    def _record(self, identity: str) -> None:
        self._seen.add(identity)
        with open(self.journal_path, "a") as f:
            f.write(identity + "\n")

    def _identity(self, path: Path) -> str:
        st = path.stat()
        return f"{path.name}:{st.st_size}:{st.st_mtime_ns}"

    def run(self) -> None:
        self._load_journal()
        topic = self.config.topic
        while not self.flag.stopped:
            for path in sorted(self.watch_dir.iterdir()):
                if path.name.startswith(".") or not path.is_file():
                    continue
                identity = self._identity(path)
                if identity in self._seen:
                    continue
                payload = path.read_bytes()
                headers = {SOURCE_PATH_HEADER: str(path)}
                msg = wire.DataMessage(topic=topic, payload=payload, headers=headers)
                for part in wire.chunk_message(msg, self.engine.max_frame_payload) \
                        if payload else [msg]:
                    self.engine.append(topic, part, self._cursor)
                self._record(identity)
            self.flag.wait(self.poll_secs)


class ConnectorManager:
    """Creates, supervises, and stops connector loops."""

    def __init__(self, engine: BrokerEngine):
        self.engine = engine
        self._lock = threading.Lock()
        self._connectors: dict[str, tuple[ConnectorConfig, object, threading.Thread]] = {}

    def _check_cycles(self, config: ConnectorConfig) -> None:
        new_dir = Path(config.backend.get("path", "")).resolve()
        if config.direction == "source":
            new_watch = new_dir
            for cfg, _, _ in self._connectors.values():
                if cfg.direction == "sink":
                    sink_dir = Path(cfg.backend["path"]).resolve().parent
                    if sink_dir == new_watch:
                        raise InvalidConfig(
                            f"source {config.name} would watch sink {cfg.name}'s output")
        else:
            sink_dir = new_dir.parent
            for cfg, _, _ in self._connectors.values():
                if cfg.direction == "source":
                    if Path(cfg.backend["path"]).resolve() == sink_dir:
                        raise InvalidConfig(
                            f"sink {config.name} would write into source {cfg.name}'s watch dir")

    def create(self, config: ConnectorConfig | dict) -> dict:
        if isinstance(config, dict):
            config = ConnectorConfig.from_json(config)
        with self._lock:
            if config.name in self._connectors:
                raise DuplicateName(f"connector {config.name} already exists")
            if config.direction == "sink" and not self.engine.has_topic(config.topic):
                raise UnknownTopic(f"no such topic: {config.topic}")
            if config.direction == "source":
                self.engine.ensure_topic(config.topic)
            self._check_cycles(config)
            kind = config.backend.get("kind")
            if config.direction == "sink":
                if kind != "file":
                    raise InvalidConfig(f"unsupported sink backend kind: {kind!r}")
                connector = FileSinkConnector(self.engine, config)
            else:
                if kind != "dir-watch":
                    raise InvalidConfig(f"unsupported source backend kind: {kind!r}")
                connector = DirWatchSourceConnector(self.engine, config)
            thread = threading.Thread(
                target=self._supervise, args=(config.name, connector),
                name=f"connector-{config.name}", daemon=True)
            self._connectors[config.name] = (config, connector, thread)
            thread.start()
        return config.to_json()

    def _supervise(self, name: str, connector) -> None:
        backoff = BACKOFF_INITIAL
        while not connector.flag.stopped:
            started = time.monotonic()
            try:
                connector.run()
                return
            except Exception:
                logger.exception("connector %s crashed; restarting in %.0fs", name, backoff)
            if time.monotonic() - started > BACKOFF_MAX:
                backoff = BACKOFF_INITIAL
            if connector.flag.wait(backoff):
                return
            backoff = min(backoff * 2, BACKOFF_MAX)

    def delete(self, name: str) -> None:
        with self._lock:
            entry = self._connectors.pop(name, None)
        if entry is None:
            raise UnknownConnector(f"no such connector: {name}")
        _, connector, thread = entry
        connector.flag.stop()
        thread.join(timeout=10)

    def list(self) -> list[dict]:
        with self._lock:
            return [cfg.to_json() for cfg, _, _ in self._connectors.values()]

    def stop_all(self) -> None:
        with self._lock:
            names = list(self._connectors)
        for name in names:
            try:
                self.delete(name)
            except UnknownConnector:
                pass
