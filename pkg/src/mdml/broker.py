"""In-process storage and dispatch engine.

Owns the topic logs, routes appends to partitions (FNV-1a keyed hashing or
per-session round-robin), and coordinates consumer groups: membership,
round-robin partition assignment with generation fencing, committed offsets.

Safe to share across concurrent connection handlers: appends to a partition
serialize on a per-partition lock, group membership changes serialize
through one coordinator lock, and reads are lock-free against appends at or
below the last durable offset.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from . import wire
from .errors import (
    NotAssigned,
    OffsetOutOfRange,
    StaleGeneration,
    TopicExists,
    UnknownTopic,
)
from .storage import RawRecord, RetentionPolicy, TopicLog

logger = logging.getLogger(__name__)

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF

DEFAULT_PARTITIONS = 8

# Directories under data_dir that are not topics.
_RESERVED_PREFIX = "_"


def fnv1a_64(data: bytes) -> int:
    """FNV-1a 64-bit hash; used for key -> partition routing."""
    h = FNV_OFFSET_BASIS
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _U64
    return h


@dataclass(frozen=True)
class StartPosition:
    kind: str  # "earliest" | "latest" | "at"
    offset: int | None = None

    @classmethod
    def earliest(cls) -> "StartPosition":
        return cls("earliest")

    @classmethod
    def latest(cls) -> "StartPosition":
        return cls("latest")

    @classmethod
    def at(cls, offset: int) -> "StartPosition":
        return cls("at", offset)

    @classmethod
    def parse(cls, value) -> "StartPosition":
        if isinstance(value, StartPosition):
            return value
        if isinstance(value, int):
            return cls.at(value)
        if isinstance(value, str):
            if value in ("earliest", "latest"):
                return cls(value)
            if value.isdigit():
                return cls.at(int(value))
        if isinstance(value, dict):
            kind = value.get("kind")
            if kind in ("earliest", "latest"):
                return cls(kind)
            if kind == "at":
                return cls.at(int(value["offset"]))
        raise ValueError(f"not a start position: {value!r}")

    def to_json(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.offset is not None:
            out["offset"] = self.offset
        return out


EARLIEST = StartPosition.earliest()
LATEST = StartPosition.latest()


class RoundRobinCursor:
    """Per-producer-session cursor for keyless partition selection."""

    def __init__(self, start: int = 0):
        self._counter = itertools.count(start)

    def next_index(self, partition_count: int) -> int:
        return next(self._counter) % partition_count


@dataclass
class GroupState:
    group_id: str
    members: dict[str, tuple[str, ...]] = field(default_factory=dict)  # member -> topics
    generation: int = 0
    assignment: dict[str, list[tuple[str, int]]] = field(default_factory=dict)
    committed: dict[tuple[str, int], int] = field(default_factory=dict)


AppendListener = Callable[[str, int, int, int, bytes, "bytes | memoryview"], None]
RebalanceListener = Callable[[str, int, dict[str, list[tuple[str, int]]]], None]


class GroupCoordinator:
    """Stop-the-world group membership with generation fencing.

    Committed offsets persist to ``<data_dir>/_groups/<group_id>.json``;
    membership and generations are in-memory only and reset on restart.
    """

    def __init__(self, engine: "BrokerEngine", state_dir: Path):
        self._engine = engine
        self._dir = state_dir
        self._dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._groups: dict[str, GroupState] = {}
        self._rebalance_listeners: list[RebalanceListener] = []
        self._load()

    def _load(self) -> None:
        for path in self._dir.glob("*.json"):
            try:
                doc = json.loads(path.read_text())
            except (OSError, json.JSONDecodeError):
                logger.warning("skipping unreadable group state %s", path)
                continue
            state = GroupState(group_id=doc["group_id"])
            for topic, offsets in doc.get("committed", {}).items():
                for part, offset in offsets.items():
                    state.committed[(topic, int(part))] = offset
            self._groups[state.group_id] = state

    def _persist(self, state: GroupState) -> None:
        committed: dict[str, dict[str, int]] = {}
        for (topic, part), offset in state.committed.items():
            committed.setdefault(topic, {})[str(part)] = offset
        path = self._dir / f"{state.group_id}.json"
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"group_id": state.group_id, "committed": committed}))
        tmp.replace(path)

    def add_rebalance_listener(self, cb: RebalanceListener) -> None:
        self._rebalance_listeners.append(cb)

    def _state(self, group_id: str) -> GroupState:
        state = self._groups.get(group_id)
        if state is None:
            state = GroupState(group_id=group_id)
            self._groups[group_id] = state
        return state

    def join(self, group_id: str, member_id: str,
             topics: Iterable[str]) -> tuple[int, list[tuple[str, int]]]:
        """Add a member and rebalance; returns (generation, member assignment)."""
        with self._lock:
            state = self._state(group_id)
            state.members[member_id] = tuple(topics)
            self._rebalance(state)
            generation = state.generation
            assignment = list(state.assignment.get(member_id, []))
            snapshot = {m: list(v) for m, v in state.assignment.items()}
        self._notify(group_id, generation, snapshot)
        return generation, assignment

    def leave(self, group_id: str, member_id: str) -> None:
        with self._lock:
            state = self._groups.get(group_id)
            if state is None or member_id not in state.members:
                return
            del state.members[member_id]
            self._rebalance(state)
            generation = state.generation
            snapshot = {m: list(v) for m, v in state.assignment.items()}
        self._notify(group_id, generation, snapshot)

    def _rebalance(self, state: GroupState) -> None:
        state.generation += 1
        state.assignment = {m: [] for m in state.members}
        if not state.members:
            return
        pairs: list[tuple[str, int]] = []
        subscribed = sorted({t for topics in state.members.values() for t in topics})
        for topic in subscribed:
            log = self._engine.topic(topic)
            pairs.extend((topic, p) for p in range(log.partition_count))
        members = sorted(state.members)
        for i, pair in enumerate(pairs):
            owner = members[i % len(members)]
            if pair[0] in state.members[owner]:
                state.assignment[owner].append(pair)
            else:
                # Keep partitions with members actually subscribed to the topic.
                for j in range(1, len(members)):
                    cand = members[(i + j) % len(members)]
                    if pair[0] in state.members[cand]:
                        state.assignment[cand].append(pair)
                        break

    def _notify(self, group_id: str, generation: int,
                assignment: dict[str, list[tuple[str, int]]]) -> None:
        for cb in self._rebalance_listeners:
            cb(group_id, generation, assignment)

    def assignment(self, group_id: str, member_id: str) -> tuple[int, list[tuple[str, int]]]:
        with self._lock:
            state = self._state(group_id)
            return state.generation, list(state.assignment.get(member_id, []))

    def check_generation(self, group_id: str, generation: int) -> None:
        with self._lock:
            state = self._groups.get(group_id)
            current = state.generation if state else 0
            if generation != current:
                raise StaleGeneration(
                    f"group {group_id} is at generation {current}, got {generation}")

    def commit(self, group_id: str, member_id: str, topic: str, partition: int,
               offset: int, generation: int | None = None) -> int:
        """Record a committed offset; monotone, never decreases."""
        with self._lock:
            state = self._groups.get(group_id)
            if state is None:
                raise StaleGeneration(f"unknown group {group_id}")
            if generation is not None and generation != state.generation:
                raise StaleGeneration(
                    f"group {group_id} is at generation {state.generation}, got {generation}")
            if member_id is not None:
                held = state.assignment.get(member_id, [])
                if (topic, partition) not in held:
                    raise NotAssigned(
                        f"{member_id} does not hold {topic}/{partition} "
                        f"in generation {state.generation}")
            prev = state.committed.get((topic, partition), 0)
            value = max(prev, offset)
            state.committed[(topic, partition)] = value
            self._persist(state)
            return value

    def committed(self, group_id: str, topic: str, partition: int) -> int | None:
        with self._lock:
            state = self._groups.get(group_id)
            if state is None:
                return None
            return state.committed.get((topic, partition))

    def groups(self) -> list[dict]:
        with self._lock:
            out = []
            for state in self._groups.values():
                committed = {f"{t}/{p}": o for (t, p), o in state.committed.items()}
                out.append({
                    "group_id": state.group_id,
                    "members": sorted(state.members),
                    "generation": state.generation,
                    "committed": committed,
                })
            return out


class BrokerEngine:
    """Single-node broker: topic logs plus group coordination."""

    def __init__(self, data_dir: str | os.PathLike,
                 default_partitions: int = DEFAULT_PARTITIONS,
                 max_frame_payload: int = wire.DEFAULT_MAX_PAYLOAD):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.default_partitions = default_partitions
        self.max_frame_payload = max_frame_payload
        self._topics: dict[str, TopicLog] = {}
        self._topic_locks: dict[str, list[threading.Lock]] = {}
        self._create_lock = threading.Lock()
        self._append_listeners: tuple[AppendListener, ...] = ()
        self._chunk_partition: dict[tuple[str, str], int] = {}
        self._default_cursor = RoundRobinCursor()
        self.groups = GroupCoordinator(self, self.data_dir / "_groups")
        self._load()

    def _load(self) -> None:
        for path in sorted(self.data_dir.iterdir()):
            if not path.is_dir() or path.name.startswith(_RESERVED_PREFIX):
                continue
            if not (path / "meta.json").exists():
                continue
            log = TopicLog(path, path.name)
            self._topics[log.name] = log
            self._topic_locks[log.name] = [threading.Lock() for _ in range(log.partition_count)]

    # -- topics ---------------------------------------------------------

    def create_topic(self, name: str, partition_count: int | None = None) -> TopicLog:
        wire.check_topic(name)
        count = partition_count if partition_count is not None else self.default_partitions
        if count < 1:
            raise ValueError("partition_count must be >= 1")
        with self._create_lock:
            if name in self._topics:
                raise TopicExists(f"topic {name} already exists")
            log = TopicLog(self.data_dir / name, name, count)
            self._topics[name] = log
            self._topic_locks[name] = [threading.Lock() for _ in range(count)]
            return log

    def ensure_topic(self, name: str, partition_count: int | None = None) -> TopicLog:
        try:
            return self.topic(name)
        except UnknownTopic:
            try:
                return self.create_topic(name, partition_count)
            except TopicExists:
                return self.topic(name)

    def topic(self, name: str) -> TopicLog:
        log = self._topics.get(name)
        if log is None:
            raise UnknownTopic(f"no such topic: {name}")
        return log

    def has_topic(self, name: str) -> bool:
        return name in self._topics

    def topics(self) -> list[TopicLog]:
        return sorted(self._topics.values(), key=lambda t: t.name)

    # -- appends ----------------------------------------------------------

    def add_append_listener(self, cb: AppendListener) -> None:
        self._append_listeners = (*self._append_listeners, cb)

    def remove_append_listener(self, cb: AppendListener) -> None:
        self._append_listeners = tuple(x for x in self._append_listeners if x is not cb)

    def select_partition(self, topic: str, key: bytes | None,
                         headers: dict | None,
                         cursor: RoundRobinCursor | None = None) -> int:
        """Partition routing: chunk affinity, then key hash, then round-robin."""
        log = self.topic(topic)
        chunk_id = headers.get(wire.CHUNK_ID) if headers else None
        if chunk_id is not None:
            affinity_key = (topic, chunk_id)
            part = self._chunk_partition.get(affinity_key)
            if part is None:
                part = self._route(log, key, cursor)
                self._chunk_partition[affinity_key] = part
            idx = headers.get(wire.CHUNK_IDX)
            cnt = headers.get(wire.CHUNK_CNT)
            if idx is not None and cnt is not None and int(idx) == int(cnt) - 1:
                self._chunk_partition.pop(affinity_key, None)
            return part
        return self._route(log, key, cursor)

    def _route(self, log: TopicLog, key: bytes | None,
               cursor: RoundRobinCursor | None) -> int:
        if key is not None:
            return fnv1a_64(key) % log.partition_count
        if cursor is None:
            cursor = self._default_cursor
        return cursor.next_index(log.partition_count)

    def append(self, topic: str, msg: wire.DataMessage,
               cursor: RoundRobinCursor | None = None) -> tuple[int, int]:
        """Append a message; returns (partition, offset)."""
        head, payload = wire.message_frame_parts(msg, self.max_frame_payload)
        partition = self.select_partition(topic, msg.key, msg.headers, cursor)
        return partition, self._append_raw(topic, partition, (head, payload), head, payload)

    def append_frame(self, topic: str, head: bytes, payload,
                     key: bytes | None, headers: dict | None,
                     cursor: RoundRobinCursor | None = None) -> tuple[int, int]:
        """Fast path: append pre-encoded frame bytes without re-encoding.

        ``head`` is the fixed header plus header JSON exactly as received;
        ``payload`` the raw payload buffer.
        """
        partition = self.select_partition(topic, key, headers, cursor)
        return partition, self._append_raw(topic, partition, (head, payload), head, payload)

    def _append_raw(self, topic: str, partition: int, parts: tuple,
                    head, payload) -> int:
        log = self.topic(topic)
        plog = log.partition(partition)
        lock = self._topic_locks[topic][partition]
        with lock:
            offset, ts = plog.append(parts)
        for cb in self._append_listeners:
            cb(topic, partition, offset, ts, head, payload)
        return offset

    # -- reads ------------------------------------------------------------

    def read_raw(self, topic: str, partition: int, from_offset: int,
                 max_records: int, max_bytes: int = 8 << 20) -> list[RawRecord]:
        log = self.topic(topic)
        return log.partition(partition).read(from_offset, max_records, max_bytes)

    def read(self, topic: str, partition: int, from_offset: int,
             max_records: int) -> list[tuple[int, int, wire.DataMessage]]:
        """Decoded records: list of (offset, ts_append, message)."""
        out = []
        for rec in self.read_raw(topic, partition, from_offset, max_records):
            decoded = wire.decode_frame(rec.frame)
            assert decoded is not None
            frame, _ = decoded
            out.append((rec.offset, rec.ts_append, wire.frame_to_message(frame)))
        return out

    def next_offset(self, topic: str, partition: int) -> int:
        return self.topic(topic).partition(partition).next_offset

    def earliest_offset(self, topic: str, partition: int) -> int:
        return self.topic(topic).partition(partition).earliest_offset

    def resolve_start(self, group_id: str | None, topic: str, partition: int,
                      sp: StartPosition) -> int:
        """Starting offset for a fetch; committed offsets override EARLIEST/LATEST."""
        plog = self.topic(topic).partition(partition)
        if sp.kind == "at":
            offset = sp.offset or 0
            if not 0 <= offset <= plog.next_offset:
                raise OffsetOutOfRange(
                    f"{topic}/{partition}: offset {offset} not in [0, {plog.next_offset}]")
            return offset
        if group_id is not None:
            committed = self.groups.committed(group_id, topic, partition)
            if committed is not None:
                return committed
        if sp.kind == "earliest":
            return plog.earliest_offset
        return plog.next_offset

    # -- retention ----------------------------------------------------------

    def retention_sweep(self, topic: str, policy: RetentionPolicy) -> int:
        return self.topic(topic).sweep(policy)

    def close(self) -> None:
        for log in self._topics.values():
            log.close()
