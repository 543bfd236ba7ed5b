"""Experiment lifecycle: capture topic traffic, archive it, replay it.

An experiment is a list of topics. Between start and stop, every message
appended to those topics is recorded. The archive is portable across
deployments:

    <archive_dir>/<experiment_id>/manifest.json
    <archive_dir>/<experiment_id>/<topic with . -> _>.ndjson

Event files hold one JSON object per line with the payload base64-encoded
(binary payloads must survive text transport). The manifest carries per-file
record counts and CRC-32 checksums; format version "mdml-archive/1".

Replay merges records by capture time (ties broken by topic name, then
offset) and republishes each with its original key, headers, and payload
plus a ``replay.of`` header, spacing publishes by the captured gaps divided
by the replay speed. Speed 0 means no delay.
"""

from __future__ import annotations

import base64
import heapq
import json
import logging
import threading
import time
import uuid
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

from . import wire
from .broker import BrokerEngine
from .errors import (
    ArchiveCorrupt,
    InvalidArgument,
    NotRunning,
    TopicBusy,
    UnknownExperiment,
    UnknownTopic,
    UnsupportedVersion,
)

logger = logging.getLogger(__name__)

ARCHIVE_FORMAT = "mdml-archive/1"
REPLAY_HEADER = "replay.of"

STATE_DEFINED = "DEFINED"
STATE_RUNNING = "RUNNING"
STATE_STOPPED = "STOPPED"
STATE_ARCHIVED = "ARCHIVED"


def topic_filename(topic: str) -> str:
    return topic.replace(".", "_") + ".ndjson"


@dataclass
class CaptureRecord:
    topic: str
    partition: int
    offset: int
    ts_pub: int
    ts_capture: int
    headers: dict[str, str]
    payload: bytes
    key: bytes | None = None

    def to_json_line(self) -> bytes:
        doc = {
            "topic": self.topic,
            "partition": self.partition,
            "offset": self.offset,
            "ts_pub": self.ts_pub,
            "ts_capture": self.ts_capture,
            "hdr": self.headers,
            "payload": base64.b64encode(self.payload).decode("ascii"),
        }
        if self.key is not None:
            doc["key"] = base64.b64encode(self.key).decode("ascii")
        return json.dumps(doc, separators=(",", ":")).encode("utf-8") + b"\n"

    @classmethod
    def from_json_line(cls, line: bytes) -> "CaptureRecord":
        try:
            doc = json.loads(line)
            key_b64 = doc.get("key")
            return cls(
                topic=doc["topic"],
                partition=doc["partition"],
                offset=doc["offset"],
                ts_pub=doc["ts_pub"],
                ts_capture=doc["ts_capture"],
                headers=doc.get("hdr") or {},
                payload=base64.b64decode(doc["payload"]),
                key=base64.b64decode(key_b64) if key_b64 is not None else None,
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ArchiveCorrupt(f"bad event record: {exc}") from exc


class _TopicCapture:
    """Streaming writer for one topic's event file; tracks count and CRC."""

    def __init__(self, path: Path):
        self.path = path
        self.file = open(path, "wb")
        self.count = 0
        self.crc = 0

    def write(self, record: CaptureRecord) -> None:
        line = record.to_json_line()
        self.file.write(line)
        self.crc = zlib.crc32(line, self.crc)
        self.count += 1

    def finish(self) -> tuple[int, str]:
        self.file.flush()
        self.file.close()
        return self.count, format(self.crc & 0xFFFFFFFF, "08x")


@dataclass
class ExperimentDef:
    experiment_id: str
    topics: list[str]
    created_at: int
    state: str = STATE_DEFINED
    started_at: int | None = None
    stopped_at: int | None = None

    def to_json(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "topics": self.topics,
            "created_at": self.created_at,
            "state": self.state,
            "started_at": self.started_at,
            "stopped_at": self.stopped_at,
        }


class ExperimentArchive:
    """A loaded, validated archive directory."""

    def __init__(self, path: Path, manifest: dict):
        self.path = path
        self.manifest = manifest

    @property
    def experiment_id(self) -> str:
        return self.manifest["experiment_id"]

    @property
    def topics(self) -> list[str]:
        return list(self.manifest["topics"])

    def counts(self) -> dict[str, int]:
        return {t: f["records"] for t, f in self.manifest["files"].items()}

    def iter_topic(self, topic: str) -> Iterator[CaptureRecord]:
        fname = self.manifest["files"][topic]["name"]
        with open(self.path / fname, "rb") as f:
            for line in f:
                if line.strip():
                    yield CaptureRecord.from_json_line(line)

    def iter_merged(self) -> Iterator[CaptureRecord]:
        """All records ordered by (ts_capture, topic, offset)."""
        streams = [
            ((rec.ts_capture, rec.topic, rec.offset, rec.partition, rec)
             for rec in self.iter_topic(t))
            for t in self.topics
        ]
        for *_, rec in heapq.merge(*streams):
            yield rec


def load_archive(path: str | Path) -> ExperimentArchive:
    """Load and validate an archive written by any deployment."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise ArchiveCorrupt(f"no manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ArchiveCorrupt(f"manifest is not JSON: {exc}") from exc
    fmt = manifest.get("format")
    if fmt != ARCHIVE_FORMAT:
        raise UnsupportedVersion(f"archive format {fmt!r}, expected {ARCHIVE_FORMAT!r}")
    for topic, info in manifest.get("files", {}).items():
        fpath = path / info["name"]
        if not fpath.exists():
            raise ArchiveCorrupt(f"missing event file {fpath}")
        data = fpath.read_bytes()
        crc = format(zlib.crc32(data) & 0xFFFFFFFF, "08x")
        if crc != info["crc32"]:
            raise ArchiveCorrupt(f"{fpath}: crc {crc} != manifest {info['crc32']}")
        lines = sum(1 for line in data.splitlines() if line.strip())
        if lines != info["records"]:
            raise ArchiveCorrupt(
                f"{fpath}: {lines} records != manifest count {info['records']}")
    return ExperimentArchive(path, manifest)


@dataclass
class ReplayReport:
    experiment_id: str
    records: int = 0
    speed: float = 1.0
    duration_s: float = 0.0
    gap_errors_ms: list[float] = field(default_factory=list)
    cumulative_drift_ms: float = 0.0

    def to_json(self) -> dict:
        errors = self.gap_errors_ms
        return {
            "experiment_id": self.experiment_id,
            "records": self.records,
            "speed": self.speed,
            "duration_s": round(self.duration_s, 6),
            "max_abs_gap_error_ms": round(max(map(abs, errors)), 3) if errors else 0.0,
            "mean_abs_gap_error_ms": round(
                sum(map(abs, errors)) / len(errors), 3) if errors else 0.0,
            "cumulative_drift_ms": round(self.cumulative_drift_ms, 3),
        }


class ExperimentManager:
    """Tracks experiment definitions and runs captures against an engine."""

    def __init__(self, engine: BrokerEngine, archive_dir: str | Path):
        self.engine = engine
        self.archive_dir = Path(archive_dir)
        self.archive_dir.mkdir(parents=True, exist_ok=True)
        self._experiments: dict[str, ExperimentDef] = {}
        self._captures: dict[str, dict[str, _TopicCapture]] = {}
        self._topic_owner: dict[str, str] = {}  # topic -> running experiment id
        self._listener_installed = False
        # Appends may arrive from multiple threads (live sessions, replays).
        self._write_lock = threading.Lock()

    def _ensure_listener(self) -> None:
        if not self._listener_installed:
            self.engine.add_append_listener(self._on_append)
            self._listener_installed = True

    def _on_append(self, topic: str, partition: int, offset: int,
                   ts_append: int, head, payload) -> None:
        exp_id = self._topic_owner.get(topic)
        if exp_id is None:
            return
        header = wire.parse_header(memoryview(head)[wire.FIXED_HEADER_SIZE:])
        msg = wire.message_from_header(header, b"")
        record = CaptureRecord(
            topic=topic,
            partition=partition,
            offset=offset,
            ts_pub=msg.ts_pub,
            ts_capture=ts_append,
            headers=msg.headers,
            payload=bytes(payload),
            key=msg.key,
        )
        with self._write_lock:
            captures = self._captures.get(exp_id)
            if captures is not None:
                captures[topic].write(record)

    def start(self, topics: list[str]) -> ExperimentDef:
        if not topics:
            raise InvalidArgument("an experiment needs at least one topic")
        for t in topics:
            if not self.engine.has_topic(t):
                raise UnknownTopic(f"no such topic: {t}")
            if t in self._topic_owner:
                raise TopicBusy(f"topic {t} is captured by experiment {self._topic_owner[t]}")
        exp = ExperimentDef(
            experiment_id=str(uuid.uuid4()),
            topics=list(topics),
            created_at=time.time_ns(),
        )
        exp_dir = self.archive_dir / exp.experiment_id
        exp_dir.mkdir(parents=True)
        self._captures[exp.experiment_id] = {
            t: _TopicCapture(exp_dir / topic_filename(t)) for t in topics
        }
        self._ensure_listener()
        # Capture begins at LATEST: only appends after this point are seen.
        with self._write_lock:
            for t in topics:
                self._topic_owner[t] = exp.experiment_id
        exp.state = STATE_RUNNING
        exp.started_at = time.time_ns()
        self._experiments[exp.experiment_id] = exp
        return exp

    def stop(self, experiment_id: str) -> dict:
        exp = self._experiments.get(experiment_id)
        if exp is None:
            raise UnknownExperiment(f"no such experiment: {experiment_id}")
        if exp.state != STATE_RUNNING:
            raise NotRunning(f"experiment {experiment_id} is {exp.state}")
        with self._write_lock:
            for t in exp.topics:
                self._topic_owner.pop(t, None)
            exp.state = STATE_STOPPED
            exp.stopped_at = time.time_ns()
            captures = self._captures.pop(experiment_id)
        files = {}
        for topic, cap in captures.items():
            count, crc = cap.finish()
            files[topic] = {"name": topic_filename(topic), "records": count, "crc32": crc}
        manifest = {
            "format": ARCHIVE_FORMAT,
            "experiment_id": experiment_id,
            "topics": exp.topics,
            "started_at": exp.started_at,
            "stopped_at": exp.stopped_at,
            "counts": {t: files[t]["records"] for t in exp.topics},
            "files": files,
        }
        exp_dir = self.archive_dir / experiment_id
        tmp = exp_dir / "manifest.tmp"
        tmp.write_text(json.dumps(manifest, indent=2))
        tmp.replace(exp_dir / "manifest.json")
        exp.state = STATE_ARCHIVED
        return manifest

    def archive_path(self, experiment_id: str) -> Path:
        return self.archive_dir / experiment_id

    def list(self) -> list[dict]:
        return [e.to_json() for e in self._experiments.values()]

    def running_for_topic(self, topic: str) -> str | None:
        return self._topic_owner.get(topic)


def replay(
    archive: ExperimentArchive,
    engine: BrokerEngine,
    speed: float = 1.0,
    target: dict[str, str] | None = None,
    sleep: Callable[[float], None] = time.sleep,
    clock: Callable[[], float] = time.monotonic,
) -> ReplayReport:
    """Republish an archive with its original order and timing.

    Blocking variant; the service wraps this with an async sleeper. The
    report carries per-gap scheduled-vs-actual timing errors.
    """
    if speed < 0:
        raise InvalidArgument("replay speed must be >= 0")
    mapping = target or {}
    for t in archive.topics:
        dest = mapping.get(t, t)
        if not engine.has_topic(dest):
            raise UnknownTopic(f"replay target topic missing: {dest}")
    report = ReplayReport(experiment_id=archive.experiment_id, speed=speed)
    base_ts: int | None = None
    t0 = clock()
    prev_actual = 0.0
    prev_scheduled = 0.0
    for rec in archive.iter_merged():
        if base_ts is None:
            base_ts = rec.ts_capture
        scheduled = (rec.ts_capture - base_ts) / 1e9 / speed if speed > 0 else 0.0
        if speed > 0:
            while True:
                delay = scheduled - (clock() - t0)
                if delay <= 0:
                    break
                sleep(delay)
        headers = dict(rec.headers)
        headers[REPLAY_HEADER] = archive.experiment_id
        msg = wire.DataMessage(
            topic=mapping.get(rec.topic, rec.topic),
            payload=rec.payload,
            key=rec.key,
            ts_pub=rec.ts_pub,
            headers=headers,
        )
        engine.append(msg.topic, msg)
        actual = clock() - t0
        if report.records > 0:
            gap_error = (actual - prev_actual) - (scheduled - prev_scheduled)
            report.gap_errors_ms.append(gap_error * 1e3)
        prev_actual = actual
        prev_scheduled = scheduled
        report.records += 1
    report.duration_s = clock() - t0
    report.cumulative_drift_ms = (prev_actual - prev_scheduled) * 1e3
    return report
