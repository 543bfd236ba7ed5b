"""Append-only partitioned topic logs backed by on-disk segment files.

Directory layout under the broker data dir:

    <data_dir>/<topic>/meta.json                 topic metadata
    <data_dir>/<topic>/<partition>/<base>.seg    segment files, base = first offset

Each segment record is ``offset (u64 BE) + ts_append (i64 BE)`` followed by
the message's wire DATA frame, verbatim. One codec, zero translation: the
bytes a producer sent are the bytes stored and the bytes replayed.

Offsets start at 0 and increase by exactly 1 per append, never reused.
Segments roll at 64 MiB or 100k records, whichever comes first; retention
deletes whole oldest segments only, so the earliest retained offset always
falls on a segment boundary.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import time
from bisect import bisect_right
from dataclasses import dataclass
from pathlib import Path

from . import wire
from .errors import OffsetOutOfRange, UnknownPartition

logger = logging.getLogger(__name__)

RECORD_PREFIX = struct.Struct(">Qq")  # offset, ts_append
RECORD_PREFIX_SIZE = RECORD_PREFIX.size  # 16

SEGMENT_MAX_BYTES = 64 << 20
SEGMENT_MAX_RECORDS = 100_000

DEFAULT_READ_MAX_BYTES = 8 << 20


@dataclass
class RetentionPolicy:
    """Bounds on retained log size and age; None means unlimited."""

    max_bytes: int | None = None
    max_age_secs: float | None = None

    @property
    def unlimited(self) -> bool:
        return self.max_bytes is None and self.max_age_secs is None


@dataclass
class RawRecord:
    offset: int
    ts_append: int
    frame: memoryview  # complete wire frame, backed by an immutable buffer

    def frame_bytes(self) -> bytes:
        return bytes(self.frame)


class _Segment:
    def __init__(self, path: Path, base_offset: int):
        self.path = path
        self.base_offset = base_offset
        self.positions: list[int] = []  # byte position of record i (= offset base+i)
        self.size = 0
        self.last_ts = 0
        self._read_fd: int | None = None

    @property
    def record_count(self) -> int:
        return len(self.positions)

    @property
    def next_offset(self) -> int:
        return self.base_offset + self.record_count

    def read_fd(self) -> int:
        if self._read_fd is None:
            self._read_fd = os.open(self.path, os.O_RDONLY)
        return self._read_fd

    def close(self) -> None:
        if self._read_fd is not None:
            os.close(self._read_fd)
            self._read_fd = None

    def scan(self) -> bool:
        """Rebuild the position index from disk.

        Returns False if a torn record was found (file truncated to the last
        complete record), True for a clean scan.
        """
        self.positions.clear()
        self.size = os.path.getsize(self.path)
        fd = self.read_fd()
        pos = 0
        clean = True
        while pos < self.size:
            head = os.pread(fd, RECORD_PREFIX_SIZE + wire.FIXED_HEADER_SIZE, pos)
            if len(head) < RECORD_PREFIX_SIZE + wire.FIXED_HEADER_SIZE:
                clean = False
                break
            offset, ts = RECORD_PREFIX.unpack_from(head)
            try:
                _, _, _, hdr_len, pay_len = struct.unpack_from(
                    ">BBHII", head, RECORD_PREFIX_SIZE + 4)
            except struct.error:
                clean = False
                break
            if head[RECORD_PREFIX_SIZE:RECORD_PREFIX_SIZE + 4] != wire.MAGIC:
                clean = False
                break
            rec_len = RECORD_PREFIX_SIZE + wire.FIXED_HEADER_SIZE + hdr_len + pay_len
            if pos + rec_len > self.size:
                clean = False
                break
            if offset != self.base_offset + len(self.positions):
                clean = False
                break
            self.positions.append(pos)
            self.last_ts = ts
            pos += rec_len
        if not clean:
            logger.warning("truncating torn record in %s at byte %d", self.path, pos)
            with open(self.path, "r+b") as f:
                f.truncate(pos)
            self.size = pos
        else:
            self.size = pos
        return clean


class PartitionLog:
    """One independently ordered sub-log; appends are serialized by a lock."""

    def __init__(self, path: Path):
        self.path = path
        self.path.mkdir(parents=True, exist_ok=True)
        self.segments: list[_Segment] = []
        self._write_fd: int | None = None
        self._last_ts = 0
        self._recover()

    @property
    def next_offset(self) -> int:
        if not self.segments:
            return 0
        return self.segments[-1].next_offset

    @property
    def earliest_offset(self) -> int:
        if not self.segments:
            return 0
        return self.segments[0].base_offset

    def _recover(self) -> None:
        bases = sorted(
            int(p.stem) for p in self.path.glob("*.seg")
        )
        torn = False
        for base in bases:
            if torn:
                # Everything after a torn record is unreachable; drop it.
                victim = self.path / f"{base:020d}.seg"
                logger.warning("dropping unreachable segment %s", victim)
                victim.unlink()
                continue
            seg = _Segment(self.path / f"{base:020d}.seg", base)
            if not seg.scan():
                torn = True
            if seg.record_count or not torn:
                self.segments.append(seg)
            else:
                seg.close()
                seg.path.unlink()
        # Drop empty trailing segment files left by a crash before first write.
        while self.segments and self.segments[-1].record_count == 0 and len(self.segments) > 1:
            seg = self.segments.pop()
            seg.close()
            seg.path.unlink()
        if self.segments:
            self._last_ts = self.segments[-1].last_ts

    def _active(self) -> _Segment:
        if self.segments:
            seg = self.segments[-1]
            if seg.size < SEGMENT_MAX_BYTES and seg.record_count < SEGMENT_MAX_RECORDS:
                return seg
        return self._roll()

    def _roll(self) -> _Segment:
        if self._write_fd is not None:
            os.close(self._write_fd)
            self._write_fd = None
        base = self.next_offset
        seg = _Segment(self.path / f"{base:020d}.seg", base)
        seg.path.touch()
        self.segments.append(seg)
        return seg

    def _writer(self, seg: _Segment) -> int:
        if self._write_fd is None:
            self._write_fd = os.open(seg.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        return self._write_fd

    def append(self, frame_parts: tuple, ts_append: int | None = None) -> tuple[int, int]:
        """Append one record; returns (offset, ts_append).

        ``frame_parts`` is a tuple of buffers that concatenate to a complete
        wire DATA frame. The write goes straight to the OS (no user-space
        buffering), so an acknowledged append survives a process kill.
        """
        ts = ts_append if ts_append is not None else time.time_ns()
        if ts < self._last_ts:
            ts = self._last_ts  # keep ts_append nondecreasing under clock steps
        seg = self._active()
        fd = self._writer(seg)
        offset = seg.next_offset
        prefix = RECORD_PREFIX.pack(offset, ts)
        written = os.writev(fd, [prefix, *frame_parts])
        expected = RECORD_PREFIX_SIZE + sum(len(p) for p in frame_parts)
        while written < expected:  # extremely rare short writev on regular files
            flat = b"".join([prefix, *[bytes(p) for p in frame_parts]])
            written += os.write(fd, flat[written:])
        start = seg.size
        seg.size = start + expected  # grow size before indexing: readers never
        seg.positions.append(start)  # see an indexed record past the size bound
        seg.last_ts = ts
        self._last_ts = ts
        return offset, ts

    def read(self, from_offset: int, max_records: int,
             max_bytes: int = DEFAULT_READ_MAX_BYTES) -> list[RawRecord]:
        """Records with offsets >= from_offset, in offset order.

        Returns an empty list when caught up; raises OffsetOutOfRange when
        from_offset is past next_offset.
        """
        nxt = self.next_offset
        if from_offset > nxt:
            raise OffsetOutOfRange(f"offset {from_offset} beyond next offset {nxt}")
        if from_offset < self.earliest_offset:
            from_offset = self.earliest_offset
        out: list[RawRecord] = []
        budget = max_bytes
        while max_records > 0 and from_offset < nxt:
            seg = self._segment_for(from_offset)
            if seg is None:
                break
            idx = from_offset - seg.base_offset
            last = min(seg.record_count, idx + max_records)
            start_pos = seg.positions[idx]

            def span_end(j: int) -> int:
                return seg.positions[j] if j < seg.record_count else seg.size

            # Trim to the byte budget, but always deliver at least one record.
            while last > idx + 1 and span_end(last) - start_pos > budget:
                last -= 1
            end_pos = span_end(last)
            if end_pos - start_pos > budget and out:
                break
            blob = os.pread(seg.read_fd(), end_pos - start_pos, start_pos)
            mv = memoryview(blob)
            pos = 0
            for i in range(idx, last):
                offset, ts = RECORD_PREFIX.unpack_from(mv, pos)
                rec_start = pos + RECORD_PREFIX_SIZE
                part = wire.split_frame(mv[rec_start:])
                if part is None:
                    raise OffsetOutOfRange(f"corrupt record at offset {offset}")
                _, _, _, consumed = part
                out.append(RawRecord(offset, ts, mv[rec_start:rec_start + consumed]))
                pos = rec_start + consumed
            taken = last - idx
            max_records -= taken
            budget -= end_pos - start_pos
            from_offset += taken
            if budget <= 0:
                break
        return out

    def _segment_for(self, offset: int) -> _Segment | None:
        bases = [s.base_offset for s in self.segments]
        i = bisect_right(bases, offset) - 1
        if i < 0:
            return None
        seg = self.segments[i]
        if offset >= seg.next_offset:
            return None
        return seg

    def total_bytes(self) -> int:
        return sum(s.size for s in self.segments)

    def sweep(self, policy: RetentionPolicy, now_ns: int | None = None) -> int:
        """Delete whole oldest segments fully outside the policy window."""
        if policy.unlimited or len(self.segments) <= 1:
            return 0
        now = now_ns if now_ns is not None else time.time_ns()
        removed = 0
        while len(self.segments) > 1:
            seg = self.segments[0]
            newer_bytes = sum(s.size for s in self.segments[1:])
            stale_by_size = (policy.max_bytes is not None
                             and newer_bytes >= policy.max_bytes)
            stale_by_age = (policy.max_age_secs is not None
                            and seg.last_ts < now - int(policy.max_age_secs * 1e9))
            if not (stale_by_size or stale_by_age):
                break
            seg.close()
            seg.path.unlink()
            self.segments.pop(0)
            removed += 1
        return removed

    def close(self) -> None:
        if self._write_fd is not None:
            os.close(self._write_fd)
            self._write_fd = None
        for seg in self.segments:
            seg.close()


class TopicLog:
    """A named, partitioned append-only log."""

    def __init__(self, path: Path, name: str, partition_count: int | None = None,
                 created_at: int | None = None):
        self.path = path
        self.name = name
        meta_path = path / "meta.json"
        if meta_path.exists():
            meta = json.loads(meta_path.read_text())
            self.partition_count = meta["partition_count"]
            self.created_at = meta["created_at"]
        else:
            assert partition_count is not None
            path.mkdir(parents=True, exist_ok=True)
            self.partition_count = partition_count
            self.created_at = created_at if created_at is not None else time.time_ns()
            tmp = meta_path.with_suffix(".tmp")
            tmp.write_text(json.dumps({
                "name": name,
                "partition_count": self.partition_count,
                "created_at": self.created_at,
            }))
            tmp.replace(meta_path)
        self.partitions = [PartitionLog(path / str(i)) for i in range(self.partition_count)]

    def partition(self, index: int) -> PartitionLog:
        if not 0 <= index < self.partition_count:
            raise UnknownPartition(f"{self.name} has no partition {index}")
        return self.partitions[index]

    def sweep(self, policy: RetentionPolicy, now_ns: int | None = None) -> int:
        return sum(p.sweep(policy, now_ns) for p in self.partitions)

    def close(self) -> None:
        for p in self.partitions:
            p.close()
