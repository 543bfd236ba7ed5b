"""Benchmark harness: chunk-size throughput, consumer-group scaling, and
sustained streaming-rate floors.

Throughput is reported in MB/s with MB = 10^6 bytes; chunk sizes are
stated in binary units (KiB/MiB). Payload bytes are deterministic per
seed, so identical seeds always stream identical content; only the
timing numbers vary run to run.
"""

from __future__ import annotations

import json
import statistics
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np

from .client import ConsumerAgent, ProducerAgent
from .errors import InvalidArgument

MB = 1_000_000

PLIF_BYTES = 10_000_000
SEM_BYTES = 4_250_000

UNIT_NOTE = "MB/s where MB = 1e6 bytes; chunk sizes in binary units"


@dataclass
class BenchReport:
    scenario: str
    params: dict
    samples_mbps: list[float] = field(default_factory=list)
    message_count: int = 0
    bytes_total: int = 0
    notes: list[str] = field(default_factory=list)
    conservation_ok: bool | None = None

    @property
    def median_mbps(self) -> float:
        return statistics.median(self.samples_mbps) if self.samples_mbps else 0.0

    def to_json(self) -> dict:
        doc = {
            "scenario": self.scenario,
            "unit": UNIT_NOTE,
            "params": self.params,
            "median_mbps": round(self.median_mbps, 3),
            "min_mbps": round(min(self.samples_mbps), 3) if self.samples_mbps else 0.0,
            "max_mbps": round(max(self.samples_mbps), 3) if self.samples_mbps else 0.0,
            "samples_mbps": [round(s, 3) for s in self.samples_mbps],
            "message_count": self.message_count,
            "bytes_total": self.bytes_total,
            "notes": self.notes,
        }
        if self.conservation_ok is not None:
            doc["conservation_ok"] = self.conservation_ok
        return doc


@dataclass
class SyntheticSource:
    """Deterministic payload generator for the benchmark scenarios."""

    kind: str = "plif"  # plif | sem | scalar
    size: int | None = None
    rate_hz: float = 10.0
    seed: int = 0

    def payload_size(self) -> int:
        if self.size is not None:
            return self.size
        return {"plif": PLIF_BYTES, "sem": SEM_BYTES, "scalar": 256}[self.kind]

    def payload(self, index: int) -> bytes:
        if self.kind == "scalar":
            rng = np.random.default_rng((self.seed, index))
            doc = {"seq": index, "value": float(rng.normal(50.0, 1.0))}
            return json.dumps(doc).encode("utf-8")
        rng = np.random.default_rng((self.seed, index))
        return rng.bytes(self.payload_size())


def _bench_topic(agent: ProducerAgent, prefix: str, partitions: int) -> str:
    topic = f"mdml.bench.{prefix}-{uuid.uuid4().hex[:8]}"
    agent.create_topic(topic, partitions)
    return topic


class _Drain(threading.Thread):
    """Background consumer that reassembles and timestamps arrivals."""

    def __init__(self, addr: str, topic: str, expect: int | None = None):
        super().__init__(daemon=True)
        self.agent = ConsumerAgent(addr)
        self.agent.subscribe(topic, start="earliest", mode="indefinite")
        self.expect = expect
        self.arrivals: list[tuple[float, int]] = []  # (t, payload size)
        self.cond = threading.Condition()
        self.done = threading.Event()
        self.error: Exception | None = None

    def run(self) -> None:
        try:
            count = 0
            for msg in self.agent.consume(timeout=30):
                with self.cond:
                    self.arrivals.append((time.perf_counter(), len(msg.payload)))
                    self.cond.notify_all()
                count += 1
                if self.expect is not None and count >= self.expect:
                    break
        except Exception as exc:
            self.error = exc
        finally:
            self.done.set()
            with self.cond:
                self.cond.notify_all()

    def wait_for(self, count: int, timeout: float = 60.0) -> None:
        deadline = time.monotonic() + timeout
        with self.cond:
            while len(self.arrivals) < count:
                if self.done.is_set():
                    raise (self.error or RuntimeError("consumer ended early"))
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TimeoutError(f"waited {timeout}s for arrival {count}")
                self.cond.wait(remaining)

    def finish(self) -> None:
        self.done.wait(timeout=120)
        self.agent.close()
        if self.error is not None:
            raise self.error


def bench_chunks(addr: str, payload_size: int, chunk_sizes: list[int],
                 repetitions: int, seed: int = 0,
                 warmup: int = 3) -> list[BenchReport]:
    """Stream ``repetitions`` payloads end to end per chunk size.

    Each sample is one payload's publish-to-reassembled latency converted
    to MB/s; the report carries the median over repetitions. Repetitions
    interleave across the chunk sizes so every size samples the same
    machine state (paired comparison, not back-to-back batches).

    Chunking engages only when the payload exceeds the broker's max
    message size; payloads that fit in one message travel unchunked at
    every chunk-size setting, which is what makes small payloads
    insensitive to this knob.
    """
    if repetitions < 1:
        raise InvalidArgument("repetitions must be >= 1")
    source = SyntheticSource(kind="custom" if payload_size else "plif",
                             size=payload_size, seed=seed)
    payloads = [source.payload(i) for i in range(warmup + repetitions)]

    lanes = []
    for chunk_size in chunk_sizes:
        producer = ProducerAgent(addr, chunk_size=chunk_size,
                                 coat_check_threshold=1 << 40)
        chunking_needed = payload_size > producer.conn.max_frame_payload
        if not chunking_needed:
            producer.chunk_size = producer.conn.max_frame_payload
        topic = _bench_topic(producer, "chunks", 1)
        drain = _Drain(addr, topic, expect=warmup + repetitions)
        drain.start()
        lanes.append({"chunk": chunk_size, "topic": topic, "producer": producer,
                      "drain": drain, "chunked": chunking_needed, "samples": []})

    for i in range(warmup + repetitions):
        for lane in lanes:
            t0 = time.perf_counter()
            lane["producer"].produce(lane["topic"], payloads[i])
            lane["drain"].wait_for(i + 1)
            t1, size = lane["drain"].arrivals[i]
            assert size == len(payloads[i])
            if i >= warmup:
                lane["samples"].append(len(payloads[i]) / max(t1 - t0, 1e-9) / MB)

    reports = []
    for lane in lanes:
        lane["drain"].finish()
        lane["producer"].close()
        notes = [UNIT_NOTE, "repetitions interleaved across chunk sizes"]
        if not lane["chunked"]:
            notes.append("payload fits one message: chunking unused")
        reports.append(BenchReport(
            scenario="chunk-throughput",
            params={"payload_bytes": payload_size, "chunk_bytes": lane["chunk"],
                    "repetitions": repetitions, "seed": seed},
            samples_mbps=lane["samples"],
            message_count=len(lane["samples"]),
            bytes_total=len(lane["samples"]) * payload_size,
            notes=notes,
        ))
    return reports


def bench_scale(addr: str, workers: int, payload_size: int = 1_000_000,
                work_factor_ms_per_mb: float = 50.0, duration: float = 4.0,
                seed: int = 0, messages: int | None = None,
                max_messages: int = 4096) -> BenchReport:
    """Consumer-group scaling with a calibrated per-message handler cost.

    The handler busy-time emulates an offloaded accelerator task
    (``work_factor_ms_per_mb`` milliseconds per 10^6 payload bytes), which
    is what makes compute, not transport, the bottleneck. The producer
    saturates the topic before consumption starts; the conservation check
    (every message consumed exactly once) rides along every run.
    """
    if workers < 1:
        raise InvalidArgument("workers must be >= 1")
    producer = ProducerAgent(addr, chunk_size=1 << 20, coat_check_threshold=1 << 40)
    topic = _bench_topic(producer, "scale", 8)
    group = f"bench-scale-{uuid.uuid4().hex[:8]}"
    payload_mb = payload_size / MB
    handler_secs = work_factor_ms_per_mb * payload_mb / 1e3
    if messages is not None:
        n_messages = messages
    elif handler_secs > 0:
        n_messages = max(workers, int(round(duration * workers / handler_secs)))
        n_messages = min(n_messages, max_messages)
    else:
        n_messages = min(max(workers * 64, 256), max_messages)

    agents = []
    for _ in range(workers):
        agent = ConsumerAgent(addr, group_id=group)
        agent.subscribe(topic, start="earliest", mode=("idle_timeout", 2.0))
        agents.append(agent)

    source = SyntheticSource(kind="custom", size=payload_size, seed=seed)
    payload = source.payload(0)
    for i in range(n_messages):
        producer.produce(topic, payload, headers={"seq": str(i)})

    results: list[dict] = [dict(first=None, last=None, bytes=0, seqs=set(),
                                assignment=0) for _ in range(workers)]

    def work(idx: int) -> None:
        agent = agents[idx]
        stats = results[idx]
        for msg in agent.consume(timeout=60):
            now = time.perf_counter()
            if stats["first"] is None:
                stats["first"] = now
            if handler_secs > 0:
                time.sleep(work_factor_ms_per_mb * len(msg.payload) / MB / 1e3)
            stats["bytes"] += len(msg.payload)
            stats["seqs"].add(msg.headers.get("seq"))
            stats["last"] = time.perf_counter()
        stats["assignment"] = len(agent.assignment)
        agent.close()

    threads = [threading.Thread(target=work, args=(i,), daemon=True)
               for i in range(workers)]
    t_start = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=600)
    producer.close()

    firsts = [r["first"] for r in results if r["first"] is not None]
    lasts = [r["last"] for r in results if r["last"] is not None]
    total_bytes = sum(r["bytes"] for r in results)
    span = (max(lasts) - min(firsts)) if firsts and lasts else 0.0
    if span <= 0:
        span = time.perf_counter() - t_start

    all_seqs: list[str] = []
    for r in results:
        all_seqs.extend(r["seqs"])
    expected = {str(i) for i in range(n_messages)}
    conservation = (len(all_seqs) == n_messages and set(all_seqs) == expected)

    notes = [UNIT_NOTE]
    if handler_secs == 0:
        notes.append("transport-bound: handler does no work")
    idle = sum(1 for r in results if r["first"] is None)
    if idle:
        notes.append(f"idle workers (empty assignment or no deliveries): {idle}")

    return BenchReport(
        scenario="consumer-scaling",
        params={"workers": workers, "payload_bytes": payload_size,
                "work_factor_ms_per_mb": work_factor_ms_per_mb,
                "messages": n_messages, "seed": seed},
        samples_mbps=[total_bytes / span / MB],
        message_count=len(all_seqs),
        bytes_total=total_bytes,
        notes=notes,
        conservation_ok=conservation,
    )


def bench_stream_floor(addr: str, payload_size: int, duration: float,
                       chunk_size: int = 1 << 20, seed: int = 0) -> BenchReport:
    """Sustain a producer-to-reassembled-consumer stream for ``duration``.

    The reported rate is measured at the consumer across reassembled
    arrivals (bytes after the first arrival over the spanned time).
    """
    producer = ProducerAgent(addr, chunk_size=chunk_size,
                             coat_check_threshold=1 << 40)
    topic = _bench_topic(producer, "floor", 1)
    payload = SyntheticSource(kind="custom", size=payload_size, seed=seed).payload(0)
    drain = _Drain(addr, topic)
    drain.start()
    sent = 0
    t_end = time.perf_counter() + duration
    while time.perf_counter() < t_end:
        producer.produce(topic, payload)
        sent += 1
    drain.expect = sent
    drain.wait_for(sent, timeout=max(60.0, duration * 3))
    drain.done.set()
    drain.agent.close()
    producer.close()

    arrivals = drain.arrivals[:sent]
    if len(arrivals) >= 2:
        span = arrivals[-1][0] - arrivals[0][0]
        bytes_after_first = sum(size for _, size in arrivals[1:])
        rate = bytes_after_first / max(span, 1e-9) / MB
    else:
        rate = 0.0
    return BenchReport(
        scenario="stream-floor",
        params={"payload_bytes": payload_size, "chunk_bytes": chunk_size,
                "duration_s": duration, "seed": seed},
        samples_mbps=[rate],
        message_count=len(arrivals),
        bytes_total=sum(size for _, size in arrivals),
        notes=[UNIT_NOTE, "rate measured at the reassembled consumer"],
    )
