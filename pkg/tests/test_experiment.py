"""Experiment capture, archive integrity, and replay order/content."""

import json
import time
from pathlib import Path

import pytest

from mdml import wire
from mdml.broker import BrokerEngine
from mdml.client import ConsumerAgent, ProducerAgent
from mdml.errors import (
    ArchiveCorrupt,
    NotRunning,
    TopicBusy,
    UnknownTopic,
    UnsupportedVersion,
)
from mdml.experiment import ExperimentManager, load_archive, replay


@pytest.fixture
def engine(tmp_path):
    eng = BrokerEngine(tmp_path / "data")
    yield eng
    eng.close()


@pytest.fixture
def manager(engine, tmp_path):
    return ExperimentManager(engine, tmp_path / "archives")


def publish(engine, topic, payload, headers=None, key=None):
    msg = wire.DataMessage(topic=topic, payload=payload, key=key,
                           headers=headers or {})
    return engine.append(topic, msg)


class TestCapture:
    def test_capture_counts(self, engine, manager):
        engine.create_topic("mdml.exp.a", 2)
        engine.create_topic("mdml.exp.b", 2)
        exp = manager.start(["mdml.exp.a", "mdml.exp.b"])
        for i in range(3):
            publish(engine, "mdml.exp.a", b"a%d" % i)
        for i in range(2):
            publish(engine, "mdml.exp.b", b"b%d" % i)
        manifest = manager.stop(exp.experiment_id)
        assert manifest["counts"] == {"mdml.exp.a": 3, "mdml.exp.b": 2}

    def test_messages_before_start_excluded(self, engine, manager):
        engine.create_topic("mdml.exp.pre", 1)
        publish(engine, "mdml.exp.pre", b"before")
        exp = manager.start(["mdml.exp.pre"])
        publish(engine, "mdml.exp.pre", b"during")
        manifest = manager.stop(exp.experiment_id)
        assert manifest["counts"] == {"mdml.exp.pre": 1}
        archive = load_archive(manager.archive_path(exp.experiment_id))
        records = list(archive.iter_topic("mdml.exp.pre"))
        assert [r.payload for r in records] == [b"during"]

    def test_unknown_topic(self, engine, manager):
        with pytest.raises(UnknownTopic):
            manager.start(["mdml.exp.nope"])

    def test_topic_busy(self, engine, manager):
        engine.create_topic("mdml.exp.busy", 1)
        manager.start(["mdml.exp.busy"])
        with pytest.raises(TopicBusy):
            manager.start(["mdml.exp.busy"])

    def test_stop_twice(self, engine, manager):
        engine.create_topic("mdml.exp.x", 1)
        exp = manager.start(["mdml.exp.x"])
        manager.stop(exp.experiment_id)
        with pytest.raises(NotRunning):
            manager.stop(exp.experiment_id)

    def test_zero_message_archive_valid(self, engine, manager):
        engine.create_topic("mdml.exp.zero", 1)
        exp = manager.start(["mdml.exp.zero"])
        manifest = manager.stop(exp.experiment_id)
        assert manifest["counts"] == {"mdml.exp.zero": 0}
        archive = load_archive(manager.archive_path(exp.experiment_id))
        assert archive.counts() == {"mdml.exp.zero": 0}

    def test_capture_preserves_bytes_and_headers(self, engine, manager):
        engine.create_topic("mdml.exp.fidelity", 2)
        exp = manager.start(["mdml.exp.fidelity"])
        payload = bytes(range(256)) * 3
        publish(engine, "mdml.exp.fidelity", payload,
                headers={"h1": "v1"}, key=b"\x00key")
        manager.stop(exp.experiment_id)
        archive = load_archive(manager.archive_path(exp.experiment_id))
        rec = next(archive.iter_topic("mdml.exp.fidelity"))
        assert rec.payload == payload
        assert rec.headers == {"h1": "v1"}
        assert rec.key == b"\x00key"
        assert rec.ts_capture > 0


class TestArchive:
    def _make(self, engine, manager, n=5):
        engine.create_topic("mdml.arc.t", 1)
        exp = manager.start(["mdml.arc.t"])
        for i in range(n):
            publish(engine, "mdml.arc.t", b"m%d" % i)
        manifest = manager.stop(exp.experiment_id)
        return exp.experiment_id, manifest

    def test_load_matches_writer(self, engine, manager):
        exp_id, manifest = self._make(engine, manager)
        archive = load_archive(manager.archive_path(exp_id))
        assert archive.manifest == manifest

    def test_crc_verified(self, engine, manager):
        exp_id, _ = self._make(engine, manager)
        path = manager.archive_path(exp_id) / "mdml_arc_t.ndjson"
        data = path.read_bytes()
        path.write_bytes(data[:-10])  # truncate one record
        with pytest.raises(ArchiveCorrupt):
            load_archive(manager.archive_path(exp_id))

    def test_unsupported_version(self, engine, manager):
        exp_id, _ = self._make(engine, manager)
        mpath = manager.archive_path(exp_id) / "manifest.json"
        doc = json.loads(mpath.read_text())
        doc["format"] = "mdml-archive/999"
        mpath.write_text(json.dumps(doc))
        with pytest.raises(UnsupportedVersion):
            load_archive(manager.archive_path(exp_id))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ArchiveCorrupt):
            load_archive(tmp_path)


class TestReplay:
    def test_speed_zero_content_and_order(self, engine, manager):
        engine.create_topic("mdml.rep.t", 1)
        exp = manager.start(["mdml.rep.t"])
        for i in range(10):
            publish(engine, "mdml.rep.t", b"r%d" % i)
        manager.stop(exp.experiment_id)
        archive = load_archive(manager.archive_path(exp.experiment_id))

        before = engine.next_offset("mdml.rep.t", 0)
        report = replay(archive, engine, speed=0)
        assert report.records == 10
        replayed = engine.read("mdml.rep.t", 0, before, 100)
        payloads = [m.payload for _, _, m in replayed]
        assert payloads == [b"r%d" % i for i in range(10)]
        for _, _, m in replayed:
            assert m.headers["replay.of"] == exp.experiment_id

    def test_replay_timing_scaled(self, engine, manager):
        engine.create_topic("mdml.rep.timed", 1)
        exp = manager.start(["mdml.rep.timed"])
        gaps = [0.0, 0.10, 0.25]
        for i, gap in enumerate(gaps):
            time.sleep(gap)
            publish(engine, "mdml.rep.timed", b"t%d" % i)
        manager.stop(exp.experiment_id)
        archive = load_archive(manager.archive_path(exp.experiment_id))

        t0 = time.monotonic()
        report = replay(archive, engine, speed=2.0)
        elapsed = time.monotonic() - t0
        original_span = 0.35
        assert abs(elapsed - original_span / 2.0) < 0.08
        assert report.records == 3

    def test_replay_unknown_target(self, engine, manager):
        engine.create_topic("mdml.rep.src", 1)
        exp = manager.start(["mdml.rep.src"])
        publish(engine, "mdml.rep.src", b"x")
        manager.stop(exp.experiment_id)
        archive = load_archive(manager.archive_path(exp.experiment_id))
        with pytest.raises(UnknownTopic):
            replay(archive, engine, speed=0, target={"mdml.rep.src": "mdml.no.pe"})

    def test_replay_of_replay_identical(self, engine, manager):
        """Capturing a replay yields identical per-topic payload sequences."""
        engine.create_topic("mdml.rep.twin", 2)
        exp1 = manager.start(["mdml.rep.twin"])
        for i in range(12):
            publish(engine, "mdml.rep.twin", b"payload-%03d" % i)
        manager.stop(exp1.experiment_id)
        archive1 = load_archive(manager.archive_path(exp1.experiment_id))

        exp2 = manager.start(["mdml.rep.twin"])
        replay(archive1, engine, speed=0)
        manager.stop(exp2.experiment_id)
        archive2 = load_archive(manager.archive_path(exp2.experiment_id))

        seq1 = [r.payload for r in archive1.iter_merged()]
        seq2 = [r.payload for r in archive2.iter_merged()]
        assert seq1 == seq2


class TestOverWire:
    def test_end_to_end_capture_replay(self, addr):
        with ProducerAgent(addr) as producer:
            producer.create_topic("mdml.wire.exp", 2)
            exp = producer.experiment_start(["mdml.wire.exp"])
            for i in range(5):
                producer.produce("mdml.wire.exp", b"w%d" % i)
            manifest = producer.experiment_stop(exp["experiment_id"])
            assert manifest["counts"] == {"mdml.wire.exp": 5}

            consumer = ConsumerAgent(addr)
            consumer.subscribe("mdml.wire.exp", start="latest",
                               mode=("max_count", 5))
            report = producer.experiment_replay(exp["experiment_id"], speed=0,
                                                timeout=60)
            assert report["records"] == 5
            got = sorted(m.payload for m in consumer.consume(timeout=10))
            assert got == [b"w%d" % i for i in range(5)]
            for_replayed = [m for m in got]
            consumer.close()

    def test_stop_not_running(self, addr):
        with ProducerAgent(addr) as producer:
            producer.create_topic("mdml.wire.nr", 1)
            exp = producer.experiment_start(["mdml.wire.nr"])
            producer.experiment_stop(exp["experiment_id"])
            with pytest.raises(NotRunning):
                producer.experiment_stop(exp["experiment_id"])
