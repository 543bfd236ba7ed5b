"""Agent SDK behavior: transfer-path selection, claim checks, the analysis
loop with retries and dead-lettering, schema inference."""

import json
import threading
import time

import numpy as np
import pytest

from mdml import wire
from mdml.client import ConsumerAgent, ProducerAgent
from mdml.errors import ClaimNotFound, NotJson
from mdml.schema import infer_schema


def rand_bytes(n, seed=0):
    return np.random.default_rng(seed).bytes(n)


class TestProducePaths:
    def test_small_payload_single_message(self, addr):
        with ProducerAgent(addr) as agent:
            agent.create_topic("mdml.path.t", 2)
            receipt = agent.produce("mdml.path.t", rand_bytes(500_000))
            assert receipt.path == "plain"
            assert receipt.message_count == 1

    def test_medium_payload_chunked(self, addr):
        with ProducerAgent(addr) as agent:
            agent.create_topic("mdml.path.c", 2)
            receipt = agent.produce("mdml.path.c", rand_bytes(10_000_000))
            assert receipt.path == "chunked"
            assert receipt.message_count == 10

    def test_large_payload_claim_checked(self, addr):
        payload = rand_bytes(3_000_000, seed=5)
        with ProducerAgent(addr, coat_check_threshold=1_000_000) as agent:
            agent.create_topic("mdml.path.cc", 2)
            receipt = agent.produce("mdml.path.cc", payload)
            assert receipt.path == "claim-check"
            assert receipt.ticket is not None
            assert receipt.ticket.size == len(payload)
            assert receipt.ticket.crc32 == wire.crc32_hex(payload)

    def test_claim_check_roundtrip(self, addr):
        payload = rand_bytes(2_500_000, seed=6)
        with ProducerAgent(addr, coat_check_threshold=1_000_000) as producer:
            producer.create_topic("mdml.cc.trip", 2)
            consumer = ConsumerAgent(addr)
            consumer.subscribe("mdml.cc.trip", start="earliest", mode=("max_count", 1))
            producer.produce("mdml.cc.trip", payload, headers={"k": "v"})
            got = list(consumer.consume(timeout=15))
            assert len(got) == 1
            assert got[0].payload == payload
            assert got[0].headers == {"k": "v"}
            consumer.close()

    def test_claim_not_found_stream_continues(self, addr):
        payload = rand_bytes(2_000_000, seed=7)
        errors = []
        with ProducerAgent(addr, coat_check_threshold=1_000_000) as producer:
            producer.create_topic("mdml.cc.gone", 1)
            receipt = producer.produce("mdml.cc.gone", payload)
            producer.produce("mdml.cc.gone", b"after")
            # delete the stored object out from under the consumer
            store_info = producer.conn.request("store.info")
            consumer = ConsumerAgent(addr, on_error=lambda e, ctx: errors.append(e))
            from mdml.connectors import FsObjectStore
            FsObjectStore(store_info["root"]).delete(receipt.ticket.object_key)
            consumer.subscribe("mdml.cc.gone", start="earliest", mode=("max_count", 2))
            got = list(consumer.consume(timeout=15))
            assert [m.payload for m in got] == [b"after"]
            assert len(errors) == 1
            assert isinstance(errors[0], ClaimNotFound)
            consumer.close()

    def test_empty_payload(self, addr):
        with ProducerAgent(addr) as agent:
            agent.create_topic("mdml.path.empty", 1)
            receipt = agent.produce("mdml.path.empty", b"")
            assert receipt.path == "plain"
            consumer = ConsumerAgent(addr)
            consumer.subscribe("mdml.path.empty", start="earliest", mode=("max_count", 1))
            got = list(consumer.consume(timeout=10))
            assert got[0].payload == b""
            consumer.close()


class TestAnalysisLoop:
    def test_identity_handler_republishes(self, addr):
        with ProducerAgent(addr) as producer:
            producer.create_topic("mdml.loop.in", 2)
            producer.create_topic("mdml.loop.out", 2)
            for i in range(5):
                producer.produce("mdml.loop.in", b"p%d" % i)

            worker = ConsumerAgent(addr, group_id="identity")
            worker.subscribe("mdml.loop.in", start="earliest",
                             mode=("idle_timeout", 1.0))
            stats = worker.run_analysis_loop(lambda m: m.payload,
                                             result_topic="mdml.loop.out")
            worker.close()
            assert stats["handled"] == 5
            assert stats["results"] == 5

            check = ConsumerAgent(addr)
            check.subscribe("mdml.loop.out", start="earliest", mode=("max_count", 5))
            got = sorted(m.payload for m in check.consume(timeout=10))
            check.close()
            assert got == [b"p0", b"p1", b"p2", b"p3", b"p4"]

    def test_failing_handler_dead_letters(self, addr):
        with ProducerAgent(addr) as producer:
            producer.create_topic("mdml.loop.bad", 1)
            producer.produce("mdml.loop.bad", b"poison")

            attempts = []

            def handler(msg):
                attempts.append(1)
                raise RuntimeError("boom")

            worker = ConsumerAgent(addr, group_id="dlq-test")
            worker.subscribe("mdml.loop.bad", start="earliest",
                             mode=("idle_timeout", 1.0))
            stats = worker.run_analysis_loop(handler, retries=3)
            worker.close()
            assert len(attempts) == 4  # initial + 3 retries
            assert stats["dead_lettered"] == 1

            check = ConsumerAgent(addr)
            check.subscribe("mdml.loop.bad.dlq", start="earliest",
                            mode=("max_count", 1))
            dead = list(check.consume(timeout=10))
            check.close()
            assert dead[0].payload == b"poison"
            assert "boom" in dead[0].headers["dlq.error"]
            assert dead[0].headers["dlq.topic"] == "mdml.loop.bad"

    def test_commit_after_handle(self, addr):
        """After a clean run, committed offset = last delivered offset + 1."""
        with ProducerAgent(addr) as producer:
            producer.create_topic("mdml.loop.commit", 2)
            for i in range(6):
                producer.produce("mdml.loop.commit", b"c%d" % i)
            worker = ConsumerAgent(addr, group_id="committers")
            worker.subscribe("mdml.loop.commit", start="earliest",
                             mode=("idle_timeout", 1.0))
            worker.run_analysis_loop(lambda m: None)
            groups = {g["group_id"]: g for g in worker.list_registry("groups")}
            committed = groups["committers"]["committed"]
            worker.close()
            next_offsets = {}
            listing = ProducerAgent(addr)
            for t in listing.list_registry("topics"):
                if t["name"] == "mdml.loop.commit":
                    next_offsets = {i: n for i, n in enumerate(t["next_offsets"])}
            listing.close()
            for key, offset in committed.items():
                _, part = key.rsplit("/", 1)
                assert offset == next_offsets[int(part)]
            assert sum(committed.values()) == 6


class TestSchemaInference:
    def test_object_sample(self):
        schema = infer_schema({"temp": 21.5, "unit": "C"})
        assert schema == {
            "type": "object",
            "properties": {"temp": {"type": "number"}, "unit": {"type": "string"}},
            "required": ["temp", "unit"],
        }

    def test_array_sample(self):
        assert infer_schema([1, 2, 3]) == {"type": "array", "items": {"type": "integer"}}

    def test_nested(self):
        schema = infer_schema({"a": {"b": True}, "c": [1.5]})
        assert schema["properties"]["a"]["properties"]["b"] == {"type": "boolean"}
        assert schema["properties"]["c"]["items"] == {"type": "number"}

    def test_attach_schema_registers(self, addr):
        with ProducerAgent(addr) as agent:
            agent.register("lab", "probe")
            doc = agent.attach_schema("mdml.lab.probe",
                                      json.dumps({"temp": 1.0}).encode())
            assert doc["version"] == 1
            assert doc["body"]["properties"]["temp"] == {"type": "number"}
            doc2 = agent.attach_schema("mdml.lab.probe",
                                       json.dumps({"temp": 1.0, "rh": 2}).encode())
            assert doc2["version"] == 2

    def test_binary_payload_not_json(self, addr):
        with ProducerAgent(addr) as agent:
            agent.register("lab", "cam")
            with pytest.raises(NotJson):
                agent.attach_schema("mdml.lab.cam", b"\x89PNG\r\n")
