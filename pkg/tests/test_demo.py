"""Steering demo: closed-loop behavior and replay equivalence."""

import threading

import pytest

from mdml.demo import (
    CONTROL_TOPIC,
    SENSOR_TOPIC,
    RollingMeanSteering,
    run_analysis_agent,
    steering_demo,
)
from mdml.client import ProducerAgent


class TestRollingMeanRule:
    def test_in_band_never_corrects(self):
        rule = RollingMeanSteering()
        for v in [50, 51, 49, 50.5, 49.5] * 10:
            _, adjust = rule.feed(v)
            assert adjust is None

    def test_step_triggers_correction(self):
        rule = RollingMeanSteering()
        for _ in range(10):
            rule.feed(50.0)
        adjusts = []
        for _ in range(10):
            _, adjust = rule.feed(70.0)
            if adjust is not None:
                adjusts.append(adjust)
        assert adjusts and adjusts[0] == pytest.approx(-20.0)

    def test_cooldown_limits_rate(self):
        rule = RollingMeanSteering(cooldown=10)
        count = 0
        for _ in range(25):
            _, adjust = rule.feed(80.0)
            if adjust is not None:
                count += 1
        assert count == 3  # samples 1, 11, 21

    def test_sequence_determinism(self):
        values = [50.0] * 20 + [70.0] * 20 + [50.0] * 20
        def run():
            rule = RollingMeanSteering()
            return [rule.feed(v) for v in values]
        assert run() == run()


@pytest.mark.slow
class TestSteeringDemo:
    def test_no_disturbance_zero_corrections(self, addr):
        report = steering_demo(addr, duration=4.0, seed=7, rate_hz=10.0)
        assert len(report.samples) == 40
        assert report.corrections == []
        assert report.excursions == []

    def test_step_disturbance_recovers_within_3s(self, addr):
        report = steering_demo(addr, duration=8.0, seed=7, rate_hz=10.0,
                               disturbances=[(3.0, 20.0)])
        assert len(report.corrections) >= 1
        assert len(report.excursions) >= 1
        first = report.excursions[0]
        assert first["reentry_t"] is not None
        assert first["within_3s"] is True

    def test_replay_emits_identical_corrections(self, addr):
        report, exp_id = steering_demo(addr, duration=6.0, seed=3, rate_hz=10.0,
                                       disturbances=[(2.0, 20.0)], capture=True)
        assert len(report.corrections) >= 1

        stop = threading.Event()
        ready = threading.Event()
        replay_corrections: list[dict] = []
        t = threading.Thread(
            target=run_analysis_agent,
            args=(addr, stop, replay_corrections),
            kwargs={"ready": ready},
            daemon=True)
        t.start()
        assert ready.wait(timeout=10)

        with ProducerAgent(addr) as admin:
            admin.experiment_replay(exp_id, speed=0, timeout=120)
        t.join(timeout=30)
        stop.set()

        assert [c["adjust"] for c in replay_corrections] == \
            [c["adjust"] for c in report.corrections]
        assert [c["sample_seq"] for c in replay_corrections] == \
            [c["sample_seq"] for c in report.corrections]
