"""Closed-loop steering demo: a drifting scalar sensor, an analysis agent
computing a rolling mean, and corrections published back to the sensor.

The sensor streams JSON samples at a fixed rate to ``mdml.demo.sensor``.
The analysis agent keeps a 10-sample rolling mean; when the mean leaves
the [45, 55] band (and the sample-count cooldown has passed) it publishes
a correction to ``mdml.demo.control`` that the sensor applies additively.
All analysis decisions depend only on the sample values and their order,
so a captured experiment replayed at any speed produces the identical
correction sequence.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .client import ConsumerAgent, ProducerAgent
from .errors import TopicExists

SENSOR_TOPIC = "mdml.demo.sensor"
CONTROL_TOPIC = "mdml.demo.control"

BAND = (45.0, 55.0)
WINDOW = 10
COOLDOWN_SAMPLES = 10
SETPOINT = 50.0


@dataclass
class SteeringReport:
    duration_s: float
    rate_hz: float
    seed: int
    disturbances: list[tuple[float, float]]
    samples: list[dict] = field(default_factory=list)
    corrections: list[dict] = field(default_factory=list)
    excursions: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "duration_s": self.duration_s,
            "rate_hz": self.rate_hz,
            "seed": self.seed,
            "disturbances": [list(d) for d in self.disturbances],
            "samples": self.samples,
            "corrections": self.corrections,
            "excursions": self.excursions,
        }


class RollingMeanSteering:
    """Pure steering rule: feed samples in order, emit corrections.

    Value-sequence deterministic: no wall-clock dependence, so replayed
    streams produce byte-identical correction decisions.
    """

    def __init__(self, window: int = WINDOW, band: tuple[float, float] = BAND,
                 cooldown: int = COOLDOWN_SAMPLES, setpoint: float = SETPOINT):
        self.window = window
        self.band = band
        self.cooldown = cooldown
        self.setpoint = setpoint
        self._values: list[float] = []
        self._since_correction = cooldown

    def feed(self, value: float) -> tuple[float, float | None]:
        """Returns (rolling_mean, adjustment or None)."""
        self._values.append(value)
        if len(self._values) > self.window:
            self._values.pop(0)
        mean = sum(self._values) / len(self._values)
        self._since_correction += 1
        if (mean < self.band[0] or mean > self.band[1]) \
                and self._since_correction >= self.cooldown:
            self._since_correction = 0
            return mean, self.setpoint - value
        return mean, None


def _ensure_topics(agent: ProducerAgent) -> None:
    for topic in (SENSOR_TOPIC, CONTROL_TOPIC):
        try:
            agent.create_topic(topic, 1)
        except TopicExists:
            pass


def run_analysis_agent(addr: str, stop: threading.Event,
                       corrections_out: list[dict] | None = None,
                       idle_timeout: float = 2.0,
                       ready: threading.Event | None = None) -> list[dict]:
    """Consume sensor samples, publish corrections; returns corrections."""
    out = corrections_out if corrections_out is not None else []
    rule = RollingMeanSteering()
    agent = ConsumerAgent(addr)
    agent.subscribe(SENSOR_TOPIC, start="latest", mode=("idle_timeout", idle_timeout))
    if ready is not None:
        ready.set()
    n = 0
    for msg in agent.consume(timeout=idle_timeout * 5):
        if stop.is_set():
            break
        sample = json.loads(msg.payload)
        mean, adjust = rule.feed(float(sample["value"]))
        if adjust is not None:
            doc = {"seq": n, "adjust": adjust, "mean": mean,
                   "sample_seq": sample.get("seq")}
            agent.produce(CONTROL_TOPIC, json.dumps(doc).encode("utf-8"),
                          headers={"content-type": "application/json"})
            out.append(doc)
            n += 1
    agent.close()
    return out


def steering_demo(addr: str, duration: float = 10.0, seed: int = 0,
                  rate_hz: float = 10.0,
                  disturbances: list[tuple[float, float]] | None = None,
                  capture: bool = False) -> SteeringReport | tuple:
    """Run the full loop; returns the transcript report.

    ``disturbances`` is a list of (t_seconds, magnitude) step offsets.
    With ``capture=True`` the run is wrapped in an experiment and
    (report, experiment_id) is returned.
    """
    disturbances = disturbances or []
    report = SteeringReport(duration_s=duration, rate_hz=rate_hz, seed=seed,
                            disturbances=list(disturbances))
    admin = ProducerAgent(addr)
    _ensure_topics(admin)
    experiment_id = None
    if capture:
        experiment_id = admin.experiment_start(
            [SENSOR_TOPIC, CONTROL_TOPIC])["experiment_id"]

    stop = threading.Event()
    analysis_thread = threading.Thread(
        target=run_analysis_agent, args=(addr, stop, report.corrections),
        daemon=True)
    analysis_thread.start()

    # corrections applied to the sensor as they arrive
    correction_total = threading.Lock(), [0.0]

    def correction_listener():
        agent = ConsumerAgent(addr)
        agent.subscribe(CONTROL_TOPIC, start="latest", mode="indefinite")
        while not stop.is_set():
            for msg in agent.consume(timeout=0.25):
                doc = json.loads(msg.payload)
                with correction_total[0]:
                    correction_total[1][0] += float(doc["adjust"])
                if stop.is_set():
                    break
        agent.close()

    listener_thread = threading.Thread(target=correction_listener, daemon=True)
    listener_thread.start()
    time.sleep(0.2)  # let both consumers establish LATEST subscriptions

    sensor = ProducerAgent(addr)
    rng = np.random.default_rng(seed)
    n_samples = int(duration * rate_hz)
    t0 = time.monotonic()
    for i in range(n_samples):
        target = t0 + i / rate_hz
        delay = target - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        t_rel = i / rate_hz
        offset = sum(m for (t_d, m) in disturbances if t_rel >= t_d)
        with correction_total[0]:
            applied = correction_total[1][0]
        value = SETPOINT + float(rng.normal(0.0, 0.4)) + offset + applied
        sensor.produce(SENSOR_TOPIC,
                       json.dumps({"seq": i, "t": t_rel, "value": value}).encode(),
                       headers={"content-type": "application/json"})
        report.samples.append({"t": round(t_rel, 3), "value": round(value, 3)})
    analysis_thread.join(timeout=15)
    stop.set()
    listener_thread.join(timeout=15)
    sensor.close()

    _annotate_excursions(report)
    if capture:
        admin.experiment_stop(experiment_id)
        admin.close()
        return report, experiment_id
    admin.close()
    return report


def _annotate_excursions(report: SteeringReport) -> None:
    """Mark mean-excursion windows and when the mean re-entered the band."""
    rule_means = []
    window: list[float] = []
    for s in report.samples:
        window.append(s["value"])
        if len(window) > WINDOW:
            window.pop(0)
        rule_means.append(sum(window) / len(window))
    in_band_prev = True
    current = None
    for i, mean in enumerate(rule_means):
        t = report.samples[i]["t"]
        in_band = BAND[0] <= mean <= BAND[1]
        report.samples[i]["mean"] = round(mean, 3)
        report.samples[i]["in_band"] = in_band
        if in_band_prev and not in_band:
            current = {"start_t": t, "reentry_t": None, "within_3s": False}
            report.excursions.append(current)
        elif not in_band_prev and in_band and current is not None:
            current["reentry_t"] = t
            current["within_3s"] = (t - current["start_t"]) <= 3.0
            current = None
        in_band_prev = in_band
