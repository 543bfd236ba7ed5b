"""Operator CLI: broker lifecycle, topic/experiment administration, stream
tailing, the benchmark harnesses, and the steering demo.

Exit codes: 0 success, 2 usage error, 3 broker unreachable, 4 assertion
failure in benchmark threshold mode (--assert).
"""

from __future__ import annotations

import asyncio
import functools
import json
import logging
import signal
import sys

import click

from . import bench as bench_mod
from . import demo as demo_mod
from .client import BaseAgent, ConsumerAgent
from .errors import BrokerUnreachable, MdmlError
from .service import DEFAULT_PORT, ServiceConfig, StreamService

EXIT_UNREACHABLE = 3
EXIT_ASSERT = 4


def broker_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except BrokerUnreachable as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_UNREACHABLE)
        except MdmlError as exc:
            click.echo(f"error [{exc.code}]: {exc}", err=True)
            sys.exit(1)
    return wrapper


addr_option = click.option(
    "--addr", envvar="MDML_ADDR", default=f"127.0.0.1:{DEFAULT_PORT}",
    show_default=True, help="Broker address host:port.")
json_option = click.option("--json", "as_json", is_flag=True,
                           help="Emit machine-readable JSON.")


@click.group()
def main():
    """MDML: event-driven streaming fabric for scientific experiments."""
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="Service config JSON file.")
@click.option("--listen", default=None, help="Listen address host:port.")
@click.option("--data-dir", default=None, help="Broker data directory.")
def serve(config_path, listen, data_dir):
    """Run the broker service until interrupted."""
    if config_path:
        config = ServiceConfig.load(config_path)
    else:
        config = ServiceConfig()
    if listen:
        config.listen_addr = listen
    if data_dir:
        config.data_dir = data_dir

    async def run():
        service = StreamService(config)
        await service.start()
        host, port = service.addr
        click.echo(f"listening on {host}:{port}")
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        await stop.wait()
        await service.stop()

    asyncio.run(run())


@main.group()
def topic():
    """Topic administration."""


@topic.command("create")
@click.argument("name")
@click.option("--partitions", type=int, default=None,
              help="Partition count (broker default: 8).")
@addr_option
@broker_errors
def topic_create(name, partitions, addr):
    """Create a topic."""
    with BaseAgent(addr) as agent:
        out = agent.create_topic(name, partitions)
        click.echo(json.dumps(out))


@topic.command("list")
@addr_option
@json_option
@broker_errors
def topic_list(addr, as_json):
    """List topics."""
    with BaseAgent(addr) as agent:
        topics = agent.list_registry("topics")
    if as_json:
        click.echo(json.dumps(topics, indent=2))
    else:
        for t in topics:
            click.echo(f"{t['name']}  partitions={t['partitions']} "
                       f"records={sum(t['next_offsets'])}")


@main.command()
@click.argument("topic_name")
@click.option("--payload", default=None, help="Inline payload string.")
@click.option("--file", "file_path", type=click.Path(exists=True),
              help="Publish file contents.")
@click.option("--key", default=None, help="Partitioning key.")
@click.option("--header", "headers", multiple=True, metavar="K=V",
              help="Message header, repeatable.")
@addr_option
@broker_errors
def publish(topic_name, payload, file_path, key, headers, addr):
    """Publish one message to a topic."""
    if payload is None and file_path is None:
        raise click.UsageError("need --payload or --file")
    data = payload.encode() if payload is not None else open(file_path, "rb").read()
    hdrs = dict(h.split("=", 1) for h in headers)
    with BaseAgent(addr) as agent:
        receipt = agent.produce(topic_name, data, headers=hdrs,
                                key=key.encode() if key else None)
        click.echo(json.dumps({
            "topic": receipt.topic, "path": receipt.path,
            "messages": receipt.message_count,
            "partition": receipt.partition, "offset": receipt.offset,
        }))


@main.command()
@click.argument("topic_name")
@click.option("--start", default="earliest", show_default=True,
              help="earliest | latest | <offset>.")
@click.option("--format", "fmt", type=click.Choice(["utf8", "hex"]),
              default="utf8", show_default=True)
@click.option("--raw", is_flag=True,
              help="Print chunk parts as-is instead of reassembled messages.")
@click.option("--max", "max_count", type=int, default=None,
              help="Stop after N messages (otherwise follow forever).")
@addr_option
@broker_errors
def tail(topic_name, start, fmt, raw, max_count, addr):
    """Stream a topic to stdout, one line per message."""
    consumer = ConsumerAgent(addr)
    mode = ("max_count", max_count) if max_count else "indefinite"
    consumer.subscribe(topic_name, start=start, mode=mode)
    iterator = consumer.consume_raw() if raw else consumer.consume()
    try:
        for msg in iterator:
            preview = (msg.payload[:32].hex() if fmt == "hex"
                       else msg.payload[:32].decode("utf-8", errors="replace"))
            click.echo(f"{msg.offset:>8} p{msg.partition} ts={msg.ts_pub} "
                       f"{len(msg.payload)}B {preview!r}")
    except KeyboardInterrupt:
        pass
    finally:
        consumer.close()


@main.group()
def experiment():
    """Experiment capture and replay."""


@experiment.command("start")
@click.argument("topics", nargs=-1, required=True)
@addr_option
@broker_errors
def experiment_start(topics, addr):
    """Start capturing the given topics."""
    with BaseAgent(addr) as agent:
        click.echo(json.dumps(agent.experiment_start(list(topics))))


@experiment.command("stop")
@click.argument("experiment_id")
@addr_option
@broker_errors
def experiment_stop(experiment_id, addr):
    """Stop a running experiment and write its archive."""
    with BaseAgent(addr) as agent:
        click.echo(json.dumps(agent.experiment_stop(experiment_id)))


@experiment.command("replay")
@click.argument("experiment_id", required=False)
@click.option("--path", default=None, help="Replay from an archive directory.")
@click.option("--speed", type=float, default=1.0, show_default=True,
              help="Timing scale; 0 replays back-to-back.")
@addr_option
@broker_errors
def experiment_replay(experiment_id, path, speed, addr):
    """Replay an archived experiment with its original timing."""
    if not experiment_id and not path:
        raise click.UsageError("need an experiment id or --path")
    with BaseAgent(addr) as agent:
        report = agent.experiment_replay(experiment_id, path=path,
                                         speed=speed, timeout=None)
        click.echo(json.dumps(report))


@main.group()
def connector():
    """Connector management."""


@connector.command("create")
@click.option("--config", "config_json", default=None,
              help="Connector config as inline JSON.")
@click.option("--config-file", type=click.Path(exists=True), default=None)
@addr_option
@broker_errors
def connector_create(config_json, config_file, addr):
    """Create and start a connector."""
    if not config_json and not config_file:
        raise click.UsageError("need --config or --config-file")
    doc = json.loads(config_json if config_json else open(config_file).read())
    with BaseAgent(addr) as agent:
        click.echo(json.dumps(agent.connector_create(doc)))


@connector.command("delete")
@click.argument("name")
@addr_option
@broker_errors
def connector_delete(name, addr):
    """Stop and remove a connector."""
    with BaseAgent(addr) as agent:
        click.echo(json.dumps(agent.connector_delete(name)))


def _echo_report(report, as_json):
    if as_json:
        click.echo(json.dumps(report, indent=2))
    else:
        if isinstance(report, list):
            for r in report:
                _echo_text_report(r)
        else:
            _echo_text_report(report)


def _echo_text_report(r: dict) -> None:
    params = " ".join(f"{k}={v}" for k, v in r["params"].items())
    click.echo(f"{r['scenario']}: median {r['median_mbps']} MB/s "
               f"(min {r['min_mbps']}, max {r['max_mbps']})  [{params}]")


@main.group()
def bench():
    """Benchmark harnesses (require a running broker)."""


@bench.command("chunks")
@click.option("--payload-size", type=int, default=bench_mod.PLIF_BYTES,
              show_default=True)
@click.option("--chunk-sizes", default="65536,262144,1048576", show_default=True,
              help="Comma-separated chunk sizes in bytes.")
@click.option("--reps", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--assert", "assert_shape", is_flag=True,
              help="Exit 4 unless throughput is nondecreasing in chunk size.")
@addr_option
@json_option
@broker_errors
def bench_chunks_cmd(payload_size, chunk_sizes, reps, seed, assert_shape,
                     addr, as_json):
    """Chunk-size throughput study (publish -> consume -> reassemble)."""
    sizes = [int(s) for s in chunk_sizes.split(",") if s]
    if reps < 1:
        raise click.UsageError("--reps must be >= 1")
    reports = bench_mod.bench_chunks(addr, payload_size, sizes, reps, seed=seed)
    _echo_report([r.to_json() for r in reports], as_json)
    if assert_shape:
        medians = [r.median_mbps for r in reports]
        ok = all(b >= a * 0.9 for a, b in zip(medians, medians[1:]))
        if not ok:
            click.echo("assertion failed: median throughput decreased "
                       "beyond the 10% noise band", err=True)
            sys.exit(EXIT_ASSERT)


@bench.command("scale")
@click.option("--workers", default="1,2,4", show_default=True,
              help="Comma-separated worker counts.")
@click.option("--payload-size", type=int, default=1_000_000, show_default=True)
@click.option("--work-factor", type=float, default=50.0, show_default=True,
              help="Handler cost in ms per MB (0 = transport-bound).")
@click.option("--duration", type=float, default=4.0, show_default=True,
              help="Approximate per-run duration in seconds.")
@click.option("--assert", "assert_speedup", is_flag=True,
              help="Exit 4 unless 2x workers reach >=1.7x and 4x >=2.8x.")
@addr_option
@json_option
@broker_errors
def bench_scale_cmd(workers, payload_size, work_factor, duration,
                    assert_speedup, addr, as_json):
    """Consumer-group scaling study with calibrated handler work."""
    counts = [int(w) for w in workers.split(",") if w]
    reports = []
    for w in counts:
        r = bench_mod.bench_scale(addr, w, payload_size, work_factor, duration)
        if r.conservation_ok is False:
            click.echo("conservation check failed: consumed set != produced set",
                       err=True)
            sys.exit(EXIT_ASSERT)
        reports.append(r)
    _echo_report([r.to_json() for r in reports], as_json)
    if assert_speedup and len(reports) >= 2:
        base = reports[0].median_mbps
        by_count = {c: r.median_mbps for c, r in zip(counts, reports)}
        checks = [(2, 1.7), (4, 2.8)]
        for count, needed in checks:
            if count in by_count and by_count[count] < needed * base:
                click.echo(f"assertion failed: {count} workers reached "
                           f"{by_count[count]/base:.2f}x < {needed}x", err=True)
                sys.exit(EXIT_ASSERT)


@bench.command("floor")
@click.option("--payload-size", type=int, default=bench_mod.PLIF_BYTES,
              show_default=True)
@click.option("--duration", type=float, default=30.0, show_default=True)
@click.option("--chunk-size", type=int, default=1 << 20, show_default=True)
@click.option("--min-mbps", type=float, default=None,
              help="Exit 4 if the sustained rate is below this floor.")
@addr_option
@json_option
@broker_errors
def bench_floor_cmd(payload_size, duration, chunk_size, min_mbps, addr, as_json):
    """Sustained streaming-rate measurement."""
    report = bench_mod.bench_stream_floor(addr, payload_size, duration, chunk_size)
    _echo_report(report.to_json(), as_json)
    if min_mbps is not None and report.median_mbps < min_mbps:
        click.echo(f"assertion failed: {report.median_mbps:.1f} MB/s "
                   f"< floor {min_mbps}", err=True)
        sys.exit(EXIT_ASSERT)


@main.group()
def demo():
    """Demonstration scenarios."""


@demo.command("steering")
@click.option("--duration", type=float, default=10.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--disturb", default=None, metavar="T:MAG",
              help="Step disturbance, e.g. 5:20 for +20 at t=5s.")
@addr_option
@json_option
@broker_errors
def demo_steering(duration, seed, disturb, addr, as_json):
    """Closed-loop steering demo with a rolling-mean analysis agent."""
    disturbances = []
    if disturb:
        t, mag = disturb.split(":")
        disturbances.append((float(t), float(mag)))
    report = demo_mod.steering_demo(addr, duration=duration, seed=seed,
                                    disturbances=disturbances)
    doc = report.to_json()
    if as_json:
        click.echo(json.dumps(doc, indent=2))
    else:
        click.echo(f"samples={len(doc['samples'])} "
                   f"corrections={len(doc['corrections'])} "
                   f"excursions={len(doc['excursions'])}")
        for exc in doc["excursions"]:
            click.echo(f"  excursion at t={exc['start_t']}s, "
                       f"re-entry t={exc['reentry_t']}s, "
                       f"within 3s: {exc['within_3s']}")


if __name__ == "__main__":
    main()
