"""MDML: an event-driven streaming fabric for scientific experiments.

A self-contained broker with namespaced partitioned topics and consumer
groups, agent SDKs with chunked large-message and claim-check transfer,
experiment capture/replay with original timing, storage connectors, and
benchmark harnesses.
"""

from . import errors
from .broker import EARLIEST, LATEST, BrokerEngine, StartPosition
from .wire import DataMessage, Frame, Reassembler, chunk_message, crc32_hex

__all__ = [
    "errors",
    "BrokerEngine",
    "StartPosition",
    "EARLIEST",
    "LATEST",
    "DataMessage",
    "Frame",
    "Reassembler",
    "chunk_message",
    "crc32_hex",
]

__version__ = "0.1.0"
