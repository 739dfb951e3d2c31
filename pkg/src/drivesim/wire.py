"""Canonical serialization shared by the event log, bridge, and datasets.

Canonical JSON: object keys sorted lexicographically, compact separators,
ASCII-only, floats as Python's shortest round-trip repr. Two processes
producing the same values produce the same bytes, which the golden-transcript
and determinism tests rely on.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Any

PROTOCOL_VERSION = 1

# Envelope event kinds
EVENTS_CLIENT = ("subscribe", "unsubscribe", "claim", "release", "command", "hello")
EVENTS_SERVER = ("hello", "publish", "event", "time", "error", "subscribe", "unsubscribe",
                 "claim", "release", "command")

# Binary frame schema ids
SCHEMA_SEMANTIC_U8 = 1
SCHEMA_RGB_U8 = 2


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def canonical_bytes(obj: Any) -> bytes:
    return canonical_json(obj).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def pack_binary_frame(schema_id: int, payload: bytes) -> bytes:
    """4-byte little-endian payload length, 2-byte schema id, then payload."""
    return struct.pack("<IH", len(payload), schema_id) + payload


def unpack_binary_frame(frame: bytes) -> tuple[int, bytes]:
    if len(frame) < 6:
        raise ValueError("binary frame shorter than its 6-byte header")
    length, schema_id = struct.unpack_from("<IH", frame)
    payload = frame[6:]
    if len(payload) != length:
        raise ValueError(f"binary frame length mismatch: header {length}, got {len(payload)}")
    return schema_id, payload


class EnvelopeError(ValueError):
    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(message)


def parse_envelope(raw: str | bytes) -> dict:
    """Parse and structurally validate a client envelope."""
    try:
        obj = json.loads(raw)
    except (ValueError, UnicodeDecodeError) as exc:
        raise EnvelopeError("bad_envelope", f"not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise EnvelopeError("bad_envelope", "envelope must be a JSON object")
    if "event" not in obj:
        raise EnvelopeError("bad_envelope", "missing 'event'")
    if obj["event"] not in EVENTS_CLIENT:
        raise EnvelopeError("bad_envelope", f"unknown client event {obj['event']!r}")
    seq = obj.get("seq")
    if not isinstance(seq, int) or seq < 0:
        raise EnvelopeError("bad_envelope", "missing or invalid 'seq'")
    payload = obj.get("payload", {})
    if not isinstance(payload, dict):
        raise EnvelopeError("bad_envelope", "'payload' must be an object")
    obj["payload"] = payload
    obj.setdefault("topic", "")
    obj.setdefault("sim_time", 0.0)
    return obj


def envelope(event: str, topic: str, seq: int, sim_time: float, payload: dict) -> str:
    return canonical_json(
        {"event": event, "topic": topic, "seq": seq, "sim_time": sim_time, "payload": payload}
    )
