"""Event-based pub/sub bridge: sensor readings out, control commands in.

One WebSocket endpoint carries JSON envelopes (docs/protocol.md). The
simulation loop is the single writer of world state; the server runs in its
own thread with an asyncio loop. Hand-off is confined to two thread-safe
structures: the command latch (read exactly once per tick) and the outbound
publish queue (immutable snapshots). Client I/O never executes inside a tick,
and a stalled client is disconnected rather than ever stalling the clock.
"""

from __future__ import annotations

import asyncio
import base64
import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Iterable, Optional

import websockets
from websockets.asyncio.server import serve

from .dynamics import ControlInput
from .scenario import Scenario
from .wire import (
    PROTOCOL_VERSION,
    SCHEMA_RGB_U8,
    SCHEMA_SEMANTIC_U8,
    EnvelopeError,
    canonical_json,
    pack_binary_frame,
    parse_envelope,
)

log = logging.getLogger("drivesim.bridge")

DEFAULT_PORT = 9090
SLOW_CONSUMER_BUDGET = 16 * 1024 * 1024  # bytes queued per session before disconnect

# Errors that close the connection; everything else is recoverable.
FATAL_ERRORS = frozenset({"bad_envelope", "bad_seq", "slow_consumer"})


@dataclass
class TopicMessage:
    topic: str
    kind: str  # "publish" | "event" | "time"
    payload: dict


@dataclass
class LatchResult:
    commands: dict[int, ControlInput] = field(default_factory=dict)
    recorder: list[str] = field(default_factory=list)


class CommandLatch:
    """Latest-wins command box; the engine empties it once per tick."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._commands: dict[int, ControlInput] = {}
        self._recorder: list[str] = []
        self._next_tick = 1

    def put_command(self, vehicle_id: int, control: ControlInput) -> int:
        """Store a command; returns the tick it will take effect."""
        with self._lock:
            self._commands[vehicle_id] = control
            return self._next_tick

    def put_recorder(self, request: str) -> None:
        with self._lock:
            self._recorder.append(request)

    def take(self, tick: int) -> LatchResult:
        with self._lock:
            result = LatchResult(commands=self._commands, recorder=self._recorder)
            self._commands = {}
            self._recorder = []
            self._next_tick = tick + 1
            return result


def topic_matches(pattern: str, topic: str) -> bool:
    if pattern.endswith("/*"):
        return topic.startswith(pattern[:-1])
    return pattern == topic


class _Connection:
    def __init__(self, conn_id: str, ws) -> None:
        self.id = conn_id
        self.ws = ws
        self.binary = False
        self.subscriptions: list[str] = []
        self.claimed: set[int] = set()
        self.seq = 0  # next server->client sequence number
        self.last_client_seq = -1
        self.queue: asyncio.Queue = asyncio.Queue()
        self.queued_bytes = 0
        self.closing = False

    def matches(self, topic: str) -> bool:
        return any(topic_matches(p, topic) for p in self.subscriptions)


class BridgeServer:
    """Multi-client topic server bound to one scenario's topic table."""

    def __init__(
        self,
        scenario: Scenario,
        dt: float,
        host: str = "127.0.0.1",
        port: int = DEFAULT_PORT,
        slow_budget: int = SLOW_CONSUMER_BUDGET,
    ) -> None:
        self.scenario = scenario
        self.dt = dt
        self.host = host
        self.port = port
        self.slow_budget = slow_budget
        self.latch = CommandLatch()

        self.ego_ids = list(scenario.ego_indices)
        self.topics: dict[str, dict] = {}
        for s in scenario.sensors:
            self.topics[s.topic] = {"schema": s.kind, "publisher": "simulator"}
        for i, spec in enumerate(scenario.vehicles):
            base = "ego" if spec.role == "ego" else "traffic"
            self.topics[f"/{base}/{i}/pose"] = {"schema": "pose", "publisher": "simulator"}
        self.topics["/sim/clock"] = {"schema": "clock", "publisher": "simulator"}
        self.topics["/sim/events"] = {"schema": "event", "publisher": "simulator"}
        self.topics["/sim/recorder"] = {"schema": "recorder_control", "publisher": "client"}

        self._conns: dict[str, _Connection] = {}
        self._claims: dict[int, str] = {}
        self._retained: dict[str, tuple[str, float, dict]] = {}
        self._conn_counter = 0
        self._sim_time = 0.0

        self._wanted_lock = threading.Lock()
        self._wanted: set[str] = set()

        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._thread: Optional[threading.Thread] = None
        self._started = threading.Event()
        self._stop_event: Optional[asyncio.Event] = None
        self.bound_port: Optional[int] = None

    # -- engine-facing (any thread) -----------------------------------------

    def take_latch(self, tick: int) -> LatchResult:
        return self.latch.take(tick)

    def wanted_topics(self) -> set[str]:
        with self._wanted_lock:
            return set(self._wanted)

    def publish_tick(self, tick: int, sim_time: float, messages: list[TopicMessage]) -> None:
        """Queue a tick's outputs for fan-out; never blocks the caller."""
        if self._loop is None:
            return
        self._loop.call_soon_threadsafe(self._publish_on_loop, sim_time, list(messages))

    # -- lifecycle ------------------------------------------------------------

    def start(self) -> None:
        self._thread = threading.Thread(target=self._thread_main, name="drivesim-bridge", daemon=True)
        self._thread.start()
        if not self._started.wait(timeout=10.0):
            raise RuntimeError("bridge server failed to start")

    def stop(self) -> None:
        if self._loop is not None and self._stop_event is not None:
            self._loop.call_soon_threadsafe(self._stop_event.set)
        if self._thread is not None:
            self._thread.join(timeout=10.0)

    def _thread_main(self) -> None:
        asyncio.run(self._serve_main())

    async def _serve_main(self) -> None:
        self._loop = asyncio.get_running_loop()
        self._stop_event = asyncio.Event()
        try:
            async with serve(self._handler, self.host, self.port, max_size=2**24) as server:
                self.bound_port = server.sockets[0].getsockname()[1]
                self._started.set()
                await self._stop_event.wait()
        except OSError as exc:
            log.error("bridge bind failed on %s:%s: %s", self.host, self.port, exc)
            self._started.set()
            raise

    # -- serialization ---------------------------------------------------------

    def _envelope_str(self, event: str, topic: str, seq: int, sim_time: float, payload_json: str) -> str:
        # Keys composed in canonical (sorted) order from a pre-serialized payload.
        return (
            f'{{"event":{json.dumps(event)},"payload":{payload_json},"seq":{seq},'
            f'"sim_time":{json.dumps(sim_time)},"topic":{json.dumps(topic)}}}'
        )

    def _payload_variants(self, payload: dict) -> tuple[str, Optional[tuple[str, bytes]]]:
        """(json payload, optional (binary-mode payload, binary frame))."""
        if "_pixels" not in payload:
            return canonical_json(payload), None
        pixels = payload["_pixels"]
        meta = {k: v for k, v in payload.items() if k != "_pixels"}
        raw = pixels.tobytes()
        schema = SCHEMA_RGB_U8 if payload.get("mode") == "rgb" else SCHEMA_SEMANTIC_U8
        json_payload = canonical_json(
            {**meta, "encoding": "b64", "data_b64": base64.b64encode(raw).decode("ascii")}
        )
        bin_payload = canonical_json(
            {**meta, "encoding": "binary", "schema": schema, "nbytes": len(raw)}
        )
        return json_payload, (bin_payload, pack_binary_frame(schema, raw))

    # -- loop-thread internals --------------------------------------------------

    def _recompute_wanted(self) -> None:
        wanted: set[str] = set()
        for conn in self._conns.values():
            for topic in self.topics:
                if conn.matches(topic):
                    wanted.add(topic)
        with self._wanted_lock:
            self._wanted = wanted

    def _enqueue(self, conn: _Connection, frame: str | bytes) -> None:
        if conn.closing:
            return
        size = len(frame) if isinstance(frame, bytes) else len(frame.encode("utf-8"))
        if conn.queued_bytes + size > self.slow_budget:
            conn.closing = True
            asyncio.ensure_future(self._kill_slow(conn))
            return
        conn.queued_bytes += size
        conn.queue.put_nowait((frame, size))

    async def _kill_slow(self, conn: _Connection) -> None:
        err = self._envelope_str(
            "error",
            "",
            conn.seq,
            self._sim_time,
            canonical_json({"code": "slow_consumer", "message": "send budget exceeded"}),
        )
        conn.seq += 1
        try:
            await asyncio.wait_for(conn.ws.send(err), timeout=0.2)
        except Exception:
            pass
        await conn.ws.close(code=1013, reason="slow_consumer")

    def _send_envelope(self, conn: _Connection, event: str, topic: str, payload: dict) -> None:
        payload_json = canonical_json(payload)
        env = self._envelope_str(event, topic, conn.seq, self._sim_time, payload_json)
        conn.seq += 1
        self._enqueue(conn, env)

    def _publish_on_loop(self, sim_time: float, messages: list[TopicMessage]) -> None:
        self._sim_time = sim_time
        for msg in messages:
            self._retained[msg.topic] = (msg.kind, sim_time, msg.payload)
            receivers = [c for c in self._conns.values() if c.matches(msg.topic)]
            if not receivers:
                continue
            json_payload, binary = self._payload_variants(msg.payload)
            for conn in receivers:
                if conn.binary and binary is not None:
                    bin_payload, frame = binary
                    env = self._envelope_str(msg.kind, msg.topic, conn.seq, sim_time, bin_payload)
                    conn.seq += 1
                    self._enqueue(conn, env)
                    self._enqueue(conn, frame)
                else:
                    env = self._envelope_str(msg.kind, msg.topic, conn.seq, sim_time, json_payload)
                    conn.seq += 1
                    self._enqueue(conn, env)

    def _deliver_retained(self, conn: _Connection, pattern: str) -> None:
        for topic in sorted(self._retained):
            if not topic_matches(pattern, topic):
                continue
            kind, sim_time, payload = self._retained[topic]
            json_payload, binary = self._payload_variants(payload)
            if conn.binary and binary is not None:
                bin_payload, frame = binary
                env = self._envelope_str(kind, topic, conn.seq, sim_time, bin_payload)
                conn.seq += 1
                self._enqueue(conn, env)
                self._enqueue(conn, frame)
            else:
                env = self._envelope_str(kind, topic, conn.seq, sim_time, json_payload)
                conn.seq += 1
                self._enqueue(conn, env)

    # -- connection handling -----------------------------------------------------

    async def _writer(self, conn: _Connection) -> None:
        while True:
            frame, size = await conn.queue.get()
            await conn.ws.send(frame)
            conn.queued_bytes -= size

    async def _handler(self, ws) -> None:
        self._conn_counter += 1
        conn = _Connection(f"c{self._conn_counter}", ws)
        self._conns[conn.id] = conn
        writer = asyncio.ensure_future(self._writer(conn))
        self._send_envelope(
            conn,
            "hello",
            "",
            {
                "protocol": PROTOCOL_VERSION,
                "server": "drivesim",
                "client_id": conn.id,
                "scenario_hash": self.scenario.content_hash,
                "dt": self.dt,
                "egos": self.ego_ids,
                "topics": {t: self.topics[t] for t in sorted(self.topics)},
                "encodings": ["json", "binary"],
            },
        )
        try:
            async for raw in ws:
                try:
                    if isinstance(raw, bytes):
                        raise EnvelopeError("bad_envelope", "clients must send text envelopes")
                    env = parse_envelope(raw)
                    if env["seq"] <= conn.last_client_seq:
                        raise EnvelopeError(
                            "bad_seq",
                            f"seq {env['seq']} not greater than {conn.last_client_seq}",
                        )
                    conn.last_client_seq = env["seq"]
                    self._dispatch(conn, env)
                except EnvelopeError as exc:
                    self._send_envelope(
                        conn, "error", "", {"code": exc.code, "message": str(exc)}
                    )
                    if exc.code in FATAL_ERRORS:
                        break
        except websockets.ConnectionClosed:
            pass
        finally:
            writer.cancel()
            self._drop_connection(conn)
            try:
                await ws.close()
            except Exception:
                pass

    def _drop_connection(self, conn: _Connection) -> None:
        self._conns.pop(conn.id, None)
        for ego in sorted(conn.claimed):
            self._claims.pop(ego, None)
            # Safe stop: a disconnected ego brakes to rest.
            self.latch.put_command(ego, ControlInput(0.0, 1.0, 0.0))
        self._recompute_wanted()

    def _dispatch(self, conn: _Connection, env: dict) -> None:
        event = env["event"]
        topic = env.get("topic", "")
        seq = env["seq"]
        payload = env["payload"]
        if event == "hello":
            conn.binary = bool(payload.get("binary", False))
            self._send_envelope(conn, "hello", "", {"ok": True, "binary": conn.binary, "request_seq": seq})
        elif event == "subscribe":
            if not topic:
                raise EnvelopeError("bad_envelope", "subscribe requires a topic")
            if not topic.endswith("/*") and topic not in self.topics:
                self._send_envelope(
                    conn,
                    "error",
                    topic,
                    {"code": "unknown_topic", "message": f"no topic {topic!r}", "request_seq": seq},
                )
                return
            if topic not in conn.subscriptions:
                conn.subscriptions.append(topic)
            self._recompute_wanted()
            self._send_envelope(conn, "subscribe", topic, {"ok": True, "request_seq": seq})
            self._deliver_retained(conn, topic)
        elif event == "unsubscribe":
            if topic in conn.subscriptions:
                conn.subscriptions.remove(topic)
            self._recompute_wanted()
            self._send_envelope(conn, "unsubscribe", topic, {"ok": True, "request_seq": seq})
        elif event == "claim":
            vehicle = payload.get("vehicle")
            if not isinstance(vehicle, int) or vehicle not in self.ego_ids:
                self._send_envelope(
                    conn,
                    "error",
                    topic,
                    {"code": "unknown_vehicle", "message": f"no ego {vehicle!r}", "request_seq": seq},
                )
                return
            holder = self._claims.get(vehicle)
            if holder is not None and holder != conn.id:
                self._send_envelope(
                    conn,
                    "error",
                    topic,
                    {
                        "code": "claim_refused",
                        "message": f"ego {vehicle} already claimed",
                        "holder": holder,
                        "request_seq": seq,
                    },
                )
                return
            self._claims[vehicle] = conn.id
            conn.claimed.add(vehicle)
            self._send_envelope(conn, "claim", topic, {"ok": True, "vehicle": vehicle, "request_seq": seq})
        elif event == "release":
            vehicle = payload.get("vehicle")
            if isinstance(vehicle, int) and self._claims.get(vehicle) == conn.id:
                self._claims.pop(vehicle, None)
                conn.claimed.discard(vehicle)
                self.latch.put_command(vehicle, ControlInput(0.0, 1.0, 0.0))
                self._send_envelope(conn, "release", topic, {"ok": True, "vehicle": vehicle, "request_seq": seq})
            else:
                self._send_envelope(
                    conn,
                    "error",
                    topic,
                    {"code": "not_claimed", "message": f"ego {vehicle!r} not held", "request_seq": seq},
                )
        elif event == "command":
            if not conn.claimed:
                self._send_envelope(
                    conn,
                    "error",
                    topic,
                    {"code": "not_claimed", "message": "claim an ego first", "request_seq": seq},
                )
                return
            if topic == "/sim/recorder":
                request = payload.get("record")
                if request not in ("start", "stop"):
                    raise EnvelopeError("bad_envelope", f"recorder request must be start/stop, got {request!r}")
                self.latch.put_recorder(request)
                self._send_envelope(conn, "command", topic, {"ok": True, "record": request, "request_seq": seq})
                return
            vehicle = payload.get("vehicle")
            if vehicle is None and len(conn.claimed) == 1:
                vehicle = next(iter(conn.claimed))
            if vehicle not in conn.claimed:
                self._send_envelope(
                    conn,
                    "error",
                    topic,
                    {"code": "not_claimed", "message": f"ego {vehicle!r} not held", "request_seq": seq},
                )
                return
            values = []
            for key in ("throttle", "brake", "steer"):
                v = payload.get(key, 0.0)
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise EnvelopeError("bad_envelope", f"command {key} must be a number")
                values.append(float(v))
            control = ControlInput.clamped(*values)
            applies_at = self.latch.put_command(vehicle, control)
            self._send_envelope(
                conn,
                "command",
                topic,
                {
                    "ok": True,
                    "vehicle": vehicle,
                    "applies_at_tick": applies_at,
                    "clamped": control.was_clamped_from(*values),
                    "request_seq": seq,
                },
            )
        else:  # pragma: no cover - parse_envelope already rejects unknown events
            raise EnvelopeError("bad_envelope", f"unhandled event {event!r}")
