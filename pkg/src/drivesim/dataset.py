"""Learning-facing artifacts: observations, session recording, replay loading.

A dataset directory holds:
    manifest.json     scenario hash, seed, dt, sensor configs, sample count
    scenario.yaml     verbatim copy of the scenario (self-contained replay)
    samples.jsonl     one observation/action record per line
    commands.jsonl    applied ego controls for every tick (replay input)
    frames/<cam>/<tick>.png   lossless frame rasters
    labels/<tick>.json        optional ground-truth label files

Nothing here embeds wall-clock time, so two identical runs produce
byte-identical datasets.
"""

from __future__ import annotations

import json
import shutil
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .dynamics import ControlInput, VehicleState
from .geometry import Vec2, wrap_angle
from .scenario import Scenario, WorldMap
from .sensors import CameraFrame, SensorConfig
from .wire import canonical_bytes, canonical_json, sha256_hex

OBSERVATION_WAYPOINTS = 5  # lookahead entries in the navigation vector

R_FEATURES = ("distance_to_next_waypoint", "lateral_offset", "heading_error", "speed_limit")
V_FEATURES = ("speed", "accel_long", "accel_lat", "yaw_rate", "steer", "throttle", "brake")


class ObservationError(RuntimeError):
    """An observation could not be built (e.g. a camera frame is missing)."""


@dataclass(frozen=True)
class Observation:
    c: np.ndarray  # (H, 320n, 3) uint8, horizontal concat of rgb frames
    r: np.ndarray  # (4,) float64 road features
    v: np.ndarray  # (7,) float64 vehicle features
    n: np.ndarray  # (10,) float64 navigation features

    def content_hash(self) -> str:
        blob = self.c.tobytes() + self.r.tobytes() + self.v.tobytes() + self.n.tobytes()
        return sha256_hex(blob)


def _lookahead_chain(wmap: WorldMap, current: int, first_next: int, k: int) -> list[int]:
    """Next k waypoint ids, continuing straightest-first at branches."""
    chain = [first_next]
    prev, here = current, first_next
    while len(chain) < k:
        succ = wmap.waypoint(here).successors
        if not succ:
            break
        incoming = wmap.waypoint(here).position - wmap.waypoint(prev).position
        in_bearing = np.arctan2(incoming.y, incoming.x) if incoming.norm() > 1e-9 else 0.0

        def turn(sid: int) -> tuple[float, int]:
            d = wmap.waypoint(sid).position - wmap.waypoint(here).position
            bearing = np.arctan2(d.y, d.x)
            return (abs(wrap_angle(float(bearing) - float(in_bearing))), sid)

        nxt = min(succ, key=turn)
        chain.append(nxt)
        prev, here = here, nxt
    return chain


def build_observation(
    state: VehicleState,
    applied: ControlInput,
    current_wp: int,
    next_wp: int,
    wmap: WorldMap,
    frames: Sequence[CameraFrame],
) -> Observation:
    """Assemble the {C, R, V, N} observation for one ego at one tick.

    `frames` must hold every rgb camera frame in config order; a missing or
    stale frame is a hard error, never silently dropped.
    """
    if not frames:
        raise ObservationError("observation requires at least one rgb camera frame")
    heights = {f.pixels.shape[0] for f in frames}
    if len(heights) != 1:
        raise ObservationError(f"camera heights differ: {sorted(heights)}")
    for f in frames:
        if f.mode != "rgb":
            raise ObservationError(f"camera {f.sensor_id} is not an rgb frame")
    c = np.concatenate([f.pixels for f in frames], axis=1)

    pos = state.pose.position
    a = wmap.waypoint(current_wp).position
    b = wmap.waypoint(next_wp).position
    edge = b - a
    edge_len = edge.norm()
    if edge_len > 1e-9:
        ux, uy = edge.x / edge_len, edge.y / edge_len
        lateral = (pos - a).dot(Vec2(-uy, ux))  # positive = left of edge
        edge_bearing = float(np.arctan2(edge.y, edge.x))
    else:
        lateral = 0.0
        edge_bearing = state.pose.heading
    r = np.array(
        [
            pos.dist(b),
            lateral,
            wrap_angle(edge_bearing - state.pose.heading),
            wmap.waypoint(current_wp).speed_limit,
        ],
        dtype=np.float64,
    )
    v = np.array(
        [
            state.speed,
            state.accel_long,
            state.accel_lat,
            state.yaw_rate,
            applied.steer,
            applied.throttle,
            applied.brake,
        ],
        dtype=np.float64,
    )
    n = np.zeros(2 * OBSERVATION_WAYPOINTS, dtype=np.float64)
    for i, wid in enumerate(_lookahead_chain(wmap, current_wp, next_wp, OBSERVATION_WAYPOINTS)):
        wp_pos = wmap.waypoint(wid).position
        d = wp_pos - pos
        n[2 * i] = wrap_angle(float(np.arctan2(d.y, d.x)) - state.pose.heading)
        n[2 * i + 1] = pos.dist(wp_pos)
    return Observation(c=c, r=r, v=v, n=n)


class ObservationStacker:
    """Stacks the last `history_len` observations along a leading axis.

    With the default history_len=1 observations pass through unchanged.
    """

    def __init__(self, history_len: int = 1):
        assert history_len >= 1
        self.history_len = history_len
        self._buf: list[Observation] = []

    def push(self, obs: Observation) -> Observation | tuple[np.ndarray, ...]:
        if self.history_len == 1:
            return obs
        self._buf.append(obs)
        if len(self._buf) > self.history_len:
            self._buf.pop(0)
        pad = [self._buf[0]] * (self.history_len - len(self._buf)) + self._buf
        return (
            np.stack([o.c for o in pad]),
            np.stack([o.r for o in pad]),
            np.stack([o.v for o in pad]),
            np.stack([o.n for o in pad]),
        )


def _control_dict(c: ControlInput) -> dict:
    return {"throttle": c.throttle, "brake": c.brake, "steer": c.steer}


def save_frame_png(frame: CameraFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = frame.pixels
    img = Image.fromarray(arr, mode="RGB" if arr.ndim == 3 else "L")
    img.save(path, format="PNG")


class DatasetRecorder:
    """Append-only session writer; synchronous so no sample is ever dropped."""

    def __init__(self, out_dir: str | Path, scenario: Scenario, dt: float, ego_index: int = 0):
        self.out_dir = Path(out_dir)
        self.scenario = scenario
        self.dt = dt
        self.ego_index = ego_index
        self.sample_count = 0
        self.last_tick = 0
        self._samples_file = None
        self._commands_file = None
        self._finalized = False

    def begin(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if self.scenario.source_path:
            shutil.copyfile(self.scenario.source_path, self.out_dir / "scenario.yaml")
        self._samples_file = (self.out_dir / "samples.jsonl").open("w", encoding="utf-8")
        self._commands_file = (self.out_dir / "commands.jsonl").open("w", encoding="utf-8")

    @property
    def active(self) -> bool:
        return self._samples_file is not None and not self._finalized

    def record_commands(self, tick: int, applied: dict[int, ControlInput]) -> None:
        assert self.active
        line = {"tick": tick, "commands": {str(vid): _control_dict(c) for vid, c in applied.items()}}
        self._commands_file.write(canonical_json(line) + "\n")
        self.last_tick = tick

    def record_sample(
        self,
        tick: int,
        sim_time: float,
        obs: Observation,
        action: ControlInput,
        frames: Sequence[CameraFrame],
    ) -> None:
        assert self.active
        frame_refs: dict[str, str] = {}
        for frame in frames:
            rel = f"frames/{frame.sensor_id}/{tick:010d}.png"
            save_frame_png(frame, self.out_dir / rel)
            frame_refs[frame.sensor_id] = rel
        record = {
            "tick": tick,
            "timestamp": sim_time,
            "observation": {"r": list(obs.r), "v": list(obs.v), "n": list(obs.n)},
            "action": _control_dict(action),
            "frames": frame_refs,
            "obs_hash": obs.content_hash(),
        }
        self._samples_file.write(canonical_json(record) + "\n")
        self.sample_count += 1

    def finalize(self) -> dict:
        assert self.active
        self._samples_file.close()
        self._commands_file.close()
        self._samples_file = self._commands_file = None
        self._finalized = True
        manifest = {
            "format": "drivesim-dataset/1",
            "scenario_file": "scenario.yaml",
            "scenario_hash": self.scenario.content_hash,
            "seed": self.scenario.seed,
            "dt": self.dt,
            "ego": self.ego_index,
            "sensors": [_sensor_dict(s) for s in self.scenario.sensors],
            "observation": {"r": list(R_FEATURES), "v": list(V_FEATURES), "history_len": 1},
            "sample_count": self.sample_count,
            "tick_count": self.last_tick,
        }
        (self.out_dir / "manifest.json").write_text(canonical_json(manifest) + "\n", encoding="utf-8")
        return manifest


def _sensor_dict(s: SensorConfig) -> dict:
    return {
        "id": s.id,
        "kind": s.kind,
        "topic": s.topic,
        "rate_hz": s.rate_hz,
        "frame": s.frame,
        "vehicle": s.vehicle,
        "mount": [s.mount.position.x, s.mount.position.y, s.mount.heading],
        "params": {k: v for k, v in sorted(s.params.items())},
    }


def load_manifest(dataset_dir: str | Path) -> dict:
    return json.loads((Path(dataset_dir) / "manifest.json").read_text(encoding="utf-8"))


def iter_samples(dataset_dir: str | Path) -> Iterator[dict]:
    with (Path(dataset_dir) / "samples.jsonl").open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def load_commands(dataset_dir: str | Path) -> dict[int, dict[int, ControlInput]]:
    """tick -> {vehicle id -> ControlInput} as recorded."""
    out: dict[int, dict[int, ControlInput]] = {}
    path = Path(dataset_dir) / "commands.jsonl"
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out[rec["tick"]] = {
                int(vid): ControlInput.clamped(c["throttle"], c["brake"], c["steer"])
                for vid, c in rec["commands"].items()
            }
    return out
