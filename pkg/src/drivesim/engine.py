"""Fixed-timestep simulation loop and world state.

Tick phase order (the determinism contract): (1) latch client commands,
(2) advance traffic agents against the previous-tick footprint snapshot,
(3) step ego vehicles, (4) collision detection and respawn, (5) light phase
bookkeeping, (6) sample due sensors, (7) dataset recording / label export,
(8) publish outputs, (9) advance the clock. Simulation time is always
computed as tick * dt, never accumulated.

Outputs produced while executing a tick are stamped with the tick number
being completed (the first executed tick stamps tick=1, sim_time=dt).
"""

from __future__ import annotations

import logging
import math
import struct
import threading
import time
from dataclasses import dataclass, field
from hashlib import sha256
from typing import Callable, Optional, Sequence

import numpy as np

from . import sensors as sens
from .dataset import DatasetRecorder, Observation, build_observation
from .dynamics import ControlInput, PidController, VehicleState, step_vehicle
from .geometry import Pose2, RectSet, Vec2, _origin_inside, oriented_rectangle, ray_batch, wrap_angle
from .labeling import generate_labels, write_label_file
from .rng import substream
from .scenario import Scenario, vehicle_object_id
from .sensors import CLASS_IDS, CameraFrame, SceneObject
from .traffic import (
    LightPhaseState,
    TrafficAgent,
    TrafficTuning,
    advance_agent,
    choose_successor,
    detect_and_respawn,
    light_phase,
)
from .wire import canonical_json

log = logging.getLogger("drivesim.engine")


@dataclass
class SimClock:
    dt: float = 0.01
    tick: int = 0
    mode: str = "fast"  # "fast" | "realtime"

    @property
    def sim_time(self) -> float:
        return self.tick * self.dt


@dataclass
class RunReport:
    ticks: int
    wall_seconds: float
    collisions: int
    events: dict[str, int]
    dataset_dirs: list[str]
    event_log_hash: str
    state_hash: str

    def to_json_dict(self) -> dict:
        return {
            "ticks": self.ticks,
            "wall_seconds": round(self.wall_seconds, 3),
            "collisions": self.collisions,
            "events": self.events,
            "dataset_dirs": self.dataset_dirs,
            "event_log_hash": self.event_log_hash,
            "state_hash": self.state_hash,
        }


@dataclass
class EgoRuntime:
    vehicle_id: int
    object_id: int
    spec: object
    state: VehicleState
    applied: ControlInput = field(default_factory=ControlInput)
    current_wp: int = 0
    next_wp: int = 0

    def footprint(self) -> tuple[Vec2, ...]:
        return oriented_rectangle(self.state.pose, self.spec.params.length, self.spec.params.width)


def _ego_next_choice(wmap, current: int, heading: float) -> int:
    """Deterministic tracker branch: the successor closest to the current heading."""
    succ = wmap.waypoint(current).successors

    def score(sid: int) -> tuple[float, int]:
        d = wmap.waypoint(sid).position - wmap.waypoint(current).position
        bearing = math.atan2(d.y, d.x)
        return (abs(wrap_angle(bearing - heading)), sid)

    return min(succ, key=score)


class Engine:
    """Owns all mutable world state; one logical simulation thread drives it."""

    def __init__(
        self,
        scenario: Scenario,
        dt: float = 0.01,
        mode: str = "fast",
        bridge=None,
        tuning: TrafficTuning = TrafficTuning(),
        record_dir: Optional[str] = None,
        record_sessions: bool = True,
        label_export: Optional[tuple[str, frozenset[str], str]] = None,
        command_source: Optional[Callable[[int], dict[int, ControlInput]]] = None,
    ):
        assert dt > 0.0
        assert mode in ("fast", "realtime")
        self.scenario = scenario
        self.world = scenario.world
        self.weather = scenario.weather
        self.clock = SimClock(dt=dt, mode=mode)
        self.bridge = bridge
        self.tuning = tuning
        self.command_source = command_source
        self.record_dir = record_dir
        self.record_sessions = record_sessions
        self.label_export = label_export  # (camera id, target classes, out dir)

        self.agents: list[TrafficAgent] = []
        self.egos: list[EgoRuntime] = []
        self._init_vehicles()

        self._sensor_rng = {s.id: substream(scenario.seed, "sensor", s.id) for s in scenario.sensors}
        self._sensor_by_id = {s.id: s for s in scenario.sensors}

        self.events: list[dict] = []
        self.event_counts: dict[str, int] = {}
        self.collision_count = 0
        self._event_hasher = sha256()
        self._light_cache: dict[int, str] = {}

        self.recorder: Optional[DatasetRecorder] = None
        self._session_counter = 0
        self.dataset_dirs: list[str] = []

        self._label_camera = None
        if label_export is not None:
            cam_id = label_export[0]
            self._label_camera = self._sensor_by_id[cam_id]

    # -- construction ------------------------------------------------------

    def _init_vehicles(self) -> None:
        for i, spec in enumerate(self.scenario.vehicles):
            wp = self.world.waypoint(spec.initial_waypoint)
            if spec.role == "traffic":
                rng = substream(self.scenario.seed, "agent", i)
                next_id = choose_successor(rng, wp.successors)
                if spec.start is not None:
                    pose = spec.start
                else:
                    target = self.world.waypoint(next_id).position
                    pose = Pose2(wp.position, math.atan2(target.y - wp.position.y, target.x - wp.position.x))
                self.agents.append(
                    TrafficAgent(
                        vehicle_id=i,
                        object_id=vehicle_object_id(i),
                        params=spec.params,
                        state=VehicleState.at(pose),
                        current_wp=wp.id,
                        next_wp=next_id,
                        speed_pid=spec.speed_gains.controller(),
                        steer_pid=spec.steer_gains.controller(),
                        rng=rng,
                    )
                )
            else:
                pose = spec.start if spec.start is not None else Pose2(wp.position, 0.0)
                ego = EgoRuntime(
                    vehicle_id=i,
                    object_id=vehicle_object_id(i),
                    spec=spec,
                    state=VehicleState.at(pose),
                    current_wp=wp.id,
                    next_wp=_ego_next_choice(self.world, wp.id, pose.heading),
                )
                self.egos.append(ego)

    # -- events ------------------------------------------------------------

    def _emit(self, tick: int, kind: str, payload: dict) -> dict:
        event = {"tick": tick, "type": kind}
        event.update(payload)
        self.events.append(event)
        self.event_counts[kind] = self.event_counts.get(kind, 0) + 1
        self._event_hasher.update(canonical_json(event).encode("utf-8"))
        self._event_hasher.update(b"\n")
        if kind == "collision":
            self.collision_count += 1
        return event

    def event_log_hash(self) -> str:
        return self._event_hasher.hexdigest()

    def state_hash(self) -> str:
        """Hash of the dynamic world state; identical runs match bit-for-bit."""
        h = sha256()
        h.update(struct.pack("<qd", self.clock.tick, self.clock.dt))
        records: list[tuple[int, VehicleState, ControlInput, int, int]] = [
            (a.vehicle_id, a.state, a.last_control, a.current_wp, a.next_wp) for a in self.agents
        ] + [(e.vehicle_id, e.state, e.applied, e.current_wp, e.next_wp) for e in self.egos]
        for vid, st, ctl, cur, nxt in sorted(records):
            h.update(
                struct.pack(
                    "<i10dii",
                    vid,
                    st.pose.position.x,
                    st.pose.position.y,
                    st.pose.heading,
                    st.speed,
                    st.yaw_rate,
                    st.accel_long,
                    st.accel_lat,
                    ctl.throttle,
                    ctl.brake,
                    ctl.steer,
                    cur,
                    nxt,
                )
            )
        return h.hexdigest()

    # -- helpers -----------------------------------------------------------

    def vehicle_state(self, vehicle_id: int) -> VehicleState:
        for a in self.agents:
            if a.vehicle_id == vehicle_id:
                return a.state
        for e in self.egos:
            if e.vehicle_id == vehicle_id:
                return e.state
        raise KeyError(vehicle_id)

    def _all_footprints(self) -> RectSet:
        recs = [(a.object_id, a.state, a.params) for a in self.agents]
        recs += [(e.object_id, e.state, e.spec.params) for e in self.egos]
        return RectSet(
            [r[0] for r in recs],
            [r[1].pose.position.x for r in recs],
            [r[1].pose.position.y for r in recs],
            [r[1].pose.heading for r in recs],
            [r[2].length for r in recs],
            [r[2].width for r in recs],
        )

    def _build_scene(self) -> list[SceneObject]:
        objs: list[SceneObject] = []
        for o in self.world.obstacles:
            objs.append(SceneObject(CLASS_IDS[o.semantic_class], o.id, o.polygon))
        for a in self.agents:
            objs.append(
                SceneObject(
                    CLASS_IDS["vehicle"],
                    a.object_id,
                    a.footprint(),
                    world_center=(a.state.pose.position.x, a.state.pose.position.y),
                    world_length=a.params.length,
                    world_width=a.params.width,
                    world_heading=a.state.pose.heading,
                )
            )
        for e in self.egos:
            objs.append(
                SceneObject(
                    CLASS_IDS["ego_vehicle"],
                    e.object_id,
                    e.footprint(),
                    world_center=(e.state.pose.position.x, e.state.pose.position.y),
                    world_length=e.spec.params.length,
                    world_width=e.spec.params.width,
                    world_heading=e.state.pose.heading,
                )
            )
        return objs

    def _observation_cameras(self, ego_index: int) -> list:
        return [
            s
            for s in self.scenario.sensors
            if s.kind == "camera_rgb" and s.vehicle == ego_index
        ]

    def _ego_by_id(self, vehicle_id: int) -> Optional[EgoRuntime]:
        for e in self.egos:
            if e.vehicle_id == vehicle_id:
                return e
        return None

    # -- recording ---------------------------------------------------------

    def _start_recording(self) -> None:
        if self.recorder is not None and self.recorder.active:
            return
        if self.record_dir is None:
            log.warning("recorder start requested but no --record-dir configured")
            return
        if self.record_sessions:
            self._session_counter += 1
            session = f"session_{self._session_counter:04d}"
            out = f"{self.record_dir}/{session}"
        else:
            if self._session_counter > 0:
                log.warning("recording already finalized into %s; ignoring restart", self.record_dir)
                return
            self._session_counter += 1
            session = "session_0001"
            out = self.record_dir
        ego_index = self.scenario.ego_indices[0] if self.scenario.ego_indices else 0
        self.recorder = DatasetRecorder(out, self.scenario, self.clock.dt, ego_index)
        self.recorder.begin()
        self.dataset_dirs.append(out)
        self._pending_events.append(("recorder_started", {"session": session}))

    def _stop_recording(self) -> None:
        if self.recorder is None or not self.recorder.active:
            return
        manifest = self.recorder.finalize()
        self._pending_events.append(
            ("recorder_stopped", {"samples": manifest["sample_count"]})
        )

    # -- the tick ----------------------------------------------------------

    def tick(self) -> list[dict]:
        """Execute one tick; returns the events it emitted."""
        k = self.clock.tick + 1
        t = k * self.clock.dt
        events_before = len(self.events)
        self._pending_events: list[tuple[str, dict]] = []

        # (1) latch commands
        commands: dict[int, ControlInput] = {}
        if self.command_source is not None:
            commands = self.command_source(k) or {}
        elif self.bridge is not None:
            latched = self.bridge.take_latch(k)
            commands = latched.commands
            for req in latched.recorder:
                if req == "start":
                    self._start_recording()
                elif req == "stop":
                    self._stop_recording()
        for vid in sorted(commands):
            ego = self._ego_by_id(vid)
            if ego is not None:
                ego.applied = commands[vid]

        # light states at the time being advanced to
        lights = {
            lid: light_phase(self.world.lights[lid], t) for lid in sorted(self.world.lights)
        }

        # (2) traffic against the previous-tick snapshot; all forward rays
        # are evaluated in one vectorized batch before any agent moves
        snapshot = self._all_footprints()
        hits: list = []
        if self.agents:
            sets = [self.world.solid_segments, snapshot]
            origins = np.empty((len(self.agents), 2))
            dirs = np.empty((len(self.agents), 2))
            excl = np.empty(len(self.agents), dtype=np.int64)
            for i, a in enumerate(self.agents):
                b = a.front_bumper()
                origins[i, 0], origins[i, 1] = b.x, b.y
                f = a.state.pose.forward()
                dirs[i, 0], dirs[i, 1] = f.x, f.y
                excl[i] = a.object_id
            dists, ids = ray_batch(origins, dirs, self.tuning.ray_range, sets, excl)
            for i, a in enumerate(self.agents):
                inside = _origin_inside(
                    origins[i, 0], origins[i, 1], sets, frozenset({a.object_id})
                )
                if inside is not None:
                    hits.append((0.0, inside))
                elif ids[i] >= 0:
                    hits.append((float(dists[i]), int(ids[i])))
                else:
                    hits.append(None)
        for agent, hit in zip(self.agents, hits):
            for kind, payload in advance_agent(
                agent,
                self.world,
                snapshot,
                lights,
                self.weather,
                self.clock.dt,
                self.tuning,
                forward_hit=hit,
            ):
                self._emit(k, kind, payload)

        # (3) egos
        for ego in self.egos:
            ego.state = step_vehicle(
                ego.state, ego.spec.params, ego.applied, self.weather.friction_scale, self.clock.dt
            )
            nxt = self.world.waypoint(ego.next_wp)
            if ego.state.pose.position.dist(nxt.position) < self.tuning.capture_radius:
                ego.current_wp = ego.next_wp
                ego.next_wp = _ego_next_choice(self.world, ego.current_wp, ego.state.pose.heading)

        # (4) collisions and respawn
        ego_foot = [(e.vehicle_id, e.footprint(), e.state.pose.position) for e in self.egos]
        outcome = detect_and_respawn(
            self.agents,
            ego_foot,
            self.world,
            make_agent_rng=lambda a: substream(self.scenario.seed, "agent", a.vehicle_id),
        )
        for kind, payload in outcome.events:
            if kind == "despawned":
                log.warning("tick %d: vehicle %s despawned (no free spawn point)", k, payload)
            self._emit(k, kind, payload)
        if outcome.despawned:
            self.agents = [a for a in self.agents if a.vehicle_id not in outcome.despawned]

        # (5) light phase bookkeeping
        for lid in sorted(lights):
            phase = lights[lid].phase
            if self._light_cache.get(lid) != phase:
                self._light_cache[lid] = phase
                self._emit(k, "light_changed", {"light": lid, "phase": phase})

        # (6) sensors due this tick
        frames: dict[str, CameraFrame] = {}
        grids: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        samples: list[tuple[object, object]] = []  # (config, sample)
        scene: Optional[list[SceneObject]] = None
        wanted = self.bridge.wanted_topics() if self.bridge is not None else set()
        current_foot: Optional[RectSet] = None
        due_ids = sens.schedule_due(self.scenario.sensors, k, self.clock.dt)
        for sensor_id in due_ids:
            config = self._sensor_by_id[sensor_id]
            ego = self._ego_by_id(config.vehicle)
            if ego is None:
                continue
            if config.kind == "radar":
                if current_foot is None:
                    current_foot = self._all_footprints()
                scan = sens.sample_radar(
                    config,
                    ego.state.pose,
                    ego.object_id,
                    [self.world.solid_segments, current_foot],
                    k,
                    t,
                    rng=self._sensor_rng[config.id],
                    noise_scale=self.weather.sensor_noise_scale,
                )
                samples.append((config, scan))
            elif config.kind == "imu":
                samples.append(
                    (config, sens.sample_imu(config, ego.state, self.weather.sensor_noise_scale,
                                             self._sensor_rng[config.id], k, t))
                )
            elif config.kind == "gnss":
                samples.append(
                    (config, sens.sample_gnss(config, ego.state.pose, self.weather.sensor_noise_scale,
                                              self._sensor_rng[config.id], k, t))
                )
            else:
                # Cameras are rendered only when something consumes them; a
                # render is a pure function of world state, so skipping one
                # perturbs nothing downstream.
                needed = config.topic in wanted
                if self.recorder is not None and self.recorder.active and config.kind == "camera_rgb":
                    needed = needed or config.vehicle == self.recorder.ego_index
                if self._label_camera is not None and config.id == self._label_camera.id:
                    needed = True
                if not needed:
                    continue
                if scene is None:
                    scene = self._build_scene()
                view = sens.camera_view(config, ego.state.pose)
                g = sens.rasterize_scene(view, scene)
                grids[config.id] = g
                frame = sens.render_camera(config, ego.state.pose, scene, k, t, grids=g)
                frames[config.id] = frame
                samples.append((config, frame))

        # (7) dataset recording and label export
        if self.recorder is not None and self.recorder.active:
            applied = {e.vehicle_id: e.applied for e in self.egos}
            self.recorder.record_commands(k, applied)
            obs_cams = self._observation_cameras(self.recorder.ego_index)
            if obs_cams and all(sens.sensor_due(c.rate_hz, k, self.clock.dt) for c in obs_cams):
                ego = self._ego_by_id(self.recorder.ego_index)
                obs = build_observation(
                    ego.state,
                    ego.applied,
                    ego.current_wp,
                    ego.next_wp,
                    self.world,
                    [frames[c.id] for c in obs_cams],
                )
                self.recorder.record_sample(k, t, obs, ego.applied, [frames[c.id] for c in obs_cams])
                self._pending_events.append(
                    ("recorder_progress", {"samples": self.recorder.sample_count})
                )
        if self._label_camera is not None and self._label_camera.id in frames:
            cam = self._label_camera
            _, classes, out_dir = self.label_export
            ego = self._ego_by_id(cam.vehicle)
            view = sens.camera_view(cam, ego.state.pose)
            labels = generate_labels(view, scene, classes, instance_grid=grids[cam.id][1])
            from .dataset import save_frame_png

            rel = f"frames/{cam.id}/{k:010d}.png"
            save_frame_png(frames[cam.id], f"{out_dir}/{rel}")
            write_label_file(labels, k, t, cam.id, rel, out_dir)

        for kind, payload in self._pending_events:
            self._emit(k, kind, payload)
        self._pending_events = []

        # (8) publish
        if self.bridge is not None:
            self._publish(k, t, samples, events_before)

        # (9) advance the clock
        self.clock.tick = k
        return self.events[events_before:]

    def _publish(self, k: int, t: float, samples: list, events_before: int) -> None:
        from .bridge import TopicMessage

        messages = [TopicMessage("/sim/clock", "time", {"tick": k, "sim_time": t})]
        for event in self.events[events_before:]:
            messages.append(TopicMessage("/sim/events", "event", event))
        for a in self.agents:
            messages.append(TopicMessage(f"/traffic/{a.vehicle_id}/pose", "publish", _pose_payload(a.state)))
        for e in self.egos:
            messages.append(TopicMessage(f"/ego/{e.vehicle_id}/pose", "publish", _pose_payload(e.state)))
        for config, sample in samples:
            messages.append(TopicMessage(config.topic, "publish", _sample_payload(config, sample)))
        self.bridge.publish_tick(k, t, messages)

    # -- run loop ----------------------------------------------------------

    def run(
        self,
        max_ticks: Optional[int] = None,
        stop: Optional[threading.Event] = None,
        record_from_start: bool = False,
    ) -> RunReport:
        started = time.perf_counter()
        if record_from_start:
            self._pending_events = []
            self._start_recording()
            pend, self._pending_events = self._pending_events, []
            for kind, payload in pend:
                self._emit(0, kind, payload)
        executed = 0
        while (max_ticks is None or executed < max_ticks) and not (stop and stop.is_set()):
            self.tick()
            executed += 1
            if self.clock.mode == "realtime":
                target = started + executed * self.clock.dt
                delay = target - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
        if self.recorder is not None and self.recorder.active:
            self._stop_recording()
            for kind, payload in self._pending_events:
                self._emit(self.clock.tick, kind, payload)
            self._pending_events = []
        return RunReport(
            ticks=executed,
            wall_seconds=time.perf_counter() - started,
            collisions=self.collision_count,
            events=dict(sorted(self.event_counts.items())),
            dataset_dirs=list(self.dataset_dirs),
            event_log_hash=self.event_log_hash(),
            state_hash=self.state_hash(),
        )


def replay_dataset(dataset_dir: str) -> tuple[Optional[int], int]:
    """Re-inject a dataset's command log and verify recorded observations.

    Returns (first divergent tick or None, samples checked). Replay is
    command-level: the same scenario and seed plus the recorded per-tick
    controls must reproduce every recorded observation hash bit-for-bit.
    """
    from pathlib import Path

    from .dataset import iter_samples, load_commands, load_manifest
    from .scenario import load_scenario

    root = Path(dataset_dir)
    manifest = load_manifest(root)
    scenario = load_scenario(root / manifest["scenario_file"])
    if scenario.content_hash != manifest["scenario_hash"]:
        raise RuntimeError(
            f"dataset scenario copy hash {scenario.content_hash} != manifest {manifest['scenario_hash']}"
        )
    commands = load_commands(root)
    samples = {s["tick"]: s for s in iter_samples(root)}
    engine = Engine(
        scenario,
        dt=manifest["dt"],
        mode="fast",
        command_source=lambda k: commands.get(k, {}),
    )
    obs_cams = engine._observation_cameras(manifest["ego"])
    checked = 0
    for k in range(1, manifest["tick_count"] + 1):
        engine.tick()
        sample = samples.get(k)
        if sample is None:
            continue
        ego = engine._ego_by_id(manifest["ego"])
        scene = engine._build_scene()
        frames = [
            sens.render_camera(c, ego.state.pose, scene, k, k * engine.clock.dt) for c in obs_cams
        ]
        obs = build_observation(ego.state, ego.applied, ego.current_wp, ego.next_wp, engine.world, frames)
        checked += 1
        if obs.content_hash() != sample["obs_hash"]:
            return k, checked
    return None, checked


def _pose_payload(state: VehicleState) -> dict:
    return {
        "x": state.pose.position.x,
        "y": state.pose.position.y,
        "heading": state.pose.heading,
        "speed": state.speed,
        "yaw_rate": state.yaw_rate,
    }


def _sample_payload(config, sample) -> dict:
    if isinstance(sample, sens.RadarScan):
        return {
            "sensor": sample.sensor_id,
            "tick": sample.tick,
            "distances": list(sample.distances),
            "fov": sample.fov,
            "max_range": sample.max_range,
        }
    if isinstance(sample, sens.ImuSample):
        return {
            "sensor": sample.sensor_id,
            "tick": sample.tick,
            "accel_long": sample.accel_long,
            "accel_lat": sample.accel_lat,
            "gyro_z": sample.gyro_z,
        }
    if isinstance(sample, sens.GnssFix):
        return {"sensor": sample.sensor_id, "tick": sample.tick, "x": sample.x, "y": sample.y}
    if isinstance(sample, sens.CameraFrame):
        return {
            "sensor": sample.sensor_id,
            "tick": sample.tick,
            "width_px": sample.width_px,
            "height_px": sample.height_px,
            "meters_per_px": sample.meters_per_px,
            "mode": sample.mode,
            "_pixels": sample.pixels,
        }
    raise TypeError(f"unknown sample type {type(sample)!r}")
