"""Scenario loading and the static world map.

A scenario is one YAML document with sections map / weather / vehicles /
sensors / seed (schema in docs/scenario.md). Validation is strict: unknown
keys are rejected so typos fail loudly, and the first violated invariant is
reported with its location in the file. Loaded scenarios are immutable and
safe to share across threads.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import yaml

from .dynamics import (
    DEFAULT_SPEED_GAINS,
    DEFAULT_STEER_GAINS,
    PidGains,
    VehicleParams,
)
from .geometry import (
    Pose2,
    SegmentSet,
    Vec2,
    cast_ray_sets,
    convex_overlap,
    is_ccw,
    is_convex,
    is_simple,
    polygon_area,
    sector_scan_sets,
    triangulate,
)
from .sensors import CLASS_IDS, SOLID_CLASSES, SensorConfig

OBSTACLE_CLASSES = ("building", "vegetation", "barrier", "road", "crosswalk", "sidewalk")
LIGHT_PHASES = ("red", "yellow", "green")
VEHICLE_ROLES = ("ego", "traffic")

# Vehicles share the object-id space with obstacles; offsetting keeps the two
# ranges disjoint without coordinating ids across the YAML file.
VEHICLE_ID_BASE = 1_000_000


def vehicle_object_id(vehicle_index: int) -> int:
    return VEHICLE_ID_BASE + vehicle_index


def is_vehicle_object(object_id: int) -> bool:
    return object_id >= VEHICLE_ID_BASE


class ScenarioError(ValueError):
    """Scenario file failed to parse or validate; message carries the location."""

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


@dataclass(frozen=True)
class Waypoint:
    id: int
    position: Vec2
    successors: tuple[int, ...]
    speed_limit: float
    stop_line_for: Optional[int] = None


@dataclass(frozen=True)
class StaticObstacle:
    id: int
    polygon: tuple[Vec2, ...]
    semantic_class: str
    height: float = 0.0


@dataclass(frozen=True)
class TrafficLight:
    id: int
    position: Vec2
    phase_schedule: tuple[tuple[str, float], ...]
    phase_offset: float = 0.0

    @property
    def cycle_length(self) -> float:
        return sum(d for _, d in self.phase_schedule)


@dataclass(frozen=True)
class Weather:
    friction_scale: float = 1.0
    sensor_noise_scale: float = 1.0


@dataclass(frozen=True)
class VehicleSpec:
    role: str
    initial_waypoint: int
    params: VehicleParams = field(default_factory=VehicleParams)
    speed_gains: PidGains = DEFAULT_SPEED_GAINS
    steer_gains: PidGains = DEFAULT_STEER_GAINS
    start: Optional[Pose2] = None  # explicit spawn pose; defaults to the waypoint


class WorldMap:
    """Immutable static world: waypoint graph, obstacles, lights, spawns.

    Geometry queries are pure functions of (this map, the footprint set passed
    in), so any number of threads may read concurrently.
    """

    def __init__(
        self,
        waypoints: Sequence[Waypoint],
        obstacles: Sequence[StaticObstacle],
        lights: Sequence[TrafficLight],
        spawn_points: Sequence[Pose2],
    ):
        self.waypoints: dict[int, Waypoint] = {w.id: w for w in waypoints}
        self.obstacles = tuple(obstacles)
        self.lights: dict[int, TrafficLight] = {l.id: l for l in lights}
        self.spawn_points = tuple(spawn_points)
        solid = [(o.id, o.polygon) for o in obstacles if o.semantic_class in SOLID_CLASSES]
        self.solid_segments = SegmentSet(solid)
        self._solid_parts: dict[int, list[tuple[Vec2, ...]]] = {}
        for oid, poly in solid:
            self._solid_parts[oid] = (
                [tuple(poly)] if is_convex(poly) else [tuple(t) for t in triangulate(poly)]
            )

    def waypoint(self, wp_id: int) -> Waypoint:
        return self.waypoints[wp_id]

    def cast_ray(
        self,
        origin: Vec2,
        direction: Vec2,
        max_range: float,
        exclude: frozenset[int] = frozenset(),
        footprints: Optional[SegmentSet] = None,
    ) -> Optional[tuple[float, int]]:
        """Nearest hit against solid obstacles plus the given vehicle footprints."""
        sets = [self.solid_segments] if footprints is None else [self.solid_segments, footprints]
        return cast_ray_sets(origin, direction, max_range, sets, exclude)

    def sector_scan(
        self,
        pose: Pose2,
        fov: float,
        max_range: float,
        n_rays: int,
        exclude: frozenset[int] = frozenset(),
        footprints: Optional[SegmentSet] = None,
    ) -> list[float]:
        sets = [self.solid_segments] if footprints is None else [self.solid_segments, footprints]
        return sector_scan_sets(pose, fov, max_range, n_rays, sets, exclude)

    def footprint_hits_solid(self, footprint: Sequence[Vec2]) -> bool:
        """True when a convex footprint's interior overlaps any solid obstacle."""
        for parts in self._solid_parts.values():
            for part in parts:
                if convex_overlap(footprint, part):
                    return True
        return False


@dataclass(frozen=True)
class Scenario:
    world: WorldMap
    weather: Weather
    vehicles: tuple[VehicleSpec, ...]
    sensors: tuple[SensorConfig, ...]
    seed: int
    source_path: Optional[str] = None
    content_hash: str = ""

    @property
    def ego_indices(self) -> tuple[int, ...]:
        return tuple(i for i, v in enumerate(self.vehicles) if v.role == "ego")


# ---------------------------------------------------------------------------
# YAML parsing helpers
# ---------------------------------------------------------------------------


def _require_mapping(node: Any, loc: str, allowed: Iterable[str]) -> dict:
    if not isinstance(node, dict):
        raise ScenarioError(f"expected a mapping, got {type(node).__name__}", loc)
    allowed_set = set(allowed)
    for key in node:
        if key not in allowed_set:
            raise ScenarioError(f"unknown key '{key}' (allowed: {sorted(allowed_set)})", loc)
    return node


def _require_list(node: Any, loc: str) -> list:
    if not isinstance(node, list):
        raise ScenarioError(f"expected a list, got {type(node).__name__}", loc)
    return node


def _number(node: Any, loc: str) -> float:
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise ScenarioError(f"expected a number, got {node!r}", loc)
    value = float(node)
    if not math.isfinite(value):
        raise ScenarioError(f"value must be finite, got {node!r}", loc)
    return value


def _integer(node: Any, loc: str) -> int:
    if isinstance(node, bool) or not isinstance(node, int):
        raise ScenarioError(f"expected an integer, got {node!r}", loc)
    return node


def _point(node: Any, loc: str) -> Vec2:
    pair = _require_list(node, loc)
    if len(pair) != 2:
        raise ScenarioError(f"expected [x, y], got {node!r}", loc)
    return Vec2(_number(pair[0], loc), _number(pair[1], loc))


def _parse_waypoints(node: Any, loc: str) -> list[Waypoint]:
    out: list[Waypoint] = []
    seen: set[int] = set()
    for i, item in enumerate(_require_list(node, loc)):
        wloc = f"{loc}[{i}]"
        d = _require_mapping(item, wloc, ("id", "x", "y", "successors", "speed_limit", "stop_line_for"))
        wid = _integer(d.get("id"), f"{wloc}.id")
        if wid in seen:
            raise ScenarioError(f"duplicate waypoint id {wid}", wloc)
        seen.add(wid)
        succ = tuple(
            _integer(s, f"{wloc}.successors[{j}]")
            for j, s in enumerate(_require_list(d.get("successors", []), f"{wloc}.successors"))
        )
        limit = _number(d.get("speed_limit"), f"{wloc}.speed_limit")
        if limit <= 0.0:
            raise ScenarioError(f"waypoint {wid} speed_limit must be > 0, got {limit}", wloc)
        stop_for = d.get("stop_line_for")
        out.append(
            Waypoint(
                id=wid,
                position=Vec2(_number(d.get("x"), f"{wloc}.x"), _number(d.get("y"), f"{wloc}.y")),
                successors=succ,
                speed_limit=limit,
                stop_line_for=None if stop_for is None else _integer(stop_for, f"{wloc}.stop_line_for"),
            )
        )
    return out


def _parse_obstacles(node: Any, loc: str) -> list[StaticObstacle]:
    out: list[StaticObstacle] = []
    seen: set[int] = set()
    for i, item in enumerate(_require_list(node, loc)):
        oloc = f"{loc}[{i}]"
        d = _require_mapping(item, oloc, ("id", "class", "height", "polygon"))
        oid = _integer(d.get("id"), f"{oloc}.id")
        if oid in seen:
            raise ScenarioError(f"duplicate obstacle id {oid}", oloc)
        if oid >= VEHICLE_ID_BASE:
            raise ScenarioError(f"obstacle id {oid} must be < {VEHICLE_ID_BASE}", oloc)
        seen.add(oid)
        cls = d.get("class")
        if cls not in OBSTACLE_CLASSES:
            raise ScenarioError(f"obstacle {oid} has unknown class {cls!r}", oloc)
        poly = tuple(
            _point(p, f"{oloc}.polygon[{j}]")
            for j, p in enumerate(_require_list(d.get("polygon"), f"{oloc}.polygon"))
        )
        if len(poly) < 3:
            raise ScenarioError(f"obstacle {oid} polygon needs >= 3 vertices", oloc)
        if not is_simple(poly):
            raise ScenarioError(f"obstacle {oid} polygon self-intersects", oloc)
        if not is_ccw(poly):
            raise ScenarioError(
                f"obstacle {oid} polygon must wind counterclockwise (area {polygon_area(poly):.3f})",
                oloc,
            )
        out.append(
            StaticObstacle(
                id=oid,
                polygon=poly,
                semantic_class=cls,
                height=_number(d.get("height", 0.0), f"{oloc}.height"),
            )
        )
    return out


def _parse_lights(node: Any, loc: str) -> list[TrafficLight]:
    out: list[TrafficLight] = []
    seen: set[int] = set()
    for i, item in enumerate(_require_list(node, loc)):
        lloc = f"{loc}[{i}]"
        d = _require_mapping(item, lloc, ("id", "x", "y", "offset", "phases"))
        lid = _integer(d.get("id"), f"{lloc}.id")
        if lid in seen:
            raise ScenarioError(f"duplicate light id {lid}", lloc)
        seen.add(lid)
        phases: list[tuple[str, float]] = []
        for j, entry in enumerate(_require_list(d.get("phases"), f"{lloc}.phases")):
            ploc = f"{lloc}.phases[{j}]"
            pair = _require_list(entry, ploc)
            if len(pair) != 2:
                raise ScenarioError(f"expected [phase, duration], got {entry!r}", ploc)
            name, dur = pair[0], _number(pair[1], ploc)
            if name not in LIGHT_PHASES:
                raise ScenarioError(f"unknown phase {name!r}", ploc)
            if dur <= 0.0:
                raise ScenarioError(f"phase duration must be > 0, got {dur}", ploc)
            phases.append((name, dur))
        if not phases:
            raise ScenarioError(f"light {lid} has an empty phase schedule", lloc)
        out.append(
            TrafficLight(
                id=lid,
                position=Vec2(_number(d.get("x"), f"{lloc}.x"), _number(d.get("y"), f"{lloc}.y")),
                phase_schedule=tuple(phases),
                phase_offset=_number(d.get("offset", 0.0), f"{lloc}.offset"),
            )
        )
    return out


def _parse_vehicle(item: Any, loc: str) -> VehicleSpec:
    d = _require_mapping(item, loc, ("role", "waypoint", "params", "pid", "start"))
    role = d.get("role")
    if role not in VEHICLE_ROLES:
        raise ScenarioError(f"vehicle role must be one of {VEHICLE_ROLES}, got {role!r}", loc)
    wp = _integer(d.get("waypoint"), f"{loc}.waypoint")
    params = VehicleParams()
    if "params" in d:
        ploc = f"{loc}.params"
        allowed = tuple(VehicleParams.__dataclass_fields__)
        pd = _require_mapping(d["params"], ploc, allowed)
        kwargs: dict[str, Any] = {}
        for key, value in pd.items():
            if key in ("powertrain", "drive_mode"):
                kwargs[key] = value
            else:
                kwargs[key] = _number(value, f"{ploc}.{key}")
        try:
            params = VehicleParams(**kwargs)
        except AssertionError as exc:
            raise ScenarioError(f"invalid vehicle params: {exc}", ploc) from exc
    speed_gains, steer_gains = DEFAULT_SPEED_GAINS, DEFAULT_STEER_GAINS
    if "pid" in d:
        gloc = f"{loc}.pid"
        gd = _require_mapping(d["pid"], gloc, ("speed", "steer"))
        if "speed" in gd:
            speed_gains = _parse_gains(gd["speed"], f"{gloc}.speed", DEFAULT_SPEED_GAINS)
        if "steer" in gd:
            steer_gains = _parse_gains(gd["steer"], f"{gloc}.steer", DEFAULT_STEER_GAINS)
    start: Optional[Pose2] = None
    if "start" in d:
        sloc = f"{loc}.start"
        triple = _require_list(d["start"], sloc)
        if len(triple) != 3:
            raise ScenarioError(f"start must be [x, y, heading], got {d['start']!r}", sloc)
        start = Pose2(
            Vec2(_number(triple[0], sloc), _number(triple[1], sloc)), _number(triple[2], sloc)
        )
    return VehicleSpec(
        role=role,
        initial_waypoint=wp,
        params=params,
        speed_gains=speed_gains,
        steer_gains=steer_gains,
        start=start,
    )


def _parse_gains(node: Any, loc: str, defaults: PidGains) -> PidGains:
    d = _require_mapping(node, loc, ("kp", "ki", "kd", "integral_limit"))
    return PidGains(
        kp=_number(d.get("kp", defaults.kp), f"{loc}.kp"),
        ki=_number(d.get("ki", defaults.ki), f"{loc}.ki"),
        kd=_number(d.get("kd", defaults.kd), f"{loc}.kd"),
        integral_limit=_number(d.get("integral_limit", defaults.integral_limit), f"{loc}.integral_limit"),
    )


def _parse_sensor(item: Any, loc: str, n_vehicles: int) -> SensorConfig:
    d = _require_mapping(
        item, loc, ("id", "kind", "topic", "rate_hz", "frame", "mount", "vehicle", "params")
    )
    sensor_id = d.get("id")
    if not isinstance(sensor_id, str) or not sensor_id:
        raise ScenarioError(f"sensor id must be a non-empty string, got {sensor_id!r}", loc)
    kind = d.get("kind")
    if kind not in ("camera_rgb", "camera_semantic", "radar", "imu", "gnss"):
        raise ScenarioError(f"sensor {sensor_id} has unknown kind {kind!r}", loc)
    topic = d.get("topic")
    if not isinstance(topic, str) or not topic.startswith("/"):
        raise ScenarioError(f"sensor {sensor_id} topic must start with '/', got {topic!r}", loc)
    rate = _number(d.get("rate_hz"), f"{loc}.rate_hz")
    if rate <= 0.0:
        raise ScenarioError(f"sensor {sensor_id} rate_hz must be > 0", loc)
    mount = Pose2(Vec2(0.0, 0.0), 0.0)
    if "mount" in d:
        mloc = f"{loc}.mount"
        triple = _require_list(d["mount"], mloc)
        if len(triple) != 3:
            raise ScenarioError(f"mount must be [x, y, yaw], got {d['mount']!r}", mloc)
        mount = Pose2(
            Vec2(_number(triple[0], mloc), _number(triple[1], mloc)), _number(triple[2], mloc)
        )
    vehicle = _integer(d.get("vehicle", 0), f"{loc}.vehicle")
    if not (0 <= vehicle < n_vehicles):
        raise ScenarioError(f"sensor {sensor_id} references missing vehicle {vehicle}", loc)
    params = d.get("params", {})
    if not isinstance(params, dict):
        raise ScenarioError(f"sensor {sensor_id} params must be a mapping", loc)
    return SensorConfig(
        id=sensor_id,
        kind=kind,
        topic=topic,
        rate_hz=rate,
        frame=str(d.get("frame", "ego")),
        mount=mount,
        vehicle=vehicle,
        params=dict(params),
    )


def _validate_graph(waypoints: dict[int, Waypoint], lights: dict[int, TrafficLight]) -> None:
    for wp in waypoints.values():
        for succ in wp.successors:
            if succ not in waypoints:
                raise ScenarioError(
                    f"waypoint {wp.id} → unknown successor {succ}", "map.waypoints"
                )
        if not wp.successors:
            # With >= 1 successor everywhere, every node reaches a cycle.
            raise ScenarioError(
                f"waypoint {wp.id} has no successors (agents would dead-end)", "map.waypoints"
            )
        if wp.stop_line_for is not None and wp.stop_line_for not in lights:
            raise ScenarioError(
                f"waypoint {wp.id} → unknown traffic light {wp.stop_line_for}", "map.waypoints"
            )


def load_scenario(path: str | Path) -> Scenario:
    """Load and fully validate a scenario YAML file.

    Pure: loading the same file twice yields structurally identical scenarios.
    """
    path = Path(path)
    raw = path.read_bytes()
    try:
        doc = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"malformed YAML: {exc}", str(path)) from exc
    if doc is None:
        raise ScenarioError("empty scenario file", str(path))
    top = _require_mapping(doc, "scenario", ("map", "weather", "vehicles", "sensors", "seed"))

    mp = _require_mapping(top.get("map", {}), "map", ("waypoints", "obstacles", "lights", "spawn_points"))
    waypoints = _parse_waypoints(mp.get("waypoints", []), "map.waypoints")
    obstacles = _parse_obstacles(mp.get("obstacles", []), "map.obstacles")
    lights = _parse_lights(mp.get("lights", []), "map.lights")

    spawns: list[Pose2] = []
    for i, entry in enumerate(_require_list(mp.get("spawn_points", []), "map.spawn_points")):
        sloc = f"map.spawn_points[{i}]"
        triple = _require_list(entry, sloc)
        if len(triple) != 3:
            raise ScenarioError(f"expected [x, y, heading], got {entry!r}", sloc)
        spawns.append(
            Pose2(Vec2(_number(triple[0], sloc), _number(triple[1], sloc)), _number(triple[2], sloc))
        )
    if not spawns:
        raise ScenarioError("at least one spawn point is required", "map.spawn_points")

    wp_index = {w.id: w for w in waypoints}
    light_index = {l.id: l for l in lights}
    _validate_graph(wp_index, light_index)

    weather = Weather()
    if "weather" in top:
        wd = _require_mapping(top["weather"], "weather", ("friction_scale", "sensor_noise_scale"))
        friction = _number(wd.get("friction_scale", 1.0), "weather.friction_scale")
        noise = _number(wd.get("sensor_noise_scale", 1.0), "weather.sensor_noise_scale")
        if not (0.0 < friction <= 1.0):
            raise ScenarioError(f"friction_scale must be in (0, 1], got {friction}", "weather")
        if noise < 0.0:
            raise ScenarioError(f"sensor_noise_scale must be >= 0, got {noise}", "weather")
        weather = Weather(friction_scale=friction, sensor_noise_scale=noise)

    vehicles = [
        _parse_vehicle(item, f"vehicles[{i}]")
        for i, item in enumerate(_require_list(top.get("vehicles", []), "vehicles"))
    ]
    for i, veh in enumerate(vehicles):
        if veh.initial_waypoint not in wp_index:
            raise ScenarioError(
                f"vehicle {i} → unknown initial waypoint {veh.initial_waypoint}", f"vehicles[{i}]"
            )

    sensors = [
        _parse_sensor(item, f"sensors[{i}]", len(vehicles))
        for i, item in enumerate(_require_list(top.get("sensors", []), "sensors"))
    ]
    topics = [s.topic for s in sensors]
    if len(set(topics)) != len(topics):
        dup = next(t for t in topics if topics.count(t) > 1)
        raise ScenarioError(f"duplicate sensor topic {dup!r}", "sensors")
    for i, s in enumerate(sensors):
        if vehicles[s.vehicle].role != "ego":
            raise ScenarioError(
                f"sensor {s.id} attached to non-ego vehicle {s.vehicle}", f"sensors[{i}]"
            )

    seed = top.get("seed", 0)
    seed = _integer(seed, "seed")
    if not (0 <= seed < 2**64):
        raise ScenarioError(f"seed must fit in 64 unsigned bits, got {seed}", "seed")

    world = WorldMap(waypoints, obstacles, lights, spawns)
    return Scenario(
        world=world,
        weather=weather,
        vehicles=tuple(vehicles),
        sensors=tuple(sensors),
        seed=seed,
        source_path=str(path),
        content_hash=hashlib.sha256(raw).hexdigest(),
    )


def builtin_scenario_path(name: str) -> Path:
    """Path of a scenario shipped with the package (e.g. 'city_block')."""
    here = Path(__file__).resolve().parent / "scenarios" / f"{name}.yaml"
    if not here.exists():
        raise FileNotFoundError(f"no builtin scenario named {name!r}")
    return here


def resolve_scenario_path(spec: str | Path) -> Path:
    """Resolve a CLI scenario argument: a real path, or a builtin name."""
    p = Path(spec)
    if p.exists():
        return p
    try:
        return builtin_scenario_path(str(spec))
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {spec}")
