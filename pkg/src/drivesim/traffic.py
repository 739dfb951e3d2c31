"""Scripted traffic: waypoint following, light stops, ray avoidance, respawn.

Agents read a frozen snapshot of the previous tick's footprints, so advancing
them in any order (or in parallel) gives identical results; collision handling
runs afterwards as a single barrier phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import (
    ControlInput,
    PidController,
    VehicleParams,
    VehicleState,
    speed_tracking_input,
    step_vehicle,
)
from .geometry import SegmentSet, Vec2, convex_overlap, oriented_rectangle
from .scenario import TrafficLight, Waypoint, Weather, WorldMap


@dataclass(frozen=True)
class LightPhaseState:
    light_id: int
    phase: str
    time_into_phase: float


def light_phase(light: TrafficLight, t: float) -> LightPhaseState:
    """Active phase at simulation time t; pure and periodic in cycle length."""
    assert t >= 0.0
    cycle = light.cycle_length
    tau = math.fmod(t + light.phase_offset, cycle)
    if tau < 0.0:
        tau += cycle
    for name, duration in light.phase_schedule:
        if tau < duration:
            return LightPhaseState(light.id, name, tau)
        tau -= duration
    # fmod rounding can land exactly on the cycle boundary
    return LightPhaseState(light.id, light.phase_schedule[0][0], 0.0)


@dataclass(frozen=True)
class TrafficTuning:
    capture_radius: float = 2.0    # m, waypoint switch distance
    ray_range: float = 30.0        # m, forward obstacle ray
    min_gap: float = 8.0           # m, stop threshold at standstill
    time_headway: float = 1.5      # s, speed-dependent threshold term
    stop_margin: float = 1.0       # m, rest distance before a stop line
    lookahead: float = 6.0         # m, pursuit distance along the current edge


@dataclass
class TrafficAgent:
    vehicle_id: int
    object_id: int
    params: VehicleParams
    state: VehicleState
    current_wp: int
    next_wp: int
    speed_pid: PidController
    steer_pid: PidController
    rng: np.random.Generator
    halted_for_light: bool = False
    halted_for_obstacle: bool = False
    last_control: ControlInput = field(default_factory=ControlInput)

    def footprint(self) -> tuple[Vec2, ...]:
        return oriented_rectangle(self.state.pose, self.params.length, self.params.width)

    def front_bumper(self) -> Vec2:
        f = self.state.pose.forward()
        return self.state.pose.position + f.scaled(0.5 * self.params.length)


def choose_successor(rng: np.random.Generator, successors: Sequence[int]) -> int:
    """Uniform choice from the agent's substream; single-successor draws still
    consume one value so stream positions stay aligned across graph edits."""
    idx = int(rng.integers(0, len(successors)))
    return successors[idx]


def _pursuit_heading(agent: TrafficAgent, wmap: WorldMap, lookahead: float) -> float:
    """Bearing to a lookahead point on the current edge toward next_wp.

    Degenerates to the bearing straight at next_wp once within lookahead
    distance, so a single forward waypoint behaves like plain pursuit.
    """
    pos = agent.state.pose.position
    a = wmap.waypoint(agent.current_wp).position
    b = wmap.waypoint(agent.next_wp).position
    edge = b - a
    edge_len = edge.norm()
    if edge_len < 1e-9:
        return agent.state.pose.heading
    ux, uy = edge.x / edge_len, edge.y / edge_len
    s = (pos - a).dot(Vec2(ux, uy))
    s_target = min(edge_len, s + lookahead)
    target = a + Vec2(ux, uy).scaled(s_target)
    if target.dist(pos) < 1e-6:
        target = b
    return math.atan2(target.y - pos.y, target.x - pos.x)


def _stop_line_gate(
    agent: TrafficAgent,
    next_wp: Waypoint,
    lights: dict[int, LightPhaseState],
    weather: Weather,
    tuning: TrafficTuning,
) -> tuple[bool, bool]:
    """(hold, braking) for the stop line at next_wp, if any.

    hold: the agent may not advance past this waypoint (red, or yellow while
    it can still stop before the line). braking: close enough that the target
    speed must drop to zero now.
    """
    if next_wp.stop_line_for is None:
        return False, False
    phase = lights[next_wp.stop_line_for].phase
    if phase == "green":
        return False, False
    bumper = agent.front_bumper()
    edge_dir = agent.state.pose.forward()
    s = (next_wp.position - bumper).dot(edge_dir)
    if s <= 0.0:
        return False, False  # bumper already past the line; proceed
    v = agent.state.speed
    a_cap = agent.params.max_brake_force * weather.friction_scale / agent.params.mass
    stopping = v * v / (2.0 * a_cap)
    if phase == "yellow" and stopping > s:
        return False, False  # cannot stop before the line; continue through
    envelope = stopping + tuning.stop_margin
    return True, s < envelope


_COMPUTE_RAY = object()  # sentinel: advance_agent casts its own forward ray


def advance_agent(
    agent: TrafficAgent,
    wmap: WorldMap,
    others: SegmentSet,
    lights: dict[int, LightPhaseState],
    weather: Weather,
    dt: float,
    tuning: TrafficTuning = TrafficTuning(),
    forward_hit=_COMPUTE_RAY,
) -> list[tuple[str, dict]]:
    """Advance one traffic agent a single tick; returns emitted events.

    `others` holds the previous-tick footprints of every other vehicle (the
    agent itself must be excluded by object id). The engine batches all
    agents' forward rays and passes each result via `forward_hit`; standalone
    callers omit it and the ray is cast here.
    """
    events: list[tuple[str, dict]] = []
    pos = agent.state.pose.position
    next_wp = wmap.waypoint(agent.next_wp)

    hold, braking = _stop_line_gate(agent, next_wp, lights, weather, tuning)
    if not hold and pos.dist(next_wp.position) < tuning.capture_radius:
        # A red/yellow stop line gates progression too: resting inside the
        # capture radius must not let the agent slip past the line.
        agent.current_wp = agent.next_wp
        agent.next_wp = choose_successor(agent.rng, wmap.waypoint(agent.current_wp).successors)
        next_wp = wmap.waypoint(agent.next_wp)
        events.append(
            ("waypoint_advanced", {"vehicle": agent.vehicle_id, "at": agent.current_wp, "to": agent.next_wp})
        )
        hold, braking = _stop_line_gate(agent, next_wp, lights, weather, tuning)

    target_speed = wmap.waypoint(agent.current_wp).speed_limit
    target_heading = _pursuit_heading(agent, wmap, tuning.lookahead)
    if hold and braking:
        target_speed = 0.0
        if not agent.halted_for_light:
            agent.halted_for_light = True
            events.append(
                ("halted_for_light", {"vehicle": agent.vehicle_id, "light": next_wp.stop_line_for})
            )
    else:
        agent.halted_for_light = False

    if forward_hit is _COMPUTE_RAY:
        hit = wmap.cast_ray(
            agent.front_bumper(),
            agent.state.pose.forward(),
            tuning.ray_range,
            exclude=frozenset({agent.object_id}),
            footprints=others,
        )
    else:
        hit = forward_hit
    threshold = tuning.min_gap + agent.state.speed * tuning.time_headway
    if hit is not None and hit[0] < threshold:
        target_speed = 0.0
        if not agent.halted_for_obstacle:
            agent.halted_for_obstacle = True
            events.append(
                (
                    "halted_for_obstacle",
                    {"vehicle": agent.vehicle_id, "hit": hit[1], "distance": round(hit[0], 6)},
                )
            )
    else:
        agent.halted_for_obstacle = False

    control = speed_tracking_input(
        agent.speed_pid, agent.steer_pid, target_speed, target_heading, agent.state, dt
    )
    agent.last_control = control
    agent.state = step_vehicle(agent.state, agent.params, control, weather.friction_scale, dt)
    return events


@dataclass
class RespawnOutcome:
    events: list[tuple[str, dict]] = field(default_factory=list)
    despawned: list[int] = field(default_factory=list)


def detect_and_respawn(
    agents: Sequence[TrafficAgent],
    ego_footprints: Sequence[tuple[int, tuple[Vec2, ...], Vec2]],
    wmap: WorldMap,
    make_agent_rng: Callable[[TrafficAgent], np.random.Generator],
) -> RespawnOutcome:
    """Relocate traffic agents involved in any footprint overlap.

    Runs once per tick after all movement. Egos are never moved; involved
    traffic agents are sent to distinct unoccupied spawn points, farthest
    first from the nearest ego. Controllers and rng substreams are reset.
    `ego_footprints` carries (vehicle_id, footprint, position) for every ego.
    """
    out = RespawnOutcome()
    by_id = {a.vehicle_id: a for a in agents}

    recs = [
        _OverlapRecord(vid, fp, pos, max(pos.dist(p) for p in fp), False)
        for vid, fp, pos in ego_footprints
    ]
    recs += [
        _OverlapRecord(
            a.vehicle_id,
            None,
            a.state.pose.position,
            0.5 * math.hypot(a.params.length, a.params.width),
            True,
        )
        for a in agents
    ]

    def foot(rec: _OverlapRecord) -> tuple[Vec2, ...]:
        if rec.fp is None:
            rec.fp = by_id[rec.vid].footprint()
        return rec.fp

    involved: list[int] = []
    for i in range(len(recs)):
        for j in range(i + 1, len(recs)):
            ra, rb = recs[i], recs[j]
            if not (ra.traffic or rb.traffic):
                continue
            if ra.center.dist(rb.center) > ra.radius + rb.radius:
                continue  # bounding circles disjoint, skip the axis test
            if convex_overlap(foot(ra), foot(rb)):
                pair = sorted((ra.vid, rb.vid))
                out.events.append(("collision", {"vehicles": pair}))
                for rec in (ra, rb):
                    if rec.traffic and rec.vid not in involved:
                        involved.append(rec.vid)
    if not involved:
        return out
    involved.sort()

    ego_positions = [pos for _, _, pos in ego_footprints]

    def spawn_rank(spawn_idx: int) -> tuple[float, int]:
        p = wmap.spawn_points[spawn_idx].position
        d = min((p.dist(e) for e in ego_positions), default=0.0)
        return (-d, spawn_idx)  # farthest from any ego first; index breaks ties

    taken: set[int] = set()
    for vid in involved:
        agent = by_id[vid]
        placed = False
        occupied = [r.footprint() for r in recs if r.vid != vid and r.vid not in out.despawned]
        for spawn_idx in sorted(range(len(wmap.spawn_points)), key=spawn_rank):
            if spawn_idx in taken:
                continue
            pose = wmap.spawn_points[spawn_idx]
            fp = oriented_rectangle(pose, agent.params.length, agent.params.width)
            if wmap.footprint_hits_solid(fp):
                continue
            if any(convex_overlap(fp, other) for other in occupied):
                continue
            taken.add(spawn_idx)
            agent.state = VehicleState.at(pose)
            agent.speed_pid.reset()
            agent.steer_pid.reset()
            agent.rng = make_agent_rng(agent)
            agent.halted_for_light = False
            agent.halted_for_obstacle = False
            nearest = nearest_waypoint(wmap, pose.position)
            agent.current_wp = nearest
            agent.next_wp = choose_successor(agent.rng, wmap.waypoint(nearest).successors)
            for rec in recs:
                if rec.vid == vid:
                    rec.fp = agent.footprint()
                    rec.center = agent.state.pose.position
            out.events.append(("respawned", {"vehicle": vid, "spawn": spawn_idx}))
            placed = True
            break
        if not placed:
            out.despawned.append(vid)
            out.events.append(("despawned", {"vehicle": vid}))
    return out


class _OverlapRecord:
    __slots__ = ("vid", "fp", "center", "radius", "traffic")

    def __init__(self, vid, fp, center, radius, traffic):
        self.vid, self.fp, self.center, self.radius, self.traffic = vid, fp, center, radius, traffic


def nearest_waypoint(wmap: WorldMap, position: Vec2) -> int:
    """Closest waypoint by Euclidean distance; ties break to the lowest id."""
    best_id, best_d = -1, math.inf
    for wid in sorted(wmap.waypoints):
        d = wmap.waypoints[wid].position.dist(position)
        if d < best_d:
            best_id, best_d = wid, d
    return best_id
