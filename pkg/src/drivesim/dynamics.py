"""Vehicle motion: powertrain force, kinematic bicycle stepping, PID control.

All operations are pure state transitions; stepping the same inputs yields
bit-identical outputs, which the replay machinery relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

from .geometry import Pose2, Vec2, wrap_angle

DRIVE_MODE_FACTOR = {"front": 0.6, "rear": 0.6, "all": 1.0}
POWERTRAINS = ("electric", "ice")
DRIVE_MODES = ("front", "rear", "all")


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 2.7          # m
    mass: float = 1200.0            # kg
    length: float = 4.5             # m, footprint
    width: float = 1.9              # m, footprint
    max_steer: float = 0.6          # rad, < pi/2 so tan stays finite
    max_drive_force: float = 12000.0  # N
    max_brake_force: float = 12000.0  # N
    drag_coeff: float = 8.0         # N/(m/s)^2
    rolling_coeff: float = 120.0    # N/(m/s)
    powertrain: str = "electric"
    drive_mode: str = "all"
    ice_idle_fraction: float = 0.05

    def __post_init__(self) -> None:
        assert self.wheelbase > 0 and self.mass > 0
        assert 0.0 < self.max_steer < 0.5 * math.pi
        assert self.max_drive_force > 0 and self.max_brake_force > 0
        assert self.powertrain in POWERTRAINS, self.powertrain
        assert self.drive_mode in DRIVE_MODES, self.drive_mode
        assert 0.0 <= self.ice_idle_fraction < 1.0


@dataclass(frozen=True)
class VehicleState:
    pose: Pose2
    speed: float = 0.0        # m/s, longitudinal, >= 0 (no reverse)
    yaw_rate: float = 0.0     # rad/s
    accel_long: float = 0.0   # m/s^2, realized over the last step
    accel_lat: float = 0.0    # m/s^2, v^2 tan(delta) / L

    @staticmethod
    def at(pose: Pose2) -> "VehicleState":
        return VehicleState(pose=pose)


def _clamp(v: float, lo: float, hi: float) -> float:
    return lo if v < lo else hi if v > hi else v


@dataclass(frozen=True)
class ControlInput:
    throttle: float = 0.0  # [0, 1]
    brake: float = 0.0     # [0, 1]
    steer: float = 0.0     # [-1, 1], scaled to +-max_steer

    @staticmethod
    def clamped(throttle: float, brake: float, steer: float) -> "ControlInput":
        """Clamp wire values into range; NaN collapses to 0 (never admitted)."""
        def safe(v: float, lo: float, hi: float) -> float:
            if not math.isfinite(v):
                return 0.0
            return _clamp(v, lo, hi)

        return ControlInput(safe(throttle, 0.0, 1.0), safe(brake, 0.0, 1.0), safe(steer, -1.0, 1.0))

    def was_clamped_from(self, throttle: float, brake: float, steer: float) -> bool:
        return (self.throttle, self.brake, self.steer) != (throttle, brake, steer)


def powertrain_force(params: VehicleParams, throttle: float, v: float) -> float:
    """Tractive force in newtons for a throttle setting at speed v.

    Electric delivers flat force; ICE creeps at zero throttle and tapers
    linearly toward its drag-limited top speed. Single-axle drive modes
    reach only 60% of the achievable force.
    """
    if params.powertrain == "electric":
        force = throttle * params.max_drive_force
    else:
        idle = params.ice_idle_fraction
        v_top = math.inf if params.drag_coeff <= 0.0 else params.max_drive_force / params.drag_coeff
        taper = max(0.0, 1.0 - v / v_top) if math.isfinite(v_top) else 1.0
        force = params.max_drive_force * (idle + (1.0 - idle) * throttle) * taper
    return force * DRIVE_MODE_FACTOR[params.drive_mode]


def step_vehicle(
    state: VehicleState,
    params: VehicleParams,
    control: ControlInput,
    friction_scale: float,
    dt: float,
) -> VehicleState:
    """Advance one fixed timestep through the kinematic bicycle model.

    Longitudinal force balance first (speed clamped at 0, no reverse), then a
    semi-implicit heading update: position advances along the midpoint
    heading, which keeps constant-steer paths on the analytic circle.
    """
    assert dt > 0.0
    v = state.speed
    drive = powertrain_force(params, control.throttle, v) * friction_scale
    brake = control.brake * params.max_brake_force * friction_scale * (1.0 if v > 0.0 else 0.0)
    resist = params.drag_coeff * v * v + params.rolling_coeff * v
    a = (drive - brake - resist) / params.mass
    v_new = max(0.0, v + a * dt)

    delta = control.steer * params.max_steer
    tan_d = math.tan(delta)
    yaw_rate = v_new * tan_d / params.wheelbase
    d_heading = yaw_rate * dt
    mid_heading = state.pose.heading + 0.5 * d_heading
    pos = state.pose.position + Vec2(math.cos(mid_heading), math.sin(mid_heading)).scaled(v_new * dt)

    return VehicleState(
        pose=Pose2(pos, state.pose.heading + d_heading),
        speed=v_new,
        yaw_rate=yaw_rate,
        accel_long=(v_new - v) / dt,
        accel_lat=v_new * v_new * tan_d / params.wheelbase,
    )


@dataclass
class PidController:
    """Discrete PID with clamped integral (anti-windup) and bounded output."""

    kp: float
    ki: float = 0.0
    kd: float = 0.0
    output_min: float = -1.0
    output_max: float = 1.0
    integral_limit: float = 10.0
    integral: float = 0.0
    prev_error: Optional[float] = None

    def reset(self) -> None:
        self.integral = 0.0
        self.prev_error = None

    def step(self, setpoint: float, measurement: float, dt: float) -> float:
        assert dt > 0.0
        error = setpoint - measurement
        self.integral = _clamp(self.integral + error * dt, -self.integral_limit, self.integral_limit)
        derivative = 0.0 if self.prev_error is None else (error - self.prev_error) / dt
        self.prev_error = error
        out = self.kp * error + self.ki * self.integral + self.kd * derivative
        return _clamp(out, self.output_min, self.output_max)


@dataclass(frozen=True)
class PidGains:
    kp: float
    ki: float = 0.0
    kd: float = 0.0
    integral_limit: float = 10.0

    def controller(self) -> PidController:
        return PidController(
            kp=self.kp, ki=self.ki, kd=self.kd, integral_limit=self.integral_limit
        )


# Shipped defaults; overridable per vehicle in the scenario file.
DEFAULT_SPEED_GAINS = PidGains(kp=0.30, ki=0.05, kd=0.0, integral_limit=10.0)
DEFAULT_STEER_GAINS = PidGains(kp=1.2, ki=0.0, kd=0.1, integral_limit=1.0)


def speed_tracking_input(
    speed_pid: PidController,
    steer_pid: PidController,
    target_speed: float,
    target_heading: float,
    state: VehicleState,
    dt: float,
) -> ControlInput:
    """Map speed + heading setpoints to a ControlInput via the two PIDs.

    Positive speed output becomes throttle, negative becomes brake; the steer
    PID acts on the wrapped heading error.
    """
    u_v = speed_pid.step(target_speed, state.speed, dt)
    heading_error = wrap_angle(target_heading - state.pose.heading)
    steer = steer_pid.step(heading_error, 0.0, dt)
    return ControlInput(throttle=max(0.0, u_v), brake=max(0.0, -u_v), steer=steer)


def make_default_controllers() -> tuple[PidController, PidController]:
    return DEFAULT_SPEED_GAINS.controller(), DEFAULT_STEER_GAINS.controller()
