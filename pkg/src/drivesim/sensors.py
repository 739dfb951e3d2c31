"""Sensor suite: sector radar, IMU, GNSS, and a top-down raster camera.

Sampling reads the post-tick world snapshot. Noise, when configured, comes
from a per-sensor substream so skipping one sensor can never shift another
sensor's draws. Zero-noise sensors are pure functions of world state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics import VehicleState
from .geometry import Pose2, SegmentSet, Vec2, compose, sector_scan_sets

SENSOR_KINDS = ("camera_rgb", "camera_semantic", "radar", "imu", "gnss")

# Semantic class ids double as painter priority: higher id paints later.
CLASS_IDS = {
    "background": 0,
    "road": 1,
    "crosswalk": 2,
    "sidewalk": 3,
    "building": 4,
    "vegetation": 5,
    "barrier": 6,
    "vehicle": 7,
    "ego_vehicle": 8,
}
CLASS_NAMES = {v: k for k, v in CLASS_IDS.items()}

# id -> RGB triple; shipped in docs/palette.md and stable across versions.
PALETTE = np.array(
    [
        (0, 0, 0),        # background
        (128, 64, 128),   # road
        (250, 250, 250),  # crosswalk
        (244, 35, 232),   # sidewalk
        (70, 70, 70),     # building
        (107, 142, 35),   # vegetation
        (190, 153, 153),  # barrier
        (0, 0, 142),      # vehicle
        (220, 20, 60),    # ego_vehicle
    ],
    dtype=np.uint8,
)

# Classes that block rays and vehicle placement; flat classes render only.
SOLID_CLASSES = frozenset({"building", "vegetation", "barrier"})

_PARAM_DEFAULTS: dict[str, dict[str, float | int | str]] = {
    "radar": {"fov": math.pi / 3.0, "max_range": 50.0, "n_rays": 16, "noise_std": 0.0},
    "camera_rgb": {"width_px": 320, "height_px": 640, "meters_per_px": 0.1, "palette": "default"},
    "camera_semantic": {"width_px": 320, "height_px": 640, "meters_per_px": 0.1, "palette": "default"},
    "imu": {"noise_std_accel": 0.0, "noise_std_gyro": 0.0},
    "gnss": {"noise_std_m": 0.0},
}


@dataclass(frozen=True)
class SensorConfig:
    id: str
    kind: str
    topic: str
    rate_hz: float
    frame: str = "ego"
    mount: Pose2 = field(default_factory=lambda: Pose2(Vec2(0.0, 0.0), 0.0))
    vehicle: int = 0  # vehicle index the sensor is attached to
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        assert self.kind in SENSOR_KINDS, self.kind
        assert self.rate_hz > 0.0
        assert self.topic
        merged = dict(_PARAM_DEFAULTS[self.kind])
        merged.update(self.params)
        object.__setattr__(self, "params", merged)


@dataclass(frozen=True)
class RadarScan:
    sensor_id: str
    tick: int
    timestamp: float
    distances: tuple[float, ...]
    fov: float
    max_range: float


@dataclass(frozen=True)
class ImuSample:
    sensor_id: str
    tick: int
    timestamp: float
    accel_long: float
    accel_lat: float
    gyro_z: float


@dataclass(frozen=True)
class GnssFix:
    sensor_id: str
    tick: int
    timestamp: float
    x: float
    y: float


@dataclass(frozen=True)
class CameraFrame:
    sensor_id: str
    tick: int
    timestamp: float
    width_px: int
    height_px: int
    meters_per_px: float
    mode: str  # "semantic" | "rgb"
    pixels: np.ndarray  # (H, W) uint8 class ids or (H, W, 3) uint8 colors


def sensor_due(rate_hz: float, tick: int, dt: float) -> bool:
    """Due when the rate accumulator crosses an integer at this tick.

    Ticks are 1-based (first executed tick is 1); this yields rate_hz samples
    per simulated second on average with no drift.
    """
    return math.floor(tick * dt * rate_hz) > math.floor((tick - 1) * dt * rate_hz)


def schedule_due(configs: Sequence[SensorConfig], tick: int, dt: float) -> list[str]:
    return [c.id for c in configs if sensor_due(c.rate_hz, tick, dt)]


def sample_radar(
    config: SensorConfig,
    ego_pose: Pose2,
    ego_object_id: int,
    segment_sets: Sequence[SegmentSet],
    tick: int,
    timestamp: float,
    rng: Optional[np.random.Generator] = None,
    noise_scale: float = 1.0,
) -> RadarScan:
    assert config.kind == "radar"
    p = config.params
    world = compose(ego_pose, config.mount)
    distances = sector_scan_sets(
        world,
        float(p["fov"]),
        float(p["max_range"]),
        int(p["n_rays"]),
        segment_sets,
        exclude=frozenset({ego_object_id}),
    )
    std = float(p["noise_std"]) * noise_scale
    if std > 0.0 and rng is not None:
        noisy = np.asarray(distances) + rng.normal(0.0, std, size=len(distances))
        distances = list(np.clip(noisy, 1e-9, float(p["max_range"])))
    return RadarScan(
        sensor_id=config.id,
        tick=tick,
        timestamp=timestamp,
        distances=tuple(float(d) for d in distances),
        fov=float(p["fov"]),
        max_range=float(p["max_range"]),
    )


def sample_imu(
    config: SensorConfig,
    state: VehicleState,
    noise_scale: float,
    rng: np.random.Generator,
    tick: int,
    timestamp: float,
) -> ImuSample:
    assert config.kind == "imu"
    std_a = float(config.params["noise_std_accel"]) * noise_scale
    std_g = float(config.params["noise_std_gyro"]) * noise_scale
    ax, ay, gz = state.accel_long, state.accel_lat, state.yaw_rate
    if std_a > 0.0:
        ax += float(rng.normal(0.0, std_a))
        ay += float(rng.normal(0.0, std_a))
    if std_g > 0.0:
        gz += float(rng.normal(0.0, std_g))
    return ImuSample(config.id, tick, timestamp, ax, ay, gz)


def sample_gnss(
    config: SensorConfig,
    ego_pose: Pose2,
    noise_scale: float,
    rng: np.random.Generator,
    tick: int,
    timestamp: float,
) -> GnssFix:
    assert config.kind == "gnss"
    antenna = compose(ego_pose, config.mount).position
    std = float(config.params["noise_std_m"]) * noise_scale
    x, y = antenna.x, antenna.y
    if std > 0.0:
        x += float(rng.normal(0.0, std))
        y += float(rng.normal(0.0, std))
    return GnssFix(config.id, tick, timestamp, x, y)


@dataclass(frozen=True)
class SceneObject:
    """One paintable world object: class id, stable instance id, footprint.

    Vehicles carry their oriented world box (center/length/width/heading) for
    labeling; static obstacles leave those unset and label as axis-aligned.
    """

    class_id: int
    instance_id: int
    polygon: tuple[Vec2, ...]
    world_center: Optional[tuple[float, float]] = None
    world_length: Optional[float] = None
    world_width: Optional[float] = None
    world_heading: float = 0.0


class CameraView:
    """World <-> image transform for one top-down camera pose.

    The raster is centered on the camera's world position with the camera
    heading pointing up: top row is farthest forward, columns increase to the
    right of the heading. Pixels are classified by their center point.
    """

    def __init__(self, pose: Pose2, width_px: int, height_px: int, meters_per_px: float):
        self.pose = pose
        self.width_px = int(width_px)
        self.height_px = int(height_px)
        self.mpp = float(meters_per_px)
        self._cos = math.cos(pose.heading)
        self._sin = math.sin(pose.heading)

    def world_to_image(self, pts: Sequence[Vec2]) -> np.ndarray:
        """Map world points to continuous image coordinates (x right, y down)."""
        out = np.empty((len(pts), 2), dtype=np.float64)
        cx, cy = self.pose.position.x, self.pose.position.y
        for i, p in enumerate(pts):
            dx, dy = p.x - cx, p.y - cy
            forward = dx * self._cos + dy * self._sin
            right = dx * self._sin - dy * self._cos
            out[i, 0] = 0.5 * self.width_px + right / self.mpp
            out[i, 1] = 0.5 * self.height_px - forward / self.mpp
        return out


def _paint_polygon(
    class_grid: np.ndarray,
    inst_grid: np.ndarray,
    img_poly: np.ndarray,
    class_id: int,
    instance_id: int,
) -> int:
    """Paint pixels whose centers fall inside img_poly; returns count painted."""
    h, w = class_grid.shape
    min_x, min_y = img_poly.min(axis=0)
    max_x, max_y = img_poly.max(axis=0)
    c0 = max(0, math.ceil(min_x - 0.5))
    c1 = min(w - 1, math.floor(max_x - 0.5))
    r0 = max(0, math.ceil(min_y - 0.5))
    r1 = min(h - 1, math.floor(max_y - 0.5))
    if c0 > c1 or r0 > r1:
        return 0
    px = np.arange(c0, c1 + 1, dtype=np.float64) + 0.5
    py = (np.arange(r0, r1 + 1, dtype=np.float64) + 0.5)[:, None]
    inside = np.zeros((r1 - r0 + 1, c1 - c0 + 1), dtype=bool)
    n = len(img_poly)
    for i in range(n):
        x1, y1 = img_poly[i]
        x2, y2 = img_poly[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 <= py) != (y2 <= py)
        x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px[None, :] < x_at)
    if not inside.any():
        return 0
    class_grid[r0 : r1 + 1, c0 : c1 + 1][inside] = class_id
    inst_grid[r0 : r1 + 1, c0 : c1 + 1][inside] = instance_id
    return int(inside.sum())


def rasterize_scene(
    view: CameraView, scene: Sequence[SceneObject]
) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize scene objects in painter order (class id, then input order).

    Returns (class grid uint8, instance grid int64); instance -1 where empty.
    """
    class_grid = np.zeros((view.height_px, view.width_px), dtype=np.uint8)
    inst_grid = np.full((view.height_px, view.width_px), -1, dtype=np.int64)
    order = sorted(range(len(scene)), key=lambda i: (scene[i].class_id, i))
    for i in order:
        obj = scene[i]
        img_poly = view.world_to_image(obj.polygon)
        _paint_polygon(class_grid, inst_grid, img_poly, obj.class_id, obj.instance_id)
    return class_grid, inst_grid


def semantic_to_rgb(class_grid: np.ndarray) -> np.ndarray:
    return PALETTE[class_grid]


def camera_view(config: SensorConfig, ego_pose: Pose2) -> CameraView:
    p = config.params
    return CameraView(
        compose(ego_pose, config.mount),
        int(p["width_px"]),
        int(p["height_px"]),
        float(p["meters_per_px"]),
    )


def render_camera(
    config: SensorConfig,
    ego_pose: Pose2,
    scene: Sequence[SceneObject],
    tick: int,
    timestamp: float,
    grids: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> CameraFrame:
    """Render one camera frame; pass precomputed grids to reuse a rasterization."""
    assert config.kind in ("camera_rgb", "camera_semantic")
    view = camera_view(config, ego_pose)
    class_grid, _ = grids if grids is not None else rasterize_scene(view, scene)
    mode = "rgb" if config.kind == "camera_rgb" else "semantic"
    pixels = semantic_to_rgb(class_grid) if mode == "rgb" else class_grid
    return CameraFrame(
        sensor_id=config.id,
        tick=tick,
        timestamp=timestamp,
        width_px=view.width_px,
        height_px=view.height_px,
        meters_per_px=view.mpp,
        mode=mode,
        pixels=pixels,
    )
