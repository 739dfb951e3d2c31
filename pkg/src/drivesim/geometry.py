"""Planar geometry primitives: vectors, poses, ray casts, polygon overlap.

Everything in this module is a pure function of its arguments; nothing here
mutates shared state, so all queries are safe under concurrent readers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

TAU = math.tau


def wrap_angle(a: float) -> float:
    """Normalize an angle into (-pi, pi]."""
    r = math.remainder(a, TAU)
    if r <= -math.pi:
        r += TAU
    return r


@dataclass(frozen=True)
class Vec2:
    x: float
    y: float

    def __add__(self, other: "Vec2") -> "Vec2":
        return Vec2(self.x + other.x, self.y + other.y)

    def __sub__(self, other: "Vec2") -> "Vec2":
        return Vec2(self.x - other.x, self.y - other.y)

    def scaled(self, k: float) -> "Vec2":
        return Vec2(self.x * k, self.y * k)

    def dot(self, other: "Vec2") -> float:
        return self.x * other.x + self.y * other.y

    def cross(self, other: "Vec2") -> float:
        return self.x * other.y - self.y * other.x

    def norm(self) -> float:
        return math.hypot(self.x, self.y)

    def dist(self, other: "Vec2") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def rotated(self, angle: float) -> "Vec2":
        c, s = math.cos(angle), math.sin(angle)
        return Vec2(c * self.x - s * self.y, s * self.x + c * self.y)

    def is_finite(self) -> bool:
        return math.isfinite(self.x) and math.isfinite(self.y)


def unit_from_angle(angle: float) -> Vec2:
    return Vec2(math.cos(angle), math.sin(angle))


@dataclass(frozen=True)
class Pose2:
    """Position plus heading; heading is normalized into (-pi, pi] on construction."""

    position: Vec2
    heading: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    def forward(self) -> Vec2:
        return unit_from_angle(self.heading)

    def transform(self, local: Vec2) -> Vec2:
        """Map a point from this pose's frame into the world frame."""
        return self.position + local.rotated(self.heading)


def compose(base: Pose2, mount: Pose2) -> Pose2:
    """World pose of `mount` expressed relative to `base` (sensor mounting)."""
    return Pose2(base.transform(mount.position), base.heading + mount.heading)


Polygon = Sequence[Vec2]


def polygon_area(poly: Polygon) -> float:
    """Signed shoelace area; positive for counterclockwise winding."""
    total = 0.0
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        total += a.x * b.y - b.x * a.y
    return 0.5 * total


def is_ccw(poly: Polygon) -> bool:
    return polygon_area(poly) > 0.0


def _segments_properly_intersect(p1: Vec2, p2: Vec2, q1: Vec2, q2: Vec2) -> bool:
    d1 = (p2 - p1).cross(q1 - p1)
    d2 = (p2 - p1).cross(q2 - p1)
    d3 = (q2 - q1).cross(p1 - q1)
    d4 = (q2 - q1).cross(p2 - q1)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def is_simple(poly: Polygon) -> bool:
    """True when no two non-adjacent edges cross (O(n^2), load-time only)."""
    n = len(poly)
    if n < 3:
        return False
    for i in range(n):
        a1, a2 = poly[i], poly[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            b1, b2 = poly[j], poly[(j + 1) % n]
            if _segments_properly_intersect(a1, a2, b1, b2):
                return False
    return True


def point_in_polygon(pt: Vec2, poly: Polygon) -> bool:
    """Even-odd crossing test; edges are half-open so results are consistent."""
    inside = False
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        if (a.y <= pt.y) != (b.y <= pt.y):
            x_cross = a.x + (pt.y - a.y) * (b.x - a.x) / (b.y - a.y)
            if pt.x < x_cross:
                inside = not inside
    return inside


def is_convex(poly: Polygon) -> bool:
    n = len(poly)
    sign = 0
    for i in range(n):
        a, b, c = poly[i], poly[(i + 1) % n], poly[(i + 2) % n]
        cross = (b - a).cross(c - b)
        if cross != 0.0:
            s = 1 if cross > 0 else -1
            if sign == 0:
                sign = s
            elif s != sign:
                return False
    return True


def triangulate(poly: Polygon) -> list[tuple[Vec2, Vec2, Vec2]]:
    """Ear-clip a simple CCW polygon into triangles (load-time only)."""
    verts = list(poly)
    if len(verts) < 3:
        raise ValueError("polygon needs >= 3 vertices")
    if not is_ccw(verts):
        raise ValueError("triangulate expects counterclockwise winding")
    tris: list[tuple[Vec2, Vec2, Vec2]] = []
    guard = 0
    while len(verts) > 3:
        guard += 1
        if guard > 10000:
            raise ValueError("triangulation did not converge (degenerate polygon)")
        n = len(verts)
        clipped = False
        for i in range(n):
            a, b, c = verts[(i - 1) % n], verts[i], verts[(i + 1) % n]
            if (b - a).cross(c - b) <= 0.0:
                continue  # reflex corner, not an ear
            tri = (a, b, c)
            if any(
                point_in_polygon(v, tri)
                for j, v in enumerate(verts)
                if j not in ((i - 1) % n, i, (i + 1) % n)
            ):
                continue
            tris.append(tri)
            del verts[i]
            clipped = True
            break
        if not clipped:
            raise ValueError("no ear found; polygon is not simple")
    tris.append((verts[0], verts[1], verts[2]))
    return tris


def _project(poly: Polygon, axis: Vec2) -> tuple[float, float]:
    dots = [v.dot(axis) for v in poly]
    return min(dots), max(dots)


def convex_overlap(a: Polygon, b: Polygon) -> bool:
    """Separating-axis test for convex polygons.

    Returns True only when the interiors intersect: projections that merely
    touch (max_a == min_b) count as separated.
    """
    for poly in (a, b):
        n = len(poly)
        for i in range(n):
            edge = poly[(i + 1) % n] - poly[i]
            axis = Vec2(-edge.y, edge.x)
            min_a, max_a = _project(a, axis)
            min_b, max_b = _project(b, axis)
            if max_a <= min_b or max_b <= min_a:
                return False
    return True


def polygons_overlap(a: Polygon, b: Polygon) -> bool:
    """Interior-overlap test for simple polygons; symmetric in its arguments.

    Convex inputs go straight to the separating-axis test; non-convex inputs
    are ear-clipped and tested triangle-by-triangle, which preserves the
    "shared boundary is not overlap" rule exactly.
    """
    parts_a = [tuple(a)] if is_convex(a) else triangulate(a)
    parts_b = [tuple(b)] if is_convex(b) else triangulate(b)
    for pa in parts_a:
        for pb in parts_b:
            if convex_overlap(pa, pb):
                return True
    return False


def oriented_rectangle(pose: Pose2, length: float, width: float) -> tuple[Vec2, Vec2, Vec2, Vec2]:
    """CCW footprint rectangle centered on pose.position, long axis along heading."""
    hl, hw = 0.5 * length, 0.5 * width
    f = pose.forward()
    r = Vec2(f.y, -f.x)  # unit vector to the right of heading
    c = pose.position
    return (
        c + f.scaled(hl) + r.scaled(hw),
        c + f.scaled(hl) - r.scaled(hw),
        c - f.scaled(hl) - r.scaled(hw),
        c - f.scaled(hl) + r.scaled(hw),
    )


def ray_segment_distance(
    origin: Vec2, direction: Vec2, a: Vec2, b: Vec2, max_range: float
) -> Optional[float]:
    """Distance along a unit-direction ray to segment ab, or None.

    Parallel (including collinear) segments never register: a zero-thickness
    graze has no well-defined hit point, and callers resolve the
    origin-inside-polygon case separately.
    """
    ex, ey = b.x - a.x, b.y - a.y
    denom = direction.x * ey - direction.y * ex
    if denom == 0.0:
        return None
    ox, oy = a.x - origin.x, a.y - origin.y
    t = (ox * ey - oy * ex) / denom
    s = (ox * direction.y - oy * direction.x) / denom
    if 0.0 <= t <= max_range and 0.0 <= s <= 1.0:
        return t
    return None


class SegmentSet:
    """Flat array of owned segments supporting vectorized ray queries.

    Built once for static geometry and per-tick for vehicle footprints; the
    two sets are combined per query. Owner ids let callers exclude objects.
    """

    __slots__ = ("ax", "ay", "ex", "ey", "owner", "polygons", "_bb")

    def __init__(self, polygons: Iterable[tuple[int, Polygon]]):
        ax: list[float] = []
        ay: list[float] = []
        ex: list[float] = []
        ey: list[float] = []
        owner: list[int] = []
        polys: list[tuple[int, tuple[Vec2, ...]]] = []
        for oid, poly in polygons:
            pts = tuple(poly)
            polys.append((oid, pts))
            n = len(pts)
            for i in range(n):
                a, b = pts[i], pts[(i + 1) % n]
                ax.append(a.x)
                ay.append(a.y)
                ex.append(b.x - a.x)
                ey.append(b.y - a.y)
                owner.append(oid)
        self.ax = np.asarray(ax, dtype=np.float64)
        self.ay = np.asarray(ay, dtype=np.float64)
        self.ex = np.asarray(ex, dtype=np.float64)
        self.ey = np.asarray(ey, dtype=np.float64)
        self.owner = np.asarray(owner, dtype=np.int64)
        self.polygons = polys
        # per-polygon bounding boxes prefilter containment queries
        self._bb = np.array(
            [
                (min(p.x for p in pts), max(p.x for p in pts),
                 min(p.y for p in pts), max(p.y for p in pts))
                for _, pts in polys
            ],
            dtype=np.float64,
        ).reshape(-1, 4)

    def __len__(self) -> int:
        return len(self.owner)

    def containing_ids(self, x: float, y: float) -> list[int]:
        if not self.polygons:
            return []
        bb = self._bb
        cand = np.nonzero((x >= bb[:, 0]) & (x <= bb[:, 1]) & (y >= bb[:, 2]) & (y <= bb[:, 3]))[0]
        pt = Vec2(x, y)
        return [self.polygons[i][0] for i in cand if point_in_polygon(pt, self.polygons[i][1])]


class RectSet:
    """Oriented-rectangle footprints with array construction and queries.

    Same segment-array interface as SegmentSet, but built straight from pose
    arrays (no per-vertex Python objects) and with analytic containment; this
    is the per-tick hot path for vehicle footprints.
    """

    __slots__ = ("ax", "ay", "ex", "ey", "owner", "_ids", "_cx", "_cy", "_cos", "_sin", "_hl", "_hw")

    _SGN_F = np.array([1.0, 1.0, -1.0, -1.0])
    _SGN_R = np.array([1.0, -1.0, -1.0, 1.0])
    _NXT = np.array([1, 2, 3, 0])

    def __init__(self, ids, cx, cy, heading, length, width):
        ids = np.asarray(ids, dtype=np.int64)
        cx = np.asarray(cx, dtype=np.float64)
        cy = np.asarray(cy, dtype=np.float64)
        heading = np.asarray(heading, dtype=np.float64)
        hl = 0.5 * np.asarray(length, dtype=np.float64)
        hw = 0.5 * np.asarray(width, dtype=np.float64)
        c, s = np.cos(heading), np.sin(heading)
        # CCW corners: front-right, front-left, rear-left, rear-right
        corner_x = cx[:, None] + (c * hl)[:, None] * self._SGN_F + (s * hw)[:, None] * self._SGN_R
        corner_y = cy[:, None] + (s * hl)[:, None] * self._SGN_F + (-c * hw)[:, None] * self._SGN_R
        self.ax = corner_x.reshape(-1)
        self.ay = corner_y.reshape(-1)
        self.ex = (corner_x[:, self._NXT] - corner_x).reshape(-1)
        self.ey = (corner_y[:, self._NXT] - corner_y).reshape(-1)
        self.owner = np.repeat(ids, 4)
        self._ids, self._cx, self._cy = ids, cx, cy
        self._cos, self._sin, self._hl, self._hw = c, s, hl, hw

    def __len__(self) -> int:
        return len(self.owner)

    def containing_ids(self, x: float, y: float) -> list[int]:
        dx = x - self._cx
        dy = y - self._cy
        local_f = dx * self._cos + dy * self._sin
        local_r = dx * self._sin - dy * self._cos
        inside = (np.abs(local_f) < self._hl) & (np.abs(local_r) < self._hw)
        return [int(i) for i in self._ids[inside]]


def ray_batch(
    origins: np.ndarray,
    dirs: np.ndarray,
    max_range: float,
    sets: Sequence[SegmentSet | RectSet],
    exclude_ids: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hits for R rays at once: (distances (R,), owner ids (R,)).

    Misses report distance inf and owner -1. `exclude_ids[i]` is one owner id
    ray i ignores (-1 for none). Parallel segments never register; callers
    resolve origin-inside-polygon separately.
    """
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    best_id = np.full(n, -1, dtype=np.int64)
    dx = dirs[:, 0:1]
    dy = dirs[:, 1:2]
    for seg in sets:
        if len(seg) == 0:
            continue
        ex = seg.ex[None, :]
        ey = seg.ey[None, :]
        denom = dx * ey - dy * ex
        ox = seg.ax[None, :] - origins[:, 0:1]
        oy = seg.ay[None, :] - origins[:, 1:2]
        num_t = ox * ey - oy * ex
        num_s = ox * dy - oy * dx
        # sign-consistent numerator tests replace the division, so no
        # divide-by-zero state handling is needed on the hot path
        abs_d = np.abs(denom)
        valid = (
            (denom != 0.0)
            & (num_t * denom >= 0.0)
            & (np.abs(num_t) <= max_range * abs_d)
            & (num_s * denom >= 0.0)
            & (np.abs(num_s) <= abs_d)
        )
        if exclude_ids is not None:
            valid &= seg.owner[None, :] != exclude_ids[:, None]
        t = np.divide(num_t, denom, out=np.full(denom.shape, np.inf), where=valid)
        idx = np.argmin(t, axis=1)
        tmin = t[np.arange(n), idx]
        better = tmin < best_t
        best_t = np.where(better, tmin, best_t)
        best_id = np.where(better, seg.owner[idx], best_id)
    return best_t, best_id


def _origin_inside(
    x: float, y: float, sets: Sequence[SegmentSet | RectSet], exclude: frozenset[int]
) -> Optional[int]:
    for seg in sets:
        for oid in seg.containing_ids(x, y):
            if oid not in exclude:
                return oid
    return None


def cast_ray_sets(
    origin: Vec2,
    direction: Vec2,
    max_range: float,
    sets: Sequence[SegmentSet | RectSet],
    exclude: frozenset[int] = frozenset(),
) -> Optional[tuple[float, int]]:
    """Nearest (distance, owner id) hit, or None.

    A ray whose origin lies inside a non-excluded polygon reports distance 0
    against that polygon (first match in set order).
    """
    assert abs(direction.norm() - 1.0) <= 1e-9, "direction must be unit-norm"
    assert max_range > 0.0
    inside = _origin_inside(origin.x, origin.y, sets, exclude)
    if inside is not None:
        return 0.0, inside
    excl = None
    if exclude:
        if len(exclude) == 1:
            excl = np.array([next(iter(exclude))], dtype=np.int64)
        else:
            # ray_batch excludes one owner per ray; larger sets take the
            # per-segment path (cold: only multi-exclusion callers hit it)
            best: Optional[tuple[float, int]] = None
            for seg in sets:
                for i in range(len(seg)):
                    oid = int(seg.owner[i])
                    if oid in exclude:
                        continue
                    a = Vec2(float(seg.ax[i]), float(seg.ay[i]))
                    b = Vec2(a.x + float(seg.ex[i]), a.y + float(seg.ey[i]))
                    t = ray_segment_distance(origin, direction, a, b, max_range)
                    if t is not None and (best is None or t < best[0]):
                        best = (t, oid)
            return best
    dists, ids = ray_batch(
        np.array([[origin.x, origin.y]]),
        np.array([[direction.x, direction.y]]),
        max_range,
        sets,
        excl,
    )
    if ids[0] < 0:
        return None
    return float(dists[0]), int(ids[0])


def sector_scan_sets(
    pose: Pose2,
    fov: float,
    max_range: float,
    n_rays: int,
    sets: Sequence[SegmentSet | RectSet],
    exclude: frozenset[int] = frozenset(),
) -> list[float]:
    """Fan of `n_rays` ray distances over [heading - fov/2, heading + fov/2].

    Both endpoints are included; n_rays == 1 degenerates to a single ray along
    the heading. Misses are encoded as max_range. Index 0 is the ray at
    heading - fov/2, increasing counterclockwise.
    """
    assert 0.0 < fov <= TAU + 1e-12
    assert n_rays >= 1
    if _origin_inside(pose.position.x, pose.position.y, sets, exclude) is not None:
        return [0.0] * n_rays
    if n_rays == 1:
        angles = np.array([pose.heading])
    else:
        angles = pose.heading - 0.5 * fov + (fov / (n_rays - 1)) * np.arange(n_rays)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    origins = np.broadcast_to(
        np.array([pose.position.x, pose.position.y]), (n_rays, 2)
    )
    excl = None
    if exclude:
        assert len(exclude) == 1, "sector scans exclude at most the scanning vehicle"
        excl = np.full(n_rays, next(iter(exclude)), dtype=np.int64)
    dists, _ = ray_batch(np.asarray(origins, dtype=np.float64), dirs, max_range, sets, excl)
    return [max_range if not math.isfinite(d) else float(d) for d in dists]
