"""Ground-truth 2D boxes and label files aligned with camera frames.

Boxes are geometric: the integer hull of the object's footprint projected
into the raster, clipped to image bounds. Occlusion never suppresses a label;
it is reported as a fraction so downstream consumers can filter.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .sensors import CLASS_NAMES, CameraView, SceneObject
from .wire import canonical_json


@dataclass(frozen=True)
class LabelRecord:
    label: str                          # semantic class name
    instance_id: int
    origin: tuple[int, int]             # (x_px, y_px) top-left, image coords
    dimension: tuple[int, int]          # (w_px, h_px)
    world_origin: tuple[float, float]
    world_dimension: tuple[float, float]  # (length m, width m)
    world_heading: float
    occluded_fraction: float

    def to_json_dict(self) -> dict:
        return {
            "label": self.label,
            "instance_id": self.instance_id,
            "origin": list(self.origin),
            "dimension": list(self.dimension),
            "world_origin": list(self.world_origin),
            "world_dimension": list(self.world_dimension),
            "world_heading": self.world_heading,
            "occluded_fraction": self.occluded_fraction,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "LabelRecord":
        return LabelRecord(
            label=d["label"],
            instance_id=d["instance_id"],
            origin=tuple(d["origin"]),
            dimension=tuple(d["dimension"]),
            world_origin=tuple(d["world_origin"]),
            world_dimension=tuple(d["world_dimension"]),
            world_heading=d["world_heading"],
            occluded_fraction=d["occluded_fraction"],
        )


def _own_pixel_count(view: CameraView, img_poly: np.ndarray) -> int:
    """Count raster pixel centers inside img_poly, ignoring occlusion."""
    w, h = view.width_px, view.height_px
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
    return int(inside.sum())


def generate_labels(
    view: CameraView,
    scene: Sequence[SceneObject],
    target_classes: frozenset[str],
    instance_grid: Optional[np.ndarray] = None,
) -> list[LabelRecord]:
    """Boxes for every target-class object whose projection meets the raster.

    Fully occluded objects are still labeled; `instance_grid` (from
    rasterize_scene) feeds the occluded_fraction computation and may be
    omitted when occlusion is irrelevant.
    """
    out: list[LabelRecord] = []
    w, h = view.width_px, view.height_px
    for obj in scene:
        name = CLASS_NAMES[obj.class_id]
        if name not in target_classes:
            continue
        img_poly = view.world_to_image(obj.polygon)
        min_x, min_y = img_poly.min(axis=0)
        max_x, max_y = img_poly.max(axis=0)
        if max_x <= 0.0 or min_x >= w or max_y <= 0.0 or min_y >= h:
            continue
        x0 = max(0, math.floor(min_x))
        y0 = max(0, math.floor(min_y))
        x1 = min(w, math.ceil(max_x))
        y1 = min(h, math.ceil(max_y))
        if x1 - x0 < 1 or y1 - y0 < 1:
            continue
        own = _own_pixel_count(view, img_poly)
        if instance_grid is not None and own > 0:
            painted = int((instance_grid == obj.instance_id).sum())
            occluded = 1.0 - painted / own
        else:
            occluded = 0.0
        xs = [p.x for p in obj.polygon]
        ys = [p.y for p in obj.polygon]
        cx, cy = (min(xs) + max(xs)) / 2.0, (min(ys) + max(ys)) / 2.0
        if obj.world_length is not None and obj.world_width is not None:
            dims = (obj.world_length, obj.world_width)
            heading = obj.world_heading
            cx, cy = obj.world_center if obj.world_center is not None else (cx, cy)
        else:
            dims = (max(xs) - min(xs), max(ys) - min(ys))
            heading = 0.0
        out.append(
            LabelRecord(
                label=name,
                instance_id=obj.instance_id,
                origin=(x0, y0),
                dimension=(x1 - x0, y1 - y0),
                world_origin=(cx, cy),
                world_dimension=dims,
                world_heading=heading,
                occluded_fraction=round(max(0.0, min(1.0, occluded)), 6),
            )
        )
    return out


def write_label_file(
    labels: Sequence[LabelRecord],
    tick: int,
    timestamp: float,
    camera_id: str,
    image_file: str,
    out_dir: str | Path,
) -> Path:
    """Write labels/{tick:010}.json under out_dir; returns the path written."""
    label_dir = Path(out_dir) / "labels"
    label_dir.mkdir(parents=True, exist_ok=True)
    path = label_dir / f"{tick:010d}.json"
    doc = {
        "tick": tick,
        "timestamp": timestamp,
        "camera_id": camera_id,
        "image_file": image_file,
        "labels": [l.to_json_dict() for l in labels],
    }
    try:
        path.write_text(canonical_json(doc) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed writing label file {path}: {exc}") from exc
    return path


def read_label_file(path: str | Path) -> tuple[dict, list[LabelRecord]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return doc, [LabelRecord.from_json_dict(d) for d in doc["labels"]]
