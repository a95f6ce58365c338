"""Doppler flow-region tracking.

Each frame's colour-flow mask is reduced to the centres of its connected
regions (minimum enclosing circle, small regions dropped). Tracking objects
then follow their nearest centre: a match within ``max_match_dist`` pixels is
appended as NEW, otherwise the previous centre is repeated as COPIED. Centres
that no object claimed start new objects.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .imaging import ImageGrid

__all__ = [
    "NEW",
    "COPIED",
    "FlowContour",
    "TrackObject",
    "TrackerParams",
    "TrackerState",
    "extract_centers",
    "center_distances",
    "update_tracker",
    "write_track_csv",
]

NEW = "NEW"
COPIED = "COPIED"


@dataclass(frozen=True)
class FlowContour:
    center: tuple[float, float]  # (x, y) = (column, row) in pixels
    radius: float  # mm

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be non-negative")


@dataclass(frozen=True)
class TrackObject:
    id: int
    history: tuple  # of ((x, y), label)
    created_at: int

    def __post_init__(self):
        if not self.history:
            raise ValueError("history must be non-empty")

    @property
    def last_center(self) -> tuple[float, float]:
        return self.history[-1][0]

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(lab for _, lab in self.history)

    def appended(self, center, label: str) -> "TrackObject":
        return replace(self, history=self.history + ((tuple(center), label),))


@dataclass(frozen=True)
class TrackerParams:
    min_radius: float = 1.2  # mm, strict lower bound
    max_match_dist: float = 30.0  # px
    history_window: int = 15
    min_new_fraction: float = 0.20

    def __post_init__(self):
        if self.min_radius <= 0 or self.max_match_dist <= 0 or self.history_window <= 0:
            raise ValueError("tracker parameters must be positive")
        if not (0.0 < self.min_new_fraction <= 1.0):
            raise ValueError("min_new_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class TrackerState:
    objects: tuple = ()
    frame_index: int = -1  # last processed frame
    next_id: int = 0
    shape: tuple | None = None  # image (rows, cols) of the tracked masks


def extract_centers(doppler: ImageGrid, params: TrackerParams = TrackerParams()) -> list[FlowContour]:
    """Minimum enclosing circle of each 8-connected region, keeping radius > min_radius.

    The circle is fitted to pixel centres and widened by half a pixel to cover
    the pixel footprint. Regions come out in raster order of their first pixel.
    """
    m = doppler.data > 0.5
    if not m.any():
        return []
    n, labels = cv2.connectedComponents(m.astype(np.uint8), connectivity=8)
    sp = math.sqrt(doppler.spacing[0] * doppler.spacing[1])
    rows, cols = np.nonzero(labels)
    lab = labels[rows, cols]
    order = np.argsort(lab, kind="stable")
    lab, rows, cols = lab[order], rows[order], cols[order]
    bounds = np.searchsorted(lab, np.arange(1, n + 1))
    out = []
    for k in range(1, n):
        a, b = bounds[k - 1], bounds[k]
        pts = np.stack([cols[a:b], rows[a:b]], axis=1).astype(np.float32)
        (cx, cy), r = cv2.minEnclosingCircle(pts.reshape(-1, 1, 2))
        r_mm = (r + 0.5) * sp
        if r_mm > params.min_radius:
            out.append(FlowContour((float(cx), float(cy)), float(r_mm)))
    return out


def center_distances(c_prev, centers: Sequence) -> list[float]:
    """Euclidean distances from ``c_prev`` to every centre, in input order."""
    return [math.hypot(c[0] - c_prev[0], c[1] - c_prev[1]) for c in centers]


def update_tracker(state: TrackerState, contours: Sequence[FlowContour],
                   params: TrackerParams = TrackerParams(), shape=None) -> TrackerState:
    """Advance every tracking object by one frame. Objects are never removed.

    Each object independently takes its nearest centre (ties: lowest index);
    several objects may claim the same centre.
    """
    centers = [c.center for c in contours]
    frame = state.frame_index + 1
    claimed = set()
    objects = []
    for obj in state.objects:
        d = center_distances(obj.last_center, centers)
        if d:
            j = int(np.argmin(d))
            if d[j] <= params.max_match_dist:
                objects.append(obj.appended(centers[j], NEW))
                claimed.add(j)
                continue
        objects.append(obj.appended(obj.last_center, COPIED))
    next_id = state.next_id
    for j, c in enumerate(centers):
        if j not in claimed:
            objects.append(TrackObject(next_id, ((tuple(c), NEW),), frame))
            next_id += 1
    return TrackerState(tuple(objects), frame, next_id, shape if shape is not None else state.shape)


def write_track_csv(state: TrackerState, path: str | Path) -> Path:
    """One row per history entry: frame_index, object_id, x, y, label (sorted by frame, id)."""
    rows = []
    for obj in state.objects:
        for k, ((x, y), lab) in enumerate(obj.history):
            rows.append((obj.created_at + k, obj.id, x, y, lab))
    rows.sort(key=lambda r: (r[0], r[1]))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_index", "object_id", "x", "y", "label"])
        for f, i, x, y, lab in rows:
            w.writerow([f, i, f"{x:.3f}", f"{y:.3f}", lab])
    return path
