"""Probe pose with an explicit out-of-plane tilt.

World frame (mm): x lateral (image columns), y along the sweep (elevation),
z depth into tissue. The probe frame uses the same axes at zero tilt: the
beam points along +z and the image plane spans x and z. Tilt is a rotation
about the probe's lateral axis, measured relative to the original trajectory
orientation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

__all__ = ["ProbePose", "tilt_quaternion", "quaternion_tilt"]


def tilt_quaternion(tilt_deg: float) -> tuple[float, float, float, float]:
    """Unit quaternion (w, x, y, z) for an out-of-plane tilt about the lateral axis."""
    half = np.deg2rad(tilt_deg) / 2.0
    return (float(np.cos(half)), float(np.sin(half)), 0.0, 0.0)


def quaternion_tilt(q: tuple[float, float, float, float]) -> float:
    """Inverse of :func:`tilt_quaternion` for pure lateral-axis rotations."""
    w, x, _, _ = q
    return float(np.rad2deg(2.0 * np.arctan2(x, w)))


@dataclass(frozen=True)
class ProbePose:
    position: tuple[float, float, float]
    orientation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    out_of_plane_angle: float = 0.0
    _rot: Rotation = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position)
        q = np.asarray(self.orientation, dtype=float)
        if len(pos) != 3 or q.shape != (4,):
            raise ValueError("pose needs a 3-vector position and a 4-vector quaternion")
        if not np.all(np.isfinite(pos)) or not np.all(np.isfinite(q)):
            raise ValueError("pose contains non-finite values")
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"orientation quaternion not normalized (|q|={norm!r})")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", tuple(float(v) for v in q))
        w, x, y, z = q
        object.__setattr__(self, "_rot", Rotation.from_quat([x, y, z, w]))

    @classmethod
    def from_tilt(cls, position, tilt_deg: float = 0.0) -> "ProbePose":
        return cls(tuple(position), tilt_quaternion(tilt_deg), float(tilt_deg))

    @property
    def tilt(self) -> float:
        return self.out_of_plane_angle

    def rotation_matrix(self) -> np.ndarray:
        """Columns are the probe's lateral, elevation and beam axes in world coordinates."""
        return self._rot.as_matrix()

    @property
    def beam(self) -> np.ndarray:
        return self.rotation_matrix()[:, 2]

    def is_consistent(self, tol_deg: float = 1e-6) -> bool:
        """True when ``out_of_plane_angle`` matches the quaternion (pure tilt poses only)."""
        w, x, y, z = self.orientation
        if abs(y) > 1e-12 or abs(z) > 1e-12:
            return False
        return abs(quaternion_tilt(self.orientation) - self.out_of_plane_angle) <= tol_deg

    def with_position(self, position) -> "ProbePose":
        return ProbePose(tuple(position), self.orientation, self.out_of_plane_angle)

    def with_tilt(self, tilt_deg: float) -> "ProbePose":
        return ProbePose.from_tilt(self.position, tilt_deg)

    def to_dict(self) -> dict:
        return {
            "position": list(self.position),
            "orientation": list(self.orientation),
            "out_of_plane_angle": self.out_of_plane_angle,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProbePose":
        return cls(tuple(d["position"]), tuple(d["orientation"]), float(d["out_of_plane_angle"]))
