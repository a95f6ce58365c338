"""Impedance law, kinematic probe simulation and the sweep executor.

The robot is simulated kinematically: the executor integrates probe position
along the planned line and rate-limits tilt changes. The impedance law is a
pure function; a scalar skin spring exercises its centreline constants.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .monitor import CommandKind, OrientationCommand
from .pose import ProbePose

__all__ = [
    "ControlMode",
    "ImpedanceParams",
    "impedance_torque",
    "contact_force",
    "contact_equilibrium",
    "SweepPlan",
    "sweep_step",
    "SweepExecutor",
    "write_pose_trace",
]


class ControlMode(str, Enum):
    IMPEDANCE = "IMPEDANCE"
    POSITION_HOLD = "POSITION_HOLD"


def _psd(m: np.ndarray) -> bool:
    return np.allclose(m, m.T) and np.linalg.eigvalsh((m + m.T) / 2).min() >= -1e-12


@dataclass(frozen=True)
class ImpedanceParams:
    """Task-space impedance in the probe frame; index 2 is the probe centreline (N, m)."""

    F_d: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0, 0.0, 0.0, 0.0]))
    K: np.ndarray = field(default_factory=lambda: np.diag([500.0, 500.0, 200.0, 30.0, 30.0, 30.0]))
    D: np.ndarray = field(default_factory=lambda: np.diag([45.0, 45.0, 28.0, 2.0, 2.0, 2.0]))
    M: np.ndarray = field(default_factory=lambda: np.zeros((6, 6)))

    def __post_init__(self):
        for name, shape in (("F_d", (6,)), ("K", (6, 6)), ("D", (6, 6)), ("M", (6, 6))):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.shape != shape or not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be a finite array of shape {shape}")
            if a.ndim == 2 and not _psd(a):
                raise ValueError(f"{name} must be symmetric positive semidefinite")
            object.__setattr__(self, name, a)

    @property
    def centerline_force(self) -> float:
        return float(self.F_d[2])

    @property
    def centerline_stiffness(self) -> float:
        return float(self.K[2, 2])


def impedance_torque(J, params: ImpedanceParams, e, de, dde) -> np.ndarray:
    """tau = J^T (F_d + K e + D de + M dde)."""
    J = np.asarray(J, dtype=np.float64)
    vecs = [np.asarray(v, dtype=np.float64) for v in (e, de, dde)]
    if J.ndim != 2 or J.shape[0] != 6:
        raise ValueError("Jacobian must be 6 x n")
    if any(v.shape != (6,) for v in vecs):
        raise ValueError("pose error terms must be 6-vectors")
    if not np.all(np.isfinite(J)) or not all(np.all(np.isfinite(v)) for v in vecs):
        raise ValueError("non-finite input")
    e, de, dde = vecs
    wrench = params.F_d + params.K @ e + params.D @ de + params.M @ dde
    return J.T @ wrench


def contact_force(indentation_m: float, stiffness: float = 200.0) -> float:
    """Skin modelled as a linear spring against a flat plane (no pull when not in contact)."""
    return stiffness * max(0.0, indentation_m)


def contact_equilibrium(params: ImpedanceParams = ImpedanceParams(), skin_stiffness: float | None = None) -> float:
    """Indentation (m) at which the skin reaction balances the desired centreline force."""
    k = params.centerline_stiffness if skin_stiffness is None else skin_stiffness
    if k <= 0:
        raise ValueError("stiffness must be positive")
    return params.centerline_force / k


@dataclass(frozen=True)
class SweepPlan:
    start: ProbePose
    end: ProbePose
    speed: float = 10.0  # mm/s
    mode: ControlMode = ControlMode.IMPEDANCE

    def __post_init__(self):
        if self.speed <= 0:
            raise ValueError("speed must be positive")
        if self.length <= 0:
            raise ValueError("start and end positions coincide")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.subtract(self.end.position, self.start.position)))

    @property
    def direction(self) -> np.ndarray:
        return np.subtract(self.end.position, self.start.position) / self.length

    def n_frames(self, frame_rate: float = 10.0) -> int:
        return int(round(self.length / self.speed * frame_rate))

    def progress(self, pose: ProbePose) -> float:
        return float(np.dot(np.subtract(pose.position, self.start.position), self.direction))

    def position_at(self, s: float) -> tuple:
        s = min(max(s, 0.0), self.length)
        return tuple(np.asarray(self.start.position) + s * self.direction)


def _slew(current: float, target: float, max_step: float) -> float:
    d = target - current
    if abs(d) <= max_step:
        return target
    return current + np.sign(d) * max_step


def sweep_step(plan: SweepPlan, pose: ProbePose, dt: float, command: OrientationCommand | None = None,
               mode: ControlMode | None = None, target_tilt: float | None = None,
               slew_rate: float = 20.0, safety_limit: float = 20.0) -> ProbePose:
    """Advance the simulated probe by ``dt`` seconds.

    IMPEDANCE moves along the plan at ``plan.speed``; POSITION_HOLD freezes
    position. Tilt moves toward the command (or ``target_tilt``) at
    ``slew_rate`` deg/s.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    mode = plan.mode if mode is None else mode
    if command is not None:
        if abs(command.target_tilt) > safety_limit + 1e-9:
            raise ValueError(f"commanded tilt {command.target_tilt} exceeds the {safety_limit} deg limit")
        target_tilt = command.target_tilt
        if command.kind == CommandKind.ROTATE:
            mode = ControlMode.POSITION_HOLD
        else:
            mode = ControlMode.IMPEDANCE
    if target_tilt is not None and abs(target_tilt) > safety_limit + 1e-9:
        raise ValueError(f"target tilt {target_tilt} exceeds the {safety_limit} deg limit")
    pos = pose.position
    if mode == ControlMode.IMPEDANCE:
        pos = plan.position_at(plan.progress(pose) + plan.speed * dt)
    tilt = pose.tilt if target_tilt is None else _slew(pose.tilt, target_tilt, slew_rate * dt)
    return ProbePose.from_tilt(pos, tilt)


class SweepExecutor:
    """Stateful wrapper: consumes commands in order and tracks mode and trajectory tilt."""

    def __init__(self, plan: SweepPlan, frame_rate: float = 10.0, slew_rate: float = 20.0,
                 safety_limit: float = 20.0):
        if frame_rate <= 0 or slew_rate <= 0:
            raise ValueError("frame_rate and slew_rate must be positive")
        self.plan = plan
        self.dt = 1.0 / frame_rate
        self.slew_rate = slew_rate
        self.safety_limit = safety_limit
        self.pose = plan.start
        self.mode = plan.mode
        self.trajectory_tilt = plan.start.tilt
        self.target_tilt = plan.start.tilt
        self.clock = 0.0
        self.steps = 0
        self.trace: list[tuple] = []
        self._record()

    @property
    def progress(self) -> float:
        return self.plan.progress(self.pose)

    @property
    def finished(self) -> bool:
        return self.progress >= self.plan.length - 1e-6

    @property
    def commanded_tilt(self) -> float:
        return self.target_tilt

    def apply(self, cmd: OrientationCommand) -> None:
        if abs(cmd.target_tilt) > self.safety_limit + 1e-9:
            raise ValueError(f"commanded tilt {cmd.target_tilt} exceeds the {self.safety_limit} deg limit")
        self.target_tilt = cmd.target_tilt
        if cmd.kind == CommandKind.ROTATE:
            self.mode = ControlMode.POSITION_HOLD
        else:
            self.mode = ControlMode.IMPEDANCE
            if cmd.kind == CommandKind.ADOPT:
                self.trajectory_tilt = cmd.target_tilt

    def step(self) -> ProbePose:
        self.pose = sweep_step(self.plan, self.pose, self.dt, mode=self.mode, target_tilt=self.target_tilt,
                               slew_rate=self.slew_rate, safety_limit=self.safety_limit)
        self.steps += 1
        self.clock = self.steps * self.dt
        self._record()
        return self.pose

    def _record(self):
        p, q = self.pose.position, self.pose.orientation
        self.trace.append((self.clock, *p, *q, self.mode.value))


def write_pose_trace(trace, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "y", "z", "qw", "qx", "qy", "qz", "mode"])
        for row in trace:
            w.writerow([f"{row[0]:.3f}"] + [f"{v:.6f}" for v in row[1:8]] + [row[8]])
    return path
