"""Segmentation-quality check and the out-of-plane re-identification state machine.

Quality is sufficient when a valid tracking object (enough fresh Doppler
detections recently) has its latest centre on the predicted vessel mask.
When quality drops, the probe is fanned through small tilt offsets around
its current orientation, dwelling at each, until quality returns (the new
orientation is adopted) or all offsets fail (the probe returns and further
attempts are blocked for a while).

Tilts are scalars in degrees relative to the trajectory's original
orientation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .imaging import ImageGrid
from .tracker import NEW, TrackerState, TrackObject

__all__ = [
    "Reason",
    "Phase",
    "CommandKind",
    "QualityVerdict",
    "ReidentParams",
    "ReidentState",
    "OrientationCommand",
    "Episode",
    "object_valid",
    "check_quality",
    "reident_step",
    "episodes_from_commands",
    "format_command",
    "write_event_log",
]

_EPS = 1e-9


class Reason(str, Enum):
    OK = "OK"
    NO_VALID_OBJECT = "NO_VALID_OBJECT"
    CENTER_OUTSIDE_MASK = "CENTER_OUTSIDE_MASK"


class Phase(str, Enum):
    INACTIVE = "INACTIVE"
    SWEEPING = "SWEEPING"  # rotation to the next offset just commanded
    DWELLING = "DWELLING"
    RETURNING = "RETURNING"  # return just commanded after exhausting offsets
    BLOCKED = "BLOCKED"


class CommandKind(str, Enum):
    ROTATE = "ROTATE"  # hold position, tilt to target
    ADOPT = "ADOPT"  # target becomes the trajectory orientation, resume sweep
    RETURN = "RETURN"  # tilt back to the episode start orientation, resume sweep


@dataclass(frozen=True)
class QualityVerdict:
    sufficient: bool
    valid_object_ids: tuple = ()
    reason: Reason = Reason.OK

    def __post_init__(self):
        if self.sufficient != (self.reason == Reason.OK):
            raise ValueError("sufficient must equal (reason == OK)")

    @classmethod
    def ok(cls, ids=()) -> "QualityVerdict":
        return cls(True, tuple(ids), Reason.OK)

    @classmethod
    def bad(cls, reason: Reason = Reason.NO_VALID_OBJECT, ids=()) -> "QualityVerdict":
        return cls(False, tuple(ids), reason)


@dataclass(frozen=True)
class ReidentParams:
    step: float = 5.0
    max_offset: float = 10.0
    dwell: float = 2.0
    max_orientations: int = 5
    safety_limit: float = 20.0
    post_fail_block: float = 3.0
    validity_window: int = 15
    validity_fraction: float = 0.20
    min_history: int = 5

    def __post_init__(self):
        for name in ("step", "max_offset", "dwell", "max_orientations", "safety_limit",
                     "validity_window", "validity_fraction"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.post_fail_block < 0 or self.min_history < 1:
            raise ValueError("invalid block time or history length")
        ratio = self.max_offset / self.step
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("step must divide the offset range")

    def offset_order(self) -> list[float]:
        """Nearest first, positive before negative: 0, +s, -s, +2s, -2s, ..."""
        out = [0.0]
        for k in range(1, int(round(self.max_offset / self.step)) + 1):
            out += [k * self.step, -k * self.step]
        return out


@dataclass(frozen=True)
class OrientationCommand:
    kind: CommandKind
    target_tilt: float
    offset: float  # relative to the episode start tilt
    clock: float
    episode: int


@dataclass(frozen=True)
class ReidentState:
    phase: Phase = Phase.INACTIVE
    original_tilt: float = 0.0  # tilt when the episode started
    visited_offsets: tuple = ()
    pending_offsets: tuple = ()
    dwell_start: float = 0.0
    block_until: float = -math.inf
    last_clock: float = -math.inf
    episode: int = 0  # number of episodes started so far

    @property
    def active(self) -> bool:
        return self.phase in (Phase.SWEEPING, Phase.DWELLING)

    @property
    def current_offset(self) -> float | None:
        return self.visited_offsets[-1] if self.visited_offsets else None


def object_valid(obj: TrackObject, params: ReidentParams = ReidentParams()) -> bool:
    """At least ``validity_fraction`` NEW entries among the last ``validity_window``.

    Objects younger than ``min_history`` frames are never valid.
    """
    n = len(obj.history)
    if n < params.min_history:
        return False
    window = min(params.validity_window, n)
    fresh = sum(1 for _, lab in obj.history[-window:] if lab == NEW)
    return fresh >= math.ceil(params.validity_fraction * window - _EPS)


def check_quality(tracker: TrackerState, seg_mask: ImageGrid,
                  params: ReidentParams = ReidentParams()) -> QualityVerdict:
    mask = seg_mask.data > 0.5
    if tracker.shape is not None and tuple(tracker.shape) != mask.shape:
        raise ValueError("mask dimensions do not match the tracker's image space")
    valid = [o for o in tracker.objects if object_valid(o, params)]
    ids = tuple(o.id for o in valid)
    if not valid:
        return QualityVerdict.bad(Reason.NO_VALID_OBJECT)
    h, w = mask.shape
    for o in valid:
        x, y = o.last_center
        r, c = int(round(y)), int(round(x))
        if 0 <= r < h and 0 <= c < w and mask[r, c]:
            return QualityVerdict.ok(ids)
    return QualityVerdict.bad(Reason.CENTER_OUTSIDE_MASK, ids)


def _allowed_offsets(start_tilt: float, params: ReidentParams) -> tuple:
    offs = [o for o in params.offset_order() if abs(start_tilt + o) <= params.safety_limit + _EPS]
    return tuple(offs[: params.max_orientations])


def reident_step(state: ReidentState, verdict: QualityVerdict, clock: float, current_tilt: float = 0.0,
                 params: ReidentParams = ReidentParams()):
    """Advance the state machine by one verdict. Returns (new state, command or None).

    ``current_tilt`` is the probe tilt at this instant; it is read only when an
    episode starts.
    """
    if clock < state.last_clock:
        raise ValueError(f"clock went backwards: {clock} < {state.last_clock}")
    s = replace(state, last_clock=clock)

    if s.phase == Phase.RETURNING:
        s = replace(s, phase=Phase.BLOCKED)
    if s.phase == Phase.BLOCKED:
        if clock + _EPS < s.block_until:
            return s, None
        s = replace(s, phase=Phase.INACTIVE)

    if s.phase == Phase.INACTIVE:
        if verdict.sufficient:
            return s, None
        offsets = _allowed_offsets(current_tilt, params)
        if not offsets:
            return s, None
        ep = s.episode + 1
        first = offsets[0]
        s = replace(s, phase=Phase.SWEEPING, original_tilt=current_tilt, visited_offsets=(first,),
                    pending_offsets=offsets[1:], dwell_start=clock, episode=ep)
        return s, OrientationCommand(CommandKind.ROTATE, current_tilt + first, first, clock, ep)

    # SWEEPING or DWELLING
    s = replace(s, phase=Phase.DWELLING)
    if verdict.sufficient:
        off = s.current_offset
        cmd = OrientationCommand(CommandKind.ADOPT, s.original_tilt + off, off, clock, s.episode)
        return replace(s, phase=Phase.INACTIVE, pending_offsets=()), cmd
    if clock - s.dwell_start + _EPS < params.dwell:
        return s, None
    if s.pending_offsets:
        nxt = s.pending_offsets[0]
        s = replace(s, phase=Phase.SWEEPING, visited_offsets=s.visited_offsets + (nxt,),
                    pending_offsets=s.pending_offsets[1:], dwell_start=clock)
        return s, OrientationCommand(CommandKind.ROTATE, s.original_tilt + nxt, nxt, clock, s.episode)
    s = replace(s, phase=Phase.RETURNING, block_until=clock + params.post_fail_block)
    return s, OrientationCommand(CommandKind.RETURN, s.original_tilt, 0.0, clock, s.episode)


def format_command(cmd: OrientationCommand) -> str:
    """Stable one-line text form used by golden traces."""
    return f"{cmd.clock:.1f} {cmd.kind.value} ep={cmd.episode} off={cmd.offset:+.0f} tilt={cmd.target_tilt:+.1f}"


@dataclass
class Episode:
    episode: int
    trigger_clock: float
    offsets: list = field(default_factory=list)
    outcome: str = "ABORTED"  # RECOVERED, FAILED or ABORTED
    end_clock: float | None = None
    trigger_frame: int | None = None

    @property
    def duration(self) -> float | None:
        return None if self.end_clock is None else self.end_clock - self.trigger_clock


def episodes_from_commands(commands, frame_rate: float | None = None) -> list[Episode]:
    eps: dict[int, Episode] = {}
    for c in commands:
        e = eps.get(c.episode)
        if e is None:
            e = eps[c.episode] = Episode(c.episode, c.clock)
            if frame_rate:
                e.trigger_frame = int(round(c.clock * frame_rate))
        if c.kind == CommandKind.ROTATE:
            e.offsets.append(c.offset)
        elif c.kind == CommandKind.ADOPT:
            e.outcome, e.end_clock = "RECOVERED", c.clock
        else:
            e.outcome, e.end_clock = "FAILED", c.clock
    return [eps[k] for k in sorted(eps)]


def write_event_log(episodes, path: str | Path) -> Path:
    """JSON-lines, one episode per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for e in episodes:
        d = asdict(e)
        d["duration"] = None if e.duration is None else round(e.duration, 6)
        lines.append(json.dumps(d, sort_keys=True))
    path.write_text("".join(line + "\n" for line in lines))
    return path
