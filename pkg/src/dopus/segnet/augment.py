"""Sequence-level geometric augmentation (one parameter draw per sequence)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import cv2
import numpy as np

__all__ = ["AugParams", "AugRanges", "sample_params", "apply_params", "augment_sequence"]


@dataclass(frozen=True)
class AugRanges:
    shift: float = 0.01  # fraction of width / height
    rotation: float = 15.0  # degrees
    scale: tuple = (0.8, 1.2)
    hflip_prob: float = 0.5


@dataclass(frozen=True)
class AugParams:
    shift_h: float = 0.0
    shift_v: float = 0.0
    rotation: float = 0.0
    scale: float = 1.0
    hflip: bool = False

    @property
    def is_identity(self) -> bool:
        return self == AugParams()

    def to_dict(self) -> dict:
        return asdict(self)


def sample_params(rng: np.random.Generator, ranges: AugRanges = AugRanges()) -> AugParams:
    return AugParams(
        shift_h=float(rng.uniform(-ranges.shift, ranges.shift)),
        shift_v=float(rng.uniform(-ranges.shift, ranges.shift)),
        rotation=float(rng.uniform(-ranges.rotation, ranges.rotation)),
        scale=float(rng.uniform(*ranges.scale)),
        hflip=bool(rng.random() < ranges.hflip_prob),
    )


def _warp(img: np.ndarray, p: AugParams, nearest: bool) -> np.ndarray:
    h, w = img.shape
    out = img
    if p.rotation != 0.0 or p.scale != 1.0 or p.shift_h != 0.0 or p.shift_v != 0.0:
        m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), p.rotation, p.scale)
        m[0, 2] += p.shift_h * w
        m[1, 2] += p.shift_v * h
        interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
        out = cv2.warpAffine(img.astype(np.float64), m, (w, h), flags=interp,
                             borderMode=cv2.BORDER_CONSTANT, borderValue=0.0)
    if p.hflip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def apply_params(bmode: np.ndarray, doppler: np.ndarray, gt: np.ndarray, p: AugParams):
    """Transform one frame; masks use nearest neighbour so they stay binary."""
    return _warp(bmode, p, False).clip(0.0, 1.0), _warp(doppler, p, True), _warp(gt, p, True)


def augment_sequence(bmode: np.ndarray, doppler: np.ndarray, gt: np.ndarray,
                     rng: np.random.Generator | None = None, params: AugParams | None = None,
                     ranges: AugRanges = AugRanges()):
    """Apply a single sampled transform to every frame of (T, H, W) stacks.

    Returns (bmode, doppler, gt, params). Pass ``params`` to skip sampling.
    """
    bmode, doppler, gt = (np.asarray(a, dtype=np.float64) for a in (bmode, doppler, gt))
    if bmode.ndim != 3 or bmode.shape[0] == 0:
        raise ValueError("expected a non-empty (T, H, W) sequence")
    if not (bmode.shape == doppler.shape == gt.shape):
        raise ValueError("sequence stacks must share a shape")
    if params is None:
        if rng is None:
            raise ValueError("need an rng or explicit params")
        params = sample_params(rng, ranges)
    if params.is_identity:
        return bmode.copy(), doppler.copy(), gt.copy(), params
    out = [apply_params(b, d, g, params) for b, d, g in zip(bmode, doppler, gt)]
    b, d, g = (np.stack(x) for x in zip(*out))
    return b, d, g, params
