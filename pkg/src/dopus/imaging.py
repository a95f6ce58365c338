"""Duplex frame containers, Doppler extraction, resampling and sequence I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np

from .pose import ProbePose

__all__ = [
    "DEPTH_MM",
    "IMAGE_SIZE",
    "DEFAULT_SPACING",
    "ImageGrid",
    "DuplexFrame",
    "HsvPixel",
    "rgb_to_hsv",
    "threshold_hsv",
    "extract_doppler_mask",
    "mask_to_color",
    "render_composite",
    "resample",
    "px_to_mm",
    "mm_to_px",
    "save_sequence",
    "load_sequence",
]

DEPTH_MM = 45.0
IMAGE_SIZE = 320
DEFAULT_SPACING = DEPTH_MM / IMAGE_SIZE  # 0.140625 mm/px

SATURATION_MIN = 100
VALUE_MIN = 20


@dataclass(frozen=True)
class ImageGrid:
    """Row-major scalar (H, W) or colour (H, W, 3) image with values in [0, 1].

    ``spacing`` is (row, col) in mm per pixel. It is isotropic for grids in
    the standard 320x320 space; anisotropic resampling (e.g. 497x733 screen
    grabs to 320x320) yields different row and column spacings.
    """

    data: np.ndarray
    spacing: tuple[float, float] = (DEFAULT_SPACING, DEFAULT_SPACING)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim not in (2, 3) or data.shape[0] == 0 or data.shape[1] == 0:
            raise ValueError("empty input")
        if data.ndim == 3 and data.shape[2] != 3:
            raise ValueError("colour grids need 3 channels")
        if data.dtype == bool:
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise ValueError("grid contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("grid values must lie in [0, 1]")
        if np.isscalar(self.spacing):
            sp = (float(self.spacing), float(self.spacing))
        else:
            sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 2 or min(sp) <= 0:
            raise ValueError("spacing must be positive")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", sp)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @property
    def is_binary(self) -> bool:
        return self.data.ndim == 2 and bool(np.all((self.data == 0) | (self.data == 1)))

    @property
    def extent_mm(self) -> tuple[float, float]:
        return self.height * self.spacing[0], self.width * self.spacing[1]


@dataclass(frozen=True)
class DuplexFrame:
    bmode: ImageGrid
    doppler: ImageGrid
    timestamp: float
    pose: ProbePose
    frame_index: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.bmode.shape != self.doppler.shape or self.bmode.spacing != self.doppler.spacing:
            raise ValueError("bmode and doppler grids must share dimensions and spacing")
        if not self.doppler.is_binary:
            raise ValueError("doppler grid must be binary")

    @property
    def shape(self) -> tuple[int, int]:
        return self.bmode.shape


@dataclass(frozen=True)
class HsvPixel:
    hue: float
    saturation: float
    value: float

    def __post_init__(self):
        if not (0.0 <= self.hue < 360.0):
            raise ValueError("hue must lie in [0, 360)")
        if not (0.0 <= self.saturation <= 255.0 and 0.0 <= self.value <= 255.0):
            raise ValueError("saturation and value must lie in [0, 255]")


def _to_uint8(rgb: np.ndarray) -> np.ndarray:
    if rgb.dtype == np.uint8:
        return rgb
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def rgb_to_hsv(rgb: np.ndarray | ImageGrid) -> np.ndarray:
    """RGB (float [0,1] or uint8) to HSV with hue in degrees and S, V in [0, 255].

    Colours are quantised to 8 bits first, as a screen grab would be.
    """
    arr = rgb.data if isinstance(rgb, ImageGrid) else np.asarray(rgb)
    if arr.size == 0:
        raise ValueError("empty input")
    if arr.shape[-1] != 3:
        raise ValueError("expected an RGB array with a trailing channel axis of 3")
    u8 = _to_uint8(arr)
    flat = u8.reshape(-1, 1, 3)
    hsv = cv2.cvtColor(flat, cv2.COLOR_RGB2HSV_FULL).reshape(u8.shape).astype(np.float64)
    # FULL variant maps hue onto 0..255
    hsv[..., 0] *= 360.0 / 256.0
    return hsv


def threshold_hsv(hsv: np.ndarray, s_min: float = SATURATION_MIN, v_min: float = VALUE_MIN) -> np.ndarray:
    """Binary colour-flow mask: saturation >= s_min and value >= v_min (inclusive)."""
    hsv = np.asarray(hsv, dtype=np.float64)
    return ((hsv[..., 1] >= s_min) & (hsv[..., 2] >= v_min)).astype(np.float64)


def extract_doppler_mask(rgb_frame: ImageGrid | np.ndarray, spacing=None) -> ImageGrid:
    """Isolate the coloured Doppler overlay of a composite duplex frame."""
    if isinstance(rgb_frame, ImageGrid):
        arr, sp = rgb_frame.data, rgb_frame.spacing
    else:
        arr = np.asarray(rgb_frame)
        sp = spacing if spacing is not None else (DEFAULT_SPACING, DEFAULT_SPACING)
    if arr.ndim != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError("empty input")
    return ImageGrid(threshold_hsv(rgb_to_hsv(arr)), sp)


def mask_to_color(mask: ImageGrid, color=(1.0, 0.0, 0.0)) -> ImageGrid:
    """Paint a binary mask as a saturated colour on black."""
    rgb = mask.data[..., None] * np.asarray(color, dtype=np.float64)[None, None, :]
    return ImageGrid(rgb, mask.spacing)


def render_composite(bmode: ImageGrid, doppler: ImageGrid, color=(0.9, 0.1, 0.05)) -> ImageGrid:
    """Screen-style duplex composite: grey B-mode with the colour-flow overlay."""
    gray = np.repeat(bmode.data[..., None], 3, axis=2)
    flow = doppler.data[..., None] > 0.5
    rgb = np.where(flow, np.asarray(color, dtype=np.float64)[None, None, :], gray)
    return ImageGrid(rgb, bmode.spacing)


def resample(img: ImageGrid, target_w: int, target_h: int, mask: bool | None = None) -> ImageGrid:
    """Resize to ``target_w`` x ``target_h`` keeping the physical extent.

    Intensity grids are interpolated bilinearly, binary masks by nearest
    neighbour (``mask=None`` detects binarity from the data).
    """
    if target_w <= 0 or target_h <= 0:
        raise ValueError("target dimensions must be positive")
    if mask is None:
        mask = img.is_binary
    if (target_h, target_w) == img.shape:
        return ImageGrid(img.data.copy(), img.spacing)
    interp = cv2.INTER_NEAREST if mask else cv2.INTER_LINEAR
    out = cv2.resize(img.data.astype(np.float64), (target_w, target_h), interpolation=interp)
    if not mask:
        out = np.clip(out, 0.0, 1.0)
    sp = (img.spacing[0] * img.height / target_h, img.spacing[1] * img.width / target_w)
    return ImageGrid(out, sp)


def px_to_mm(d_px, spacing: float):
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    return d_px * spacing


def mm_to_px(d_mm, spacing: float):
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    return d_mm / spacing


# -- sequence persistence -------------------------------------------------------

_BMODE_SCALE = 65535.0


def _write_png(path: Path, arr: np.ndarray) -> None:
    if not cv2.imwrite(str(path), arr):
        raise OSError(f"could not write {path}")


def _read_png(path: Path) -> np.ndarray:
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise OSError(f"could not read {path}")
    return arr


def save_sequence(
    out_dir: str | Path,
    frames: Sequence[DuplexFrame],
    ground_truth: Sequence[ImageGrid] | None = None,
    meta: dict | None = None,
) -> Path:
    """Write one PNG pair (+ optional ground truth) and a JSON sidecar per frame.

    B-mode is stored as 16-bit PNG, masks as 8-bit 0/255 PNG (bit-exact).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(frames):
        stem = f"frame_{i:05d}"
        _write_png(out / f"{stem}_bmode.png", np.rint(fr.bmode.data * _BMODE_SCALE).astype(np.uint16))
        _write_png(out / f"{stem}_doppler.png", (fr.doppler.data * 255).astype(np.uint8))
        if ground_truth is not None:
            _write_png(out / f"{stem}_gt.png", (ground_truth[i].data * 255).astype(np.uint8))
        side = {
            "frame_index": fr.frame_index,
            "timestamp": fr.timestamp,
            "pose": fr.pose.to_dict(),
            "spacing": list(fr.bmode.spacing),
            "meta": fr.meta,
        }
        (out / f"{stem}.json").write_text(json.dumps(side, indent=1, sort_keys=True))
    seq_meta = dict(meta or {})
    seq_meta["n_frames"] = len(frames)
    seq_meta["has_ground_truth"] = ground_truth is not None
    (out / "sequence.json").write_text(json.dumps(seq_meta, indent=1, sort_keys=True))
    return out


def load_sequence(seq_dir: str | Path) -> tuple[list[DuplexFrame], list[ImageGrid] | None, dict]:
    d = Path(seq_dir)
    meta = json.loads((d / "sequence.json").read_text())
    frames: list[DuplexFrame] = []
    gts: list[ImageGrid] | None = [] if meta.get("has_ground_truth") else None
    for i in range(meta["n_frames"]):
        stem = f"frame_{i:05d}"
        side = json.loads((d / f"{stem}.json").read_text())
        sp = tuple(side["spacing"])
        bmode = ImageGrid(_read_png(d / f"{stem}_bmode.png").astype(np.float64) / _BMODE_SCALE, sp)
        dop = ImageGrid((_read_png(d / f"{stem}_doppler.png") > 127).astype(np.float64), sp)
        frames.append(
            DuplexFrame(bmode, dop, side["timestamp"], ProbePose.from_dict(side["pose"]),
                        side["frame_index"], side.get("meta", {}))
        )
        if gts is not None:
            gts.append(ImageGrid((_read_png(d / f"{stem}_gt.png") > 127).astype(np.float64), sp))
    return frames, gts, meta


def iter_sequence_dirs(root: str | Path) -> Iterable[Path]:
    """All directories under ``root`` holding a ``sequence.json``, in sorted order."""
    return sorted(p.parent for p in Path(root).rglob("sequence.json"))
