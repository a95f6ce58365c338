"""Mask compounding into a 3D label volume, overlap metrics and exports."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import ImageGrid
from .pose import ProbePose

__all__ = [
    "FrameScore",
    "LabelVolume",
    "dice_score",
    "iou_score",
    "score_frame",
    "histogram_scores",
    "HIST_EDGES",
    "insert_mask",
    "largest_component",
    "surface_voxels",
    "surface_distance_map",
    "write_metaimage",
    "read_metaimage",
    "write_mesh",
    "write_scores_csv",
]

HIST_EDGES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


def _as_bool(m) -> np.ndarray:
    a = m.data if isinstance(m, ImageGrid) else np.asarray(m)
    return a > 0.5 if a.dtype != bool else a


def _counts(pred, gt):
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {g.shape}")
    inter = int(np.count_nonzero(p & g))
    return inter, int(np.count_nonzero(p)), int(np.count_nonzero(g))


def dice_score(pred, gt) -> float:
    """2|P & G| / (|P| + |G|); two empty masks agree perfectly (1.0)."""
    inter, np_, ng = _counts(pred, gt)
    if np_ + ng == 0:
        return 1.0
    return 2.0 * inter / (np_ + ng)


def iou_score(pred, gt) -> float:
    inter, np_, ng = _counts(pred, gt)
    union = np_ + ng - inter
    if union == 0:
        return 1.0
    return inter / union


@dataclass(frozen=True)
class FrameScore:
    frame_index: int
    dice: float
    iou: float
    dwell: bool = False

    def __post_init__(self):
        if not (0.0 <= self.iou <= 1.0 and 0.0 <= self.dice <= 1.0):
            raise ValueError("scores must lie in [0, 1]")


def score_frame(frame_index: int, pred, gt, dwell: bool = False) -> FrameScore:
    return FrameScore(frame_index, dice_score(pred, gt), iou_score(pred, gt), dwell)


def histogram_scores(scores) -> np.ndarray:
    """Counts in [0,0.1), [0.1,0.2), ..., [0.8,0.9), [0.9,1]."""
    s = np.asarray(list(scores), dtype=np.float64)
    if s.size and (np.any(~np.isfinite(s)) or s.min() < 0.0 or s.max() > 1.0):
        raise ValueError("scores must lie in [0, 1]")
    idx = np.searchsorted(np.asarray(HIST_EDGES[1:-1]), s, side="right")
    return np.bincount(idx, minlength=10).astype(int)


# -- label volume -------------------------------------------------------------------

@dataclass
class LabelVolume:
    """World-axis-aligned voxel grid. ``origin`` is the centre of voxel (0, 0, 0)."""

    data: np.ndarray  # (nx, ny, nz) uint8
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    max_voxels: int = 200_000_000

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) <= 0:
            raise ValueError("volume dims must be positive")
        if min(self.spacing) <= 0:
            raise ValueError("spacing must be positive")
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)

    @classmethod
    def empty(cls, lo, hi, spacing, max_voxels: int = 200_000_000) -> "LabelVolume":
        """Volume covering the world box [lo, hi] (mm)."""
        sp = np.asarray(spacing, dtype=float)
        lo = np.asarray(lo, dtype=float)
        dims = np.floor((np.asarray(hi, dtype=float) - lo) / sp + 1e-9).astype(int) + 1
        if int(np.prod(dims)) > max_voxels:
            raise MemoryError(f"volume of {dims.tolist()} voxels exceeds the memory guard")
        return cls(np.zeros(tuple(dims), np.uint8), tuple(sp), tuple(lo), max_voxels)

    @property
    def shape(self):
        return self.data.shape

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def labelled_volume_mm3(self) -> float:
        return float(np.count_nonzero(self.data)) * self.voxel_volume

    def world_to_index(self, pts: np.ndarray) -> np.ndarray:
        # round halves up, with a hair of bias so float noise cannot split ties either way;
        # np.rint's half-to-even would merge neighbouring pixels that sit on voxel edges
        f = (pts - np.asarray(self.origin)) / np.asarray(self.spacing)
        return np.floor(f + (0.5 + 1e-6)).astype(np.int64)

    def _grow(self, lo_idx: np.ndarray, hi_idx: np.ndarray) -> None:
        pad_lo = np.maximum(0, -lo_idx)
        pad_hi = np.maximum(0, hi_idx - (np.asarray(self.data.shape) - 1))
        if not (pad_lo.any() or pad_hi.any()):
            return
        # grow in generous steps so a long sweep does not re-allocate every frame
        slack = np.maximum(np.asarray(self.data.shape) // 2, 16)
        pad_lo = np.where(pad_lo > 0, pad_lo + slack, 0)
        pad_hi = np.where(pad_hi > 0, pad_hi + slack, 0)
        new_shape = np.asarray(self.data.shape) + pad_lo + pad_hi
        if int(np.prod(new_shape)) > self.max_voxels:
            raise MemoryError(f"volume of {new_shape.tolist()} voxels exceeds the memory guard")
        self.data = np.pad(self.data, list(zip(pad_lo, pad_hi)))
        self.origin = tuple(np.asarray(self.origin) - pad_lo * np.asarray(self.spacing))

    def same_geometry(self, other: "LabelVolume") -> bool:
        return (self.shape == other.shape and np.allclose(self.spacing, other.spacing)
                and np.allclose(self.origin, other.origin))

    def aligned_with(self, other: "LabelVolume") -> tuple["LabelVolume", "LabelVolume"]:
        """Both volumes resampled (by padding) onto their common bounding grid."""
        if not np.allclose(self.spacing, other.spacing):
            raise ValueError("volumes must share voxel spacing")
        sp = np.asarray(self.spacing)
        lo = np.minimum(self.origin, other.origin)
        hi = np.maximum(np.asarray(self.origin) + (np.asarray(self.shape) - 1) * sp,
                        np.asarray(other.origin) + (np.asarray(other.shape) - 1) * sp)
        out = []
        for v in (self, other):
            off = np.rint((np.asarray(v.origin) - lo) / sp).astype(int)
            dims = np.rint((hi - lo) / sp).astype(int) + 1
            d = np.zeros(tuple(dims), np.uint8)
            d[off[0]:off[0] + v.shape[0], off[1]:off[1] + v.shape[1], off[2]:off[2] + v.shape[2]] = v.data
            out.append(LabelVolume(d, tuple(sp), tuple(lo), v.max_voxels))
        return out[0], out[1]


def pixel_world_coords(rows: np.ndarray, cols: np.ndarray, shape, spacing, pose: ProbePose) -> np.ndarray:
    """World (x, y, z) of pixel centres; columns span the lateral axis, rows the beam."""
    h, w = shape
    u = (cols + 0.5 - w / 2.0) * spacing[1]
    v = (rows + 0.5) * spacing[0]
    R = pose.rotation_matrix()
    return np.asarray(pose.position)[None, :] + u[:, None] * R[:, 0][None, :] + v[:, None] * R[:, 2][None, :]


def insert_mask(vol: LabelVolume, mask: ImageGrid, pose: ProbePose) -> LabelVolume:
    """Splat every foreground pixel into its nearest voxel (in place; returns ``vol``)."""
    m = _as_bool(mask)
    rows, cols = np.nonzero(m)
    if rows.size == 0:
        return vol
    pts = pixel_world_coords(rows.astype(float), cols.astype(float), m.shape, mask.spacing, pose)
    idx = vol.world_to_index(pts)
    vol._grow(idx.min(axis=0), idx.max(axis=0))
    idx = vol.world_to_index(pts)
    vol.data[idx[:, 0], idx[:, 1], idx[:, 2]] = 1
    return vol


def largest_component(vol: LabelVolume) -> LabelVolume:
    """Keep the largest 26-connected component (optional post-filter)."""
    lab, n = ndimage.label(vol.data, structure=np.ones((3, 3, 3)))
    if n <= 1:
        return LabelVolume(vol.data.copy(), vol.spacing, vol.origin, vol.max_voxels)
    sizes = np.bincount(lab.ravel())[1:]
    keep = (lab == (int(np.argmax(sizes)) + 1)).astype(np.uint8)
    return LabelVolume(keep, vol.spacing, vol.origin, vol.max_voxels)


def surface_voxels(data: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-connected background neighbour."""
    fg = data.astype(bool)
    return fg & ~ndimage.binary_erosion(fg, structure=ndimage.generate_binary_structure(3, 1),
                                        border_value=0)


def surface_distance_map(pred_vol: LabelVolume, gt_vol: LabelVolume):
    """Distance (mm) from each predicted-surface voxel to the nearest ground-truth surface voxel.

    Returns (indices (K, 3), distances (K,)).
    """
    if not pred_vol.same_geometry(gt_vol):
        raise ValueError("volumes must share geometry")
    ps, gs = surface_voxels(pred_vol.data), surface_voxels(gt_vol.data)
    if not ps.any() or not gs.any():
        raise ValueError("empty surface")
    dist = ndimage.distance_transform_edt(~gs, sampling=pred_vol.spacing)
    idx = np.argwhere(ps)
    return idx, dist[ps]


# -- export ---------------------------------------------------------------------------

def write_metaimage(vol: LabelVolume, path: str | Path) -> Path:
    """MetaImage header (.mhd) plus raw uint8 voxels (.raw), x fastest."""
    path = Path(path).with_suffix(".mhd")
    raw = path.with_suffix(".raw")
    nx, ny, nz = vol.shape
    header = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "TransformMatrix = 1 0 0 0 1 0 0 0 1",
        "Offset = " + " ".join(repr(float(o)) for o in vol.origin),
        "ElementSpacing = " + " ".join(repr(float(s)) for s in vol.spacing),
        f"DimSize = {nx} {ny} {nz}",
        "ElementType = MET_UCHAR",
        f"ElementDataFile = {raw.name}",
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(header) + "\n")
    # MetaImage stores x fastest, so write the (z, y, x) transpose in C order
    raw.write_bytes(np.ascontiguousarray(vol.data.transpose(2, 1, 0)).tobytes())
    return path


def read_metaimage(path: str | Path) -> LabelVolume:
    path = Path(path)
    fields = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            fields[k.strip()] = v.strip()
    dims = [int(v) for v in fields["DimSize"].split()]
    sp = [float(v) for v in fields["ElementSpacing"].split()]
    org = [float(v) for v in fields["Offset"].split()]
    raw = np.frombuffer((path.parent / fields["ElementDataFile"]).read_bytes(), dtype=np.uint8)
    data = raw.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0)
    return LabelVolume(data.copy(), tuple(sp), tuple(org))


def write_mesh(vol: LabelVolume, path: str | Path) -> Path:
    """Marching-cubes surface in world coordinates as Wavefront OBJ."""
    from skimage.measure import marching_cubes

    path = Path(path).with_suffix(".obj")
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# label surface, units mm"]
    if vol.data.any():
        padded = np.pad(vol.data, 1).astype(np.float32)
        verts, faces, _, _ = marching_cubes(padded, level=0.5, spacing=vol.spacing)
        verts = verts - np.asarray(vol.spacing) + np.asarray(vol.origin)
        lines += [f"v {x:.4f} {y:.4f} {z:.4f}" for x, y, z in verts]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces]
    path.write_text("\n".join(lines) + "\n")
    return path


def write_scores_csv(scores, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_index", "dice", "iou", "dwell"])
        for s in scores:
            w.writerow([s.frame_index, f"{s.dice:.6f}", f"{s.iou:.6f}", int(s.dwell)])
    return path
