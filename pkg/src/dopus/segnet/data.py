"""Conversion between 320x320 duplex frames and model-resolution tensors."""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
import torch

__all__ = ["downsample_frame", "upsample_prob", "SequenceSet", "sweep_arrays", "frames_arrays",
           "load_sequence_arrays", "build_sequences"]


def downsample_frame(bmode: np.ndarray, doppler: np.ndarray, res: int, gt: np.ndarray | None = None):
    """Area-average to ``res`` x ``res``. Doppler keeps any cell with >= 1/4 coverage."""
    if bmode.shape != doppler.shape:
        raise ValueError("bmode and doppler must share a shape")
    size = (res, res)
    if bmode.shape == (res, res):
        b, d = bmode.astype(np.float32), doppler.astype(np.float32)
        g = None if gt is None else gt.astype(np.float32)
        return b, d, g
    b = cv2.resize(bmode.astype(np.float32), size, interpolation=cv2.INTER_AREA)
    d = (cv2.resize(doppler.astype(np.float32), size, interpolation=cv2.INTER_AREA) >= 0.25).astype(np.float32)
    g = None
    if gt is not None:
        g = (cv2.resize(gt.astype(np.float32), size, interpolation=cv2.INTER_AREA) >= 0.5).astype(np.float32)
    return b, d, g


def upsample_prob(prob: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear upsampling of a probability map so the 0.5 contour stays smooth."""
    if prob.shape == (height, width):
        return prob.astype(np.float64)
    return cv2.resize(prob.astype(np.float32), (width, height), interpolation=cv2.INTER_LINEAR).astype(np.float64)


def sweep_arrays(sweep, res: int):
    """(T, res, res) float32 stacks of bmode, doppler and ground truth for one sweep."""
    return frames_arrays(sweep.frames, sweep.ground_truth, res)


def frames_arrays(frames, ground_truth, res: int):
    bs, ds, gs = [], [], []
    for fr, gt in zip(frames, ground_truth):
        b, d, g = downsample_frame(fr.bmode.data, fr.doppler.data, res, gt.data)
        bs.append(b)
        ds.append(d)
        gs.append(g)
    return np.stack(bs), np.stack(ds), np.stack(gs)


def load_sequence_arrays(root, res: int):
    """Saved sequences under ``root`` grouped by their ``patient`` metadata.

    Returns ({patient: [(bmode, doppler, gt) stacks]}, {patient: [sequence dirs]}).
    Sequences without ground truth are skipped.
    """
    from ..imaging import iter_sequence_dirs, load_sequence

    arrays, paths = {}, {}
    for d in iter_sequence_dirs(root):
        frames, gts, meta = load_sequence(d)
        if gts is None:
            continue
        p = int(meta.get("patient", len(arrays)))
        arrays.setdefault(p, []).append(frames_arrays(frames, gts, res))
        paths.setdefault(p, []).append(d)
    if not arrays:
        raise FileNotFoundError(f"no labelled sequences under {root}")
    return arrays, paths


@dataclass
class SequenceSet:
    """Fixed-length training sequences, each (T, H, W)."""

    bmode: np.ndarray  # (N, T, H, W)
    doppler: np.ndarray
    gt: np.ndarray
    groups: np.ndarray  # patient id per sequence

    def __len__(self):
        return self.bmode.shape[0]

    def subset(self, idx) -> "SequenceSet":
        idx = np.asarray(idx, dtype=int)
        return SequenceSet(self.bmode[idx], self.doppler[idx], self.gt[idx], self.groups[idx])

    def tensors(self, idx):
        to = lambda a: torch.from_numpy(np.ascontiguousarray(a[idx], dtype=np.float32)).unsqueeze(2)
        return to(self.bmode), to(self.doppler), to(self.gt)


def build_sequences(arrays_by_group: dict, length: int = 20, stride: int = 10) -> SequenceSet:
    """Cut every sweep into windows of ``length`` frames (windows may overlap)."""
    if length <= 0 or stride <= 0:
        raise ValueError("length and stride must be positive")
    bs, ds, gs, grp = [], [], [], []
    for g in sorted(arrays_by_group):
        for b, d, t in arrays_by_group[g]:
            for s in range(0, b.shape[0] - length + 1, stride):
                bs.append(b[s:s + length])
                ds.append(d[s:s + length])
                gs.append(t[s:s + length])
                grp.append(g)
    if not bs:
        raise ValueError("no sequences: sweeps shorter than the sequence length")
    return SequenceSet(np.stack(bs), np.stack(ds), np.stack(gs), np.asarray(grp))
