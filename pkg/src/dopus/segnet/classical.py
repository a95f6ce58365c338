"""Training-free lumen segmenter used as a baseline and for untrained runs."""

from __future__ import annotations

import cv2
import numpy as np

from ..imaging import DuplexFrame

__all__ = ["doppler_seed", "classical_segment"]


def doppler_seed(doppler: np.ndarray, min_pixels: int = 20):
    """Centroid (row, col) of the largest colour-flow region, or None."""
    m = (doppler > 0.5).astype(np.uint8)
    if not m.any():
        return None
    n, lab, stats, cent = cv2.connectedComponentsWithStats(m, connectivity=8)
    k = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
    if stats[k, cv2.CC_STAT_AREA] < min_pixels:
        return None
    return float(cent[k, 1]), float(cent[k, 0])


def classical_segment(frame: DuplexFrame, seed=None, dark_ratio: float = 0.55, blur_sigma: float = 2.0,
                      search_px: float = 12.0) -> np.ndarray:
    """Dark-region threshold, connected components and ellipse fit around a flow seed.

    The seed is the largest Doppler region; ``seed`` (row, col) is the fallback
    when there is none. Returns a float 0/1 mask (possibly empty).
    """
    b = frame.bmode.data
    out = np.zeros(b.shape, dtype=np.float64)
    s = doppler_seed(frame.doppler.data)
    if s is None:
        s = seed
    if s is None:
        return out
    sm = cv2.GaussianBlur(b.astype(np.float32), (0, 0), blur_sigma)
    ref = float(np.median(sm))
    if ref <= 0:
        return out
    dark = (sm < dark_ratio * ref).astype(np.uint8)
    if not dark.any():
        return out
    n, lab = cv2.connectedComponents(dark, connectivity=4)
    r, c = int(round(s[0])), int(round(s[1]))
    h, w = b.shape
    r, c = min(max(r, 0), h - 1), min(max(c, 0), w - 1)
    k = int(lab[r, c])
    if k == 0:
        # nearest dark component within the search radius
        ys, xs = np.nonzero(lab)
        d2 = (ys - r) ** 2 + (xs - c) ** 2
        j = int(np.argmin(d2))
        if d2[j] > search_px ** 2:
            return out
        k = int(lab[ys[j], xs[j]])
    comp = (lab == k).astype(np.uint8)
    # reject components touching the image border (background, not a lumen)
    if comp[0].any() or comp[-1].any() or comp[:, 0].any() or comp[:, -1].any():
        return out
    contours, _ = cv2.findContours(comp, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    cnt = max(contours, key=cv2.contourArea)
    if len(cnt) < 5:
        return comp.astype(np.float64)
    (cx, cy), (ax1, ax2), ang = cv2.fitEllipse(cnt)
    # contour runs through boundary pixel centres; widen by one pixel to cover them
    ell = np.zeros_like(comp)
    cv2.ellipse(ell, ((cx, cy), (ax1 + 1.0, ax2 + 1.0), ang), 1, thickness=-1)
    return ell.astype(np.float64)
