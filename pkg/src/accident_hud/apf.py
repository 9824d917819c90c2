"""Heatmap -> driver-relevant feature contours.

Threshold the heatmap, keep only connected regions that reach the road
(lower) band of the frame, split touching regions with a distance-transform
watershed and trace one closed contour per segment.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage as ndi
from skimage.filters import threshold_otsu
from skimage.segmentation import watershed

from ._io import atomic_write_bytes, atomic_write_text

EIGHT = np.ones((3, 3), dtype=bool)
GREEN = (0, 255, 0)


@dataclass(frozen=True)
class BandRule:
    """Row bands of a 640-row frame: [0, upper_end) is discarded unless a
    region also reaches [lower_start, height)."""

    upper_end: int = 300
    lower_start: int = 360
    height: int = 640

    def __post_init__(self):
        if not 0 <= self.upper_end <= self.lower_start <= self.height:
            raise ValueError(f"bands do not partition the rows: {self}")

    def scaled(self, height: int) -> "BandRule":
        if height == self.height:
            return self
        f = height / self.height
        return BandRule(int(round(self.upper_end * f)), int(round(self.lower_start * f)), height)


@dataclass
class APFeatureMask:
    mask: np.ndarray
    contours: list = field(default_factory=list)
    segments: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def area_fraction(self) -> float:
        return 100.0 * float(np.count_nonzero(self.mask)) / self.mask.size

    def centroids(self) -> list[tuple[float, float]]:
        """(x, y) pixel centroid of each segment, in contour order."""
        if self.segments is None:
            return []
        out = []
        for lab in np.unique(self.segments[self.segments > 0]):
            ys, xs = np.nonzero(self.segments == lab)
            out.append((float(xs.mean()), float(ys.mean())))
        return out


def binarize(heatmap: np.ndarray, tau=0.5) -> np.ndarray:
    """``heatmap >= tau``; ``tau="otsu"`` picks the threshold from the histogram."""
    h = np.asarray(heatmap, dtype=float)
    if isinstance(tau, str):
        tau = threshold_otsu(h) if tau == "otsu" else float(tau)
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {tau}")
    return h >= tau


def band_filter(mask: np.ndarray, rule: BandRule = BandRule()) -> np.ndarray:
    """Keep whole 8-connected components that have at least one pixel in the lower band."""
    mask = np.asarray(mask, dtype=bool)
    rule = rule.scaled(mask.shape[0])
    labels, n = ndi.label(mask, structure=EIGHT)
    if n == 0:
        return np.zeros_like(mask)
    keep = np.unique(labels[rule.lower_start:])
    keep = keep[keep > 0]
    return np.isin(labels, keep)


def watershed_markers(dist: np.ndarray, components: np.ndarray, rel_height: float = 0.3,
                      merge_px: int = 5) -> np.ndarray:
    """Seed labels from distance-transform maxima.

    Local maxima above ``rel_height`` of the global maximum are grouped when
    they lie within ``merge_px`` of each other. Components left without a
    seed get one at their deepest pixel so no region is lost.
    """
    peaks = (dist == ndi.maximum_filter(dist, footprint=EIGHT)) & (dist >= rel_height * dist.max()) & (dist > 0)
    r = merge_px // 2
    disk = np.hypot(*np.mgrid[-r:r + 1, -r:r + 1]) <= r + 0.5
    grouped, _ = ndi.label(ndi.binary_dilation(peaks, structure=disk), structure=EIGHT)
    # a merged group never spans two components
    pair = np.where(peaks, grouped.astype(np.int64) * (components.max() + 1) + components, 0)
    _, inverse = np.unique(pair, return_inverse=True)
    markers = np.where(peaks, inverse.reshape(pair.shape) + 1, 0).astype(np.int32)
    seeded = set(np.unique(components[markers > 0]).tolist())
    missing = [lab for lab in range(1, components.max() + 1) if lab not in seeded]
    if missing:
        nxt = markers.max() + 1
        for i, pos in enumerate(ndi.maximum_position(dist, components, missing)):
            markers[pos] = nxt + i
    return markers


def segment_contours(mask: np.ndarray, image: Optional[np.ndarray] = None,
                     simplify_px: float = 2.0) -> APFeatureMask:
    """Watershed-split ``mask`` and trace one closed [x, y] polygon per segment.

    ``image`` only fixes the output coordinate frame; contours are in its
    pixel coordinates, which are the mask's.
    """
    mask = np.asarray(mask, dtype=bool)
    if image is not None and image.shape[:2] != mask.shape:
        raise ValueError("image and mask sizes differ")
    if not mask.any():
        return APFeatureMask(mask.copy(), [], np.zeros(mask.shape, dtype=np.int32))
    # the frame edge counts as background
    dist = ndi.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]
    components, _ = ndi.label(mask, structure=EIGHT)
    markers = watershed_markers(dist, components)
    segments = watershed(-dist, markers, mask=mask, connectivity=2).astype(np.int32)
    contours = []
    for lab in np.unique(segments[segments > 0]):
        seg = (segments == lab).astype(np.uint8)
        found, _ = cv2.findContours(seg, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
        c = max(found, key=cv2.contourArea)
        if simplify_px > 0 and len(c) > 3:
            c = cv2.approxPolyDP(c, simplify_px, True)
        contours.append(c.reshape(-1, 2).astype(np.int32))
    return APFeatureMask(mask.copy(), contours, segments)


def run_pipeline(heatmap: np.ndarray, image: Optional[np.ndarray] = None, tau=0.5,
                 rule: BandRule = BandRule()) -> APFeatureMask:
    return segment_contours(band_filter(binarize(heatmap, tau), rule), image)


def contour_area(contour: np.ndarray) -> float:
    return float(cv2.contourArea(contour.reshape(-1, 1, 2).astype(np.int32)))


def overlay(image: np.ndarray, features: APFeatureMask, thickness: int = 2) -> np.ndarray:
    out = np.ascontiguousarray(image.copy())
    pts = [c.reshape(-1, 1, 2) for c in features.contours]
    cv2.drawContours(out, pts, -1, GREEN, thickness)
    return out


def _png(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def save_features(prefix, features: APFeatureMask, image: Optional[np.ndarray] = None) -> None:
    """Write ``<prefix>_mask.png``, ``<prefix>_contours.json`` and, with an image, ``<prefix>_overlay.png``."""
    prefix = Path(prefix)
    atomic_write_bytes(prefix.with_name(prefix.name + "_mask.png"),
                       _png(features.mask.astype(np.uint8) * 255))
    rings = [c.tolist() for c in features.contours]
    atomic_write_text(prefix.with_name(prefix.name + "_contours.json"), json.dumps(rings) + "\n")
    if image is not None:
        atomic_write_bytes(prefix.with_name(prefix.name + "_overlay.png"), _png(overlay(image, features)))
