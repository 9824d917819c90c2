"""Scores for explanation masks: confidence changes under masking strategies,
masked area and overlap with human visual saliency."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from ._io import fmt, write_csv

STRATEGIES = ("black_patch", "explain_only", "inverse_cam", "road_imputation")
SALIENCY_THRESHOLD = 100
REPORT_HEADER = ["model", "cam_method", "strategy", "T", "metric", "value", "n_images"]


@dataclass(frozen=True)
class ConfidenceRecord:
    Y: float
    O: float = float("nan")
    E: float = float("nan")


@dataclass(frozen=True)
class MaskStrategy:
    kind: str
    threshold_percent: Optional[float] = None

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}")
        t = self.threshold_percent
        if t is not None and not 0 < t <= 100:
            raise ValueError(f"threshold percent must lie in (0, 100], got {t}")

    @property
    def label(self) -> str:
        return self.kind if self.threshold_percent is None else f"{self.kind}@{self.threshold_percent:g}"


def top_t_mask(heatmap: np.ndarray, percent: float) -> np.ndarray:
    """The ``percent`` % highest-valued pixels; ties go to the earlier raster index."""
    h = np.asarray(heatmap, dtype=float)
    k = int(round(h.size * percent / 100.0))
    order = np.argsort(-h.ravel(), kind="stable")
    out = np.zeros(h.size, dtype=bool)
    out[order[:k]] = True
    return out.reshape(h.shape)


def bottom_k_mask(heatmap: np.ndarray, k: int) -> np.ndarray:
    h = np.asarray(heatmap, dtype=float)
    order = np.argsort(h.ravel(), kind="stable")
    out = np.zeros(h.size, dtype=bool)
    out[order[:k]] = True
    return out.reshape(h.shape)


def road_impute(image: np.ndarray, mask: np.ndarray, noise_std: float = 0.0, rng=None) -> np.ndarray:
    """Fill masked pixels with the mean of their 4-neighbours, solved jointly.

    Each masked pixel satisfies ``deg * x_p - sum(masked neighbours) =
    sum(unmasked neighbours)`` where ``deg`` counts in-bounds neighbours.
    Optional Gaussian noise is added to the imputed values only.
    """
    img = np.asarray(image, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.shape[:2]:
        raise ValueError("mask and image sizes differ")
    if mask.all():
        raise ValueError("every pixel is masked; imputation has no boundary values")
    out = img.copy()
    if not mask.any():
        return out
    chans = img.reshape(img.shape[0], img.shape[1], -1)
    h, w = mask.shape
    idx = -np.ones(mask.shape, dtype=np.int64)
    ys, xs = np.nonzero(mask)
    n = ys.size
    idx[ys, xs] = np.arange(n)
    deg = np.zeros(n)
    rows, cols = [], []
    rhs = np.zeros((n, chans.shape[2]))
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx = ys + dy, xs + dx
        ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        deg += ok
        nyo, nxo, src = ny[ok], nx[ok], np.nonzero(ok)[0]
        nb = idx[nyo, nxo]
        inner = nb >= 0
        rows.append(src[inner])
        cols.append(nb[inner])
        np.add.at(rhs, src[~inner], chans[nyo[~inner], nxo[~inner]])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    a = sparse.coo_matrix((-np.ones(r.size), (r, c)), shape=(n, n)) + sparse.diags(deg)
    sol = splu(a.tocsc()).solve(rhs)
    if noise_std > 0:
        rng = np.random.default_rng(rng)
        sol = sol + rng.normal(0.0, noise_std, sol.shape)
    flat = out.reshape(h, w, -1)
    flat[ys, xs] = sol
    return flat.reshape(img.shape)


def masked_image(image: np.ndarray, strategy: MaskStrategy, mask: Optional[np.ndarray] = None,
                 heatmap: Optional[np.ndarray] = None, noise_std: float = 0.0, rng=None) -> np.ndarray:
    """Apply a removal strategy to ``image``.

    With ``strategy.threshold_percent`` set the removal region is the top-T %
    of ``heatmap``; otherwise it is ``mask``. ``inverse_cam`` removes the same
    number of pixels taken from the lowest heatmap values instead.
    """
    image = np.asarray(image)
    if strategy.threshold_percent is not None:
        if heatmap is None:
            raise ValueError(f"{strategy.label} needs a heatmap")
        region = top_t_mask(heatmap, strategy.threshold_percent)
    elif mask is not None:
        region = np.asarray(mask, dtype=bool)
    else:
        raise ValueError(f"{strategy.label} needs a mask")
    if region.shape != image.shape[:2]:
        raise ValueError("mask and image sizes differ")
    kind = strategy.kind
    if kind == "road_imputation":
        return road_impute(image, region, noise_std, rng)
    if kind == "inverse_cam":
        if heatmap is None:
            raise ValueError("inverse_cam needs a heatmap")
        region = bottom_k_mask(heatmap, int(region.sum()))
    elif kind == "explain_only":
        region = ~region
    out = image.copy()
    out[region] = 0
    return out


def _arr(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float))


def conf_change_percent(Y, O) -> float:
    """Mean relative confidence drop ``(Y - O) / Y`` in percent."""
    Y, O = _arr(Y), _arr(O)
    ok = Y > 0
    if not ok.all():
        warnings.warn(f"skipping {int((~ok).sum())} image(s) with zero original confidence")
    if not ok.any():
        raise ValueError("no image with positive original confidence")
    return float(np.mean((Y[ok] - O[ok]) / Y[ok]) * 100.0)


def cam_conf_change(Y, E) -> float:
    """Mean of ``E - Y`` times 100 (explain-only input vs original)."""
    Y, E = _arr(Y), _arr(E)
    return float(np.mean(E - Y) * 100.0)


def increase_in_conf(Y, E) -> int:
    return int(np.sum(_arr(E) > _arr(Y)))


def conf_change(Y, O) -> float:
    """Mean of ``O - Y`` on the raw probability scale."""
    return float(np.mean(_arr(O) - _arr(Y)))


def averaged_conf_change(per_threshold: dict) -> float:
    """Average of per-threshold ``conf_change`` values, e.g. ROAD at 20/40/60/80 %."""
    return float(np.mean([conf_change(Y, O) for Y, O in per_threshold.values()]))


def area_fraction(mask) -> float:
    m = np.asarray(mask, dtype=bool)
    return 100.0 * float(np.count_nonzero(m)) / m.size


def saliency_mask(raster, threshold: int = SALIENCY_THRESHOLD) -> np.ndarray:
    return np.asarray(raster) >= threshold


def visual_saliency(saliency_rasters: Sequence[np.ndarray], ap_masks: Sequence[np.ndarray]) -> float:
    """Mean percent of each thresholded saliency mask covered by the AP mask."""
    if isinstance(saliency_rasters, np.ndarray) and saliency_rasters.ndim == 2:
        saliency_rasters, ap_masks = [saliency_rasters], [ap_masks]
    vals = []
    for s_raw, c in zip(saliency_rasters, ap_masks):
        s = saliency_mask(s_raw)
        c = np.asarray(c, dtype=bool)
        if s.shape != c.shape:
            raise ValueError("saliency raster and AP mask sizes differ")
        ns = np.count_nonzero(s)
        if ns == 0:
            warnings.warn("empty saliency mask after thresholding; image skipped")
            continue
        vals.append(100.0 * np.count_nonzero(s & c) / ns)
    if not vals:
        raise ValueError("no image with a non-empty saliency mask")
    return float(np.mean(vals))


def write_report(path, rows) -> None:
    """``rows``: (model, cam_method, strategy, T, metric, value, n_images) tuples."""
    out = []
    for model, cam_method, strategy, t, metric, value, n in rows:
        out.append([model, cam_method, strategy, "" if t is None else f"{t:g}", metric, fmt(value), n])
    write_csv(path, REPORT_HEADER, out)
