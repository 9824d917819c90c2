"""Synthetic collision records and street scenes for desk-scale runs."""
from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np
import yaml
from PIL import Image

from ._io import write_csv
from .hotspots import NOISE, DbscanParams, dbscan, hotspots_from_labeling, load_records_csv
from .imagery import HEADING_OFFSETS, fixture_name


def collisions(n_hotspots: int = 6, per_hotspot: int = 60, n_scattered: int = 200,
               center=(40.72, -73.98), spread_deg: float = 0.05, seed: int = 0) -> np.ndarray:
    """Tight accident clusters inside a uniformly scattered background, as (lat, lon) rows."""
    rng = np.random.default_rng(seed)
    c = np.asarray(center, float)
    sites = c + rng.uniform(-spread_deg, spread_deg, size=(n_hotspots, 2))
    pts = [site + rng.normal(0.0, 0.00004, size=(per_hotspot, 2)) for site in sites]
    pts.append(c + rng.uniform(-spread_deg, spread_deg, size=(n_scattered, 2)))
    out = np.vstack(pts)
    return out[rng.permutation(len(out))]


def write_collisions_csv(path, coords: np.ndarray) -> None:
    write_csv(path, ["crash_date", "latitude", "longitude"],
              [["2020-01-01", f"{la:.7f}", f"{lo:.7f}"] for la, lo in coords])


def street_scene(hotspot: bool, size: int = 640, seed: int = 0) -> np.ndarray:
    """A road receding to the horizon; hotspot scenes carry a crossing and a bright obstacle."""
    rng = np.random.default_rng(seed)
    img = np.empty((size, size, 3), np.uint8)
    horizon = int(size * 0.45)
    img[:horizon] = (135, 170, 210)
    img[horizon:] = (70, 120, 60)
    s = size / 640.0
    road = np.array([[size * 0.45, horizon], [size * 0.55, horizon], [size * 0.95, size], [size * 0.05, size]], np.int32)
    cv2.fillPoly(img, [road], (90, 90, 90))
    bx = int(rng.integers(0, size // 3))
    cv2.rectangle(img, (bx, int(80 * s)), (bx + int(120 * s), horizon), (150, 140, 130), -1)
    if hotspot:
        y0 = int(size * 0.75)
        for k in range(8):
            x = int(size * 0.12 + k * size * 0.1)
            cv2.rectangle(img, (x, y0), (x + int(40 * s), y0 + int(30 * s)), (240, 240, 240), -1)
        cx = int(rng.integers(size // 3, 2 * size // 3))
        cv2.circle(img, (cx, int(size * 0.62)), int(35 * s), (230, 40, 30), -1)
    noise = rng.normal(0.0, 6.0, img.shape)
    return np.clip(img + noise, 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path, format="PNG")


def mock_fixture_dir(root, locations, size: int = 640, base_heading: float = 0.0) -> Path:
    """Fixture images for every (lat, lon, label) location and both headings."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, (lat, lon, label) in enumerate(locations):
        for j, off in enumerate(HEADING_OFFSETS):
            heading = (base_heading + off) % 360.0
            img = street_scene(label == "hotspot", size, seed=1000 * i + j)
            write_png(root / (fixture_name(lat, lon, heading) + ".png"), img)
    return root


def separable_images(n: int = 200, size: int = 224, seed: int = 0) -> list[tuple[np.ndarray, str]]:
    """Linearly separable two-class set: hotspot images have a bright lower band, others a dark one."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = "hotspot" if i % 2 == 0 else "non_hotspot"
        img = rng.normal(110.0, 25.0, size=(size, size, 3))
        img[size // 2:] += 90.0 if label == "hotspot" else -70.0
        out.append((np.clip(img, 0, 255).astype(np.uint8), label))
    return out


def fixture_workspace(root, seed: int = 0, size: int = 640, epochs: int = 2, n_hotspots: int = 4,
                      n_scattered: int = 40, methods=("gradcam", "gradcampp", "scorecam")) -> Path:
    """Collision CSV, mock Street View fixtures and a run config for an offline end-to-end run.

    Fixtures cover every hotspot centroid and every noise location, so the
    fetch step never misses whichever negatives it samples. Returns the
    config path; the run writes into ``root/run``.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_collisions_csv(root / "collisions.csv", collisions(n_hotspots, 60, n_scattered, seed=seed))
    coords = load_records_csv(root / "collisions.csv")
    labeling = dbscan(coords, DbscanParams())
    spots = hotspots_from_labeling(coords, labeling)
    locs = [(h.lat, h.lon, "hotspot") for h in spots]
    locs += [(float(a), float(b), "non_hotspot") for a, b in coords[labeling.labels == NOISE]]
    mock_fixture_dir(root / "mock", locs, size)
    cfg = {
        "workdir": str(root / "run"),
        "seed": seed,
        "cluster": {"input_csv": str(root / "collisions.csv")},
        "fetch": {"mock_dir": str(root / "mock"), "workers": 1},
        "train": {"epochs": epochs, "batch_size": 4},
        "explain": {"methods": list(methods), "road_thresholds": [25, 20, 40, 60, 80]},
    }
    path = root / "config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path
