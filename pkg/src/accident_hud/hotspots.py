"""Accident hotspot identification.

Collision records are clustered with DBSCAN in raw degree space (epsilon in
degrees of lat/lon). Proximity queries for the vehicle use great-circle
distance in meters.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.cluster import DBSCAN
from sklearn.neighbors import NearestNeighbors

from ._io import atomic_write_text, fmt, read_csv_dicts, write_csv

NOISE = -1
EARTH_RADIUS_M = 6_371_008.8


@dataclass(frozen=True)
class AccidentRecord:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError(f"non-finite coordinate: ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude out of range: {self.lon}")


@dataclass(frozen=True)
class DbscanParams:
    epsilon: float = 0.0003
    min_points: int = 50

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.min_points < 1:
            raise ValueError("min_points must be >= 1")


@dataclass
class ClusterLabeling:
    labels: np.ndarray

    @property
    def n_clusters(self) -> int:
        lab = self.labels[self.labels != NOISE]
        return int(np.unique(lab).size)

    @property
    def n_noise(self) -> int:
        return int(np.sum(self.labels == NOISE))


@dataclass(frozen=True)
class Hotspot:
    id: int
    lat: float
    lon: float
    member_count: int

    @property
    def centroid(self) -> tuple[float, float]:
        return (self.lat, self.lon)


@dataclass
class KDistanceCurve:
    k: int
    distances: np.ndarray
    # suggested epsilon position; None when the curve has no curvature peak
    knee_index: Optional[int] = None

    @property
    def knee_distance(self) -> Optional[float]:
        if self.knee_index is None:
            return None
        return float(self.distances[self.knee_index])


def as_coords(records) -> np.ndarray:
    """Accept AccidentRecords, (lat, lon) pairs or an (N, 2) array."""
    if isinstance(records, np.ndarray):
        coords = np.asarray(records, dtype=float).reshape(-1, 2)
    else:
        rows = [(r.lat, r.lon) if isinstance(r, AccidentRecord) else tuple(r) for r in records]
        coords = np.asarray(rows, dtype=float).reshape(-1, 2)
    if not np.all(np.isfinite(coords)):
        raise ValueError("records contain non-finite coordinates")
    return coords


def dbscan(records, params: DbscanParams = DbscanParams()) -> ClusterLabeling:
    """Label each record with a cluster id or NOISE.

    Euclidean distance in degree space, neighborhoods inclusive of epsilon and
    of the point itself. Cluster ids follow the index of the first core point
    reached; a border point reachable from several clusters joins the one with
    the lowest id.
    """
    coords = as_coords(records)
    if len(coords) == 0:
        return ClusterLabeling(np.empty(0, dtype=int))
    model = DBSCAN(eps=params.epsilon, min_samples=params.min_points, metric="euclidean")
    labels = model.fit_predict(coords)
    return ClusterLabeling(np.asarray(labels, dtype=int))


def k_distance_curve(records, k: int) -> KDistanceCurve:
    coords = as_coords(records)
    n = len(coords)
    if k < 1 or k >= n:
        raise ValueError(f"k must satisfy 1 <= k < N (k={k}, N={n})")
    nn = NearestNeighbors(n_neighbors=k + 1).fit(coords)
    dist, _ = nn.kneighbors(coords)
    # column 0 is the query point itself
    curve = np.sort(dist[:, k])
    return KDistanceCurve(k=k, distances=curve, knee_index=knee_index(curve))


def knee_index(curve: np.ndarray, rtol: float = 1e-9) -> Optional[int]:
    """Index of the largest positive second difference of a sorted curve."""
    curve = np.asarray(curve, dtype=float)
    if curve.size < 3:
        return None
    d2 = curve[:-2] - 2.0 * curve[1:-1] + curve[2:]
    scale = max(abs(curve[-1]), abs(curve[0]), 1e-300)
    best = int(np.argmax(d2))
    if d2[best] <= rtol * scale:
        return None
    return best + 1


def hotspots_from_labeling(records, labeling: ClusterLabeling) -> list[Hotspot]:
    coords = as_coords(records)
    labels = np.asarray(labeling.labels)
    if labels.shape[0] != coords.shape[0]:
        raise ValueError("labeling does not cover all records")
    out = []
    for cid in np.unique(labels[labels != NOISE]):
        members = coords[labels == cid]
        lat, lon = members.mean(axis=0)
        out.append(Hotspot(id=int(cid), lat=float(lat), lon=float(lon), member_count=len(members)))
    return out


def haversine_m(lat1, lon1, lat2, lon2):
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def hotspot_distances(position, hotspots: Sequence[Hotspot]) -> np.ndarray:
    if not hotspots:
        return np.empty(0)
    lat = np.array([h.lat for h in hotspots])
    lon = np.array([h.lon for h in hotspots])
    return haversine_m(position[0], position[1], lat, lon)


def within_range(position, hotspots: Sequence[Hotspot], radius_m: float = 200.0) -> list[Hotspot]:
    """Hotspots whose centroid is at most ``radius_m`` meters away (inclusive)."""
    if not radius_m > 0:
        raise ValueError("radius_m must be > 0")
    d = hotspot_distances(position, hotspots)
    return [h for h, di in zip(hotspots, d) if di <= radius_m]


# -- file formats ----------------------------------------------------------

def load_records_csv(path) -> np.ndarray:
    """Read ``latitude,longitude`` columns; rows with blank coordinates are dropped."""
    rows = read_csv_dicts(path)
    if rows and not {"latitude", "longitude"} <= set(rows[0]):
        raise ValueError(f"{path}: needs 'latitude' and 'longitude' columns")
    pts = []
    for r in rows:
        la, lo = r["latitude"].strip(), r["longitude"].strip()
        if not la or not lo:
            continue
        pts.append((float(la), float(lo)))
    return as_coords(pts)


def write_hotspots_csv(path, hotspots: Sequence[Hotspot]) -> None:
    write_csv(path, ["id", "lat", "lon", "count"],
              [[h.id, fmt(h.lat), fmt(h.lon), h.member_count] for h in hotspots])


def read_hotspots_csv(path) -> list[Hotspot]:
    return [Hotspot(int(r["id"]), float(r["lat"]), float(r["lon"]), int(r["count"]))
            for r in read_csv_dicts(path)]


def hotspots_geojson(hotspots: Sequence[Hotspot]) -> dict:
    return {
        "type": "FeatureCollection",
        "features": [
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [h.lon, h.lat]},
                "properties": {"id": h.id, "count": h.member_count},
            }
            for h in hotspots
        ],
    }


def write_hotspots_geojson(path, hotspots: Sequence[Hotspot]) -> None:
    atomic_write_text(path, json.dumps(hotspots_geojson(hotspots), indent=1) + "\n")
