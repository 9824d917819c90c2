"""Switch between cruise and AP-feature detection as the vehicle nears hotspots."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._io import fmt, read_csv_dicts, write_csv
from .hotspots import Hotspot, hotspot_distances

CRUISE, AP_DETECTION = "cruise", "ap_detection"


@dataclass(frozen=True)
class GpsSample:
    timestamp: float
    lat: float
    lon: float


@dataclass(frozen=True)
class ModeEvent:
    timestamp: float
    lat: float
    lon: float
    mode: str
    hotspot_id: Optional[int] = None


def monitor(trace: Sequence[GpsSample], hotspots: Sequence[Hotspot], radius_m: float = 200.0,
            hysteresis_m: float = 0.0) -> list[ModeEvent]:
    """Evaluate every sample; enter detection at <= radius_m, leave at > radius_m + hysteresis_m."""
    stamps = [s.timestamp for s in trace]
    if any(b < a for a, b in zip(stamps, stamps[1:])):
        raise ValueError("GPS trace is not time-ordered")
    if not radius_m > 0 or hysteresis_m < 0:
        raise ValueError("radius must be positive and hysteresis non-negative")
    events, mode = [], CRUISE
    for s in trace:
        d = hotspot_distances((s.lat, s.lon), hotspots)
        if d.size == 0:
            nearest, dmin = None, np.inf
        else:
            i = int(np.argmin(d))
            nearest, dmin = hotspots[i].id, float(d[i])
        if mode == CRUISE and dmin <= radius_m:
            mode = AP_DETECTION
            events.append(ModeEvent(s.timestamp, s.lat, s.lon, mode, nearest))
        elif mode == AP_DETECTION and dmin > radius_m + hysteresis_m:
            mode = CRUISE
            events.append(ModeEvent(s.timestamp, s.lat, s.lon, mode, None))
    return events


def read_trace(path) -> list[GpsSample]:
    return [GpsSample(float(r["timestamp"]), float(r["lat"]), float(r["lon"])) for r in read_csv_dicts(path)]


def write_events(path, events: Sequence[ModeEvent]) -> None:
    write_csv(path, ["timestamp", "lat", "lon", "mode", "hotspot_id"],
              [[fmt(e.timestamp), fmt(e.lat), fmt(e.lon), e.mode, "" if e.hotspot_id is None else e.hotspot_id]
               for e in events])
