"""Street-view acquisition: request planning, fetching with a content cache,
dataset manifests and model-input preprocessing."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import cv2
import numpy as np
from PIL import Image

from ._io import atomic_write_bytes, atomic_write_text

log = logging.getLogger(__name__)

HEADING_OFFSETS = (60.0, -60.0)
RAW_SIZE = 640
MODEL_SIZE = 224
LABELS = ("hotspot", "non_hotspot")
SPLITS = ("train", "test", "val")
STREETVIEW_URL = "https://maps.googleapis.com/maps/api/streetview"
METADATA_URL = STREETVIEW_URL + "/metadata"


@dataclass(frozen=True)
class ImageRequest:
    lat: float
    lon: float
    heading_offset: float
    label: str
    size: int = RAW_SIZE
    fov: Optional[float] = None  # None leaves the API default
    base_heading: float = 0.0

    @property
    def heading(self) -> float:
        return (self.base_heading + self.heading_offset) % 360.0

    def params(self) -> dict:
        p = {
            "location": f"{self.lat:.7f},{self.lon:.7f}",
            "heading": f"{self.heading:g}",
            "size": f"{self.size}x{self.size}",
        }
        if self.fov is not None:
            p["fov"] = f"{self.fov:g}"
        return p


@dataclass
class SceneImage:
    pixels: np.ndarray
    request: ImageRequest
    data: bytes = field(repr=False)
    pano_id: Optional[str] = None

    @property
    def label(self) -> str:
        return self.request.label


@dataclass(frozen=True)
class Skipped:
    request: ImageRequest
    reason: str


class FetchError(RuntimeError):
    """HTTP or quota failure; safe to retry with the same request."""

    def __init__(self, message: str, request: ImageRequest, retryable: bool = True):
        super().__init__(f"{message} (request={request})")
        self.request = request
        self.retryable = retryable


@dataclass
class ManifestEntry:
    path: str
    label: str
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def to_json(self) -> str:
        return json.dumps([e.__dict__ for e in self.entries], indent=1) + "\n"

    def save(self, path) -> None:
        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path, check_paths: bool = True) -> "DatasetManifest":
        raw = json.loads(Path(path).read_text())
        entries = [ManifestEntry(d["path"], d["label"], d["split"]) for d in raw]
        for e in entries:
            if e.label not in LABELS or e.split not in SPLITS:
                raise ValueError(f"bad manifest entry: {e}")
            if check_paths and not Path(e.path).exists():
                raise FileNotFoundError(e.path)
        return cls(entries)


def plan_requests(locations, fov: Optional[float] = None, base_heading: float = 0.0) -> list[ImageRequest]:
    """Two requests per (lat, lon, label) location, +60 then -60 degrees."""
    return [
        ImageRequest(float(lat), float(lon), off, label, fov=fov, base_heading=base_heading)
        for lat, lon, label in locations
        for off in HEADING_OFFSETS
    ]


def decode_image(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"))


# -- clients ---------------------------------------------------------------

class MockClient:
    """Serves images from a fixture directory.

    Files are named ``<lat>_<lon>_<heading>.png`` (see :func:`fixture_name`).
    An optional ``panoramas.json`` maps ``"<lat>_<lon>"`` to a panorama id so
    nearby locations can share a panorama, as the live service does.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.calls = 0
        idx = self.root / "panoramas.json"
        self._panos = json.loads(idx.read_text()) if idx.exists() else {}

    def _path(self, req: ImageRequest) -> Optional[Path]:
        for ext in (".png", ".jpg"):
            p = self.root / (fixture_name(req.lat, req.lon, req.heading) + ext)
            if p.exists():
                return p
        return None

    def panorama_id(self, req: ImageRequest) -> Optional[str]:
        if self._path(req) is None:
            return None
        key = f"{req.lat:.6f}_{req.lon:.6f}"
        return self._panos.get(key, f"mock-{key}")

    def image_bytes(self, req: ImageRequest, pano_id: str) -> bytes:
        self.calls += 1
        p = self._path(req)
        if p is None:
            raise FetchError("fixture missing", req, retryable=False)
        return p.read_bytes()


class StreetViewClient:
    """Live Street View Static API client. Metadata lookups are not billed."""

    def __init__(self, api_key: str, timeout: float = 30.0, session=None):
        import requests

        self.api_key = api_key
        self.timeout = timeout
        self.session = session or requests.Session()
        self.calls = 0

    def panorama_id(self, req: ImageRequest) -> Optional[str]:
        params = {"location": req.params()["location"], "key": self.api_key}
        try:
            r = self.session.get(METADATA_URL, params=params, timeout=self.timeout)
        except OSError as exc:
            raise FetchError(f"metadata request failed: {exc}", req) from exc
        if r.status_code != 200:
            raise FetchError(f"metadata HTTP {r.status_code}", req)
        meta = r.json()
        status = meta.get("status")
        if status == "OK":
            return meta["pano_id"]
        if status in ("ZERO_RESULTS", "NOT_FOUND"):
            return None
        raise FetchError(f"metadata status {status}", req, retryable=status == "OVER_QUERY_LIMIT")

    def image_bytes(self, req: ImageRequest, pano_id: str) -> bytes:
        params = dict(req.params(), key=self.api_key)
        # pin the panorama so the cache key and the served image agree
        params.pop("location")
        params["pano"] = pano_id
        self.calls += 1
        try:
            r = self.session.get(STREETVIEW_URL, params=params, timeout=self.timeout)
        except OSError as exc:
            raise FetchError(f"image request failed: {exc}", req) from exc
        if r.status_code != 200:
            raise FetchError(f"image HTTP {r.status_code}", req, retryable=r.status_code in (429, 500, 503))
        return r.content


def fixture_name(lat: float, lon: float, heading: float) -> str:
    return f"{lat:.6f}_{lon:.6f}_{heading:.1f}"


# -- cache + fetch ---------------------------------------------------------

class ImageCache:
    """Content-addressed store keyed by the hash of (panorama, view parameters)."""

    def __init__(self, root):
        self.root = Path(root)

    @staticmethod
    def key(pano_id: str, req: ImageRequest) -> str:
        ident = json.dumps([pano_id, req.heading, req.size, req.fov], sort_keys=True)
        return hashlib.sha256(ident.encode()).hexdigest()

    def path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.img"

    def get(self, key: str) -> Optional[bytes]:
        p = self.path(key)
        return p.read_bytes() if p.exists() else None

    def put(self, key: str, data: bytes) -> None:
        atomic_write_bytes(self.path(key), data)


def fetch(req: ImageRequest, client, cache: ImageCache) -> Union[SceneImage, Skipped]:
    pano = client.panorama_id(req)
    if pano is None:
        return Skipped(req, "no panorama at location")
    key = cache.key(pano, req)
    data = cache.get(key)
    if data is None:
        data = client.image_bytes(req, pano)
        cache.put(key, data)
    pixels = decode_image(data)
    if pixels.shape[:2] != (req.size, req.size):
        raise FetchError(f"unexpected image size {pixels.shape[:2]}", req, retryable=False)
    return SceneImage(pixels=pixels, request=req, data=data, pano_id=pano)


class TokenBucket:
    def __init__(self, rate: float, burst: int = 1):
        self.rate = rate
        self.capacity = max(1, burst)
        self.tokens = float(self.capacity)
        self.stamp = time.monotonic()
        self.lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self.lock:
                now = time.monotonic()
                self.tokens = min(self.capacity, self.tokens + (now - self.stamp) * self.rate)
                self.stamp = now
                if self.tokens >= 1:
                    self.tokens -= 1
                    return
                wait = (1 - self.tokens) / self.rate
            time.sleep(wait)


def fetch_all(requests_: Sequence[ImageRequest], client, cache: ImageCache,
              workers: int = 4, rate_per_s: Optional[float] = None, retries: int = 2):
    """Fetch every request; results come back in request order."""
    bucket = TokenBucket(rate_per_s, burst=workers) if rate_per_s else None

    def one(req):
        for attempt in range(retries + 1):
            if bucket:
                bucket.acquire()
            try:
                return fetch(req, client, cache)
            except FetchError as exc:
                if not exc.retryable or attempt == retries:
                    raise
                log.warning("retrying %s after %s", req, exc)
                time.sleep(0.5 * 2 ** attempt)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(one, requests_))


# -- manifest --------------------------------------------------------------

def _split_sizes(n: int, fracs: Sequence[float]) -> list[int]:
    raw = [f * n for f in fracs]
    sizes = [int(np.floor(r)) for r in raw]
    rem = n - sum(sizes)
    order = sorted(range(len(fracs)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:rem]:
        sizes[i] += 1
    return sizes


def build_manifest(images: Sequence[tuple[str, str]], split_fracs=(0.7, 0.2, 0.1), seed: int = 0) -> DatasetManifest:
    """Seeded, stratified train/test/val partition of ``(path, label)`` pairs.

    Each class is shuffled, the classes are interleaved in proportion to
    their sizes, and the interleaved sequence is cut into contiguous splits.
    That keeps every split's class mix within one item of the global mix.
    """
    if not images:
        raise ValueError("no images to partition")
    if abs(sum(split_fracs) - 1.0) > 1e-9 or len(split_fracs) != 3:
        raise ValueError("split fractions must be three values summing to 1")
    rng = np.random.default_rng(seed)
    by_label: dict[str, list[str]] = {}
    for path, label in images:
        by_label.setdefault(label, []).append(path)
    keyed = []
    for label in sorted(by_label):
        paths = sorted(by_label[label])
        perm = rng.permutation(len(paths))
        n = len(paths)
        for rank, j in enumerate(perm):
            keyed.append(((rank + 0.5) / n, label, paths[j]))
    keyed.sort(key=lambda t: (t[0], t[1]))
    sizes = _split_sizes(len(keyed), split_fracs)
    entries, start = [], 0
    for name, size in zip(SPLITS, sizes):
        for _, label, path in keyed[start:start + size]:
            entries.append(ManifestEntry(path, label, name))
        start += size
    return DatasetManifest(entries)


# -- preprocessing ---------------------------------------------------------

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def preprocess(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD, size: int = MODEL_SIZE) -> np.ndarray:
    """8-bit HxWx3 raster -> float32 size x size x 3, scaled to [0, 1] then standardized."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 raster, got {img.shape}")
    x = img.astype(np.float32) / 255.0
    x = cv2.resize(x, (size, size), interpolation=cv2.INTER_LINEAR)
    return (x - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))
