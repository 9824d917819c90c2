"""Windshield notification geometry.

Reference frame: right-handed, meters, X to the driver's right, Y down,
Z forward (the camera convention, so pixel offsets map to positive angles
right and down). The windshield is an L x h rectangle whose lower edge runs
from ``mount`` along +X; it rises toward the driver at tilt ``phi`` from the
horizontal X-Z plane, so its up-edge direction is (0, -sin phi, -cos phi).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._io import fmt, write_csv


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class WindshieldGeometry:
    width: float
    height: float
    tilt: float
    mount: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise GeometryError("windshield width and height must be positive")
        if not 0 < self.tilt < math.pi:
            raise GeometryError("tilt must lie in (0, pi)")

    @property
    def origin(self) -> np.ndarray:
        return np.asarray(self.mount, dtype=float)

    @property
    def u_axis(self) -> np.ndarray:
        return np.array([1.0, 0.0, 0.0])

    @property
    def v_axis(self) -> np.ndarray:
        return np.array([0.0, -math.sin(self.tilt), -math.cos(self.tilt)])

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u_axis, self.v_axis)

    @property
    def offset(self) -> float:
        """``c`` in the plane equation ``normal . P = c``."""
        return float(self.normal @ self.origin)

    def corners(self) -> np.ndarray:
        o, u, v = self.origin, self.u_axis * self.width, self.v_axis * self.height
        return np.array([o, o + u, o + u + v, o + v])

    def plane_coords(self, p) -> tuple[float, float]:
        d = np.asarray(p, dtype=float) - self.origin
        return float(d @ self.u_axis), float(d @ self.v_axis)


@dataclass(frozen=True)
class PoiBearing:
    alpha_x: float
    alpha_y: float

    def __post_init__(self):
        if not (abs(self.alpha_x) < math.pi / 2 and abs(self.alpha_y) < math.pi / 2):
            raise GeometryError("bearing angles must satisfy |alpha| < pi/2")

    def direction(self) -> np.ndarray:
        return np.array([math.tan(self.alpha_x), math.tan(self.alpha_y), 1.0])


@dataclass(frozen=True)
class PatchPoint:
    x: float
    y: float
    z: float
    s: float
    t: float
    inside_bounds: bool

    @property
    def xyz(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass(frozen=True)
class RigidTransform:
    """Camera-to-reference transform; identity when camera and head sensor coincide."""

    rotation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def apply_direction(self, d: np.ndarray) -> np.ndarray:
        return np.asarray(self.rotation, dtype=float) @ d


IDENTITY = RigidTransform()


def patch_point(geometry: WindshieldGeometry, forehead, bearing: PoiBearing,
                camera: RigidTransform = IDENTITY, eps: float = 1e-12) -> PatchPoint:
    """Intersection of the ray from the forehead along the POI bearing with the windshield plane."""
    d0 = np.asarray(forehead, dtype=float)
    if d0.shape != (3,) or not np.all(np.isfinite(d0)):
        raise GeometryError(f"forehead must be a finite 3-vector, got {forehead!r}")
    ray = camera.apply_direction(bearing.direction())
    n = geometry.normal
    denom = float(n @ ray)
    if abs(denom) < eps * np.linalg.norm(ray):
        raise GeometryError("ray is parallel to the windshield plane; no intersection")
    lam = (geometry.offset - float(n @ d0)) / denom
    if lam < 0:
        raise GeometryError("windshield plane lies behind the driver along this bearing")
    p = d0 + lam * ray
    s, t = geometry.plane_coords(p)
    inside = 0.0 <= s <= geometry.width and 0.0 <= t <= geometry.height
    return PatchPoint(float(p[0]), float(p[1]), float(p[2]), s, t, inside)


@dataclass(frozen=True)
class CameraIntrinsics:
    fov_x: float
    fov_y: float
    width_px: int
    height_px: int


def bearing_from_pixel(cam: CameraIntrinsics, centroid_px) -> PoiBearing:
    """Pinhole bearing of a pixel; the principal point is the image center."""
    u, v = centroid_px
    if not (0 <= u <= cam.width_px and 0 <= v <= cam.height_px):
        raise GeometryError(f"centroid {centroid_px} lies outside the raster")
    half_w, half_h = cam.width_px / 2.0, cam.height_px / 2.0
    ax = math.atan((u - half_w) / half_w * math.tan(cam.fov_x / 2.0))
    ay = math.atan((v - half_h) / half_h * math.tan(cam.fov_y / 2.0))
    return PoiBearing(ax, ay)


# -- homography ------------------------------------------------------------

@dataclass
class Homography:
    matrix: np.ndarray
    rms: float = 0.0

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise GeometryError("homography must be 3x3")
        if abs(np.linalg.det(m)) < 1e-12 * max(1.0, np.abs(m).max() ** 3):
            raise GeometryError("homography is singular")
        if m[2, 2] != 0:
            m = m / m[2, 2]
        self.matrix = m

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))


def apply_homography(h, pts) -> np.ndarray:
    """Map one (x, y) point or an (N, 2) array through ``h``."""
    m = h.matrix if isinstance(h, Homography) else np.asarray(h, dtype=float)
    p = np.asarray(pts, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    hom = np.column_stack([p, np.ones(len(p))]) @ m.T
    w = hom[:, 2]
    if np.any(np.abs(w) < 1e-15):
        raise GeometryError("point maps to infinity (zero homogeneous coordinate)")
    out = hom[:, :2] / w[:, None]
    return out[0] if single else out


def _normalizer(p: np.ndarray) -> np.ndarray:
    c = p.mean(axis=0)
    scale = math.sqrt(2.0) / max(np.mean(np.linalg.norm(p - c, axis=1)), 1e-300)
    return np.array([[scale, 0, -scale * c[0]], [0, scale, -scale * c[1]], [0, 0, 1.0]])


def _collinear(a, b, c, tol=1e-9) -> bool:
    area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    span = max(np.ptp(np.array([a, b, c]), axis=0).max(), 1e-300)
    return abs(area) <= tol * span * span


def estimate_homography(src, dst) -> Homography:
    """Normalized direct linear transform over >= 4 correspondences (least squares)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise GeometryError("src and dst must be matching (N, 2) arrays")
    n = len(src)
    if n < 4:
        raise GeometryError("need at least 4 correspondences")
    if n == 4:
        for i in range(4):
            tri = [src[j] for j in range(4) if j != i]
            if _collinear(*tri):
                raise GeometryError("three source points are collinear")
    ts, td = _normalizer(src), _normalizer(dst)
    s = (np.column_stack([src, np.ones(n)]) @ ts.T)[:, :2]
    d = (np.column_stack([dst, np.ones(n)]) @ td.T)[:, :2]
    a = np.zeros((2 * n, 9))
    for i, ((x, y), (u, v)) in enumerate(zip(s, d)):
        a[2 * i] = [-x, -y, -1, 0, 0, 0, u * x, u * y, u]
        a[2 * i + 1] = [0, 0, 0, -x, -y, -1, v * x, v * y, v]
    _, sv, vt = np.linalg.svd(a)
    if sv[7] < 1e-10 * sv[0]:
        raise GeometryError("degenerate correspondence configuration")
    hn = vt[-1].reshape(3, 3)
    m = np.linalg.inv(td) @ hn @ ts
    h = Homography(m)
    h.rms = reprojection_rms(h, src, dst)
    return h


def reprojection_rms(h: Homography, src, dst) -> float:
    r = apply_homography(h, np.asarray(src, float)) - np.asarray(dst, float)
    return float(np.sqrt(np.mean(np.sum(r ** 2, axis=1))))


# -- simulation ------------------------------------------------------------

SCENARIOS = ("fixed_head_moving_poi", "moving_head_fixed_poi", "both_moving")


@dataclass
class SimulationConfig:
    geometry: WindshieldGeometry
    foreheads: list = field(default_factory=list)
    bearings: list = field(default_factory=list)
    homography: Optional[Homography] = None
    camera: RigidTransform = IDENTITY


@dataclass(frozen=True)
class SimStep:
    step: int
    point: PatchPoint
    projector_xy: Optional[tuple] = None


def simulate(scenario: str, config: SimulationConfig) -> list[SimStep]:
    """Patch point for every step of the scenario's forehead/bearing trajectory.

    The fixed quantity of a scenario is the first element of its list.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    heads, bears = list(config.foreheads), list(config.bearings)
    if scenario == "fixed_head_moving_poi":
        pairs = [(heads[0], b) for b in bears] if heads else []
    elif scenario == "moving_head_fixed_poi":
        pairs = [(d, bears[0]) for d in heads] if bears else []
    else:
        if len(heads) != len(bears):
            raise ValueError("both_moving needs forehead and bearing trajectories of equal length")
        pairs = list(zip(heads, bears))
    out = []
    for i, (d, b) in enumerate(pairs):
        p = patch_point(config.geometry, d, b, config.camera)
        proj = None
        if config.homography is not None:
            proj = tuple(apply_homography(config.homography, (p.s, p.t)).tolist())
        out.append(SimStep(i, p, proj))
    return out


def notifications(steps: Sequence[SimStep]) -> list[SimStep]:
    """Steps whose patch point falls on the windshield."""
    return [s for s in steps if s.point.inside_bounds]


def write_trajectory(path, steps: Sequence[SimStep]) -> None:
    write_csv(path, ["step", "Xi", "Yi", "Zi", "inside"],
              [[s.step, fmt(s.point.x), fmt(s.point.y), fmt(s.point.z), int(s.point.inside_bounds)] for s in steps])


def write_plot_data(path, steps: Sequence[SimStep]) -> None:
    """Windshield-frame (s along width, t up the glass) coordinates for plotting."""
    rows = []
    for s in steps:
        px = s.projector_xy or ("", "")
        rows.append([s.step, fmt(s.point.s), fmt(s.point.t), int(s.point.inside_bounds),
                     *(fmt(v) if v != "" else "" for v in px)])
    write_csv(path, ["step", "s", "t", "inside", "proj_x", "proj_y"], rows)


def load_simulation(cfg: dict) -> tuple[str, SimulationConfig]:
    """Build a scenario from a plain mapping (as read from YAML/JSON)."""
    g = cfg["geometry"]
    geometry = WindshieldGeometry(float(g["width"]), float(g["height"]), float(g["tilt"]),
                                  tuple(float(v) for v in g.get("mount", (0.0, 0.0, 0.0))))
    heads = [tuple(float(v) for v in d) for d in _trajectory(cfg.get("foreheads", []), 3)]
    bears = [PoiBearing(float(a), float(b)) for a, b in _trajectory(cfg.get("bearings", []), 2)]
    hom = Homography(np.asarray(cfg["homography"], float)) if cfg.get("homography") is not None else None
    cam = RigidTransform(tuple(tuple(r) for r in cfg["camera_rotation"])) if cfg.get("camera_rotation") else IDENTITY
    return cfg["scenario"], SimulationConfig(geometry, heads, bears, hom, cam)


def _trajectory(spec, dim: int) -> list:
    """Explicit list of points, or ``{start, stop, steps}`` for a linear sweep."""
    if isinstance(spec, dict):
        a = np.asarray(spec["start"], float)
        b = np.asarray(spec["stop"], float)
        return [tuple(r) for r in np.linspace(a, b, int(spec["steps"])).reshape(-1, dim)]
    return [tuple(p) for p in spec]
