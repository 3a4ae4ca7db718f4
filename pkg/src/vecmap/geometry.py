"""Planar poses, polylines, resampling, clipping and Chamfer distance.

Everything here works on float64 numpy arrays of shape (N, 2) in meters.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    """Invalid geometry (zero length, too few points, ...)."""


class Category(enum.IntEnum):
    DIVIDER = 0
    PED_CROSSING = 1
    BOUNDARY = 2

    @classmethod
    def parse(cls, value) -> "Category":
        if isinstance(value, Category):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown category {value!r}") from None
        try:
            return cls(int(value))
        except ValueError:
            raise ValueError(f"unknown category {value!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


NUM_CLASSES = len(Category)


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.remainder(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


@dataclass(frozen=True)
class Pose2:
    """Ego pose in a global planar frame."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def compose(self, other: "Pose2") -> "Pose2":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)

    def apply(self, points) -> np.ndarray:
        """Map points from this pose's local frame into the parent frame."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = np.empty_like(pts)
        out[:, 0] = c * pts[:, 0] - s * pts[:, 1] + self.x
        out[:, 1] = s * pts[:, 0] + c * pts[:, 1] + self.y
        return out

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "yaw": self.yaw}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose2":
        return cls(d["x"], d["y"], d["yaw"])


def transform_points(points, src: Pose2, dst: Pose2) -> np.ndarray:
    """Re-express points given in the ``src`` ego frame in the ``dst`` ego frame."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if src == dst:
        return pts.copy()
    # dst^-1 o src, applied in two rigid steps to keep rounding symmetric
    world = src.apply(pts)
    c, s = math.cos(dst.yaw), math.sin(dst.yaw)
    dx = world[:, 0] - dst.x
    dy = world[:, 1] - dst.y
    out = np.empty_like(pts)
    out[:, 0] = c * dx + s * dy
    out[:, 1] = -s * dx + c * dy
    return out


@dataclass(frozen=True)
class PerceptionRange:
    x_front: float = 30.0
    x_rear: float = 30.0
    y_left: float = 15.0
    y_right: float = 15.0

    def __post_init__(self):
        for name in ("x_front", "x_rear", "y_left", "y_right"):
            if not getattr(self, name) > 0:
                raise ValueError(f"perception range {name} must be > 0")

    @property
    def x_min(self) -> float:
        return -self.x_rear

    @property
    def x_max(self) -> float:
        return self.x_front

    @property
    def y_min(self) -> float:
        return -self.y_right

    @property
    def y_max(self) -> float:
        return self.y_left

    @property
    def length(self) -> float:
        return self.x_front + self.x_rear

    @property
    def width(self) -> float:
        return self.y_left + self.y_right

    def contains(self, points, eps: float = 1e-9) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return (
            (pts[:, 0] >= self.x_min - eps)
            & (pts[:, 0] <= self.x_max + eps)
            & (pts[:, 1] >= self.y_min - eps)
            & (pts[:, 1] <= self.y_max + eps)
        )

    def normalize(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        lo = np.array([self.x_min, self.y_min])
        return (pts - lo) / np.array([self.length, self.width])

    def to_dict(self) -> dict:
        return {"x_front": self.x_front, "x_rear": self.x_rear,
                "y_left": self.y_left, "y_right": self.y_right}


@dataclass(frozen=True, eq=False)
class Polyline:
    """Ordered point list. Closed polylines keep their closure implicit."""

    points: np.ndarray
    closed: bool = False

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 2:
            raise GeometryError("a polyline needs at least 2 points")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "closed", bool(self.closed))

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Polyline):
            return NotImplemented
        return self.closed == other.closed and np.array_equal(self.points, other.points)

    def segments(self) -> np.ndarray:
        pts = self.points
        if self.closed:
            pts = np.vstack([pts, pts[:1]])
        return np.diff(pts, axis=0)

    def length(self) -> float:
        return float(np.linalg.norm(self.segments(), axis=1).sum())


@dataclass(frozen=True, eq=False)
class MapElement:
    category: Category
    geometry: Polyline
    confidence: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "category", Category.parse(self.category))
        conf = float(self.confidence)
        if not 0.0 <= conf <= 1.0:
            raise ValueError(f"confidence {conf} outside [0, 1]")
        object.__setattr__(self, "confidence", conf)

    @property
    def points(self) -> np.ndarray:
        return self.geometry.points

    @property
    def closed(self) -> bool:
        return self.geometry.closed

    def __eq__(self, other) -> bool:
        if not isinstance(other, MapElement):
            return NotImplemented
        return (self.category == other.category and self.confidence == other.confidence
                and self.geometry == other.geometry)

    def with_points(self, points) -> "MapElement":
        return MapElement(self.category, Polyline(points, self.closed), self.confidence)

    def to_dict(self) -> dict:
        return {
            "category": self.category.label,
            "confidence": self.confidence,
            "closed": self.closed,
            "points": self.points.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MapElement":
        return cls(Category.parse(d["category"]), Polyline(d["points"], d.get("closed", False)),
                   d.get("confidence", 1.0))


def is_closed_category(cat: Category) -> bool:
    return Category.parse(cat) == Category.PED_CROSSING


def resample_polyline(p: Polyline, n: int) -> Polyline:
    """Resample to ``n`` points at equal arc-length spacing.

    Open polylines keep both endpoints. Closed ones start at the first vertex
    and walk the closing edge too, so the spacing is perimeter / n.
    """
    if n < 2:
        raise GeometryError("resampling needs n >= 2")
    pts = p.points
    if p.closed:
        pts = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if not total > 1e-9:
        raise GeometryError("cannot resample a zero-length polyline")
    if p.closed:
        targets = np.arange(n) * (total / n)
    else:
        targets = np.linspace(0.0, total, n)
    # drop zero-length segments so interpolation is well defined
    keep = np.concatenate([[True], seg > 0])
    cum, pts = cum[keep], pts[keep]
    out = np.column_stack([np.interp(targets, cum, pts[:, 0]), np.interp(targets, cum, pts[:, 1])])
    if not p.closed:
        out[0], out[-1] = pts[0], pts[-1]
    return Polyline(out, p.closed)


def resample_element(e: MapElement, n: int) -> MapElement:
    return MapElement(e.category, resample_polyline(e.geometry, n), e.confidence)


def equivalent_permutations(e, closed: bool | None = None) -> np.ndarray:
    """All point orderings describing the same element, shape (P, N, 2).

    Accepts a MapElement / Polyline, or a raw (N, 2) array plus ``closed``.
    Index 0 is always the forward order. Open: [forward, reversed].
    Closed: the N cyclic shifts of the forward order, then of the reversed one.
    """
    if isinstance(e, (MapElement, Polyline)):
        pts, closed = e.points, e.closed
    else:
        pts = np.asarray(e, dtype=np.float64)
        closed = bool(closed)
    if not closed:
        return np.stack([pts, pts[::-1]])
    n = len(pts)
    idx = (np.arange(n)[None, :] + np.arange(n)[:, None]) % n
    rev = pts[::-1]
    return np.concatenate([pts[idx], rev[idx]])


def chamfer_distance(a, b) -> float:
    """Symmetric point-to-point Chamfer distance between two point sets."""
    pa = a.points if isinstance(a, (Polyline, MapElement)) else np.asarray(a, dtype=np.float64)
    pb = b.points if isinstance(b, (Polyline, MapElement)) else np.asarray(b, dtype=np.float64)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return float(0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean()))


# -- clipping against the perception rectangle --------------------------------

def _clip_segment(p0, p1, rng: PerceptionRange):
    """Liang-Barsky. Returns (t0, t1) of the visible part or None."""
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    t0, t1 = 0.0, 1.0
    for pk, qk in ((-dx, p0[0] - rng.x_min), (dx, rng.x_max - p0[0]),
                   (-dy, p0[1] - rng.y_min), (dy, rng.y_max - p0[1])):
        if pk == 0.0:
            if qk < 0.0:
                return None
            continue
        t = qk / pk
        if pk < 0.0:
            if t > t1:
                return None
            t0 = max(t0, t)
        else:
            if t < t0:
                return None
            t1 = min(t1, t)
    return t0, t1


def clip_open_polyline(points, rng: PerceptionRange) -> list[np.ndarray]:
    """Split an open polyline into the pieces lying inside the rectangle."""
    pts = np.asarray(points, dtype=np.float64)
    pieces: list[list[np.ndarray]] = []
    current: list[np.ndarray] = []
    for a, b in zip(pts[:-1], pts[1:]):
        res = _clip_segment(a, b, rng)
        if res is None:
            if current:
                pieces.append(current)
                current = []
            continue
        t0, t1 = res
        start = a if t0 == 0.0 else a + t0 * (b - a)
        end = b if t1 == 1.0 else a + t1 * (b - a)
        if current and (t0 > 0.0 or np.any(current[-1] != start)):
            pieces.append(current)
            current = []
        if not current:
            current = [start]
        current.append(end)
        if t1 < 1.0:
            pieces.append(current)
            current = []
    if current:
        pieces.append(current)
    out = []
    for piece in pieces:
        arr = np.array(piece)
        keep = np.concatenate([[True], np.linalg.norm(np.diff(arr, axis=0), axis=1) > 1e-9])
        arr = arr[keep]
        if len(arr) >= 2:
            out.append(arr)
    return out


def clip_polygon(points, rng: PerceptionRange) -> np.ndarray | None:
    """Sutherland-Hodgman clip of a closed polygon against the rectangle."""
    poly = [np.asarray(p, dtype=np.float64) for p in points]
    edges = (
        (0, rng.x_min, 1.0), (0, rng.x_max, -1.0),
        (1, rng.y_min, 1.0), (1, rng.y_max, -1.0),
    )
    for axis, bound, sign in edges:
        if not poly:
            break
        inside = [sign * (p[axis] - bound) >= 0.0 for p in poly]
        out = []
        for i in range(len(poly)):
            cur, prev = poly[i], poly[i - 1]
            cin, pin = inside[i], inside[i - 1]
            if cin != pin:
                t = (bound - prev[axis]) / (cur[axis] - prev[axis])
                x = prev + t * (cur - prev)
                x[axis] = bound
                out.append(x)
            if cin:
                out.append(cur)
        poly = out
    if len(poly) < 3:
        return None
    arr = np.array(poly)
    nxt = np.roll(arr, -1, axis=0)
    arr = arr[np.linalg.norm(nxt - arr, axis=1) > 1e-9]
    if len(arr) < 3:
        return None
    return arr

