"""Seeded synthetic road scenes: global vector maps, ego drives, rasters, occluders."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from skimage.draw import line as draw_line

from .geometry import (
    Category,
    GeometryError,
    MapElement,
    PerceptionRange,
    Polyline,
    Pose2,
    clip_open_polyline,
    clip_polygon,
    resample_polyline,
    transform_points,
)

MIN_ARC_LENGTH = 0.5
MASK_CHANNEL = 3
NUM_RASTER_CHANNELS = 4


class ConfigError(ValueError):
    pass


@dataclass
class OcclusionSpec:
    num_blobs: int = 3
    blob_radius: tuple[float, float] = (6.0, 10.0)
    persistence_frames: int = 1
    attach_to_ego: bool = True
    # lateral band (ego frame, meters) in which blob centers are drawn
    lateral_extent: float = 8.0

    def validate(self):
        lo, hi = self.blob_radius
        if self.num_blobs < 0:
            raise ConfigError("num_blobs must be >= 0")
        if not (0 < lo <= hi):
            raise ConfigError("blob_radius must be a positive ordered range")
        if self.persistence_frames < 1:
            raise ConfigError("persistence_frames must be >= 1")


@dataclass
class SceneSpec:
    seed: int = 0
    num_lanes: int = 3
    lane_spacing: float = 3.5
    road_length: float = 260.0
    crossing_density: float = 2.0
    curvature: float = 0.01
    trajectory_speed: float = 8.0
    frame_rate: float = 2.0
    num_frames: int = 20
    occlusion: OcclusionSpec = field(default_factory=OcclusionSpec)
    num_points: int = 10
    cell_size: float = 0.3
    perception_range: PerceptionRange = field(default_factory=PerceptionRange)

    def validate(self):
        for name in ("num_lanes", "num_frames", "num_points"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.num_points < 2:
            raise ConfigError("num_points must be >= 2")
        if self.frame_rate <= 0 or self.lane_spacing <= 0 or self.road_length <= 0:
            raise ConfigError("frame_rate, lane_spacing and road_length must be > 0")
        if self.trajectory_speed < 0 or self.crossing_density < 0 or self.curvature < 0:
            raise ConfigError("speed, crossing density and curvature must be >= 0")
        half = 0.5 * self.num_lanes * self.lane_spacing
        if self.curvature * (half + 1.0) >= 1.0:
            raise ConfigError("curvature too large: offset lanes would self-intersect")
        if self.start_s() + self.travel() + self.perception_range.x_front > self.road_length:
            raise ConfigError("road_length too short for the requested drive")
        self.occlusion.validate()
        grid_shape(self.perception_range, self.cell_size)

    def start_s(self) -> float:
        return self.perception_range.x_rear + 5.0

    def travel(self) -> float:
        return self.trajectory_speed * (self.num_frames - 1) / self.frame_rate


@dataclass
class RasterBEV:
    cell_size: float
    grid: np.ndarray  # (H, W, C), axis 0 along ego x (rear -> front), axis 1 along y (right -> left)

    @property
    def channels(self) -> int:
        return self.grid.shape[2]

    @property
    def mask(self) -> np.ndarray:
        return self.grid[:, :, MASK_CHANNEL]


@dataclass
class FrameSample:
    frame_index: int
    ego_pose: Pose2
    gt_elements: list[MapElement]
    observation: RasterBEV
    sequence_id: str = ""


@dataclass
class GlobalMap:
    elements: list[MapElement]
    centerline: np.ndarray
    headings: np.ndarray
    ds: float


def grid_shape(rng: PerceptionRange, cell: float) -> tuple[int, int]:
    h, w = rng.length / cell, rng.width / cell
    H, W = int(round(h)), int(round(w))
    if abs(h - H) > 1e-6 or abs(w - W) > 1e-6 or H < 1 or W < 1:
        raise ConfigError(f"range {rng.length}x{rng.width} m is not a whole number of {cell} m cells")
    return H, W


def _curvature_profile(rs: np.random.Generator, s: np.ndarray, kmax: float) -> np.ndarray:
    if kmax == 0:
        return np.zeros_like(s)
    k = np.zeros_like(s)
    for _ in range(3):
        wavelength = rs.uniform(80.0, 300.0)
        k += rs.uniform(-1, 1) * np.sin(2 * math.pi * s / wavelength + rs.uniform(0, 2 * math.pi))
    peak = np.abs(k).max()
    return k * (kmax / peak) if peak > 0 else k


def build_global_map(spec: SceneSpec, rs: np.random.Generator) -> GlobalMap:
    ds = 1.0
    s = np.arange(0.0, spec.road_length + ds / 2, ds)
    kappa = _curvature_profile(rs, s, spec.curvature)
    heading = np.concatenate([[0.0], np.cumsum(0.5 * (kappa[1:] + kappa[:-1]) * ds)])
    mid = 0.5 * (heading[1:] + heading[:-1])
    steps = np.column_stack([np.cos(mid), np.sin(mid)]) * ds
    center = np.vstack([[0.0, 0.0], np.cumsum(steps, axis=0)])
    normal = np.column_stack([-np.sin(heading), np.cos(heading)])

    half = 0.5 * spec.num_lanes * spec.lane_spacing
    elements = []
    for off in (-half, half):
        elements.append(MapElement(Category.BOUNDARY, Polyline(center + off * normal)))
    for k in range(1, spec.num_lanes):
        off = -half + k * spec.lane_spacing
        elements.append(MapElement(Category.DIVIDER, Polyline(center + off * normal)))

    n_cross = rs.poisson(spec.crossing_density * spec.road_length / 100.0)
    placed: list[float] = []
    depth = 4.0
    for _ in range(n_cross):
        for _attempt in range(20):
            sc = rs.uniform(10.0, spec.road_length - 10.0)
            if all(abs(sc - p) > 15.0 for p in placed):
                placed.append(sc)
                break
    for sc in sorted(placed):
        corners = []
        for ss, side in ((sc - depth / 2, -half), (sc + depth / 2, -half),
                         (sc + depth / 2, half), (sc - depth / 2, half)):
            i = int(round(ss / ds))
            corners.append(center[i] + side * normal[i])
        elements.append(MapElement(Category.PED_CROSSING, Polyline(np.array(corners), closed=True)))
    return GlobalMap(elements, center, heading, ds)


def ego_poses(spec: SceneSpec, gmap: GlobalMap, lane: int) -> list[Pose2]:
    """Poses spaced by trajectory_speed / frame_rate of arc length along the ego lane."""
    half = 0.5 * spec.num_lanes * spec.lane_spacing
    offset = -half + (lane + 0.5) * spec.lane_spacing
    h = gmap.headings
    lane_xy = gmap.centerline + offset * np.column_stack([-np.sin(h), np.cos(h)])
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(lane_xy, axis=0), axis=1))])
    s0 = np.interp(spec.start_s(), np.arange(len(arc)) * gmap.ds, arc)
    poses = []
    for t in range(spec.num_frames):
        s = s0 + spec.trajectory_speed * t / spec.frame_rate
        x = np.interp(s, arc, lane_xy[:, 0])
        y = np.interp(s, arc, lane_xy[:, 1])
        poses.append(Pose2(float(x), float(y), float(np.interp(s, arc, h))))
    return poses


def crop_and_clip(global_elements, pose: Pose2, rng: PerceptionRange,
                  num_points: int, min_length: float = MIN_ARC_LENGTH) -> list[MapElement]:
    """Express global elements in the ego frame and keep what lies in range.

    Open polylines cut by the range boundary become separate elements; pieces
    shorter than ``min_length`` are dropped. Output is resampled to ``num_points``.
    """
    world = Pose2()
    out = []
    for e in global_elements:
        local = transform_points(e.points, world, pose)
        if e.closed:
            clipped = clip_polygon(local, rng)
            pieces = [] if clipped is None else [clipped]
        else:
            pieces = clip_open_polyline(local, rng)
        for piece in pieces:
            poly = Polyline(piece, e.closed)
            if poly.length() < min_length:
                continue
            try:
                poly = resample_polyline(poly, num_points)
            except GeometryError:
                continue
            out.append(MapElement(e.category, poly, e.confidence))
    return out


@dataclass
class _Blob:
    center: np.ndarray  # ego frame if attached, else global
    radius: float
    born: int


class OcclusionState:
    """Occluder blobs that respawn every ``persistence_frames`` frames."""

    def __init__(self, spec: OcclusionSpec, rng: PerceptionRange, rs: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.rs = rs
        self.blobs: list[_Blob] = []

    def _spawn(self, frame: int, pose: Pose2) -> _Blob:
        margin = 3.0
        cx = self.rs.uniform(self.rng.x_min + margin, self.rng.x_max - margin)
        cy = self.rs.uniform(-self.spec.lateral_extent, self.spec.lateral_extent)
        r = self.rs.uniform(*self.spec.blob_radius)
        c = np.array([cx, cy])
        if not self.spec.attach_to_ego:
            c = pose.apply(c)[0]
        return _Blob(c, r, frame)

    def step(self, frame: int, pose: Pose2) -> list[tuple[float, float, float]]:
        """Advance to ``frame`` and return blobs as (x, y, radius) in the ego frame."""
        alive = [b for b in self.blobs if frame - b.born < self.spec.persistence_frames]
        while len(alive) < self.spec.num_blobs:
            alive.append(self._spawn(frame, pose))
        self.blobs = alive
        out = []
        for b in alive:
            c = b.center if self.spec.attach_to_ego else transform_points(b.center, Pose2(), pose)[0]
            out.append((float(c[0]), float(c[1]), b.radius))
        return out


def _cell_index(points: np.ndarray, rng: PerceptionRange, cell: float, H: int, W: int):
    i = np.floor((points[:, 0] - rng.x_min) / cell + 1e-9).astype(int)
    j = np.floor((points[:, 1] - rng.y_min) / cell + 1e-9).astype(int)
    return np.clip(i, 0, H - 1), np.clip(j, 0, W - 1)


def occlusion_mask(blobs, rng: PerceptionRange, cell: float) -> np.ndarray:
    H, W = grid_shape(rng, cell)
    xs = rng.x_min + (np.arange(H) + 0.5) * cell
    ys = rng.y_min + (np.arange(W) + 0.5) * cell
    mask = np.zeros((H, W), dtype=bool)
    for bx, by, r in blobs:
        mask |= ((xs[:, None] - bx) ** 2 + (ys[None, :] - by) ** 2) <= r * r
    return mask


def rasterize(elements, blobs, rng: PerceptionRange, cell: float) -> RasterBEV:
    """Draw elements into per-category channels, then apply occluders.

    ``blobs`` is a list of (x, y, radius) in the ego frame. Channel 3 is the
    occlusion mask; occupancy under the mask is zeroed.
    """
    H, W = grid_shape(rng, cell)
    grid = np.zeros((H, W, NUM_RASTER_CHANNELS), dtype=np.float32)
    for e in elements:
        pts = e.points
        if e.closed:
            pts = np.vstack([pts, pts[:1]])
        ii, jj = _cell_index(pts, rng, cell, H, W)
        ch = int(e.category)
        for a in range(len(pts) - 1):
            rr, cc = draw_line(ii[a], jj[a], ii[a + 1], jj[a + 1])
            grid[rr, cc, ch] = 1.0
        grid[ii, jj, ch] = 1.0
    mask = occlusion_mask(blobs, rng, cell)
    grid[mask, :MASK_CHANNEL] = 0.0
    grid[:, :, MASK_CHANNEL] = mask
    return RasterBEV(cell, grid)


def occluded_fraction(elements, mask: np.ndarray, rng: PerceptionRange, cell: float,
                      step: float = 0.1) -> float:
    """Fraction of total ground-truth arc length lying in occluded cells."""
    H, W = mask.shape
    total = hidden = 0.0
    for e in elements:
        for a, b in zip(*_segment_pairs(e.points, e.closed)):
            seg = float(np.linalg.norm(b - a))
            if seg == 0:
                continue
            n = max(1, int(math.ceil(seg / step)))
            t = (np.arange(n) + 0.5) / n
            pts = a[None, :] + t[:, None] * (b - a)[None, :]
            ii, jj = _cell_index(pts, rng, cell, H, W)
            total += seg
            hidden += seg * mask[ii, jj].mean()
    return hidden / total if total > 0 else 0.0


def _segment_pairs(points, closed):
    pts = np.vstack([points, points[:1]]) if closed else points
    return pts[:-1], pts[1:]


def generate_sequence(spec: SceneSpec, sequence_id: str | None = None) -> list[FrameSample]:
    """Deterministic function of ``spec``: one FrameSample per frame."""
    spec.validate()
    rs = np.random.default_rng(spec.seed)
    gmap = build_global_map(spec, rs)
    lane = int(rs.integers(spec.num_lanes))
    poses = ego_poses(spec, gmap, lane)
    occl = OcclusionState(spec.occlusion, spec.perception_range, np.random.default_rng([spec.seed, 1]))
    sid = sequence_id if sequence_id is not None else f"seq{spec.seed:06d}"
    frames = []
    for t, pose in enumerate(poses):
        gts = crop_and_clip(gmap.elements, pose, spec.perception_range, spec.num_points)
        blobs = occl.step(t, pose)
        obs = rasterize(gts, blobs, spec.perception_range, spec.cell_size)
        frames.append(FrameSample(t, pose, gts, obs, sid))
    return frames
