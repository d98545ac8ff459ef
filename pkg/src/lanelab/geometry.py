"""Closed-loop track geometry: waypoint paths, lane centeredness and road angle."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

DEFAULT_HALF_WIDTH = 0.38  # half lane width H, meters
WAYPOINT_MAX_GAP = 0.025  # max spacing between consecutive waypoints, meters
WINDOW_HALF_WIDTH = 10  # sliding-window half width for nearest-waypoint lookup


class TrackBuildError(ValueError):
    """Raised when a track spec cannot produce a valid closed loop."""


class TrackShape(str, Enum):
    CIRCLE = "circle"
    RECTANGLE = "rectangle"
    RECTANGLE_ROUNDED = "rectangle_rounded"
    OVAL = "oval"
    COMPLEX_SPLINE = "complex_spline"
    FIGURE8 = "figure8"


@dataclass(frozen=True)
class DamageSpec:
    """Deterministic lane-marking damage: deleted marker chunks plus distractor segments."""

    deletion_fraction: float = 0.0
    distractor_density: float = 0.0  # spurious segments per meter of track
    rng_seed: int = 0


@dataclass
class TrackSpec:
    shape: TrackShape
    half_width: float = DEFAULT_HALF_WIDTH
    radius: float = 2.0  # circle
    width: float = 4.0  # rectangle / rectangle_rounded
    height: float = 3.0
    corner_radius: float = 0.8  # rectangle_rounded
    semi_major: float = 2.2  # oval
    semi_minor: float = 1.4
    scale: float = 2.2  # figure8 lobe extent
    seed: int = 0  # complex_spline
    damage: Optional[DamageSpec] = None

    def validate(self) -> None:
        if self.half_width <= 0:
            raise TrackBuildError("half_width must be positive")
        h = self.half_width
        if self.shape == TrackShape.CIRCLE and self.radius < 2 * h:
            raise TrackBuildError(f"circle radius {self.radius} too small for H={h}")
        if self.shape in (TrackShape.RECTANGLE, TrackShape.RECTANGLE_ROUNDED):
            if min(self.width, self.height) < 4 * h:
                raise TrackBuildError("rectangle sides must be at least 4H")
            if self.shape == TrackShape.RECTANGLE_ROUNDED:
                if self.corner_radius <= 0 or 2 * self.corner_radius > min(self.width, self.height):
                    raise TrackBuildError("corner_radius must fit inside the rectangle")
        if self.shape == TrackShape.OVAL:
            if 2 * min(self.semi_major, self.semi_minor) < 4 * h:
                raise TrackBuildError("oval axes must be at least 4H")
        if self.shape == TrackShape.FIGURE8 and self.scale < 4 * h:
            raise TrackBuildError("figure8 scale too small")


@dataclass
class Pose:
    """Vehicle pose in the world frame: position (m), yaw (rad, wrapped), speed (m/s)."""

    position: np.ndarray
    yaw: float
    speed: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.yaw = wrap_angle(float(self.yaw))
        if self.speed < 0:
            raise ValueError("speed must be nonnegative")


@dataclass
class WindowState:
    """Caller-owned sliding-window state for nearest-waypoint lookups (one per trajectory)."""

    index: int


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    # IEEE remainder is exact, so wrapping commutes with negation bit-for-bit
    w = math.remainder(a, 2.0 * math.pi)
    if w == -math.pi:
        w = math.pi
    return w


def mirror_pose(pose: Pose) -> Pose:
    """Reflect a pose about the x-axis."""
    p = pose.position
    return Pose(np.array([p[0], -p[1]]), -pose.yaw, pose.speed)


class WaypointPath:
    """Closed loop of densely spaced waypoints with cumulative arclength.

    Consecutive waypoints are separated by at most WAYPOINT_MAX_GAP (and at
    least half of it) once built through `interpolate_waypoints`.
    """

    def __init__(self, positions: np.ndarray, detect_intersections: bool = True):
        positions = np.asarray(positions, dtype=float)
        if positions.ndim != 2 or positions.shape[1] != 2 or len(positions) < 3:
            raise TrackBuildError("path needs at least 3 waypoints of shape (N, 2)")
        self.positions = positions
        seg = np.diff(positions, axis=0, append=positions[:1])
        self.segment_lengths = np.linalg.norm(seg, axis=1)
        self.cumulative_arclength = np.concatenate(
            [[0.0], np.cumsum(self.segment_lengths[:-1])]
        )
        self.length = float(self.segment_lengths.sum())
        if self.length <= 0:
            raise TrackBuildError("degenerate loop of zero length")
        self.crossing_pairs = (
            _self_intersections(positions) if detect_intersections else []
        )
        self.has_self_intersection = len(self.crossing_pairs) > 0

    def __len__(self) -> int:
        return len(self.positions)

    def tangent(self, index: int) -> np.ndarray:
        """Unit tangent at a waypoint from the central difference of its neighbors."""
        n = len(self.positions)
        d = self.positions[(index + 1) % n] - self.positions[(index - 1) % n]
        norm = np.linalg.norm(d)
        if norm == 0.0:
            d = self.positions[(index + 1) % n] - self.positions[index]
            norm = np.linalg.norm(d)
        return d / norm

    def heading(self, index: int) -> float:
        t = self.tangent(index)
        return math.atan2(t[1], t[0])

    def index_at_arclength(self, start_index: int, distance: float) -> int:
        """First waypoint at least `distance` ahead of start_index along the loop."""
        n = len(self.positions)
        s0 = self.cumulative_arclength[start_index]
        target = (s0 + distance) % self.length
        idx = int(np.searchsorted(self.cumulative_arclength, target))
        return idx % n

    def reversed(self) -> "WaypointPath":
        """Same loop traversed in the opposite direction."""
        return WaypointPath(self.positions[::-1].copy(),
                            detect_intersections=self.has_self_intersection)

    def mirrored(self) -> "WaypointPath":
        """Loop reflected about the x-axis (same index order)."""
        pts = self.positions.copy()
        pts[:, 1] = -pts[:, 1]
        out = WaypointPath(pts, detect_intersections=False)
        out.crossing_pairs = list(self.crossing_pairs)
        out.has_self_intersection = self.has_self_intersection
        return out

    def intersection_regions(self, merge_radius: float = 0.25) -> int:
        """Number of distinct self-intersection regions (crossings clustered by location)."""
        if not self.crossing_pairs:
            return 0
        centers = []
        for i, j in self.crossing_pairs:
            mid = 0.5 * (self.positions[i] + self.positions[j])
            for c in centers:
                if np.linalg.norm(mid - c) < merge_radius:
                    break
            else:
                centers.append(mid)
        return len(centers)


def _self_intersections(pts: np.ndarray) -> list:
    """Brute-force proper crossings between non-adjacent segments of a closed polyline."""
    n = len(pts)
    a = pts
    b = np.roll(pts, -1, axis=0)
    pairs = []
    for i in range(n - 2):
        j0 = i + 2
        j1 = n if i > 0 else n - 1  # segment 0 is adjacent to segment n-1
        if j0 >= j1:
            continue
        p, r = a[i], b[i] - a[i]
        q = a[j0:j1]
        s = b[j0:j1] - q
        rxs = r[0] * s[:, 1] - r[1] * s[:, 0]
        qp = q - p
        qpxr = qp[:, 0] * r[1] - qp[:, 1] * r[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (qp[:, 0] * s[:, 1] - qp[:, 1] * s[:, 0]) / rxs
            u = -qpxr / rxs
        hit = (rxs != 0) & (t > 1e-12) & (t < 1 - 1e-12) & (u > 1e-12) & (u < 1 - 1e-12)
        for k in np.nonzero(hit)[0]:
            pairs.append((i, j0 + int(k)))
    return pairs


def interpolate_waypoints(raw: Sequence, max_gap: float = WAYPOINT_MAX_GAP) -> np.ndarray:
    """Fill gaps in a raw closed polyline with evenly spaced collinear points.

    Points closer than max_gap/2 to their predecessor are treated as
    duplicates and dropped.  The closing segment (last back to first) is
    interpolated too.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.shape[1] != 2 or len(raw) < 2:
        raise TrackBuildError("need at least 2 raw points")
    min_gap = max_gap / 2.0
    kept = [raw[0]]
    for p in raw[1:]:
        if np.linalg.norm(p - kept[-1]) >= min_gap:
            kept.append(p)
    # drop the final point if it overlaps the loop start
    while len(kept) > 1 and np.linalg.norm(kept[-1] - kept[0]) < min_gap:
        kept.pop()
    if len(kept) < 2:
        raise TrackBuildError("degenerate loop: all points overlap")
    kept = np.asarray(kept)
    out = []
    n = len(kept)
    for i in range(n):
        p0 = kept[i]
        p1 = kept[(i + 1) % n]
        gap = np.linalg.norm(p1 - p0)
        segments = max(1, int(math.ceil(gap / max_gap)))
        for k in range(segments):
            out.append(p0 + (p1 - p0) * (k / segments))
    return np.asarray(out)


def nearest_waypoint(p, path: WaypointPath, window: Optional[WindowState] = None):
    """Closest waypoint to p: global argmin, or restricted to a sliding window.

    Ties break to the lowest absolute index.  With a window, the search covers
    indices [prev - w, prev + w] wrapped at the loop boundary, and the window
    state is advanced to the returned index.
    """
    p = np.asarray(p, dtype=float)
    pts = path.positions
    n = len(pts)
    if window is None:
        d2 = np.einsum("ij,ij->i", pts - p, pts - p)
        idx = int(np.argmin(d2))
    else:
        w = WINDOW_HALF_WIDTH
        cand = (np.arange(window.index - w, window.index + w + 1)) % n
        d2 = np.einsum("ij,ij->i", pts[cand] - p, pts[cand] - p)
        best = d2.min()
        idx = int(cand[d2 <= best].min())
        window.index = idx
    return idx, pts[idx]


def lane_centeredness(
    pose: Pose, path: WaypointPath, half_width: float = DEFAULT_HALF_WIDTH,
    window: Optional[WindowState] = None,
) -> float:
    """Signed lateral offset normalized by half lane width, clipped to [-1, 1].

    Positive when the vehicle sits to the left of the path direction
    (cross product of path tangent and offset vector positive).
    """
    idx, nu = nearest_waypoint(pose.position, path, window)
    offset = pose.position - nu
    dist = float(np.linalg.norm(offset))
    t = path.tangent(idx)
    cross = t[0] * offset[1] - t[1] * offset[0]
    sign = 1.0 if cross > 0 else (-1.0 if cross < 0 else 1.0)
    return float(np.clip(sign * dist / half_width, -1.0, 1.0))


def lane_offset_unclipped(pose: Pose, path: WaypointPath, window=None) -> float:
    """Unsigned distance to the nearest waypoint (used for termination checks)."""
    _, nu = nearest_waypoint(pose.position, path, window)
    return float(np.linalg.norm(pose.position - nu))


def road_angle(pose: Pose, path: WaypointPath, window: Optional[WindowState] = None) -> float:
    """Angle between the road direction and the vehicle heading, clipped to [-pi/2, pi/2].

    Uses the path tangent heading at the nearest waypoint; positive when the
    road bears left of the vehicle heading.
    """
    idx, _ = nearest_waypoint(pose.position, path, window)
    beta = wrap_angle(path.heading(idx) - pose.yaw)
    return float(np.clip(beta, -math.pi / 2.0, math.pi / 2.0))


def marker_points(path: WaypointPath, offset: float) -> np.ndarray:
    """Points offset laterally from the centerline (+offset is left of travel)."""
    n = len(path.positions)
    tangents = np.roll(path.positions, -1, axis=0) - np.roll(path.positions, 1, axis=0)
    norms = np.linalg.norm(tangents, axis=1, keepdims=True)
    tangents = tangents / norms
    normals = np.stack([-tangents[:, 1], tangents[:, 0]], axis=1)
    return path.positions + offset * normals


# --- track construction ------------------------------------------------------


def build_track(spec: TrackSpec) -> WaypointPath:
    """Realize a track spec as a closed waypoint loop at <= 2.5 cm spacing."""
    spec.validate()
    if spec.shape == TrackShape.CIRCLE:
        raw = _circle_points(spec.radius)
    elif spec.shape == TrackShape.RECTANGLE:
        raw = _rectangle_points(spec.width, spec.height)
    elif spec.shape == TrackShape.RECTANGLE_ROUNDED:
        raw = _rounded_rectangle_points(spec.width, spec.height, spec.corner_radius)
    elif spec.shape == TrackShape.OVAL:
        raw = _oval_points(spec.semi_major, spec.semi_minor)
    elif spec.shape == TrackShape.FIGURE8:
        raw = _figure8_points(spec.scale)
    elif spec.shape == TrackShape.COMPLEX_SPLINE:
        raw = _spline_loop_points(spec.seed)
    else:  # pragma: no cover - enum is exhaustive
        raise TrackBuildError(f"unknown shape {spec.shape}")
    pts = interpolate_waypoints(raw, WAYPOINT_MAX_GAP)
    return WaypointPath(pts)


def _circle_points(radius: float, spacing: float = 0.02) -> np.ndarray:
    n = max(8, int(math.ceil(2 * math.pi * radius / spacing)))
    th = 2 * math.pi * np.arange(n) / n - math.pi / 2.0  # start at (0, -R), heading +x
    return np.stack([radius * np.cos(th), radius * np.sin(th)], axis=1)


def _rectangle_points(width: float, height: float) -> np.ndarray:
    w, h = width / 2.0, height / 2.0
    return np.array([
        [0.0, -h], [w, -h], [w, h], [-w, h], [-w, -h],
    ])


def _rounded_rectangle_points(width: float, height: float, rc: float) -> np.ndarray:
    w, h = width / 2.0, height / 2.0
    pts = [np.array([0.0, -h])]
    corners = [  # (corner center, start angle of the quarter arc), CCW order
        (np.array([w - rc, -h + rc]), -math.pi / 2.0),
        (np.array([w - rc, h - rc]), 0.0),
        (np.array([-w + rc, h - rc]), math.pi / 2.0),
        (np.array([-w + rc, -h + rc]), math.pi),
    ]
    arc = np.linspace(0.0, math.pi / 2.0, 24)
    for center, start in corners:
        ang = start + arc
        pts.extend(center + rc * np.stack([np.cos(a), np.sin(a)]) for a in ang)
    return np.asarray(pts)


def _oval_points(a: float, b: float, samples: int = 4096) -> np.ndarray:
    t = np.linspace(-math.pi / 2.0, 1.5 * math.pi, samples, endpoint=False)
    return np.stack([a * np.cos(t), b * np.sin(t)], axis=1)


def _figure8_points(scale: float, samples: int = 4096) -> np.ndarray:
    t = np.linspace(0.0, 2 * math.pi, samples, endpoint=False) + math.pi / 2.0
    x = scale * np.sin(t)
    y = 0.6 * scale * np.sin(t) * np.cos(t)
    return np.stack([x, y], axis=1)


def _spline_loop_points(seed: int, n_knots: int = 10, base_radius: float = 2.0,
                        min_turn_radius: float = 0.9) -> np.ndarray:
    from scipy.interpolate import CubicSpline

    rng = np.random.Generator(np.random.Philox(seed))
    bump = rng.uniform(-1.0, 1.0, size=n_knots)
    phase = rng.uniform(0.0, 2 * math.pi)
    amp = 0.35
    for _ in range(12):
        th = 2 * math.pi * np.arange(n_knots) / n_knots + phase
        r = base_radius * (1.0 + amp * bump)
        knots = np.stack([r * np.cos(th), r * np.sin(th)], axis=1)
        closed = np.vstack([knots, knots[:1]])
        s = np.arange(n_knots + 1, dtype=float)
        cs = CubicSpline(s, closed, bc_type="periodic")
        u = np.linspace(0.0, n_knots, 4096, endpoint=False)
        pts = cs(u)
        if _min_turn_radius(pts) >= min_turn_radius:
            return pts
        amp *= 0.7
    raise TrackBuildError(f"spline loop for seed {seed} could not meet curvature bound")


def _min_turn_radius(pts: np.ndarray) -> float:
    d1 = np.gradient(pts, axis=0)
    d2 = np.gradient(d1, axis=0)
    num = np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    den = np.linalg.norm(d1, axis=1) ** 3
    curvature = num / np.maximum(den, 1e-12)
    kmax = curvature.max()
    return float("inf") if kmax == 0 else 1.0 / kmax


# --- track file I/O ----------------------------------------------------------

TRACK_FILE_HEADER = "lanelab-track 1"


def save_track(path: WaypointPath, filename) -> None:
    """Plain-text track file: version header then one `x y` pair per line (loop implied)."""
    with open(filename, "w") as f:
        f.write(TRACK_FILE_HEADER + "\n")
        for x, y in path.positions:
            f.write(f"{float(x)!r} {float(y)!r}\n")


def load_track(filename) -> WaypointPath:
    with open(filename) as f:
        header = f.readline().strip()
        if header != TRACK_FILE_HEADER:
            raise TrackBuildError(f"unrecognized track file header: {header!r}")
        pts = [[float(v) for v in line.split()] for line in f if line.strip()]
    return WaypointPath(interpolate_waypoints(pts))
