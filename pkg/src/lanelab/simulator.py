"""Deterministic 10 Hz lane-keeping simulation with synthetic marker-grid observations."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .geometry import (
    DamageSpec,
    Pose,
    WaypointPath,
    WindowState,
    lane_centeredness,
    lane_offset_unclipped,
    marker_points,
    nearest_waypoint,
    road_angle,
    wrap_angle,
)

STEER_LIMIT = math.pi / 2.0
SPEED_MIN = 0.1
SPEED_MAX = 0.6


@dataclass(frozen=True)
class Action:
    """Steering angle (rad) and target speed (m/s)."""

    steer: float
    target_speed: float

    def clipped(self) -> "Action":
        return Action(
            float(np.clip(self.steer, -STEER_LIMIT, STEER_LIMIT)),
            float(np.clip(self.target_speed, SPEED_MIN, SPEED_MAX)),
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.steer, self.target_speed])

    @staticmethod
    def from_array(a) -> "Action":
        return Action(float(a[0]), float(a[1]))


@dataclass
class SimConfig:
    dt: float = 0.1  # fixed 10 Hz stepping
    speed_lag_tau: float = 0.3  # first-order lag time constant, seconds
    steer_gain: float = 4.0  # yaw rate = steer_gain * steer * speed (differential-drive-like)
    grid_width: int = 32  # lateral cells
    grid_height: int = 16  # forward cells
    view_forward: float = 2.0  # meters ahead covered by the grid
    view_lateral: float = 1.2  # meters across covered by the grid
    max_steps: int = 1200  # 120 s training episodes; 3000 for evaluation
    reward_scale: float = 1.0  # 0.0002 for the racing-sim style config
    reward_alpha_sign: float = -1.0  # -1 rewards centered driving; +1 for the literal formula
    half_width: float = 0.38
    marker_segment_len: float = 0.25  # damage deletion granularity, meters
    initial_speed: float = 0.35


class TerminationReason(str, Enum):
    NONE = "none"
    OUT_OF_LANE = "out_of_lane"
    MAX_STEPS = "max_steps"


@dataclass
class VehicleState:
    pose: Pose
    last_action: Action
    step_count: int = 0


@dataclass
class StepResult:
    next_state: VehicleState
    observation: np.ndarray  # stacked frames (2, grid_height, grid_width)
    reward: float
    alpha: float
    beta: float
    terminated: bool
    termination_reason: TerminationReason


def reward(v: float, alpha: float, beta: float, cfg: SimConfig) -> float:
    """Speed-weighted centering reward: scale * v * (cos(beta) + sign * |alpha|)."""
    return cfg.reward_scale * v * (math.cos(beta) + cfg.reward_alpha_sign * abs(alpha))


def step_vehicle(state: VehicleState, action: Action, cfg: SimConfig) -> VehicleState:
    """Kinematic unicycle update with first-order speed lag; deterministic."""
    action = action.clipped()
    pose = state.pose
    decay = math.exp(-cfg.dt / cfg.speed_lag_tau)
    v_new = action.target_speed + (pose.speed - action.target_speed) * decay
    heading = np.array([math.cos(pose.yaw), math.sin(pose.yaw)])
    position = pose.position + v_new * cfg.dt * heading
    yaw = wrap_angle(pose.yaw + cfg.steer_gain * action.steer * v_new * cfg.dt)
    return VehicleState(
        pose=Pose(position, yaw, v_new),
        last_action=action,
        step_count=state.step_count + 1,
    )


class MarkerField:
    """Lane-marking point cloud for a track, with optional deterministic damage.

    The damage pattern is fixed per track (tape on the floor), not re-drawn
    per frame: marker chunks are deleted and distractor segments placed once,
    seeded by the damage spec.
    """

    def __init__(self, path: WaypointPath, half_width: float,
                 damage: Optional[DamageSpec] = None, marker_segment_len: float = 0.25):
        left = marker_points(path, half_width)
        right = marker_points(path, -half_width)
        pts = [left, right]
        if damage is not None and (damage.deletion_fraction > 0 or damage.distractor_density > 0):
            rng = np.random.Generator(np.random.Philox(damage.rng_seed))
            pts = [self._delete_chunks(p, path, damage.deletion_fraction,
                                       marker_segment_len, rng) for p in pts]
            pts.append(self._distractors(path, half_width, damage.distractor_density, rng))
        self.points = np.vstack([p for p in pts if len(p)]) if any(len(p) for p in pts) \
            else np.zeros((0, 2))

    @staticmethod
    def _delete_chunks(points, path, fraction, seg_len, rng):
        if fraction <= 0:
            return points
        chunk = np.floor(path.cumulative_arclength / seg_len).astype(int)
        n_chunks = chunk.max() + 1
        keep_chunk = rng.random(n_chunks) >= fraction
        return points[keep_chunk[chunk]]

    @staticmethod
    def _distractors(path, half_width, density, rng):
        n = int(round(density * path.length))
        if n <= 0:
            return np.zeros((0, 2))
        out = []
        n_wp = len(path.positions)
        for _ in range(n):
            k = int(rng.integers(n_wp))
            t = path.tangent(k)
            normal = np.array([-t[1], t[0]])
            center = path.positions[k] + rng.uniform(-2 * half_width, 2 * half_width) * normal
            ang = rng.uniform(0, 2 * math.pi)
            direction = np.array([math.cos(ang), math.sin(ang)])
            length = rng.uniform(0.1, 0.3)
            s = np.arange(0.0, length, 0.025)
            out.append(center + np.outer(s - length / 2, direction))
        return np.vstack(out)


def render_observation(pose: Pose, field: MarkerField, cfg: SimConfig) -> np.ndarray:
    """Rasterize marker points ahead of the vehicle into an ego-frame grid.

    Rows index forward distance (row 0 nearest), columns index lateral offset
    with column 0 leftmost, so mirroring the world flips the grid horizontally.
    """
    grid = np.zeros((cfg.grid_height, cfg.grid_width))
    pts = field.points
    if len(pts) == 0:
        return grid
    c, s = math.cos(-pose.yaw), math.sin(-pose.yaw)
    rel = pts - pose.position
    x = rel[:, 0] * c - rel[:, 1] * s
    y = rel[:, 0] * s + rel[:, 1] * c
    half_lat = cfg.view_lateral / 2.0
    m = (x >= 0.0) & (x < cfg.view_forward) & (y > -half_lat) & (y < half_lat)
    if not m.any():
        return grid
    rows = np.floor(x[m] / (cfg.view_forward / cfg.grid_height)).astype(int)
    cols = np.floor((half_lat - y[m]) / (cfg.view_lateral / cfg.grid_width)).astype(int)
    grid[rows, cols] = 1.0
    return grid


class LaneKeepSim:
    """Stateful episode runner: stepping, two-frame observation stack, termination.

    A single instance is single-threaded; run independent instances in parallel.
    """

    def __init__(self, path: WaypointPath, cfg: SimConfig = None,
                 damage: Optional[DamageSpec] = None):
        self.path = path
        self.cfg = cfg if cfg is not None else SimConfig()
        self.field = MarkerField(path, self.cfg.half_width, damage,
                                 self.cfg.marker_segment_len)
        self.state: Optional[VehicleState] = None
        self._window: Optional[WindowState] = None
        self._prev_frame: Optional[np.ndarray] = None

    def reset(self, start_index: int = 0, pose: Optional[Pose] = None) -> np.ndarray:
        if pose is None:
            pose = Pose(self.path.positions[start_index].copy(),
                        self.path.heading(start_index), self.cfg.initial_speed)
        self.state = VehicleState(pose, Action(0.0, pose.speed or self.cfg.initial_speed), 0)
        idx, _ = nearest_waypoint(pose.position, self.path)
        self._window = WindowState(idx)
        frame = render_observation(pose, self.field, self.cfg)
        self._prev_frame = frame
        return np.stack([frame, frame])

    def step(self, action: Action) -> StepResult:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        next_state = step_vehicle(self.state, action, self.cfg)
        pose = next_state.pose
        offset = lane_offset_unclipped(pose, self.path, self._window)
        alpha = lane_centeredness(pose, self.path, self.cfg.half_width, self._window)
        beta = road_angle(pose, self.path, self._window)
        r = reward(pose.speed, alpha, beta, self.cfg)
        if offset > self.cfg.half_width:
            terminated, why = True, TerminationReason.OUT_OF_LANE
        elif next_state.step_count >= self.cfg.max_steps:
            terminated, why = True, TerminationReason.MAX_STEPS
        else:
            terminated, why = False, TerminationReason.NONE
        frame = render_observation(pose, self.field, self.cfg)
        obs = np.stack([self._prev_frame, frame])
        self._prev_frame = frame
        self.state = next_state
        return StepResult(next_state, obs, r, alpha, beta, terminated, why)
