"""Offline dataset collection: noisy pure-pursuit driving, flip augmentation, persistence."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .geometry import Pose, TrackSpec, WaypointPath, build_track, wrap_angle
from .simulator import Action, LaneKeepSim, SimConfig

PURSUIT_SPEED_LO = 0.2
PURSUIT_SPEED_HI = 0.5
TARGET_ADVANCE_DIST = 0.025  # advance to the next target within 2.5 cm
TARGET_SPACING = 0.25  # pursuit targets subsampled from the centerline, meters
POS_NOISE_STD = 0.02  # random-walk step std per target advance, meters
POS_NOISE_CLIP = 0.3  # reference clip; desk-scale collection defaults tighter
SPEED_NOISE_STD = 0.02
SPEED_WALK_INIT = 0.35

DEFAULT_GAMMAS = (0.5, 0.9, 0.95, 0.97)


def head_gammas(gammas: Sequence[float] = DEFAULT_GAMMAS) -> np.ndarray:
    """Per-head discount vector: one block per cumulant (centeredness, road angle)."""
    g = np.asarray(gammas, dtype=np.float32)
    return np.concatenate([g, g])


def head_cumulant_index(n_gammas: int = len(DEFAULT_GAMMAS)) -> np.ndarray:
    return np.concatenate([np.zeros(n_gammas, dtype=int), np.ones(n_gammas, dtype=int)])


@dataclass
class Transition:
    """One offline-dataset record; float32 fields round-trip the file format exactly."""

    obs: np.ndarray  # (2, Hg, W) float32 binary cells
    speed: np.float32
    prev_action: np.ndarray  # (2,) float32: steer, target speed
    action: np.ndarray
    cumulants: np.ndarray  # (2,) float32: next lane centeredness, next road angle
    continuation: np.ndarray  # (K,) float32, all zeros when done
    next_obs: np.ndarray
    next_speed: np.float32
    reward: np.float32
    done: bool
    rho: np.float32 = np.float32(1.0)


def flip_augment(t: Transition) -> Transition:
    """Mirror a transition left-right: flip grids, negate centeredness, road angle, steering."""
    return Transition(
        obs=t.obs[:, :, ::-1].copy(),
        speed=t.speed,
        prev_action=np.array([-t.prev_action[0], t.prev_action[1]], dtype=np.float32),
        action=np.array([-t.action[0], t.action[1]], dtype=np.float32),
        cumulants=(-t.cumulants).astype(np.float32),
        continuation=t.continuation.copy(),
        next_obs=t.next_obs[:, :, ::-1].copy(),
        next_speed=t.next_speed,
        reward=t.reward,
        done=t.done,
        rho=t.rho,
    )


# --- pursuit controller ------------------------------------------------------


@dataclass
class PursuitState:
    """Random-walk pure-pursuit state: target index plus noise walk values."""

    target_index: int
    pos_noise: np.ndarray = field(default_factory=lambda: np.zeros(2))
    speed_walk: float = SPEED_WALK_INIT
    steps_since_advance: int = 0


def pure_pursuit_action(pose: Pose, target_pos, target_speed: float) -> Action:
    """Steer toward the target at the clipped walk speed."""
    d = np.asarray(target_pos, dtype=float) - pose.position
    if d[0] == 0.0 and d[1] == 0.0:
        steer = 0.0
    else:
        steer = wrap_angle(math.atan2(d[1], d[0]) - pose.yaw)
    steer = float(np.clip(steer, -math.pi / 2, math.pi / 2))
    speed = float(np.clip(target_speed, PURSUIT_SPEED_LO, PURSUIT_SPEED_HI))
    return Action(steer, speed)


def advance_target(pose: Pose, state: PursuitState, targets: "PursuitTargets",
                   vehicle_index: Optional[int] = None) -> bool:
    """Advance to the next target once within 2.5 cm of the current one.

    A target the vehicle has already driven past (by track arclength) also
    advances; the curvature-limited vehicle would otherwise turn back for it.
    """
    target = targets.position(state.target_index)
    d = target - pose.position
    hit = float(np.hypot(d[0], d[1])) < TARGET_ADVANCE_DIST
    if not hit and vehicle_index is not None:
        gap = targets.arclength_behind(state.target_index, vehicle_index)
        hit = TARGET_ADVANCE_DIST < gap < targets.path_length / 4
    if hit:
        state.target_index = (state.target_index + 1) % len(targets)
        state.steps_since_advance = 0
    else:
        state.steps_since_advance += 1
    return hit


def perturb_target(waypoint, state: PursuitState, rng: np.random.Generator,
                   clip: float = POS_NOISE_CLIP):
    """One random-walk step of the target noise; returns (target_pos, target_speed)."""
    state.pos_noise = np.clip(
        state.pos_noise + rng.normal(0.0, POS_NOISE_STD, 2), -clip, clip)
    state.speed_walk = state.speed_walk + float(rng.normal(0.0, SPEED_NOISE_STD))
    return np.asarray(waypoint, dtype=float) + state.pos_noise, state.speed_walk


def ou_step(x, rng: np.random.Generator, theta: float = 1.0, sigma: float = 0.1,
            dt: float = 0.01, mu: float = 0.0):
    """One Ornstein-Uhlenbeck step: x + theta*(mu - x)*dt + sigma*sqrt(dt)*N(0,1)."""
    x = np.asarray(x, dtype=float)
    return x + theta * (mu - x) * dt + sigma * math.sqrt(dt) * rng.standard_normal(x.shape)


class PursuitTargets:
    """Pursuit target points subsampled from the centerline at coarse spacing."""

    def __init__(self, path: WaypointPath, spacing: float = TARGET_SPACING):
        self.stride = max(1, int(round(spacing / (path.length / len(path)))))
        self.positions = path.positions[::self.stride].copy()
        self.path_indices = np.arange(0, len(path), self.stride)
        self.arclength = path.cumulative_arclength[self.path_indices].copy()
        self.path_length = path.length
        self._wp_arclength = path.cumulative_arclength

    def __len__(self) -> int:
        return len(self.positions)

    def position(self, index: int) -> np.ndarray:
        return self.positions[index % len(self.positions)]

    def arclength_behind(self, target_index: int, vehicle_wp_index: int) -> float:
        """How far the vehicle's track position is past the target, along the loop."""
        s_t = self.arclength[target_index % len(self.positions)]
        s_v = self._wp_arclength[vehicle_wp_index]
        return (s_v - s_t) % self.path_length


def subsample_targets(path: WaypointPath, spacing: float = TARGET_SPACING) -> PursuitTargets:
    return PursuitTargets(path, spacing)


# --- dataset file format -----------------------------------------------------

DATASET_MAGIC = "lanelab-dataset"
DATASET_VERSION = 1


class DatasetWriter:
    """Sequential binary records behind a single JSON header line.

    Record layout (little-endian): bit-packed obs, bit-packed next_obs, then
    float32 fields [speed, next_speed, reward, rho, prev_action(2), action(2),
    cumulants(2), continuation(K)] and a done byte.
    """

    def __init__(self, path, grid_shape=(2, 16, 32), dt=0.1,
                 gammas: Sequence[float] = DEFAULT_GAMMAS):
        self.grid_shape = tuple(grid_shape)
        self.n_heads = 2 * len(gammas)
        self.header = {
            "format": DATASET_MAGIC,
            "version": DATASET_VERSION,
            "grid_shape": list(self.grid_shape),
            "dt": dt,
            "gammas": list(map(float, gammas)),
            "cumulants": ["lane_centeredness", "road_angle"],
        }
        self._grid_bytes = int(np.prod(self.grid_shape)) // 8
        self._f = open(path, "wb")
        self._f.write((json.dumps(self.header) + "\n").encode())
        self.count = 0

    def write(self, t: Transition) -> None:
        f = self._f
        f.write(np.packbits(t.obs.astype(bool)).tobytes())
        f.write(np.packbits(t.next_obs.astype(bool)).tobytes())
        scalars = np.array([t.speed, t.next_speed, t.reward, t.rho], dtype="<f4")
        f.write(scalars.tobytes())
        f.write(np.asarray(t.prev_action, dtype="<f4").tobytes())
        f.write(np.asarray(t.action, dtype="<f4").tobytes())
        f.write(np.asarray(t.cumulants, dtype="<f4").tobytes())
        f.write(np.asarray(t.continuation, dtype="<f4").tobytes())
        f.write(bytes([1 if t.done else 0]))
        self.count += 1

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_dataset(path) -> tuple:
    """Returns (header, iterator over Transitions) reading records in stored order."""
    f = open(path, "rb")
    header = json.loads(f.readline().decode())
    if header.get("format") != DATASET_MAGIC:
        f.close()
        raise ValueError(f"not a dataset file: {path}")
    grid_shape = tuple(header["grid_shape"])
    n_heads = 2 * len(header["gammas"])
    grid_bytes = int(np.prod(grid_shape)) // 8
    rec_size = 2 * grid_bytes + 4 * (4 + 2 + 2 + 2 + n_heads) + 1

    def gen() -> Iterator[Transition]:
        with f:
            while True:
                raw = f.read(rec_size)
                if not raw:
                    return
                if len(raw) != rec_size:
                    raise ValueError("truncated dataset record")
                o = 0
                obs = _unpack_grid(raw[o:o + grid_bytes], grid_shape); o += grid_bytes
                nobs = _unpack_grid(raw[o:o + grid_bytes], grid_shape); o += grid_bytes
                scal = np.frombuffer(raw, dtype="<f4", count=4, offset=o); o += 16
                prev_a = np.frombuffer(raw, dtype="<f4", count=2, offset=o).copy(); o += 8
                act = np.frombuffer(raw, dtype="<f4", count=2, offset=o).copy(); o += 8
                cum = np.frombuffer(raw, dtype="<f4", count=2, offset=o).copy(); o += 8
                cont = np.frombuffer(raw, dtype="<f4", count=n_heads, offset=o).copy()
                o += 4 * n_heads
                done = raw[o] != 0
                yield Transition(obs, scal[0], prev_a, act, cum, cont, nobs,
                                 scal[1], scal[2], bool(done), scal[3])

    return header, gen()


def load_dataset(path):
    header, it = read_dataset(path)
    return header, list(it)


def _unpack_grid(raw: bytes, shape) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=int(np.prod(shape)))
    return bits.reshape(shape).astype(np.float32)


# --- collection --------------------------------------------------------------


@dataclass
class CollectConfig:
    episodes_per_direction: int = 1
    steps_per_episode: int = 1200
    noise_mode: str = "target_walk"  # or "ou" for additive steering noise
    pos_noise_clip: float = 0.2  # wander budget; 0.3 matches the reference protocol
    gammas: Sequence[float] = DEFAULT_GAMMAS
    sim: SimConfig = field(default_factory=SimConfig)
    ou_theta: float = 1.0
    ou_sigma: float = 0.1
    ou_dt: float = 0.01


AIM_LOOKAHEAD = 0.4  # steer at the first noisy target at least this far away


def noisy_target_sequence(targets: PursuitTargets, laps: int, rng,
                          noise: bool = True, clip: float = POS_NOISE_CLIP) -> tuple:
    """Precompute the perturbed target walk for an episode: p*_j and v*_j per advance."""
    n = laps * len(targets)
    state = PursuitState(target_index=0)
    seq = np.empty((n, 2))
    speeds = np.empty(n)
    seq[0] = targets.position(0)
    speeds[0] = SPEED_WALK_INIT
    for j in range(1, n):
        if noise:
            seq[j], speeds[j] = perturb_target(targets.position(j), state, rng, clip)
        else:
            seq[j], speeds[j] = targets.position(j), SPEED_WALK_INIT
    return seq, speeds


def collect_episode(sim: LaneKeepSim, cfg: CollectConfig, rng: np.random.Generator) -> list:
    """Run one noisy-pursuit episode and return its transitions in time order.

    The active target advances by the 2.5 cm / passed rule; the steering aims
    at the first target of the noisy sequence beyond AIM_LOOKAHEAD so that the
    curvature-limited vehicle never orbits a target it cannot touch.
    """
    path = sim.path
    targets = PursuitTargets(path)
    start_index = int(rng.integers(len(path)))
    obs = sim.reset(start_index=start_index)
    gammas_vec = head_gammas(cfg.gammas)
    laps = 2 + int(math.ceil(
        cfg.steps_per_episode * sim.cfg.dt * PURSUIT_SPEED_HI / path.length))
    seq, walk_speeds = noisy_target_sequence(
        targets, laps, rng, noise=cfg.noise_mode == "target_walk",
        clip=cfg.pos_noise_clip)
    start_target = int(np.argmin(
        np.linalg.norm(targets.positions - path.positions[start_index], axis=1)))
    pursuit = PursuitState(target_index=(start_target + 1) % len(targets))
    k = pursuit.target_index  # absolute index into the precomputed sequence
    ou = np.zeros(1)
    out = []
    for _ in range(cfg.steps_per_episode):
        state = sim.state
        p = state.pose.position
        m = k
        while m < len(seq) - 1 and np.hypot(*(seq[m] - p)) < AIM_LOOKAHEAD:
            m += 1
        action = pure_pursuit_action(state.pose, seq[m], walk_speeds[k])
        if cfg.noise_mode == "ou":
            ou = ou_step(ou, rng, cfg.ou_theta, cfg.ou_sigma, cfg.ou_dt)
            action = Action(float(np.clip(action.steer + ou[0], -math.pi / 2, math.pi / 2)),
                            action.target_speed)
        res = sim.step(action)
        cont = gammas_vec * (0.0 if res.terminated else 1.0)
        out.append(Transition(
            obs=obs.astype(np.float32),
            speed=np.float32(state.pose.speed),
            prev_action=state.last_action.as_array().astype(np.float32),
            action=res.next_state.last_action.as_array().astype(np.float32),
            cumulants=np.array([res.alpha, res.beta], dtype=np.float32),
            continuation=cont.astype(np.float32),
            next_obs=res.observation.astype(np.float32),
            next_speed=np.float32(res.next_state.pose.speed),
            reward=np.float32(res.reward),
            done=res.terminated,
            rho=np.float32(1.0),
        ))
        obs = res.observation
        if res.terminated or k >= len(seq) - 2:
            break
        prev_idx = pursuit.target_index
        if _advance_on_sequence(res.next_state.pose, pursuit, targets, seq, k,
                                sim._window.index):
            k += 1 + (pursuit.target_index - prev_idx - 1) % len(targets)
    return out


def _advance_on_sequence(pose, pursuit, targets, seq, k, vehicle_index) -> bool:
    """advance_target against the perturbed position of the active target."""
    d = seq[k] - pose.position
    if float(np.hypot(d[0], d[1])) < TARGET_ADVANCE_DIST:
        pursuit.target_index = (pursuit.target_index + 1) % len(targets)
        pursuit.steps_since_advance = 0
        return True
    gap = targets.arclength_behind(pursuit.target_index, vehicle_index)
    if TARGET_ADVANCE_DIST < gap < targets.path_length / 4:
        pursuit.target_index = (pursuit.target_index + 1) % len(targets)
        pursuit.steps_since_advance = 0
        return True
    pursuit.steps_since_advance += 1
    return False


def collect_dataset(track_specs: Sequence[TrackSpec], out_path, seed: int,
                    cfg: Optional[CollectConfig] = None) -> dict:
    """Collect noisy-pursuit episodes on every track in both directions, then
    append horizontally flipped copies of everything.

    Returns per-track step counts.  Identical seeds produce identical files.
    """
    cfg = cfg or CollectConfig()
    streams = np.random.SeedSequence(seed).spawn(
        len(track_specs) * 2 * cfg.episodes_per_direction)
    stats = {}
    originals = []
    k = 0
    for spec in track_specs:
        path = build_track(spec)
        name = f"{spec.shape.value}"
        stats.setdefault(name, 0)
        for direction, p in (("ccw", path), ("cw", path.reversed())):
            sim = LaneKeepSim(p, cfg.sim, spec.damage)
            for _ in range(cfg.episodes_per_direction):
                rng = np.random.Generator(np.random.Philox(streams[k]))
                k += 1
                eps = collect_episode(sim, cfg, rng)
                stats[name] += len(eps)
                originals.extend(eps)
    tmp = str(out_path) + ".tmp"
    with DatasetWriter(tmp, grid_shape=(2, cfg.sim.grid_height, cfg.sim.grid_width),
                       dt=cfg.sim.dt, gammas=cfg.gammas) as w:
        for t in originals:
            w.write(t)
        for t in originals:
            w.write(flip_augment(t))
        total = w.count
    os.replace(tmp, out_path)
    stats["total"] = total
    return stats
