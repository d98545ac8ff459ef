"""Counterfactual multi-horizon prediction learning with unknown behavior policy.

Eight prediction heads (four horizons each for lane centeredness and road
angle) are trained off-policy under a keep-doing-what-you-are-doing target
policy.  Sampling is proportional to importance ratios, whose denominators
come from a discriminator-based estimate of the unknown behavior density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .datagen import DEFAULT_GAMMAS, Transition, head_cumulant_index, head_gammas, read_dataset
from .nn import Adam, Sequential, Sgd, TwoBranchNet, grid_trunk, save_checkpoint
from .replay import ReplayBuffer
from .simulator import SPEED_MAX, STEER_LIMIT

SPEED_CENTER = 0.35
SPEED_HALF_RANGE = 0.25


def norm_speed(v):
    return (np.asarray(v, dtype=float) - SPEED_CENTER) / SPEED_HALF_RANGE


def norm_action(a):
    """Map raw (steer, target_speed) to roughly [-1, 1]^2 network inputs."""
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    out[..., 0] = a[..., 0] / STEER_LIMIT
    out[..., 1] = norm_speed(a[..., 1])
    return out


def lowdim_features(speed, prev_action):
    """Network-side state vector: normalized speed and previous action."""
    speed = np.atleast_1d(np.asarray(speed, dtype=float))
    prev = np.asarray(prev_action, dtype=float)
    if prev.ndim == 1:
        prev = prev[None, :]
    return np.column_stack([norm_speed(speed), norm_action(prev)])


class TargetPolicy:
    """Gaussian centered on the previous action with fixed diagonal covariance."""

    def __init__(self, sigma2: float = 0.0025):
        self.sigma2 = sigma2

    def density(self, a, a_prev):
        a = np.asarray(a, dtype=float)
        a_prev = np.asarray(a_prev, dtype=float)
        d2 = ((a - a_prev) ** 2).sum(axis=-1)
        return np.exp(-0.5 * d2 / self.sigma2) / (2.0 * math.pi * self.sigma2)

    def sample(self, a_prev, rng: np.random.Generator):
        a_prev = np.asarray(a_prev, dtype=float)
        return a_prev + rng.normal(0.0, math.sqrt(self.sigma2), a_prev.shape)


class UniformActionDensity:
    """Known reference density: uniform over steering x target-speed box."""

    def __init__(self, steer_range=(-STEER_LIMIT, STEER_LIMIT), speed_range=(0.0, 1.0)):
        self.steer_range = steer_range
        self.speed_range = speed_range
        self.volume = (steer_range[1] - steer_range[0]) * (speed_range[1] - speed_range[0])

    def density(self, a):
        a = np.asarray(a, dtype=float)
        inside = (
            (a[..., 0] >= self.steer_range[0]) & (a[..., 0] <= self.steer_range[1])
            & (a[..., 1] >= self.speed_range[0]) & (a[..., 1] <= self.speed_range[1])
        )
        return np.where(inside, 1.0 / self.volume, 0.0)

    def sample(self, n: int, rng: np.random.Generator):
        steer = rng.uniform(*self.steer_range, n)
        speed = rng.uniform(*self.speed_range, n)
        return np.column_stack([steer, speed])


def estimate_mu(g_out, eta_value, g_clamp: float = 1e-4):
    """Behavior density from discriminator output: g/(1-g) * eta."""
    g = np.clip(np.asarray(g_out, dtype=float), g_clamp, 1.0 - g_clamp)
    return g / (1.0 - g) * np.asarray(eta_value, dtype=float)


def importance_ratio(tau_value, mu_hat, rho_max: float = 100.0):
    """Clipped ratio of target to estimated behavior density."""
    return np.clip(np.asarray(tau_value, dtype=float) / np.asarray(mu_hat, dtype=float),
                   0.0, rho_max)


def td_target(cumulants, continuation, phi_next, head_cum_idx, gammas,
              scale_cumulants: bool):
    """Bootstrapped per-head targets; continuation is already zero at episode end."""
    cumulants = np.asarray(cumulants, dtype=float)
    c = cumulants[:, head_cum_idx]
    if scale_cumulants:
        c = c * (1.0 - gammas)
    return c + np.asarray(continuation, dtype=float) * phi_next


def predictive_state(phi, speed, prev_action) -> np.ndarray:
    """Policy input: the 8 predictions, previous action, current speed (length 11)."""
    phi = np.asarray(phi, dtype=float).reshape(-1)
    if len(phi) != 8:
        raise ValueError(f"expected 8 predictions, got {len(phi)}")
    prev_action = np.asarray(prev_action, dtype=float).reshape(-1)
    psi = np.concatenate([phi, prev_action, [float(speed)]])
    if not np.isfinite(psi).all():
        raise ValueError("non-finite predictive state")
    return psi


@dataclass
class GvfConfig:
    gammas: Sequence[float] = DEFAULT_GAMMAS
    scale_cumulants: bool = True
    lr: float = 1e-4
    behavior_lr: float = 1e-4
    batch_size: int = 128
    capacity: int = 500_000
    warmup: int = 10_000
    rho_max: float = 100.0
    g_clamp: float = 1e-4
    updates_per_insert: int = 1
    total_updates: Optional[int] = None  # default: one update per streamed transition
    stale_ratio: float = 2.0  # refresh stored rho when off by more than this factor
    optimizer: str = "adam"  # "sgd" gives the plain semi-gradient step
    conv_channels: Sequence[int] = (8, 16)
    dense: Sequence[int] = (128, 64)
    dtype: str = "float64"

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def n_heads(self) -> int:
        return 2 * len(self.gammas)


class GvfLearner:
    """Semi-gradient TD learner for the prediction heads.

    update() implements the importance-resampling step: minibatches arrive
    from a rho-proportional sampler and the gradient is scaled by the buffer
    mean ratio.  No gradient flows through the bootstrap target and no target
    network is kept.
    """

    def __init__(self, net, cfg: GvfConfig):
        self.net = net
        self.cfg = cfg
        self.opt = Adam(cfg.lr) if cfg.optimizer == "adam" else Sgd(cfg.lr)
        self.gammas = head_gammas(cfg.gammas).astype(float)
        self.head_cum_idx = head_cumulant_index(len(cfg.gammas))

    @classmethod
    def for_grid(cls, grid_shape, cfg: GvfConfig, rng: np.random.Generator):
        net = grid_trunk(grid_shape, vec_dim=3, out_dim=cfg.n_heads, rng=rng,
                         conv_channels=tuple(cfg.conv_channels),
                         dense=tuple(cfg.dense), dtype=cfg.np_dtype)
        return cls(net, cfg)

    def phi(self, *inputs) -> np.ndarray:
        return self.net.forward(*inputs)

    def phi_from_obs(self, obs, speed, prev_action) -> np.ndarray:
        obs = np.asarray(obs, dtype=self.cfg.np_dtype)
        single = obs.ndim == 3
        if single:
            obs = obs[None]
        vec = lowdim_features(speed, prev_action).astype(self.cfg.np_dtype)
        out = self.net.forward(obs, vec)
        return out[0] if single else out

    def update(self, inputs, next_inputs, cumulants, continuation, rho_bar: float) -> float:
        """One importance-resampling TD step; returns the mean squared TD error."""
        phi_next = self.net.forward(*next_inputs)
        y = td_target(cumulants, continuation, phi_next, self.head_cum_idx,
                      self.gammas, self.cfg.scale_cumulants)
        phi = self.net.forward(*inputs)
        delta = phi - y
        if not np.isfinite(delta).all():
            raise RuntimeError("non-finite TD error; aborting update")
        self.net.zero_grads()
        self.net.backward((rho_bar * delta / len(delta)).astype(phi.dtype))
        self.opt.step(self.net)
        return float((delta ** 2).mean())


class BehaviorEstimator:
    """Discriminator-based estimate of the unknown behavior action density."""

    def __init__(self, net, cfg: GvfConfig, eta: Optional[UniformActionDensity] = None,
                 tau: Optional[TargetPolicy] = None):
        self.net = net
        self.cfg = cfg
        self.eta = eta if eta is not None else UniformActionDensity()
        self.tau = tau if tau is not None else TargetPolicy()
        self.opt = Adam(cfg.behavior_lr)

    @classmethod
    def for_grid(cls, grid_shape, cfg: GvfConfig, rng: np.random.Generator, **kw):
        net = grid_trunk(grid_shape, vec_dim=5, out_dim=1, rng=rng,
                         conv_channels=tuple(cfg.conv_channels),
                         dense=tuple(cfg.dense), dtype=cfg.np_dtype)
        return cls(net, cfg, **kw)

    def _vec(self, speed, prev_action, action):
        return np.column_stack([lowdim_features(speed, prev_action),
                                norm_action(np.asarray(action, dtype=float))])

    def g(self, obs, speed, prev_action, action) -> np.ndarray:
        """Discriminator class probability that (a, s) came from the data."""
        obs = np.asarray(obs, dtype=self.cfg.np_dtype)
        vec = self._vec(speed, prev_action, action).astype(self.cfg.np_dtype)
        logit = self.net.forward(obs, vec)[:, 0]
        return 1.0 / (1.0 + np.exp(-logit))

    def mu_hat(self, obs, speed, prev_action, action) -> np.ndarray:
        g = self.g(obs, speed, prev_action, action)
        return estimate_mu(g, self.eta.density(action), self.cfg.g_clamp)

    def rho(self, obs, speed, prev_action, action) -> np.ndarray:
        tau_val = self.tau.density(action, prev_action)
        return importance_ratio(tau_val, self.mu_hat(obs, speed, prev_action, action),
                                self.cfg.rho_max)

    def update(self, obs, speed, prev_action, action, rng: np.random.Generator) -> float:
        """Binary cross-entropy step: half the minibatch keeps its logged action
        (label 1), the other half gets a fresh action from eta (label 0)."""
        n = len(action)
        action = np.array(action, dtype=float)
        z = np.ones(n)
        swap = rng.permutation(n)[: n // 2]
        action[swap] = self.eta.sample(len(swap), rng)
        z[swap] = 0.0
        obs = np.asarray(obs, dtype=self.cfg.np_dtype)
        vec = self._vec(speed, prev_action, action).astype(self.cfg.np_dtype)
        logit = self.net.forward(obs, vec)[:, 0]
        g = 1.0 / (1.0 + np.exp(-logit))
        eps = 1e-12
        loss = float(-(z * np.log(g + eps) + (1 - z) * np.log(1 - g + eps)).mean())
        self.net.zero_grads()
        self.net.backward(((g - z) / n)[:, None].astype(self.cfg.np_dtype))
        self.opt.step(self.net)
        return loss


# --- training loops ----------------------------------------------------------


@dataclass
class TrainLog:
    """Training-curve rows: (update step, td loss, behavior loss, buffer mean rho)."""

    every: int = 100
    rows: list = field(default_factory=list)

    def add(self, step, td_loss, behavior_loss, mean_rho):
        if step % self.every == 0:
            self.rows.append((step, td_loss, behavior_loss, mean_rho))

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write("step,td_loss,behavior_loss,mean_rho\n")
            for row in self.rows:
                f.write(",".join(f"{v:.8g}" for v in row) + "\n")


class _StreamTrainer:
    """Shared core of the online and offline learning loops."""

    def __init__(self, gvf: GvfLearner, behavior: BehaviorEstimator, cfg: GvfConfig,
                 rng: np.random.Generator):
        self.gvf = gvf
        self.behavior = behavior
        self.cfg = cfg
        self.rng = rng
        self.buffer = ReplayBuffer(cfg.capacity, cfg.warmup)
        self.updates_done = 0
        self.log = TrainLog()

    def insert(self, t: Transition) -> None:
        rho = float(self.behavior.rho(
            t.obs[None].astype(self.cfg.np_dtype), [t.speed], t.prev_action[None],
            t.action[None])[0])
        t.rho = np.float32(rho)
        self.buffer.insert(t, rho)

    def insert_many(self, transitions: list) -> None:
        obs = np.stack([t.obs for t in transitions]).astype(self.cfg.np_dtype)
        speed = np.array([t.speed for t in transitions], dtype=float)
        prev = np.stack([t.prev_action for t in transitions]).astype(float)
        act = np.stack([t.action for t in transitions]).astype(float)
        rhos = self.behavior.rho(obs, speed, prev, act)
        for t, rho in zip(transitions, rhos):
            t.rho = np.float32(rho)
            self.buffer.insert(t, float(rho))

    def _batch_inputs(self, batch):
        dtype = self.cfg.np_dtype
        obs = batch["obs"].astype(dtype)
        nobs = batch["next_obs"].astype(dtype)
        vec = lowdim_features(batch["speed"], batch["prev_action"]).astype(dtype)
        nvec = lowdim_features(batch["next_speed"], batch["action"]).astype(dtype)
        return (obs, vec), (nobs, nvec)

    def _refresh_stale(self, ids, batch) -> None:
        rho_new = self.behavior.rho(batch["obs"].astype(self.cfg.np_dtype),
                                    batch["speed"], batch["prev_action"],
                                    batch["action"])
        stored = np.array([self.buffer.rho(int(i)) for i in ids])
        ratio = rho_new / np.maximum(stored, 1e-12)
        stale = (ratio > self.cfg.stale_ratio) | (ratio < 1.0 / self.cfg.stale_ratio)
        for i, r in zip(np.asarray(ids)[stale], rho_new[stale]):
            self.buffer.update_priority(int(i), float(r))

    def update_once(self) -> None:
        ids = self.buffer.sample_proportional(self.cfg.batch_size, self.rng)
        batch = self.buffer.get_batch(ids)
        self._refresh_stale(ids, batch)
        rho_bar = self.buffer.mean_priority()
        inputs, next_inputs = self._batch_inputs(batch)
        td_loss = self.gvf.update(inputs, next_inputs, batch["cumulants"],
                                  batch["continuation"], rho_bar)
        uniform_ids = self.rng.integers(self.buffer.next_id - self.buffer.size,
                                        self.buffer.next_id, self.cfg.batch_size)
        ub = self.buffer.get_batch(uniform_ids)
        b_loss = self.behavior.update(ub["obs"], ub["speed"], ub["prev_action"],
                                      ub["action"], self.rng)
        self.updates_done += 1
        self.log.add(self.updates_done, td_loss, b_loss, rho_bar)


def train_offline(dataset_path, gvf: GvfLearner, behavior: BehaviorEstimator,
                  cfg: GvfConfig, seed: int, checkpoint_path=None,
                  curve_path=None) -> TrainLog:
    """Stream a recorded dataset in order into the replay buffer, computing each
    transition's importance ratio with the current behavior estimate at insertion,
    and alternate prediction and discriminator updates once past warmup."""
    rng = np.random.Generator(np.random.Philox(seed))
    trainer = _StreamTrainer(gvf, behavior, cfg, rng)
    header, stream = read_dataset(dataset_path)
    streamed = 0
    due = 0
    chunk = []

    def flush():
        nonlocal streamed, due
        if not chunk:
            return
        trainer.insert_many(chunk)
        streamed += len(chunk)
        if trainer.buffer.is_warm:
            due += cfg.updates_per_insert * len(chunk)
            cap = due if cfg.total_updates is None else min(due, cfg.total_updates)
            while trainer.updates_done < cap:
                trainer.update_once()
        chunk.clear()

    for t in stream:
        chunk.append(t)
        if len(chunk) >= 256:
            flush()
    flush()
    if streamed == 0:
        raise ValueError(f"empty dataset: {dataset_path}")
    if cfg.total_updates is not None:
        while trainer.updates_done < cfg.total_updates and trainer.buffer.is_warm:
            trainer.update_once()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, gvf_checkpoint_nets(gvf, behavior))
    if curve_path is not None:
        trainer.log.write_csv(curve_path)
    return trainer.log


def train_online(env, action_fn, gvf: GvfLearner, behavior: BehaviorEstimator,
                 cfg: GvfConfig, seed: int, steps: int) -> TrainLog:
    """Live variant: actions come from `action_fn(obs, speed, prev_action, rng)`
    sampling the (unknown) behavior policy; otherwise identical to the offline loop."""
    from .simulator import Action

    rng = np.random.Generator(np.random.Philox(seed))
    trainer = _StreamTrainer(gvf, behavior, cfg, rng)
    gammas_vec = head_gammas(cfg.gammas)
    obs = env.reset()
    for _ in range(steps):
        state = env.state
        action = action_fn(obs, state.pose.speed, state.last_action.as_array(), rng)
        res = env.step(action if isinstance(action, Action) else Action.from_array(action))
        cont = gammas_vec * (0.0 if res.terminated else 1.0)
        t = Transition(
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
        )
        trainer.insert(t)
        if trainer.buffer.is_warm:
            for _ in range(cfg.updates_per_insert):
                trainer.update_once()
        obs = env.reset() if res.terminated else res.observation
    return trainer.log


def gvf_checkpoint_nets(gvf: GvfLearner, behavior: BehaviorEstimator) -> dict:
    nets = {"gvf_conv": gvf.net.conv, "gvf_head": gvf.net.head}
    if behavior is not None:
        nets["behavior_conv"] = behavior.net.conv
        nets["behavior_head"] = behavior.net.head
    return nets
