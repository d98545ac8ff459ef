import hashlib
import math

import numpy as np
import pytest

from lanelab.datagen import (
    CollectConfig,
    DatasetWriter,
    PursuitState,
    Transition,
    advance_target,
    collect_dataset,
    collect_episode,
    flip_augment,
    head_gammas,
    load_dataset,
    ou_step,
    perturb_target,
    pure_pursuit_action,
    subsample_targets,
)
from lanelab.geometry import Pose, TrackShape, TrackSpec, build_track
from lanelab.simulator import Action, LaneKeepSim, SimConfig


class ZeroRng:
    """Stub generator: all noise draws return zero."""

    def normal(self, loc=0.0, scale=1.0, size=None):
        return np.zeros(size) if size is not None else 0.0

    def standard_normal(self, size=None):
        return np.zeros(size) if size is not None else 0.0


class TestPurePursuit:
    def test_diagonal_target(self):
        a = pure_pursuit_action(Pose(np.zeros(2), 0.0), (1.0, 1.0), 0.35)
        assert a.steer == pytest.approx(math.pi / 4)

    def test_speed_clip(self):
        a = pure_pursuit_action(Pose(np.zeros(2), 0.0), (1.0, 0.0), 0.7)
        assert a.target_speed == 0.5
        a = pure_pursuit_action(Pose(np.zeros(2), 0.0), (1.0, 0.0), 0.05)
        assert a.target_speed == 0.2

    def test_target_behind_clips_steer(self):
        a = pure_pursuit_action(Pose(np.zeros(2), 0.0), (-1.0, 0.0), 0.35)
        assert abs(a.steer) == pytest.approx(math.pi / 2)

    def test_coincident_target(self):
        a = pure_pursuit_action(Pose(np.zeros(2), 0.3), (0.0, 0.0), 0.35)
        assert a.steer == 0.0


class TestAdvanceTarget:
    @pytest.fixture(scope="class")
    def targets(self):
        path = build_track(TrackSpec(TrackShape.CIRCLE, radius=1.5))
        return subsample_targets(path)

    def near(self, targets, index, offset):
        p = targets.position(index).copy()
        p[0] += offset
        return Pose(p, 0.0)

    def test_within_threshold_advances(self, targets):
        st = PursuitState(target_index=1)
        hit = advance_target(self.near(targets, 1, 0.02), st, targets)
        assert hit and st.target_index == 2

    def test_outside_threshold_stays(self, targets):
        st = PursuitState(target_index=1)
        hit = advance_target(self.near(targets, 1, 0.03), st, targets)
        assert not hit and st.target_index == 1

    def test_wraps_at_end(self, targets):
        last = len(targets) - 1
        st = PursuitState(target_index=last)
        hit = advance_target(self.near(targets, last, 0.01), st, targets)
        assert hit and st.target_index == 0

    def test_passed_target_advances_by_arclength(self, targets):
        # vehicle track position just past target 1: advances even though far away
        st = PursuitState(target_index=1)
        vehicle_wp = targets.path_indices[1] + targets.stride // 2
        pose = self.near(targets, 1, 0.2)
        hit = advance_target(pose, st, targets, vehicle_index=int(vehicle_wp))
        assert hit and st.target_index == 2


class TestPerturbTarget:
    def test_zero_variance_keeps_previous_noise(self):
        st = PursuitState(target_index=0, pos_noise=np.array([0.1, -0.2]))
        pos, speed = perturb_target(np.array([1.0, 1.0]), st, ZeroRng())
        assert pos == pytest.approx([1.1, 0.8])
        assert speed == pytest.approx(0.35)

    def test_initial_speed_walk(self):
        st = PursuitState(target_index=0)
        _, speed = perturb_target(np.zeros(2), st, ZeroRng())
        assert speed == pytest.approx(0.35)

    def test_noise_always_clipped(self):
        rng = np.random.default_rng(0)
        st = PursuitState(target_index=0)
        for _ in range(10_000):
            perturb_target(np.zeros(2), st, rng)
            assert (np.abs(st.pos_noise) <= 0.3).all()


class TestOuStep:
    def test_deterministic_decay(self):
        class NoNoise(ZeroRng):
            pass

        x = ou_step(np.array([1.0]), NoNoise())
        assert x[0] == pytest.approx(0.99)

    def test_fixed_point(self):
        x = ou_step(np.array([0.0]), ZeroRng())
        assert x[0] == 0.0

    def test_stationary_variance(self):
        # AR(1) form of the OU update lets scipy replay the same recursion exactly
        from scipy.signal import lfilter

        rng = np.random.default_rng(1)
        n = 1_000_000
        noise = 0.1 * math.sqrt(0.01) * rng.standard_normal(n)
        xs = lfilter([1.0], [1.0, -(1.0 - 1.0 * 0.01)], noise)
        var = xs[10_000:].var()
        target = 0.1 ** 2 / (2 * 1.0)
        assert abs(var - target) / target < 0.1

    def test_matches_lfilter_recursion(self):
        rng = np.random.default_rng(2)
        draws = rng.standard_normal(200)

        class Replay:
            def __init__(self):
                self.i = 0

            def standard_normal(self, size=None):
                v = draws[self.i]
                self.i += 1
                return np.full(size, v) if size is not None else v

        r = Replay()
        x = np.zeros(1)
        mine = []
        for _ in range(200):
            x = ou_step(x, r)
            mine.append(x[0])
        from scipy.signal import lfilter

        ref = lfilter([1.0], [1.0, -0.99], 0.1 * math.sqrt(0.01) * draws)
        assert np.allclose(mine, ref, atol=1e-12)


def make_transition(steer=0.3, alpha=0.3, rng=None):
    rng = rng or np.random.default_rng(0)
    obs = (rng.random((2, 16, 32)) < 0.1).astype(np.float32)
    nobs = (rng.random((2, 16, 32)) < 0.1).astype(np.float32)
    return Transition(
        obs=obs,
        speed=np.float32(0.35),
        prev_action=np.array([0.1, 0.3], dtype=np.float32),
        action=np.array([steer, 0.4], dtype=np.float32),
        cumulants=np.array([alpha, -0.05], dtype=np.float32),
        continuation=head_gammas(),
        next_obs=nobs,
        next_speed=np.float32(0.36),
        reward=np.float32(0.2),
        done=False,
    )


class TestFlipAugment:
    def test_involution_bit_exact(self):
        t = make_transition()
        tt = flip_augment(flip_augment(t))
        assert (tt.obs == t.obs).all() and (tt.next_obs == t.next_obs).all()
        assert (tt.action == t.action).all() and (tt.cumulants == t.cumulants).all()

    def test_alpha_negated(self):
        t = make_transition(alpha=0.3)
        assert flip_augment(t).cumulants[0] == np.float32(-0.3)

    def test_symmetric_obs_unchanged_steer_negated(self):
        t = make_transition(steer=0.2)
        t.obs = t.obs + t.obs[:, :, ::-1]
        t.obs = (t.obs > 0).astype(np.float32)
        t.next_obs = t.obs.copy()
        f = flip_augment(t)
        assert (f.obs == t.obs).all()
        assert f.action[0] == np.float32(-0.2)
        assert f.action[1] == t.action[1]


class TestDatasetIO:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        ts = [make_transition(rng=rng) for _ in range(7)]
        ts[3].done = True
        ts[3].continuation = np.zeros(8, dtype=np.float32)
        f = tmp_path / "d.bin"
        with DatasetWriter(f) as w:
            for t in ts:
                w.write(t)
        header, loaded = load_dataset(f)
        assert header["gammas"] == [0.5, 0.9, 0.95, 0.97]
        assert len(loaded) == 7
        for a, b in zip(ts, loaded):
            assert (a.obs == b.obs).all() and (a.next_obs == b.next_obs).all()
            assert a.speed == b.speed and a.next_speed == b.next_speed
            assert (a.prev_action == b.prev_action).all()
            assert (a.action == b.action).all()
            assert (a.cumulants == b.cumulants).all()
            assert (a.continuation == b.continuation).all()
            assert a.reward == b.reward and a.done == b.done and a.rho == b.rho

    def test_not_a_dataset(self, tmp_path):
        f = tmp_path / "x.bin"
        f.write_bytes(b'{"format": "other"}\n')
        with pytest.raises(ValueError):
            load_dataset(f)


@pytest.fixture(scope="module")
def small_collect(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "small.bin"
    specs = [TrackSpec(TrackShape.CIRCLE, radius=1.5)]
    cfg = CollectConfig(episodes_per_direction=1, steps_per_episode=100)
    stats = collect_dataset(specs, out, seed=123, cfg=cfg)
    return out, stats


class TestCollect:
    def test_flip_doubles_count(self, small_collect):
        out, stats = small_collect
        _, ts = load_dataset(out)
        assert stats["total"] == len(ts)
        assert len(ts) == 2 * stats["circle"]
        assert stats["circle"] == 200  # 100 steps x 2 directions

    def test_signed_steer_mean_zero(self, small_collect):
        out, _ = small_collect
        _, ts = load_dataset(out)
        steers = np.array([t.action[0] for t in ts])
        assert steers.sum() == 0.0  # exact cancellation of flipped copies

    def test_same_seed_identical_files(self, tmp_path, small_collect):
        out1, _ = small_collect
        out2 = tmp_path / "again.bin"
        specs = [TrackSpec(TrackShape.CIRCLE, radius=1.5)]
        cfg = CollectConfig(episodes_per_direction=1, steps_per_episode=100)
        collect_dataset(specs, out2, seed=123, cfg=cfg)
        h1 = hashlib.sha256(open(out1, "rb").read()).hexdigest()
        h2 = hashlib.sha256(open(out2, "rb").read()).hexdigest()
        assert h1 == h2

    def test_safe_exploration_no_out_of_lane(self):
        # noisy pursuit stays inside the lane on the training shapes
        for shape, kw in [(TrackShape.CIRCLE, dict(radius=1.5)),
                          (TrackShape.RECTANGLE, dict(width=4.0, height=3.0)),
                          (TrackShape.FIGURE8, dict(scale=2.2))]:
            path = build_track(TrackSpec(shape, **kw))
            sim = LaneKeepSim(path, SimConfig())
            cfg = CollectConfig(steps_per_episode=600)
            for seed in range(3):
                rng = np.random.default_rng(seed)
                eps = collect_episode(sim, cfg, rng)
                assert not eps[-1].done, f"{shape} seed {seed} left the lane"

    def test_episode_cumulants_match_metrics_range(self, small_collect):
        out, _ = small_collect
        _, ts = load_dataset(out)
        cums = np.array([t.cumulants for t in ts])
        assert (np.abs(cums[:, 0]) <= 1.0).all()
        assert (np.abs(cums[:, 1]) <= math.pi / 2).all()
