import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chorebot.datalog import (
    Dataset,
    DatasetConfig,
    EpisodeLog,
    Stream,
    assemble,
    build_pairs,
    export_pairs_csv,
    resample,
)
from chorebot.errors import (
    EmptyDatasetError,
    EmptyEpisodeError,
    FormatError,
    InsufficientDataError,
    SyncError,
)
from chorebot.geom import Pose2, apply, relative


def linear_motion_log(duration=4.0, pose_hz=100.0, grip_hz=60.0, obs_hz=60.0):
    """Pose moves on a straight line at constant velocity; gripper ramps."""
    tp = np.arange(int(duration * pose_hz) + 1) / pose_hz
    poses = np.stack([0.1 + 0.05 * tp, 0.2 + 0.025 * tp, np.full_like(tp, 0.3)], axis=1)
    tg = np.arange(int(duration * grip_hz) + 1) / grip_hz
    grip = np.clip(tg / duration, 0, 1)
    to = np.arange(int(duration * obs_hz) + 1) / obs_hz
    obs = np.stack([to, to**2], axis=1)
    return EpisodeLog(
        pose_stream=Stream(tp, poses),
        gripper_stream=Stream(tg, grip),
        obs_stream=Stream(to, obs),
        meta={"task_id": "t", "env_id": "e0", "demonstrator_id": "d0",
              "expertise": "expert", "source": "scripted", "success": True},
    )


def grid_log(T=9, f_c=3.75):
    """All streams sampled exactly on the control grid."""
    t = np.arange(T) / f_c
    rng = np.random.default_rng(3)
    poses = rng.uniform(0, 1, size=(T, 3))
    poses[:, 2] = rng.uniform(-3, 3, size=T)
    grip = rng.uniform(0, 1, size=T)
    obs = rng.normal(size=(T, 4))
    return EpisodeLog(
        pose_stream=Stream(t, poses),
        gripper_stream=Stream(t, grip),
        obs_stream=Stream(t, obs),
        meta={"env_id": "e0"},
    )


class TestResample:
    def test_linear_motion_exact(self):
        log = linear_motion_log()
        ep = resample(log, 3.75)
        for tk, pose in zip(ep.t, ep.poses):
            assert abs(pose.x - (0.1 + 0.05 * tk)) < 1e-12
            assert abs(pose.y - (0.2 + 0.025 * tk)) < 1e-12

    def test_output_length_formula(self):
        log = linear_motion_log(duration=4.0)
        ep = resample(log, 3.75)
        assert len(ep) == int(np.floor(4.0 * 3.75)) + 1

    def test_grid_aligned_is_exact_subsample(self):
        log = grid_log(T=12)
        ep = resample(log, 3.75)
        assert len(ep) == 12
        for k in range(12):
            row = log.pose_stream.values[k]
            assert (ep.poses[k].x, ep.poses[k].y) == (row[0], row[1])
            assert ep.g[k] == log.gripper_stream.values[k, 0]
            assert np.array_equal(ep.obs[k], log.obs_stream.values[k])

    def test_obs_zero_order_hold(self):
        t = np.array([0.0, 1.0, 2.0])
        log = EpisodeLog(
            pose_stream=Stream(t, np.zeros((3, 3))),
            gripper_stream=Stream(t, np.array([0.0, 0.5, 1.0])),
            obs_stream=Stream(np.array([0.0, 1.5]), np.array([[1.0], [2.0]])),
        )
        ep = resample(log, 2.0)  # grid at 0.0, 0.5, 1.0, 1.5
        np.testing.assert_array_equal(ep.obs[:, 0], [1.0, 1.0, 1.0, 2.0])

    def test_singleton_stream_rejected(self):
        t = np.array([0.0, 1.0])
        log = EpisodeLog(
            pose_stream=Stream(t, np.zeros((2, 3))),
            gripper_stream=Stream(np.array([0.5]), np.array([0.3])),
            obs_stream=Stream(t, np.zeros((2, 2))),
        )
        with pytest.raises(InsufficientDataError):
            resample(log, 3.75)

    def test_non_overlapping_streams_rejected(self):
        log = EpisodeLog(
            pose_stream=Stream(np.array([0.0, 1.0]), np.zeros((2, 3))),
            gripper_stream=Stream(np.array([5.0, 6.0]), np.array([0.0, 1.0])),
            obs_stream=Stream(np.array([0.0, 1.0]), np.zeros((2, 2))),
        )
        with pytest.raises(SyncError):
            resample(log, 3.75)

    def test_decreasing_timestamps_rejected(self):
        with pytest.raises(FormatError):
            Stream(np.array([0.0, 0.0]), np.zeros((2, 1)))


class TestBuildPairs:
    def test_hand_enumerated_counts(self):
        # T=9, H=6, C=3: pairs at t=0..5 -> 6 pairs; first history all o0
        ep = resample(grid_log(T=9), 3.75)
        pairs = build_pairs(ep, history_len=6, chunk_len=3)
        assert len(pairs) == 6
        first = pairs[0]
        for row in first.obs_history:
            np.testing.assert_array_equal(row, ep.obs[0])
        for i, act in enumerate(first.action_chunk):
            expected = relative(ep.poses[i], ep.poses[i + 1])
            np.testing.assert_allclose(act.dp, expected.dp, atol=1e-15)
        # histories beyond the padding region are verbatim windows
        np.testing.assert_array_equal(pairs[5].obs_history, ep.obs[0:6])

    def test_gripper_target_is_next_step(self):
        ep = resample(grid_log(T=9), 3.75)
        pairs = build_pairs(ep, history_len=2, chunk_len=2)
        assert pairs[0].action_chunk[0].g == pytest.approx(ep.g[1], abs=1e-15)
        assert pairs[3].action_chunk[1].g == pytest.approx(ep.g[5], abs=1e-15)

    def test_stationary_sequence_zero_deltas(self):
        t = np.arange(8) / 3.75
        pose = np.tile([0.4, 0.5, 1.0], (8, 1))
        log = EpisodeLog(
            pose_stream=Stream(t, pose),
            gripper_stream=Stream(t, np.full(8, 0.5)),
            obs_stream=Stream(t, np.zeros((8, 2))),
        )
        pairs = build_pairs(resample(log, 3.75), 3, 2)
        for p in pairs:
            for a in p.action_chunk:
                np.testing.assert_allclose(a.dp, 0, atol=1e-15)
                assert a.drot == 0.0

    def test_chunk_integration_reproduces_pose(self):
        ep = resample(grid_log(T=15), 3.75)
        C = 4
        pairs = build_pairs(ep, history_len=3, chunk_len=C)
        for t, pair in enumerate(pairs):
            pose = ep.poses[t]
            for a in pair.action_chunk:
                pose = apply(pose, a)
            assert pose.allclose(ep.poses[t + C], tol=1e-9)

    def test_full_episode_integration(self):
        ep = resample(linear_motion_log(), 3.75)
        pairs = build_pairs(ep, 6, 3)
        pose = ep.poses[0]
        for p in pairs[::3]:
            for a in p.action_chunk:
                pose = apply(pose, a)
        steps = len(pairs[::3]) * 3
        assert pose.allclose(ep.poses[steps], tol=1e-9)

    def test_too_short_rejected(self):
        ep = resample(grid_log(T=4), 3.75)
        with pytest.raises(EmptyEpisodeError):
            build_pairs(ep, 2, 4)

    @given(st.integers(2, 40), st.integers(1, 6), st.integers(1, 8))
    @settings(max_examples=40, deadline=None)
    def test_pair_count_formula(self, T, C, H):
        ep = resample(grid_log(T=max(T, 2)), 3.75)
        if T <= C:
            with pytest.raises(EmptyEpisodeError):
                build_pairs(ep, H, C)
        else:
            assert len(build_pairs(ep, H, C)) == T - C


def corpus(envs=6, demos=4):
    logs = []
    for e in range(envs):
        for d in range(demos):
            log = grid_log(T=8)
            log.meta = {
                "env_id": f"env{e:02d}",
                "expertise": "expert" if d % 2 == 0 else "nonexpert",
                "success": d != 3,
                "source": "scripted",
            }
            logs.append(log)
    return logs


class TestAssemble:
    def test_counting(self):
        logs = corpus(envs=8, demos=5)
        cfg = DatasetConfig(env_count=3, demos_per_env=5, exclude_failed=False)
        ds = assemble(logs, cfg, seed=1)
        assert len(ds.selected_envs) == 3
        assert len(ds.selected_logs) == 15
        assert len(ds) == 15 * (8 - cfg.chunk_len)

    def test_expertise_filter(self):
        logs = corpus()
        cfg = DatasetConfig(expertise="expert", exclude_failed=False)
        ds = assemble(logs, cfg, seed=0)
        for i in ds.selected_logs:
            assert logs[i].meta["expertise"] == "expert"

    def test_failure_exclusion(self):
        logs = corpus()
        ds = assemble(logs, DatasetConfig(exclude_failed=True), seed=0)
        for i in ds.selected_logs:
            assert logs[i].meta["success"] is not False
        ds_all = assemble(logs, DatasetConfig(exclude_failed=False), seed=0)
        assert len(ds_all.selected_logs) > len(ds.selected_logs)

    def test_seeded_determinism(self):
        logs = corpus(envs=10, demos=6)
        cfg = DatasetConfig(env_count=4, demos_per_env=3, exclude_failed=False)
        a = assemble(logs, cfg, seed=42)
        b = assemble(logs, cfg, seed=42)
        assert a.selected_logs == b.selected_logs
        assert np.array_equal(a.inputs, b.inputs)
        c = assemble(logs, cfg, seed=43)
        assert a.selected_logs != c.selected_logs

    def test_everything_filtered_rejected(self):
        logs = corpus()
        with pytest.raises(EmptyDatasetError):
            assemble(logs, DatasetConfig(expertise="wizard"), seed=0)


class TestSerialization:
    def test_round_trip_byte_identical(self, tmp_path):
        log = linear_motion_log()
        p1 = tmp_path / "a.rumlog"
        p2 = tmp_path / "b.rumlog"
        log.save(p1)
        EpisodeLog.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_payloads_survive(self, tmp_path):
        log = grid_log(T=7)
        log.meta = {"env_id": "e9", "success": True, "nested": {"k": [1, 2]}}
        path = tmp_path / "x.rumlog"
        log.save(path)
        back = EpisodeLog.load(path)
        np.testing.assert_array_equal(back.pose_stream.values, log.pose_stream.values)
        np.testing.assert_array_equal(back.obs_stream.t, log.obs_stream.t)
        assert back.meta == log.meta

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.rumlog"
        path.write_bytes(b"NOTALOG0\n{}")
        with pytest.raises(FormatError):
            EpisodeLog.load(path)

    def test_csv_export(self, tmp_path):
        ep = resample(grid_log(T=9), 3.75)
        pairs = build_pairs(ep, 2, 2)
        out = tmp_path / "pairs.csv"
        export_pairs_csv(pairs, out)
        lines = out.read_text().strip().splitlines()
        assert len(lines) == len(pairs) + 1
        header = lines[0].split(",")
        assert len(header) == pairs[0].history_vector().size + pairs[0].chunk_vector().size
