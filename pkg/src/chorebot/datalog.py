"""Timestamped demonstration/rollout logs and their conversion to training data.

An episode holds three independently clocked streams (end-effector pose,
gripper aperture, observation vectors) that share one monotonic episode
clock. They are synchronized by resampling onto a common control-rate grid,
from which consecutive-pose relative actions and observation histories are
derived.

On-disk format (one episode per file):
    magic "RUMLOG1\\n"
    one JSON header line (format version, stream names/rates/widths, meta)
    per stream: u32 name length, name bytes, u32 sample count, u32 width,
                little-endian f64 timestamps, little-endian f64 payload rows
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptyDatasetError,
    EmptyEpisodeError,
    FormatError,
    InsufficientDataError,
    SyncError,
)
from .geom import Pose2, Pose3, RelAction, relative, slerp, wrap_angle

MAGIC = b"RUMLOG1\n"
FORMAT_VERSION = 1

POSE2_WIDTH = 3  # x, y, theta
POSE3_WIDTH = 7  # x, y, z, qw, qx, qy, qz


@dataclass
class Stream:
    """One sensor stream: strictly increasing timestamps + payload rows."""

    t: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.t.ndim != 1 or self.t.shape[0] != self.values.shape[0]:
            raise FormatError("stream timestamps and payload rows must align")
        if self.t.shape[0] >= 2 and not np.all(np.diff(self.t) > 0):
            raise FormatError("stream timestamps must be strictly increasing")

    def __len__(self) -> int:
        return int(self.t.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])


def pose_to_row(pose) -> np.ndarray:
    if isinstance(pose, Pose2):
        return np.array([pose.x, pose.y, pose.theta])
    return np.concatenate([pose.p, pose.q])


def row_to_pose(row: np.ndarray):
    row = np.asarray(row, dtype=float)
    if row.shape[0] == POSE2_WIDTH:
        return Pose2(row[0], row[1], row[2])
    if row.shape[0] == POSE3_WIDTH:
        return Pose3(row[:3], row[3:7])
    raise FormatError(f"pose row width {row.shape[0]} is neither SE(2) nor SE(3)")


@dataclass
class EpisodeLog:
    """One recorded demonstration or rollout.

    meta keys: task_id, env_id, demonstrator_id, expertise (expert|nonexpert),
    source (scripted|teleop|rollout), success (optional bool), plus anything
    the producer wants to keep (e.g. the env spec for replay).
    """

    pose_stream: Stream
    gripper_stream: Stream
    obs_stream: Stream
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        for name, s in (("pose", self.pose_stream),
                        ("gripper", self.gripper_stream),
                        ("obs", self.obs_stream)):
            if len(s) == 0:
                raise InsufficientDataError(f"{name} stream is empty")
        g = self.gripper_stream.values
        if np.any(g < -1e-12) or np.any(g > 1.0 + 1e-12):
            raise FormatError("gripper values outside [0, 1]")

    def save(self, path) -> None:
        self.validate()
        header = {
            "format_version": FORMAT_VERSION,
            "streams": [
                {"name": "pose", "count": len(self.pose_stream), "width": self.pose_stream.width},
                {"name": "gripper", "count": len(self.gripper_stream), "width": self.gripper_stream.width},
                {"name": "obs", "count": len(self.obs_stream), "width": self.obs_stream.width},
            ],
            "meta": self.meta,
        }
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            for name, s in (("pose", self.pose_stream),
                            ("gripper", self.gripper_stream),
                            ("obs", self.obs_stream)):
                nb = name.encode("utf-8")
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                f.write(struct.pack("<II", len(s), s.width))
                f.write(np.ascontiguousarray(s.t, dtype="<f8").tobytes())
                f.write(np.ascontiguousarray(s.values, dtype="<f8").tobytes())

    @staticmethod
    def load(path) -> "EpisodeLog":
        with open(path, "rb") as f:
            if f.read(len(MAGIC)) != MAGIC:
                raise FormatError(f"{path}: bad magic, not an episode log")
            header = json.loads(f.readline().decode("utf-8"))
            if header.get("format_version") != FORMAT_VERSION:
                raise FormatError(f"{path}: unsupported format version")
            streams = {}
            for _ in header["streams"]:
                (name_len,) = struct.unpack("<I", f.read(4))
                name = f.read(name_len).decode("utf-8")
                count, width = struct.unpack("<II", f.read(8))
                t = np.frombuffer(f.read(8 * count), dtype="<f8").copy()
                vals = np.frombuffer(f.read(8 * count * width), dtype="<f8").copy()
                streams[name] = Stream(t, vals.reshape(count, width))
        try:
            return EpisodeLog(
                pose_stream=streams["pose"],
                gripper_stream=streams["gripper"],
                obs_stream=streams["obs"],
                meta=header["meta"],
            )
        except KeyError as e:
            raise FormatError(f"{path}: missing stream {e}") from e


@dataclass
class ResampledEpisode:
    """Episode synchronized onto the control-rate grid."""

    t: np.ndarray
    poses: list
    g: np.ndarray
    obs: np.ndarray

    def __len__(self) -> int:
        return int(self.t.shape[0])


def _interp_pose(stream: Stream, tk: float):
    """Linear position, slerp (shortest-arc angle) rotation; exact at samples."""
    idx = int(np.searchsorted(stream.t, tk))
    if idx < len(stream) and stream.t[idx] == tk:
        return row_to_pose(stream.values[idx])
    lo, hi = idx - 1, idx
    u = (tk - stream.t[lo]) / (stream.t[hi] - stream.t[lo])
    a, b = stream.values[lo], stream.values[hi]
    if stream.width == POSE2_WIDTH:
        dtheta = wrap_angle(b[2] - a[2])
        return Pose2(a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1]), a[2] + u * dtheta)
    p = a[:3] + u * (b[:3] - a[:3])
    return Pose3(p, slerp(a[3:7], b[3:7], u))


def _interp_linear(stream: Stream, tk: float) -> np.ndarray:
    idx = int(np.searchsorted(stream.t, tk))
    if idx < len(stream) and stream.t[idx] == tk:
        return stream.values[idx].copy()
    lo, hi = idx - 1, idx
    u = (tk - stream.t[lo]) / (stream.t[hi] - stream.t[lo])
    return stream.values[lo] + u * (stream.values[hi] - stream.values[lo])


def _hold_previous(stream: Stream, tk: float) -> np.ndarray:
    idx = int(np.searchsorted(stream.t, tk, side="right")) - 1
    return stream.values[idx].copy()


def resample(log: EpisodeLog, control_rate_hz: float) -> ResampledEpisode:
    """Synchronize all streams onto the grid t_k = t_start + k / f_c.

    t_start is the latest stream start; the grid covers the common time
    range. Pose interpolates linearly in position and by slerp in rotation,
    gripper linearly, observations by zero-order hold.
    """
    streams = (log.pose_stream, log.gripper_stream, log.obs_stream)
    for name, s in zip(("pose", "gripper", "obs"), streams):
        if len(s) < 2:
            raise InsufficientDataError(f"{name} stream needs >= 2 samples, has {len(s)}")
    t_start = max(float(s.t[0]) for s in streams)
    t_end = min(float(s.t[-1]) for s in streams)
    if t_end < t_start:
        raise SyncError("stream time ranges do not overlap")
    n = int(np.floor((t_end - t_start) * control_rate_hz)) + 1
    t = t_start + np.arange(n) / control_rate_hz
    poses = [_interp_pose(log.pose_stream, tk) for tk in t]
    g = np.array([float(_interp_linear(log.gripper_stream, tk)[0]) for tk in t])
    obs = np.stack([_hold_previous(log.obs_stream, tk) for tk in t])
    return ResampledEpisode(t=t, poses=poses, g=g, obs=obs)


@dataclass
class TrainingPair:
    """Observation history (oldest first) paired with the next action chunk."""

    obs_history: np.ndarray  # (H, obs_dim)
    action_chunk: list  # C RelActions

    def chunk_vector(self) -> np.ndarray:
        return np.concatenate([a.to_vector() for a in self.action_chunk])

    def history_vector(self) -> np.ndarray:
        return self.obs_history.reshape(-1)


def build_pairs(ep: ResampledEpisode, history_len: int, chunk_len: int) -> list[TrainingPair]:
    """Slide over a resampled episode, emitting (history, chunk) pairs.

    Action k is relative(pose_k, pose_{k+1}) with the next step's gripper
    aperture as the absolute target. Histories before the episode start are
    left-padded by repeating the first observation. Pair count is T - C.
    """
    T = len(ep)
    if T <= chunk_len:
        raise EmptyEpisodeError(f"episode length {T} cannot supply a chunk of {chunk_len}")
    actions = [
        relative(ep.poses[k], ep.poses[k + 1], g=float(np.clip(ep.g[k + 1], 0.0, 1.0)))
        for k in range(T - 1)
    ]
    pairs = []
    for t in range(T - chunk_len):
        rows = [ep.obs[max(0, i)] for i in range(t - history_len + 1, t + 1)]
        pairs.append(TrainingPair(
            obs_history=np.stack(rows),
            action_chunk=actions[t:t + chunk_len],
        ))
    return pairs


@dataclass
class DatasetConfig:
    """Filters and rates for dataset assembly."""

    control_rate_hz: float = 3.75
    history_len: int = 6
    chunk_len: int = 3
    env_count: int | None = None
    demos_per_env: int | None = None
    expertise: str | None = None
    exclude_failed: bool = True

    def __post_init__(self):
        if self.control_rate_hz <= 0:
            raise ValueError("control_rate_hz must be positive")
        if self.history_len < 1 or self.chunk_len < 1:
            raise ValueError("history_len and chunk_len must be >= 1")


@dataclass
class Dataset:
    """Flattened training tensors plus per-pair provenance."""

    inputs: np.ndarray  # (N, H * obs_dim)
    targets: np.ndarray  # (N, C * action_dim)
    history_len: int
    chunk_len: int
    obs_dim: int
    action_dim: int
    provenance: list  # (env_id, log_index) per pair
    selected_envs: list
    selected_logs: list  # indices into the input log list

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


def assemble(logs: list[EpisodeLog], cfg: DatasetConfig, seed: int = 0) -> Dataset:
    """Filter, subsample, and flatten logs into one training set.

    Selection is deterministic per seed: env_count environments uniformly at
    random, then demos_per_env demos per environment. Logs flagged
    success=false are dropped while the quality filter is on.
    """
    rng = np.random.default_rng(seed)
    eligible = []
    for i, log in enumerate(logs):
        meta = log.meta
        if cfg.expertise is not None and meta.get("expertise") != cfg.expertise:
            continue
        if cfg.exclude_failed and meta.get("success") is False:
            continue
        eligible.append(i)
    if not eligible:
        raise EmptyDatasetError("no logs left after expertise/quality filtering")

    by_env: dict[str, list[int]] = {}
    for i in eligible:
        by_env.setdefault(str(logs[i].meta.get("env_id", "?")), []).append(i)
    env_ids = sorted(by_env)
    if cfg.env_count is not None and cfg.env_count < len(env_ids):
        pick = rng.choice(len(env_ids), size=cfg.env_count, replace=False)
        env_ids = [env_ids[j] for j in sorted(pick)]
    selected: list[int] = []
    for env_id in env_ids:
        members = by_env[env_id]
        if cfg.demos_per_env is not None and cfg.demos_per_env < len(members):
            pick = rng.choice(len(members), size=cfg.demos_per_env, replace=False)
            members = [members[j] for j in sorted(pick)]
        selected.extend(members)
    if not selected:
        raise EmptyDatasetError("environment/demo filters removed every log")

    inputs, targets, provenance = [], [], []
    for i in selected:
        ep = resample(logs[i], cfg.control_rate_hz)
        for pair in build_pairs(ep, cfg.history_len, cfg.chunk_len):
            inputs.append(pair.history_vector())
            targets.append(pair.chunk_vector())
            provenance.append((str(logs[i].meta.get("env_id", "?")), i))
    obs_dim = inputs[0].shape[0] // cfg.history_len
    action_dim = targets[0].shape[0] // cfg.chunk_len
    return Dataset(
        inputs=np.stack(inputs),
        targets=np.stack(targets),
        history_len=cfg.history_len,
        chunk_len=cfg.chunk_len,
        obs_dim=obs_dim,
        action_dim=action_dim,
        provenance=provenance,
        selected_envs=env_ids,
        selected_logs=selected,
    )


def export_pairs_csv(pairs: list[TrainingPair], path) -> None:
    """Debug dump: one row per pair, history then chunk, flattened."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        if not pairs:
            return
        h = pairs[0].history_vector().shape[0]
        c = pairs[0].chunk_vector().shape[0]
        writer.writerow([f"h{i}" for i in range(h)] + [f"a{i}" for i in range(c)])
        for p in pairs:
            writer.writerow(
                [f"{v:.17g}" for v in p.history_vector()]
                + [f"{v:.17g}" for v in p.chunk_vector()]
            )
