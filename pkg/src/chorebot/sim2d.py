"""Parameterized 2D manipulation environments with ground-truth oracles.

Four task archetypes on the unit square (soft-object pickups share the
``pickup`` archetype with different object parameters):

  * door: swing a handle along a hinge arc past an opening angle,
  * drawer: pull a handle along a prismatic axis past an extension threshold,
  * reorient: grasp a lying object, stand it upright inside a goal disk,
    release it there,
  * pickup: grasp an object and raise it above a lift height.

Per-environment nuisance (an affine distortion of the landmark reading plus
observation noise) makes cross-environment generalization nontrivial: a
policy trained on few environments can memorize each distortion, one trained
on many has to use the reading the invariant way. Dynamics stay clean; only
observations are distorted.

Coordinates are abstract meters; +y points away from the robot's home zone
(and "up" for the lift tasks). All dynamics are pure functions of
(state, action, spec), so trajectories are bit-reproducible.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError, InsufficientDataError
from .geom import Affine2, Pose2, RelAction, apply, relative, wrap_angle

TASKS = ("door", "drawer", "reorient", "pickup")
TASK_CODE = {"door": (0.0, 0.0), "drawer": (0.0, 1.0),
             "reorient": (1.0, 0.0), "pickup": (1.0, 1.0)}

OBS_DIM = 12
GRASP_RADIUS = 0.02
GRASP_CLOSE = 0.3  # aperture below which the gripper can hold
GRASP_OPEN = 0.7  # aperture above which a held thing is released
LOCAL_CUE_RADIUS = 0.12  # wrist-camera analog: true offset visible when close
STEP_DP_MAX = 0.05
STEP_DTHETA_MAX = 0.3
# evaluation environments draw from a reserved generator-seed range
EVAL_SEED_BASE = 10_000

START_BASE = np.array([0.5, 0.16])
START_HEADING = np.pi / 2  # facing the fixture zone
# 10 fixed start offsets: dx, dy, dtheta
START_GRID = [
    (-0.10, 0.00, 0.00), (-0.05, 0.00, 0.06), (0.00, 0.00, -0.06),
    (0.05, 0.00, 0.03), (0.10, 0.00, -0.03), (-0.10, 0.04, -0.08),
    (-0.05, 0.04, 0.08), (0.00, 0.04, 0.04), (0.05, 0.04, -0.04),
    (0.10, 0.04, 0.00),
]


@dataclass(frozen=True)
class EnvSpec:
    """One sampled environment: fixture geometry + nuisance + embodiment."""

    task: str
    env_id: str
    seed: int
    fixture: dict
    nuisance: dict  # {"affine": [6 floats], "sigma_obs": float}
    embodiment: dict  # {"step_gain": float, "gripper_latency_steps": int}
    randomize_object: bool = True

    def affine(self) -> Affine2:
        return Affine2.from_list(self.nuisance["affine"])

    @property
    def step_gain(self) -> float:
        return float(self.embodiment["step_gain"])

    @property
    def gripper_latency(self) -> int:
        return int(self.embodiment["gripper_latency_steps"])

    def with_embodiment(self, step_gain: float, gripper_latency_steps: int) -> "EnvSpec":
        return replace(self, embodiment={
            "step_gain": float(step_gain),
            "gripper_latency_steps": int(gripper_latency_steps),
        })

    def to_json(self) -> str:
        return json.dumps({
            "task": self.task, "env_id": self.env_id, "seed": self.seed,
            "fixture": self.fixture, "nuisance": self.nuisance,
            "embodiment": self.embodiment, "randomize_object": self.randomize_object,
        }, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "EnvSpec":
        d = json.loads(text)
        return EnvSpec(task=d["task"], env_id=d["env_id"], seed=d["seed"],
                       fixture=d["fixture"], nuisance=d["nuisance"],
                       embodiment=d["embodiment"],
                       randomize_object=d.get("randomize_object", True))


@dataclass(frozen=True)
class SimState:
    """Full simulator state. ``obj`` is None for the door and drawer tasks."""

    ee: Pose2
    g: float
    fixture_dof: float
    obj: Pose2 | None
    held: bool
    grasp_offset: RelAction | None
    pending_g: tuple
    step_index: int
    episode_seed: int


def _task_rng(task: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([TASKS.index(task), seed])


def gen_envs(task: str, n: int, seed: int, step_gain: float = 1.0,
             gripper_latency_steps: int = 0) -> list[EnvSpec]:
    """Sample n environment specs, deterministic per (task, n, seed).

    Generator seeds below EVAL_SEED_BASE are the training pool; seeds at or
    above it are reserved for held-out evaluation environments.
    """
    if task not in TASKS:
        raise FormatError(f"unknown task {task!r}; expected one of {TASKS}")
    if n < 1:
        raise FormatError("need n >= 1 environments")
    rng = _task_rng(task, seed)
    specs = []
    for i in range(n):
        fixture = _sample_fixture(task, rng)
        A = np.eye(2) + rng.uniform(-0.12, 0.12, size=(2, 2))
        b = rng.uniform(-0.04, 0.04, size=2)
        nuisance = {
            "affine": Affine2(A, b).to_list(),
            "sigma_obs": float(rng.uniform(0.002, 0.005)),
        }
        specs.append(EnvSpec(
            task=task,
            env_id=f"{task}-s{seed}-e{i:03d}",
            seed=int(seed * 1000 + i),
            fixture=fixture,
            nuisance=nuisance,
            embodiment={"step_gain": float(step_gain),
                        "gripper_latency_steps": int(gripper_latency_steps)},
        ))
    return specs


def _sample_fixture(task: str, rng: np.random.Generator) -> dict:
    if task == "door":
        hx = float(rng.uniform(0.3, 0.7))
        while abs(hx - 0.5) < 0.03:  # keep the hinge-side rule unambiguous
            hx = float(rng.uniform(0.3, 0.7))
        hy = float(rng.uniform(0.55, 0.7))
        return {
            "handle": [hx, hy],
            "radius": float(rng.uniform(0.12, 0.18)),
            "open_threshold": float(rng.uniform(0.9, 1.1)),
            "dof_max": 1.57,
        }
    if task == "drawer":
        hx = float(rng.uniform(0.25, 0.75))
        hy = float(rng.uniform(0.5, 0.68))
        anchor = np.array([0.5, 1.1])
        d = np.array([hx, hy]) - anchor
        d = d / np.linalg.norm(d)
        return {
            "handle": [hx, hy],
            "axis": [float(d[0]), float(d[1])],
            "max_extension": float(rng.uniform(0.18, 0.26)),
            "open_threshold": float(rng.uniform(0.10, 0.14)),
        }
    if task == "reorient":
        # the object lies inside the goal disk: stand it up where it lies
        gc = [float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.45, 0.6))]
        return {
            "goal": gc,
            "goal_radius": 0.07,
            "object_start": list(gc),
            "lying_sign": 1 if rng.uniform() < 0.5 else -1,
            "upright_tolerance": 0.25,
        }
    # pickup: tissue and bag variants differ only in object size
    oy = float(rng.uniform(0.5, 0.62))
    radius = float(rng.uniform(0.01, 0.03))
    return {
        "object_start": [float(rng.uniform(0.3, 0.7)), oy],
        "object_radius": radius,
        "variant": "tissue" if radius < 0.02 else "bag",
        "lift_height": oy + float(rng.uniform(0.12, 0.16)),
    }


def grasp_target(spec: EnvSpec, state: SimState) -> np.ndarray:
    """World point the gripper must reach to engage."""
    if spec.task in ("door", "drawer"):
        return handle_position(spec, state.fixture_dof)
    return state.obj.p


def handle_position(spec: EnvSpec, dof: float) -> np.ndarray:
    if spec.task == "door":
        h0 = np.array(spec.fixture["handle"])
        r = spec.fixture["radius"]
        s = -1.0 if h0[0] < 0.5 else 1.0
        hinge = h0 + np.array([s * r, 0.0])
        alpha0 = 0.0 if s < 0 else np.pi
        alpha = alpha0 + s * dof  # initial sweep velocity points toward -y
        return hinge + r * np.array([np.cos(alpha), np.sin(alpha)])
    if spec.task == "drawer":
        h0 = np.array(spec.fixture["handle"])
        axis = np.array(spec.fixture["axis"])
        return h0 + dof * axis
    raise FormatError(f"task {spec.task!r} has no handle")


def door_geometry(spec: EnvSpec):
    """(hinge, radius, side, alpha0) for the door arc."""
    h0 = np.array(spec.fixture["handle"])
    r = spec.fixture["radius"]
    s = -1.0 if h0[0] < 0.5 else 1.0
    hinge = h0 + np.array([s * r, 0.0])
    alpha0 = 0.0 if s < 0 else np.pi
    return hinge, r, s, alpha0


def reset(spec: EnvSpec, grid_index: int, ee_jitter=(0.0, 0.0, 0.0),
          noise_seed: int = 0) -> SimState:
    """Place the gripper on the start grid with the fixture closed.

    ``ee_jitter`` supports the retry loop's perturbed home resets;
    ``noise_seed`` decorrelates observation noise across tries.
    """
    if not 0 <= grid_index < len(START_GRID):
        raise IndexError(f"grid index {grid_index} outside [0, {len(START_GRID) - 1}]")
    dx, dy, dth = START_GRID[grid_index]
    ee = Pose2(START_BASE[0] + dx + ee_jitter[0],
               START_BASE[1] + dy + ee_jitter[1],
               START_HEADING + dth + ee_jitter[2])
    obj = None
    if spec.task in ("reorient", "pickup"):
        start = np.array(spec.fixture["object_start"])
        if spec.randomize_object:
            rng = np.random.default_rng([spec.seed, grid_index, 7])
            start = start + rng.uniform(-0.03, 0.03, size=2)
        theta = 0.0
        if spec.task == "reorient":
            theta = spec.fixture["lying_sign"] * np.pi / 2
        obj = Pose2(start[0], start[1], theta)
    return SimState(
        ee=ee, g=1.0, fixture_dof=0.0, obj=obj, held=False, grasp_offset=None,
        pending_g=(1.0,) * spec.gripper_latency,
        step_index=0,
        episode_seed=int(noise_seed * 100 + grid_index),
    )


def _clamp_action(a: RelAction) -> RelAction:
    dp = a.dp
    norm = float(np.linalg.norm(dp))
    if norm > STEP_DP_MAX:
        dp = dp * (STEP_DP_MAX / norm)
    dth = float(np.clip(a.drot, -STEP_DTHETA_MAX, STEP_DTHETA_MAX))
    # the physical gripper is two-state: targets snap to open or closed
    g = 1.0 if a.g >= 0.5 else 0.0
    return RelAction(dp, dth, g)


def step(state: SimState, action: RelAction, spec: EnvSpec) -> SimState:
    """Advance one control step. Total: never raises on valid inputs."""
    a = _clamp_action(action)
    gain = spec.step_gain
    scaled = RelAction(a.dp * gain, a.drot * gain, a.g)
    desired = apply(state.ee, scaled)

    # gripper target reaches the aperture after the embodiment latency
    pending = state.pending_g + (a.g,)
    g_new = float(pending[0])
    pending = pending[1:]

    dof = state.fixture_dof
    obj = state.obj
    held = state.held
    grasp_offset = state.grasp_offset

    if held and spec.task == "door":
        hinge, r, s, alpha0 = door_geometry(spec)
        beta = np.arctan2(desired.y - hinge[1], desired.x - hinge[0])
        dof = float(np.clip(s * wrap_angle(beta - alpha0), 0.0, spec.fixture["dof_max"]))
        hp = handle_position(spec, dof)
        ee = Pose2(hp[0], hp[1], desired.theta)
    elif held and spec.task == "drawer":
        h0 = np.array(spec.fixture["handle"])
        axis = np.array(spec.fixture["axis"])
        dof = float(np.clip(np.dot(desired.p - h0, axis), 0.0,
                            spec.fixture["max_extension"]))
        hp = h0 + dof * axis
        ee = Pose2(hp[0], hp[1], desired.theta)
    else:
        ee = Pose2(float(np.clip(desired.x, 0.0, 1.0)),
                   float(np.clip(desired.y, 0.0, 1.0)), desired.theta)
        if held:  # rigidly attached object follows the gripper
            obj = apply(ee, grasp_offset)

    # release, then (possibly re-)engage, both against the new aperture
    if held and g_new > GRASP_OPEN:
        held = False
        grasp_offset = None
    if not held and g_new < GRASP_CLOSE:
        target = grasp_target(spec, replace(state, ee=ee, fixture_dof=dof, obj=obj))
        if float(np.linalg.norm(ee.p - target)) <= GRASP_RADIUS:
            held = True
            if spec.task in ("reorient", "pickup"):
                grasp_offset = relative(ee, obj)
            else:
                # fingers wrap the handle: land exactly on the constraint
                ee = Pose2(float(target[0]), float(target[1]), ee.theta)

    return SimState(
        ee=ee, g=g_new, fixture_dof=dof, obj=obj, held=held,
        grasp_offset=grasp_offset, pending_g=pending,
        step_index=state.step_index + 1, episode_seed=state.episode_seed,
    )


def _upright(theta: float, tol: float) -> bool:
    # standing on either end counts as upright
    return min(abs(wrap_angle(theta)), abs(wrap_angle(theta - np.pi))) <= tol


def success(state: SimState, spec: EnvSpec) -> bool:
    """Ground-truth oracle; pure function of the state."""
    f = spec.fixture
    if spec.task == "door":
        return state.fixture_dof >= f["open_threshold"]
    if spec.task == "drawer":
        return state.fixture_dof >= f["open_threshold"]
    if spec.task == "reorient":
        in_goal = float(np.linalg.norm(state.obj.p - np.array(f["goal"]))) <= f["goal_radius"]
        return (not state.held) and in_goal and _upright(state.obj.theta,
                                                         f["upright_tolerance"])
    return state.held and state.obj.y >= f["lift_height"]


def dof_reading(spec: EnvSpec, state: SimState) -> float:
    if spec.task in ("door", "drawer"):
        return state.fixture_dof
    if spec.task == "reorient":
        return wrap_angle(state.obj.theta)
    return state.obj.y


def landmark(spec: EnvSpec, state: SimState) -> np.ndarray:
    """Task-relevant world point the camera reports (before distortion)."""
    if spec.task in ("door", "drawer"):
        return handle_position(spec, state.fixture_dof)
    if spec.task == "reorient":
        return np.array(spec.fixture["goal"])
    return state.obj.p


HELD_APERTURE = 0.35  # fingers blocked open by whatever they are wrapped around


def observe(spec: EnvSpec, state: SimState) -> np.ndarray:
    """12-dim observation vector.

    [ee.x, ee.y, cos(theta), sin(theta), observed aperture,
     distorted landmark (2), dof reading + noise,
     local true target offset (2, zero when out of view), task code (2)]

    The observed aperture saturates at HELD_APERTURE while something is in
    the fingers, which is what makes the grasp state visible to the policy.
    """
    rng = np.random.default_rng([spec.seed, state.episode_seed, state.step_index])
    sigma = spec.nuisance["sigma_obs"]
    noisy = rng.normal(0.0, 1.0, size=3) * sigma
    lm = spec.affine().map(landmark(spec, state)) + noisy[:2]
    target = grasp_target(spec, state)
    offset = target - state.ee.p
    if float(np.linalg.norm(offset)) > LOCAL_CUE_RADIUS:
        offset = np.zeros(2)
    aperture = max(state.g, HELD_APERTURE) if state.held else state.g
    code = TASK_CODE[spec.task]
    return np.array([
        state.ee.x, state.ee.y, np.cos(state.ee.theta), np.sin(state.ee.theta),
        aperture, lm[0], lm[1], dof_reading(spec, state) + noisy[2],
        offset[0], offset[1], code[0], code[1],
    ])


@dataclass
class Summary:
    """Critic payload: every other frame of the rollout, final always kept."""

    task: str
    frame_indices: list
    lines: list
    oracle_success: bool = False

    def text(self) -> str:
        return "\n".join(self.lines)


def frame_indices(n: int) -> list[int]:
    if n < 1:
        raise InsufficientDataError("cannot summarize an empty trajectory")
    idx = list(range(0, n, 2))
    if idx[-1] != n - 1:
        idx.append(n - 1)
    return idx


def describe_state(spec: EnvSpec, state: SimState, index: int) -> str:
    bits = [
        f"timestep {index}:",
        f"gripper at ({state.ee.x:.3f}, {state.ee.y:.3f}) heading {state.ee.theta:.2f}",
        f"aperture {state.g:.2f}",
        "holding" if state.held else "empty-handed",
    ]
    f = spec.fixture
    if spec.task == "door":
        bits.append(f"door angle {state.fixture_dof:.3f} (open at {f['open_threshold']:.3f})")
    elif spec.task == "drawer":
        bits.append(f"drawer extension {state.fixture_dof:.3f} (open at {f['open_threshold']:.3f})")
    elif spec.task == "reorient":
        up = _upright(state.obj.theta, f["upright_tolerance"])
        dist = float(np.linalg.norm(state.obj.p - np.array(f["goal"])))
        bits.append(f"object at ({state.obj.x:.3f}, {state.obj.y:.3f}) "
                    f"{'upright' if up else 'lying'} dist-to-goal {dist:.3f}")
    else:
        bits.append(f"object height {state.obj.y:.3f} (lift at {f['lift_height']:.3f})")
    return " ".join(bits)


def summarize(spec: EnvSpec, states: list[SimState]) -> Summary:
    """Subsample a state trajectory for critic consumption."""
    idx = frame_indices(len(states))
    lines = [describe_state(spec, states[i], i) for i in idx]
    return Summary(task=task_prompt_key(spec), frame_indices=idx, lines=lines,
                   oracle_success=success(states[-1], spec))


def task_prompt_key(spec: EnvSpec) -> str:
    """Which of the five verification prompts applies to this environment."""
    if spec.task == "pickup":
        return "bag_pickup" if spec.fixture.get("variant") == "bag" else "tissue_pickup"
    return {"door": "door_opening", "drawer": "drawer_opening",
            "reorient": "reorientation"}[spec.task]


def render_frame(spec: EnvSpec, state: SimState, size: int = 64) -> np.ndarray:
    """Tiny raster of the scene (grayscale float array), for figure output."""
    img = np.zeros((size, size))

    def stamp(p, value, rad=1):
        cx = int(np.clip(p[0], 0, 1) * (size - 1))
        cy = int(np.clip(1.0 - p[1], 0, 1) * (size - 1))
        img[max(0, cy - rad):cy + rad + 1, max(0, cx - rad):cx + rad + 1] = value

    if spec.task in ("door", "drawer"):
        for d in np.linspace(0.0, state.fixture_dof, 12):
            stamp(handle_position(spec, d), 0.35, rad=0)
        stamp(handle_position(spec, state.fixture_dof), 0.7)
    else:
        stamp(state.obj.p, 0.7)
        if spec.task == "reorient":
            stamp(spec.fixture["goal"], 0.35)
    stamp(state.ee.p, 1.0)
    return img
