"""Scripted demonstrators and demonstration recording.

The expert is a phase-based waypoint controller. Its two modes detour above
(A) or below (B) the grasp target on approach and, on the reorientation
task, stand the object up clockwise vs counterclockwise, so a mixed-mode
corpus carries genuinely multimodal action distributions.

The non-expert wraps the expert with action noise and random pauses, and a
configurable fraction of its episodes aborts early (logged success=false).

Recorded logs carry pose and aperture at twice the control rate (midpoints
interpolated, as a sensor sampling the continuously moving arm would see)
and observations at the control rate, so resampling back to the control
grid recovers the executed steps exactly.
"""
from __future__ import annotations

import numpy as np

from .errors import FormatError
from .datalog import EpisodeLog, Stream, pose_to_row, resample
from .geom import Pose2, RelAction, relative, wrap_angle
from .sim2d import (
    EnvSpec,
    SimState,
    door_geometry,
    grasp_target,
    handle_position,
    observe,
    reset,
    step,
    success,
)

SPEED = 0.025
TURN_SPEED = 0.15
DETOUR_DY = 0.12
ARRIVE_TOL = 0.02
CLOSE_DIST = 0.05  # start commanding the gripper shut this close to the target
CONTROL_RATE_HZ = 3.75
MAX_DEMO_STEPS = 400


def _heading_correction(state: SimState) -> float:
    # keep the tool upright; demos with tremor then carry corrective turns
    return float(np.clip(0.5 * wrap_angle(np.pi / 2 - state.ee.theta),
                         -TURN_SPEED, TURN_SPEED))


def _move_to(state: SimState, point, g: float, speed: float = SPEED) -> RelAction:
    """World-space waypoint step converted into the body frame."""
    dp_world = np.asarray(point, dtype=float) - state.ee.p
    norm = float(np.linalg.norm(dp_world))
    if norm > speed:
        dp_world = dp_world * (speed / norm)
    c, s = np.cos(state.ee.theta), np.sin(state.ee.theta)
    dp_body = np.array([c * dp_world[0] + s * dp_world[1],
                        -s * dp_world[0] + c * dp_world[1]])
    return RelAction(dp_body, _heading_correction(state), g)


class ExpertController:
    """Waypoint demonstrator; mode 'A' detours above the target, 'B' below."""

    SETTLE_STEPS = 3  # hold still after the grasp engages

    def __init__(self, spec: EnvSpec, mode: str = "A"):
        if mode not in ("A", "B"):
            raise ValueError(f"mode must be 'A' or 'B', got {mode!r}")
        self.spec = spec
        self.mode = mode
        self.side = 1.0 if mode == "A" else -1.0
        self.phase = "detour"
        self.settle_left = self.SETTLE_STEPS
        self.retreat_left = 3

    def done(self) -> bool:
        return self.phase == "done"

    def __call__(self, state: SimState) -> RelAction:
        spec = self.spec
        target = grasp_target(spec, state)

        if self.phase == "detour":
            waypoint = target + np.array([0.0, self.side * DETOUR_DY])
            if float(np.linalg.norm(state.ee.p - waypoint)) <= ARRIVE_TOL:
                self.phase = "final"
            else:
                return _move_to(state, waypoint, g=1.0)
        if self.phase == "final":
            if state.held:
                self.phase = "settle"
            else:
                dist = float(np.linalg.norm(state.ee.p - target))
                # decelerate on final approach so the grasp window is hit finely
                speed = SPEED if dist > 0.06 else 0.5 * SPEED
                return _move_to(state, target, g=0.0 if dist <= CLOSE_DIST else 1.0,
                                speed=speed)
        if self.phase == "settle":
            # a short hold makes "grasped" unambiguous in the recorded history
            if self.settle_left > 0:
                self.settle_left -= 1
                return RelAction(np.zeros(2), _heading_correction(state), 0.0)
            self.phase = {"door": "swing", "drawer": "pull",
                          "pickup": "lift", "reorient": "rotate"}[spec.task]
        return getattr(self, f"_{self.phase}")(state)

    # task motions ---------------------------------------------------------
    def _swing(self, state: SimState) -> RelAction:
        spec = self.spec
        if not state.held:  # slipped; go back to approaching
            self.phase = "final"
            return _move_to(state, grasp_target(spec, state), g=0.0)
        if state.fixture_dof >= spec.fixture["open_threshold"] + 0.06:
            self.phase = "done"
            return RelAction(np.zeros(2), 0.0, 0.0)
        _, r, _, _ = door_geometry(spec)
        ahead = min(state.fixture_dof + SPEED / r, spec.fixture["dof_max"])
        return _move_to(state, handle_position(spec, ahead), g=0.0)

    def _pull(self, state: SimState) -> RelAction:
        spec = self.spec
        if not state.held:
            self.phase = "final"
            return _move_to(state, grasp_target(spec, state), g=0.0)
        if state.fixture_dof >= spec.fixture["open_threshold"] + 0.03:
            self.phase = "done"
            return RelAction(np.zeros(2), 0.0, 0.0)
        h0 = np.array(spec.fixture["handle"])
        axis = np.array(spec.fixture["axis"])
        ahead = min(state.fixture_dof + SPEED, spec.fixture["max_extension"])
        return _move_to(state, h0 + ahead * axis, g=0.0)

    def _lift(self, state: SimState) -> RelAction:
        spec = self.spec
        if not state.held:
            self.phase = "final"
            return _move_to(state, grasp_target(spec, state), g=0.0)
        if state.obj.y >= spec.fixture["lift_height"] + 0.02:
            self.phase = "done"
            return RelAction(np.zeros(2), 0.0, 0.0)
        return _move_to(state, state.ee.p + np.array([0.0, SPEED]), g=0.0)

    def _rotate(self, state: SimState) -> RelAction:
        # stand the object in place, on whichever end this mode's turn reaches
        if not state.held:
            self.phase = "final"
            return _move_to(state, grasp_target(self.spec, state), g=0.0)
        theta = state.obj.theta
        err = min(abs(wrap_angle(theta)), abs(wrap_angle(theta - np.pi)))
        if err <= 0.5 * self.spec.fixture["upright_tolerance"]:
            self.phase = "release"
            return RelAction(np.zeros(2), 0.0, 1.0)
        # hold the carried object over the goal while turning
        lever = state.obj.p - state.ee.p
        hold = _move_to(state, np.array(self.spec.fixture["goal"]) - lever, g=0.0,
                        speed=0.5 * SPEED)
        return RelAction(hold.dp, self.side * TURN_SPEED, 0.0)

    def _release(self, state: SimState) -> RelAction:
        if state.held:
            return RelAction(np.zeros(2), 0.0, 1.0)
        self.phase = "retreat"
        return self._retreat(state)

    def _retreat(self, state: SimState) -> RelAction:
        if self.retreat_left <= 0:
            self.phase = "done"
            return RelAction(np.zeros(2), 0.0, 1.0)
        self.retreat_left -= 1
        return _move_to(state, state.ee.p + np.array([0.0, -SPEED]), g=1.0)

    def _done(self, state: SimState) -> RelAction:
        hold = 0.0 if self.spec.task != "reorient" else 1.0
        return RelAction(np.zeros(2), 0.0, hold)


def scripted_expert(state: SimState, spec: EnvSpec, mode: str = "A") -> RelAction:
    """One-shot expert action; infers the phase from the state alone.

    Rollouts should keep an ExpertController instead, which remembers its
    phase; this wrapper covers single-state queries.
    """
    ctrl = ExpertController(spec, mode)
    if state.held:
        ctrl.phase = {"door": "swing", "drawer": "pull",
                      "pickup": "lift", "reorient": "rotate"}[spec.task]
        ctrl.settle_left = 0
    elif float(np.linalg.norm(state.ee.p - grasp_target(spec, state))) <= CLOSE_DIST:
        ctrl.phase = "final"
    return ctrl(state)


class NonExpertController:
    """Expert plus Gaussian action noise and random pauses.

    With noise_level = 0 the behavior is identical to the expert (mode A by
    default): both the noise and the pause probability scale with it.
    """

    def __init__(self, spec: EnvSpec, noise_level: float,
                 rng: np.random.Generator, mode: str = "A"):
        if noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        self.inner = ExpertController(spec, mode)
        self.noise_level = noise_level
        self.pause_prob = min(0.3, 4.0 * noise_level)
        self.rng = rng

    def done(self) -> bool:
        return self.inner.done()

    def __call__(self, state: SimState) -> RelAction:
        action = self.inner(state)
        if self.noise_level == 0.0:
            return action
        if self.rng.uniform() < self.pause_prob:
            return RelAction(np.zeros(2), 0.0, action.g)
        dp = action.dp + self.rng.normal(0.0, self.noise_level, size=2)
        dth = action.drot + self.rng.normal(0.0, 0.5 * self.noise_level)
        return RelAction(dp, dth, action.g)


def scripted_nonexpert(state: SimState, spec: EnvSpec, noise_level: float,
                       fail_rate: float = 0.0, seed: int = 0) -> RelAction:
    """One-shot non-expert action (episode aborts are applied by collect_demo)."""
    rng = np.random.default_rng([seed, state.step_index])
    ctrl = NonExpertController(spec, noise_level, rng)
    ctrl.inner.phase = "final" if float(
        np.linalg.norm(state.ee.p - grasp_target(spec, state))) <= CLOSE_DIST else "detour"
    if state.held:
        ctrl.inner.phase = {"door": "swing", "drawer": "pull",
                            "pickup": "lift", "reorient": "rotate"}[spec.task]
        ctrl.inner.settle_left = 0
    return ctrl(state)


def rollout_from(spec: EnvSpec, state: SimState, controller,
                 max_steps: int = MAX_DEMO_STEPS, settle_steps: int = 2,
                 abort_at: int | None = None):
    """Run a controller from a given state; returns (states, actions)."""
    states, actions = [state], []
    settled = None
    for k in range(max_steps):
        if abort_at is not None and k >= abort_at:
            break
        action = controller(state)
        state = step(state, action, spec)
        states.append(state)
        actions.append(action)
        if controller.done() and success(state, spec):
            if settled is None:
                settled = 0
            settled += 1
            if settled >= settle_steps:
                break
    return states, actions


def rollout_controller(spec: EnvSpec, grid_index: int, controller,
                       max_steps: int = MAX_DEMO_STEPS, settle_steps: int = 2,
                       abort_at: int | None = None, ee_jitter=(0.0, 0.0, 0.0),
                       noise_seed: int = 0):
    """Run a controller to completion from a grid start."""
    state = reset(spec, grid_index, ee_jitter=ee_jitter, noise_seed=noise_seed)
    return rollout_from(spec, state, controller, max_steps=max_steps,
                        settle_steps=settle_steps, abort_at=abort_at)


def scramble_state(spec: EnvSpec, state: SimState, steps: int,
                   rng: np.random.Generator) -> SimState:
    """Drive the gripper through a burst of random motion (recovery setup)."""
    for _ in range(steps):
        action = RelAction(rng.uniform(-0.03, 0.03, size=2),
                           rng.uniform(-0.25, 0.25),
                           1.0 if rng.uniform() < 0.5 else 0.0)
        state = step(state, action, spec)
    return state


def record_states(spec: EnvSpec, states: list[SimState], meta: dict,
                  control_rate_hz: float = CONTROL_RATE_HZ) -> EpisodeLog:
    """Encode a state trajectory as a multi-rate episode log.

    Pose and aperture at 2x the control rate with interpolated midpoints;
    observations held at the control rate.
    """
    T = len(states) - 1
    f2 = 2.0 * control_rate_hz
    pose_t, pose_rows, grip_t, grip_v = [], [], [], []
    for k, st in enumerate(states):
        pose_t.append((2 * k) / f2)
        pose_rows.append(pose_to_row(st.ee))
        grip_t.append((2 * k) / f2)
        grip_v.append(st.g)
        if k < T:
            nxt = states[k + 1]
            mid = Pose2(0.5 * (st.ee.x + nxt.ee.x), 0.5 * (st.ee.y + nxt.ee.y),
                        st.ee.theta + 0.5 * wrap_angle(nxt.ee.theta - st.ee.theta))
            pose_t.append((2 * k + 1) / f2)
            pose_rows.append(pose_to_row(mid))
            grip_t.append((2 * k + 1) / f2)
            grip_v.append(0.5 * (st.g + nxt.g))
    obs_t = np.arange(T + 1) / control_rate_hz
    obs_rows = np.stack([observe(spec, st) for st in states])
    meta = dict(meta)
    meta.setdefault("control_rate_hz", control_rate_hz)
    meta.setdefault("env_spec", spec.to_json())
    return EpisodeLog(
        pose_stream=Stream(np.array(pose_t), np.stack(pose_rows)),
        gripper_stream=Stream(np.array(grip_t), np.array(grip_v)),
        obs_stream=Stream(obs_t, obs_rows),
        meta=meta,
    )


def collect_demo(spec: EnvSpec, grid_index: int, mode: str = "A",
                 expertise: str = "expert", noise_level: float = 0.0,
                 fail_rate: float = 0.0, seed: int = 0,
                 demonstrator_id: str | None = None,
                 start_jitter: float = 0.0, tremor: float = 0.0) -> EpisodeLog:
    """Roll out one scripted demonstration and package it as an episode log.

    ``start_jitter`` perturbs the grid start pose per demo and ``tremor``
    adds small hand-shake action noise; both stand in for the natural
    variability of human-collected demonstrations and give the dataset a
    tube of states around each nominal trajectory.
    """
    rng = np.random.default_rng([spec.seed, grid_index, seed])
    jitter = (0.0, 0.0, 0.0)
    if start_jitter > 0.0:
        jitter = (float(rng.uniform(-start_jitter, start_jitter)),
                  float(rng.uniform(-start_jitter, start_jitter)),
                  float(rng.uniform(-2 * start_jitter, 2 * start_jitter)))
    if expertise == "expert":
        controller = (ExpertController(spec, mode) if tremor == 0.0
                      else NonExpertController(spec, tremor, rng, mode))
    else:
        controller = NonExpertController(spec, noise_level, rng, mode)
    abort_at = None
    if fail_rate > 0.0 and rng.uniform() < fail_rate:
        # abort well before the earliest possible task completion
        abort_at = int(rng.integers(5, 18))
    states, _ = rollout_controller(spec, grid_index, controller, abort_at=abort_at,
                                   ee_jitter=jitter, noise_seed=seed)
    ok = success(states[-1], spec)
    meta = {
        "task_id": spec.task,
        "env_id": spec.env_id,
        "demonstrator_id": demonstrator_id or f"{expertise}-{mode}-{seed}",
        "expertise": expertise,
        "source": "scripted",
        "success": bool(ok),
        "mode": mode,
        "grid_index": grid_index,
    }
    return record_states(spec, states, meta)


def collect_recovery_demo(spec: EnvSpec, grid_index: int, mode: str = "A",
                          expertise: str = "expert", seed: int = 0,
                          scramble_steps: int = 8, tremor: float = 0.0,
                          demonstrator_id: str | None = None) -> EpisodeLog:
    """Demonstration starting from a scrambled state.

    The recording begins after the scramble, so the log shows the expert
    recovering (re-orienting the tool, re-approaching, re-opening a wrongly
    closed gripper) from states a learned policy may drift into.
    """
    rng = np.random.default_rng([spec.seed, grid_index, seed, 13])
    start = reset(spec, grid_index, noise_seed=seed)
    start = scramble_state(spec, start, scramble_steps, rng)
    controller = (ExpertController(spec, mode) if tremor == 0.0
                  else NonExpertController(spec, tremor, rng, mode))
    states, _ = rollout_from(spec, start, controller)
    ok = success(states[-1], spec)
    meta = {
        "task_id": spec.task,
        "env_id": spec.env_id,
        "demonstrator_id": demonstrator_id or f"{expertise}-recovery-{mode}-{seed}",
        "expertise": expertise,
        "source": "scripted",
        "success": bool(ok),
        "mode": mode,
        "grid_index": grid_index,
        "recovery": True,
    }
    return record_states(spec, states, meta)


def replay_log(log: EpisodeLog, spec: EnvSpec | None = None):
    """Re-execute a recorded episode through the simulator.

    Actions are re-derived from the resampled pose/aperture streams; with
    step gain 1 and zero gripper latency this reproduces the recorded
    trajectory to float precision.
    """
    if spec is None:
        spec = EnvSpec.from_json(log.meta["env_spec"])
    if log.meta.get("recovery"):
        raise FormatError("recovery demos do not start from a grid reset; cannot replay")
    rate = float(log.meta.get("control_rate_hz", CONTROL_RATE_HZ))
    ep = resample(log, rate)
    state = reset(spec, int(log.meta.get("grid_index", 0)))
    states = [state]
    for k in range(len(ep) - 1):
        action = relative(ep.poses[k], ep.poses[k + 1],
                          g=float(np.clip(ep.g[k + 1], 0.0, 1.0)))
        state = step(state, action, spec)
        states.append(state)
    return states, ep
