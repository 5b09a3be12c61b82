"""Synthetic planar pick-transport-release world with a scripted demonstrator.

A point agent lives in the unit square with one movable object and one goal
location. Episodes pass through four behavioral phases: reach the object,
grasp it (close the gripper while station-keeping), transport it to the
goal, and release it. The scripted demonstrator is a jittered proportional
controller driven by a phase state machine whose transitions depend only on
the observable state, so the resulting state-to-action mapping is learnable
from observations alone.

Per-timestep phase ids are written to a sidecar file next to the dataset
and exist purely for evaluation; the training-facing loader in this module
cannot return them (the sidecar reader lives in the evaluation suite).

Observation layout (R^8): agent xy, object xy, goal xy, gripper in [0, 1],
carrying flag as 0/1. Action layout (R^3 by default): dx, dy clamped to
+/-0.05, gripper command in [0, 1] as the last component. Wider action
vectors keep the gripper last; the middle components are reserved for
rotation channels the planar world ignores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

# workspace and kinematics
WORKSPACE_LOW, WORKSPACE_HIGH = 0.0, 1.0
STEP_CLAMP = 0.05          # max |dx|, |dy| per step, meters
GRIPPER_SLEW = 0.25        # max gripper change per step
GRIPPER_CLOSED = 0.9       # above: can pick up
GRIPPER_OPEN = 0.1         # below: drops
GRASP_DISTANCE = 0.03      # agent-object distance for pickup

# demonstrator
APPROACH_RADIUS = 0.02     # reach -> grasp trigger
GOAL_RADIUS = 0.02         # transport -> release trigger
CONTROL_GAIN = 0.5
JITTER_SIGMA = 0.005
MAX_DEMO_STEPS = 120
RELEASE_HOLD_STEPS = 5
MIN_SEPARATION = 0.3       # object-goal separation at task sampling
SUCCESS_RADIUS = 0.05      # object-goal distance counted as success

PHASE_REACH, PHASE_GRASP, PHASE_TRANSPORT, PHASE_RELEASE = 0, 1, 2, 3
PHASE_NAMES = ("reach", "grasp", "transport", "release")

DATASET_FORMAT_VERSION = 1
AGENT_START = np.array([0.5, 0.5])


@dataclass
class WorldState:
    agent: np.ndarray
    object_pos: np.ndarray
    goal: np.ndarray
    gripper: float
    carrying: bool

    def observation(self) -> np.ndarray:
        return np.concatenate(
            [self.agent, self.object_pos, self.goal, [self.gripper, float(self.carrying)]]
        )


@dataclass
class TaskSpec:
    variant: int
    object_start: np.ndarray
    goal: np.ndarray
    seed: int

    def to_dict(self):
        return {
            "variant": int(self.variant),
            "object_start": [float(v) for v in self.object_start],
            "goal": [float(v) for v in self.goal],
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            variant=int(d["variant"]),
            object_start=np.asarray(d["object_start"], dtype=np.float64),
            goal=np.asarray(d["goal"], dtype=np.float64),
            seed=int(d["seed"]),
        )


@dataclass
class Demonstration:
    task: TaskSpec
    observations: np.ndarray  # (L, 8)
    actions: np.ndarray       # (L, A)

    def __len__(self):
        return self.observations.shape[0]


def initial_state(task: TaskSpec) -> WorldState:
    return WorldState(
        agent=AGENT_START.copy(),
        object_pos=np.asarray(task.object_start, dtype=np.float64).copy(),
        goal=np.asarray(task.goal, dtype=np.float64).copy(),
        gripper=0.0,
        carrying=False,
    )


_QUADRANTS = (
    ((0.0, 0.5), (0.0, 0.5)),
    ((0.5, 1.0), (0.0, 0.5)),
    ((0.0, 0.5), (0.5, 1.0)),
    ((0.5, 1.0), (0.5, 1.0)),
)


def sample_task(rng: np.random.Generator, variants: int = 4) -> TaskSpec:
    """Draw a task: the variant picks the goal quadrant, the object lands
    uniformly anywhere at least MIN_SEPARATION from the goal."""
    variant = int(rng.integers(variants))
    (xlo, xhi), (ylo, yhi) = _QUADRANTS[variant % 4]
    goal = np.array([rng.uniform(xlo, xhi), rng.uniform(ylo, yhi)])
    while True:
        obj = rng.uniform(WORKSPACE_LOW, WORKSPACE_HIGH, 2)
        if np.linalg.norm(obj - goal) >= MIN_SEPARATION:
            break
    return TaskSpec(variant=variant, object_start=obj, goal=goal, seed=int(rng.integers(2**63)))


def step_env(state: WorldState, action) -> WorldState:
    """Kinematic step: clamped move, workspace clipping, gripper slew, and
    the carry logic (pick up when closed near the object, drop when open)."""
    action = np.asarray(action, dtype=np.float64)
    if np.any(np.isnan(action)):
        raise ValueError(f"action contains NaN: {action}")
    delta = np.clip(action[:2], -STEP_CLAMP, STEP_CLAMP)
    g_cmd = float(np.clip(action[-1], 0.0, 1.0))

    agent = np.clip(state.agent + delta, WORKSPACE_LOW, WORKSPACE_HIGH)
    gripper = state.gripper + float(np.clip(g_cmd - state.gripper, -GRIPPER_SLEW, GRIPPER_SLEW))
    obj = agent.copy() if state.carrying else state.object_pos.copy()

    carrying = state.carrying
    if carrying and gripper < GRIPPER_OPEN:
        carrying = False
    elif (
        not carrying
        and gripper > GRIPPER_CLOSED
        and float(np.linalg.norm(agent - obj)) < GRASP_DISTANCE
    ):
        carrying = True
        obj = agent.copy()

    return WorldState(agent=agent, object_pos=obj, goal=state.goal.copy(),
                      gripper=gripper, carrying=carrying)


def advance_phase(phase: int, state: WorldState) -> int:
    """Move the demonstrator state machine forward as far as the current
    state allows. Transitions are monotone; labels never decrease."""
    while True:
        if phase == PHASE_REACH and (
            float(np.linalg.norm(state.agent - state.object_pos)) < APPROACH_RADIUS
        ):
            phase = PHASE_GRASP
            continue
        if phase == PHASE_GRASP and state.carrying:
            phase = PHASE_TRANSPORT
            continue
        if phase == PHASE_TRANSPORT and state.carrying and (
            float(np.linalg.norm(state.agent - state.goal)) <= GOAL_RADIUS
        ):
            phase = PHASE_RELEASE
            continue
        return phase


def scripted_policy(state: WorldState, phase: int, rng: np.random.Generator):
    """One demonstrator decision: advance the phase, then emit a jittered
    proportional step toward the phase target.

    Reach and grasp aim at the object (gripper open, then closing); transport
    and release aim at the goal (gripper closed, then opening). Holding
    phases station-keep on their target, which also counteracts jitter.
    Returns (action, phase label for this step).
    """
    phase = advance_phase(phase, state)
    if phase == PHASE_REACH:
        target, g = state.object_pos, 0.0
    elif phase == PHASE_GRASP:
        target, g = state.object_pos, 1.0
    elif phase == PHASE_TRANSPORT:
        target, g = state.goal, 1.0
    else:
        target, g = state.goal, 0.0
    delta = np.clip(CONTROL_GAIN * (target - state.agent), -STEP_CLAMP, STEP_CLAMP)
    delta = np.clip(delta + rng.normal(0.0, JITTER_SIGMA, 2), -STEP_CLAMP, STEP_CLAMP)
    return np.array([delta[0], delta[1], g]), phase


def _episode_success(state: WorldState) -> bool:
    return (
        float(np.linalg.norm(state.object_pos - state.goal)) <= SUCCESS_RADIUS
        and state.gripper < GRIPPER_OPEN
        and not state.carrying
    )


def run_scripted_episode(task: TaskSpec):
    """Roll the demonstrator on one task.

    Returns (Demonstration, phase label array, success flag). The episode
    stops once the release phase has held for RELEASE_HOLD_STEPS steps or
    after MAX_DEMO_STEPS.
    """
    rng = np.random.default_rng(task.seed)
    state = initial_state(task)
    phase = PHASE_REACH
    obs, acts, phases = [], [], []
    release_run = 0
    for _ in range(MAX_DEMO_STEPS):
        action, phase = scripted_policy(state, phase, rng)
        obs.append(state.observation())
        acts.append(action)
        phases.append(phase)
        state = step_env(state, action)
        release_run = release_run + 1 if phase == PHASE_RELEASE else 0
        if release_run >= RELEASE_HOLD_STEPS:
            break
    demo = Demonstration(task=task, observations=np.array(obs), actions=np.array(acts))
    return demo, np.array(phases, dtype=np.int64), _episode_success(state)


def generate_demonstrations(count: int, rng: np.random.Generator, variants: int = 4):
    """Generate `count` successful demonstrations plus their phase labels.

    Episodes that fail or skip a phase (the object can spawn on top of the
    agent, erasing the reach phase) are discarded and resampled.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    demos, labels = [], []
    attempts = 0
    while len(demos) < count:
        attempts += 1
        if attempts > 200 * count:
            raise RuntimeError("demonstration generator failed to converge")
        task = sample_task(rng, variants=variants)
        demo, phases, success = run_scripted_episode(task)
        if success and set(np.unique(phases)) == {0, 1, 2, 3}:
            demos.append(demo)
            labels.append(phases)
    return demos, labels


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def sidecar_path_for(dataset_path: str) -> str:
    path = str(dataset_path)
    if path.endswith(".json"):
        return path[: -len(".json")] + ".phases.json"
    return path + ".phases.json"


def _dump_json(path, payload):
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    with open(path, "w") as fh:
        fh.write(text + "\n")


def save_dataset(dataset_path, demos, labels):
    """Write the demonstrations file and its phase-label sidecar."""
    episodes = []
    for demo in demos:
        steps = [
            {"obs": [float(v) for v in o], "act": [float(v) for v in a]}
            for o, a in zip(demo.observations, demo.actions)
        ]
        episodes.append({"task": demo.task.to_dict(), "steps": steps})
    try:
        _dump_json(dataset_path, {"format_version": DATASET_FORMAT_VERSION, "episodes": episodes})
        _dump_json(
            sidecar_path_for(dataset_path),
            {"format_version": DATASET_FORMAT_VERSION,
             "phases": [[int(p) for p in seq] for seq in labels]},
        )
    except OSError as err:
        raise OSError(f"failed writing dataset to {dataset_path}: {err}") from err
    return str(dataset_path), sidecar_path_for(dataset_path)


def generate_dataset(count: int, rng: np.random.Generator, dataset_path, variants: int = 4):
    """Generate demonstrations and write them plus the sidecar to disk."""
    demos, labels = generate_demonstrations(count, rng, variants=variants)
    return save_dataset(dataset_path, demos, labels)


def load_dataset(dataset_path) -> list:
    """Read demonstrations for training. Phase labels are not part of the
    dataset file and this loader has no way to return them."""
    with open(dataset_path) as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise ValueError(
            f"{dataset_path}: unsupported dataset format_version {version!r}"
        )
    demos = []
    for ep in payload["episodes"]:
        demos.append(
            Demonstration(
                task=TaskSpec.from_dict(ep["task"]),
                observations=np.array([s["obs"] for s in ep["steps"]], dtype=np.float64),
                actions=np.array([s["act"] for s in ep["steps"]], dtype=np.float64),
            )
        )
    return demos


# ---------------------------------------------------------------------------
# chunk views for training
# ---------------------------------------------------------------------------

def chunk_view(demo: Demonstration, t: int, horizon: int):
    """Observation at t and the next `horizon` actions, padding past the end
    of the episode by repeating the final action."""
    length = len(demo)
    if not 0 <= t < length:
        raise IndexError(f"t={t} outside episode of length {length}")
    chunk = demo.actions[t : t + horizon]
    if chunk.shape[0] < horizon:
        pad = np.tile(demo.actions[-1], (horizon - chunk.shape[0], 1))
        chunk = np.concatenate([chunk, pad], axis=0)
    return demo.observations[t], chunk


def build_training_arrays(demos, horizon: int):
    """Flatten demonstrations into per-timestep training arrays.

    Returns a dict with observations (M, 8), flattened action chunks
    (M, horizon * A), and task variant ids (M,).
    """
    obs_rows, chunk_rows, task_ids = [], [], []
    for demo in demos:
        for t in range(len(demo)):
            o, chunk = chunk_view(demo, t, horizon)
            obs_rows.append(o)
            chunk_rows.append(chunk.reshape(-1))
            task_ids.append(demo.task.variant)
    return {
        "obs": np.array(obs_rows),
        "chunks": np.array(chunk_rows),
        "task_ids": np.array(task_ids, dtype=np.int64),
    }
