"""
Desk-scale manipulation suite: five deterministic kinematic tasks sharing one
observation (84x84x3 image) and action (4 values in [-1, 1]) interface.

    reach    move the agent onto a target
    push     push a block along +x onto an unmarked goal position
    button   move onto a button and press it (a3 > threshold)
    lever    grip a sliding handle (a3 > threshold) and pull it along its track
    reach3d  reach a target in 3-D, rendered as (x, y) and (x, z) projections

a0..a2 move the agent by action_scale world units per unit action; a3 is the
interaction channel. Each task ships a waypoint demonstrator.
"""
import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.core.errors import ContractViolation, DatasetIOError, DemonstratorFailure, ensure
from src.data.datastore import Trajectory
from src.sim import render as gfx

logger = logging.getLogger(__name__)

TASK_IDS = ("reach", "push", "button", "lever", "reach3d")
ACTION_DIM = 4

CONTACT = gfx.AGENT_RADIUS + gfx.BLOCK_HALF
PUSH_STANDOFF = 0.1
PUSH_ALIGN = 0.12
PUSH_DETOUR = 0.12
PRESS_RADIUS = 0.04
GRIP_RADIUS = 0.03
LEVER_OVERSHOOT = 0.01
LEVER_TRACK = 0.3
MIN_SEPARATION = 0.1
WAYPOINT_EPS = 1e-3
PLACEMENT_TRIES = 1000


@dataclass
class TaskSpec:
    task_id: str
    bounds: Dict[str, Tuple[Tuple[float, float], ...]]
    horizon_limit: int = 100
    action_scale: float = 0.05
    render_size: int = 84
    arena: Tuple[float, float] = (0.0, 1.0)
    success: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        ensure(self.task_id in TASK_IDS, f"unknown task {self.task_id!r}; expected one of {TASK_IDS}")
        ensure(bool(self.bounds), f"task {self.task_id} has no placement bounds")
        for name, ranges in self.bounds.items():
            for low, high in ranges:
                ensure(low <= high, f"empty bound for {self.task_id}.{name}: [{low}, {high}]")
        ensure(self.horizon_limit >= 1, "horizon limit must be positive")
        ensure(self.action_scale > 0, "action scale must be positive")

    @property
    def dims(self) -> int:
        return 3 if self.task_id == "reach3d" else 2

    def tolerance(self, key: str, default: float) -> float:
        return float(self.success.get(key, default))


@dataclass
class WorldState:
    agent: np.ndarray
    objects: Dict[str, np.ndarray] = field(default_factory=dict)
    pressed: bool = False
    pulled: bool = False
    success: bool = False
    steps: int = 0

    def copy(self) -> "WorldState":
        return copy.deepcopy(self)

    def same_as(self, other: "WorldState") -> bool:
        return (np.array_equal(self.agent, other.agent)
                and self.objects.keys() == other.objects.keys()
                and all(np.array_equal(v, other.objects[k]) for k, v in self.objects.items())
                and (self.pressed, self.pulled, self.success, self.steps)
                == (other.pressed, other.pulled, other.success, other.steps))


def load_suite_config(path: Optional[Union[str, Path]] = None) -> Dict:
    if path is None:
        from config import settings
        path = settings.SUITE_CONFIG_PATH
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetIOError(f"cannot load suite configuration {path}: {e}")


def suite_hash(config: Dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")).hexdigest()


def suite_from_config(config: Dict) -> Dict[str, TaskSpec]:
    suite = {}
    for task_id in config.get("tasks", TASK_IDS):
        bounds = {name: tuple(tuple(r) for r in ranges) for name, ranges in config["bounds"][task_id].items()}
        suite[task_id] = TaskSpec(
            task_id=task_id,
            bounds=bounds,
            horizon_limit=int(config.get("horizon_limit", 100)),
            action_scale=float(config.get("action_scale", 0.05)),
            render_size=int(config.get("render_size", 84)),
            arena=tuple(config.get("arena", (0.0, 1.0))),
            success=dict(config.get("success", {})),
        )
    return suite


def load_suite(path: Optional[Union[str, Path]] = None) -> Dict[str, TaskSpec]:
    return suite_from_config(load_suite_config(path))


def _uniform(rng: np.random.Generator, ranges) -> np.ndarray:
    lows = np.array([r[0] for r in ranges], dtype=np.float64)
    highs = np.array([r[1] for r in ranges], dtype=np.float64)
    return lows + (highs - lows) * rng.random(len(ranges))


def _goal_key(task_id: str) -> str:
    return {"reach": "target", "push": "goal", "button": "button", "lever": "lever", "reach3d": "target"}[task_id]


def place(task: TaskSpec, rng: np.random.Generator) -> WorldState:
    """Draw object placements within bounds; the agent never starts on its goal"""
    for _ in range(PLACEMENT_TRIES):
        agent = _uniform(rng, task.bounds["agent"])
        objects: Dict[str, np.ndarray] = {}
        if task.task_id in ("reach", "reach3d"):
            objects["target"] = _uniform(rng, task.bounds["target"])
            anchor = objects["target"]
        elif task.task_id == "push":
            block = _uniform(rng, task.bounds["block"])
            objects["block"] = block
            objects["goal"] = block + _uniform(rng, task.bounds["goal_offset"])
            anchor = block
        elif task.task_id == "button":
            objects["button"] = _uniform(rng, task.bounds["button"])
            anchor = objects["button"]
        else:
            base = _uniform(rng, task.bounds["lever"])
            objects["lever"] = base
            objects["handle"] = base.copy()
            anchor = base
        if np.max(np.abs(agent - anchor)) > MIN_SEPARATION:
            return WorldState(agent=agent, objects=objects)
    raise DemonstratorFailure(f"could not place {task.task_id} objects apart in {PLACEMENT_TRIES} tries")


def _check_success(task: TaskSpec, state: WorldState) -> bool:
    if task.task_id in ("reach", "reach3d"):
        return float(np.linalg.norm(state.agent - state.objects["target"])) < task.tolerance("reach_tolerance", 0.05)
    if task.task_id == "push":
        return float(np.linalg.norm(state.objects["block"] - state.objects["goal"])) < task.tolerance("push_tolerance", 0.05)
    if task.task_id == "button":
        return state.pressed
    return state.pulled


def transition(task: TaskSpec, state: WorldState, action) -> WorldState:
    """Pure kinematic update; never renders"""
    action = np.asarray(action, dtype=np.float64).reshape(-1)
    ensure(action.shape == (ACTION_DIM,), f"actions have {ACTION_DIM} components, got {action.shape}")
    ensure(state.steps < task.horizon_limit, f"episode already ran {state.steps} of {task.horizon_limit} steps")
    action = np.clip(action, -1.0, 1.0)
    low, high = task.arena

    new = state.copy()
    old_agent = state.agent
    new.agent = np.clip(old_agent + task.action_scale * action[:task.dims], low, high)
    moved = new.agent - old_agent
    engaged = action[3] > task.tolerance("press_threshold", 0.5)

    if task.task_id == "push":
        block = state.objects["block"]
        touching = np.max(np.abs(old_agent - block)) < CONTACT
        if touching and float(np.dot(moved, block - old_agent)) > 0:
            new.objects["block"] = np.clip(block + moved, low, high)
    elif task.task_id == "button":
        if engaged and np.max(np.abs(new.agent - state.objects["button"])) < PRESS_RADIUS:
            new.pressed = True
    elif task.task_id == "lever":
        handle = state.objects["handle"]
        base = state.objects["lever"]
        if engaged and np.max(np.abs(old_agent - handle)) < GRIP_RADIUS:
            slid = np.clip(handle[0] + moved[0], base[0], base[0] + LEVER_TRACK)
            new.objects["handle"] = np.array([slid, handle[1]])
        if new.objects["handle"][0] - base[0] >= task.tolerance("lever_travel", 0.25):
            new.pulled = True

    new.steps = state.steps + 1
    new.success = state.success or _check_success(task, new)
    return new


def render(task: TaskSpec, state: WorldState) -> np.ndarray:
    """84x84x3 float32 image in [0, 1], a deterministic function of the state"""
    image = gfx.blank(task.render_size)
    objects = state.objects
    if task.task_id == "reach3d":
        top, side = gfx.split_panels(image)
        target = objects["target"]
        gfx.fill_disc(top, (target[0], target[1]), gfx.TARGET_RADIUS, gfx.TARGET)
        gfx.fill_disc(side, (target[0], target[2]), gfx.TARGET_RADIUS, gfx.TARGET)
        gfx.fill_disc(top, (state.agent[0], state.agent[1]), gfx.AGENT_RADIUS, gfx.AGENT)
        gfx.fill_disc(side, (state.agent[0], state.agent[2]), gfx.AGENT_RADIUS, gfx.AGENT)
        return image

    if task.task_id == "reach":
        gfx.fill_disc(image, objects["target"], gfx.TARGET_RADIUS, gfx.TARGET)
    elif task.task_id == "push":
        gfx.fill_rect(image, objects["block"], gfx.BLOCK_HALF, gfx.BLOCK_HALF, gfx.BLOCK)
    elif task.task_id == "button":
        color = gfx.BUTTON_ON if state.pressed else gfx.BUTTON_OFF
        gfx.fill_rect(image, objects["button"], gfx.BUTTON_HALF, gfx.BUTTON_HALF, color)
    elif task.task_id == "lever":
        base = objects["lever"]
        track_center = (base[0] + LEVER_TRACK / 2, base[1])
        gfx.fill_rect(image, track_center, LEVER_TRACK / 2, gfx.TRACK_HALF_HEIGHT, gfx.TRACK)
        gfx.fill_rect(image, objects["handle"], gfx.HANDLE_HALF, gfx.HANDLE_HALF, gfx.HANDLE)
    gfx.fill_disc(image, state.agent, gfx.AGENT_RADIUS, gfx.AGENT)
    return image


def solved_state(task: TaskSpec, state: WorldState) -> WorldState:
    """Idealized solved configuration of this placement; goal vectors are read from it"""
    solved = state.copy()
    objects = solved.objects
    if task.task_id in ("reach", "reach3d"):
        solved.agent = objects["target"].copy()
    elif task.task_id == "push":
        objects["block"] = objects["goal"].copy()
        solved.agent = objects["goal"] - np.array([PUSH_STANDOFF - task.action_scale, 0.0])
    elif task.task_id == "button":
        solved.agent = objects["button"].copy()
        solved.pressed = True
    else:
        objects["handle"] = objects["lever"] + np.array([task.tolerance("lever_travel", 0.25) + LEVER_OVERSHOOT, 0.0])
        solved.agent = objects["handle"].copy()
        solved.pulled = True
    solved.success = True
    return solved


def demonstrated_final_state(task: TaskSpec, state: WorldState) -> WorldState:
    """Where the heuristic demonstrator ends from this placement, so evaluation goals
    render exactly like the final frames training saw; solved_state if it cannot finish"""
    final = state
    while not final.success:
        if final.steps >= task.horizon_limit:
            return solved_state(task, state)
        final = transition(task, final, heuristic_action(task, final))
    return final


def goal_vector(task: TaskSpec, state: WorldState) -> np.ndarray:
    """Goal object position in the solved configuration as a 3-vector (z = 0 for planar tasks)"""
    solved = solved_state(task, state)
    key = "handle" if task.task_id == "lever" else _goal_key(task.task_id)
    goal = solved.objects[key]
    return np.pad(goal, (0, 3 - len(goal))).astype(np.float64)


def reset(task: TaskSpec, seed: int, goal_offset: Optional[Sequence[float]] = None
          ) -> Tuple[WorldState, np.ndarray, np.ndarray]:
    """Seeded placement; returns (state, observation, goal observation).

    goal_offset shifts the task's goal object after placement, e.g. a z offset
    on reach3d that training placements never produce.
    """
    rng = np.random.default_rng(seed)
    state = place(task, rng)
    if goal_offset is not None:
        key = _goal_key(task.task_id)
        offset = np.asarray(goal_offset, dtype=np.float64)[:len(state.objects[key])]
        state.objects[key] = np.clip(state.objects[key] + offset, *task.arena)
        if task.task_id == "lever":
            state.objects["handle"] = state.objects["lever"].copy()
    return state, render(task, state), render(task, demonstrated_final_state(task, state))


def step(task: TaskSpec, state: WorldState, action) -> Tuple[WorldState, np.ndarray, bool]:
    new = transition(task, state, action)
    return new, render(task, new), new.success


def replay_states(task: TaskSpec, seed: int, actions, goal_offset=None) -> List[WorldState]:
    """States visited by an episode, bit-identical to the original run"""
    state, _, _ = reset(task, seed, goal_offset)
    states = [state]
    for action in actions:
        state = transition(task, state, action)
        states.append(state)
    return states


def _toward(agent: np.ndarray, waypoint: np.ndarray, scale: float) -> np.ndarray:
    return np.clip((waypoint - agent) / scale, -1.0, 1.0)


def _pad_action(motion: np.ndarray, interact: float = 0.0) -> np.ndarray:
    action = np.zeros(ACTION_DIM)
    action[:len(motion)] = motion
    action[3] = interact
    return action


def heuristic_action(task: TaskSpec, state: WorldState) -> np.ndarray:
    """Waypoint demonstrator: proportional control toward approach, engage, then goal waypoints"""
    if state.success:
        return np.zeros(ACTION_DIM)
    agent, objects, scale = state.agent, state.objects, task.action_scale

    if task.task_id in ("reach", "reach3d"):
        return _pad_action(_toward(agent, objects["target"], scale))

    if task.task_id == "button":
        button = objects["button"]
        press = 1.0 if np.max(np.abs(agent - button)) < PRESS_RADIUS else 0.0
        return _pad_action(_toward(agent, button, scale), press)

    if task.task_id == "lever":
        handle, base = objects["handle"], objects["lever"]
        if np.max(np.abs(agent - handle)) < GRIP_RADIUS:
            pull_to = np.array([base[0] + task.tolerance("lever_travel", 0.25) + LEVER_OVERSHOOT, handle[1]])
            return _pad_action(_toward(agent, pull_to, scale), 1.0)
        return _pad_action(_toward(agent, handle, scale))

    block, goal = objects["block"], objects["goal"]
    gap = block[0] - agent[0]
    offset_y = agent[1] - block[1]
    if abs(offset_y) < WAYPOINT_EPS and 0.0 < gap <= PUSH_ALIGN:
        return _pad_action(np.array([np.clip((goal[0] - block[0]) / scale, -1.0, 1.0), 0.0]))
    if gap >= PUSH_STANDOFF - WAYPOINT_EPS:
        return _pad_action(_toward(agent, block - np.array([PUSH_STANDOFF, 0.0]), scale))
    if abs(offset_y) < PUSH_DETOUR - WAYPOINT_EPS:
        side = 1.0 if offset_y >= 0 else -1.0
        return _pad_action(_toward(agent, np.array([agent[0], block[1] + side * PUSH_DETOUR]), scale))
    return _pad_action(_toward(agent, np.array([block[0] - PUSH_STANDOFF, agent[1]]), scale))


def run_demonstrator(task: TaskSpec, seed: int, goal_offset=None) -> Trajectory:
    """One heuristic episode; the final frame is the success state and doubles as the goal"""
    state, observation, _ = reset(task, seed, goal_offset)
    images, actions = [observation], []
    while not state.success:
        if state.steps >= task.horizon_limit:
            raise DemonstratorFailure(f"{task.task_id} demonstrator did not succeed within "
                                      f"{task.horizon_limit} steps (seed {seed})")
        action = heuristic_action(task, state)
        state, observation, _ = step(task, state, action)
        actions.append(action)
        images.append(observation)
    actions.append(np.zeros(ACTION_DIM))
    return Trajectory(task_id=task.task_id, seed=int(seed),
                      images=np.stack(images).astype(np.float32),
                      actions=np.stack(actions).astype(np.float32),
                      success=True)


def generate_demos(task: TaskSpec, n: int, seed: int, max_retries: int = 20) -> List[Trajectory]:
    """n successful demonstrations; episode seeds are drawn from a generator seeded with seed"""
    ensure(n >= 1, "need at least one demonstration")
    rng = np.random.default_rng(seed)
    demos: List[Trajectory] = []
    failures = 0
    while len(demos) < n:
        episode_seed = int(rng.integers(0, 2 ** 31 - 1))
        try:
            demo = run_demonstrator(task, episode_seed)
        except DemonstratorFailure as e:
            failures += 1
            logger.warning(f"Discarding demonstration: {e}")
            if failures > max_retries:
                raise DemonstratorFailure(f"{task.task_id}: {failures} demonstrator failures, giving up")
            continue
        if demo.steps < 2:
            continue
        demos.append(demo)
    logger.info(f"Generated {n} {task.task_id} demonstrations (seed {seed}, {failures} discarded)")
    return demos


class World:
    """Stateful wrapper around one task instance for episode loops"""

    def __init__(self, task: TaskSpec):
        self.task = task
        self.state: Optional[WorldState] = None
        self.goal_observation: Optional[np.ndarray] = None

    def reset(self, seed: int, goal_offset=None) -> Tuple[np.ndarray, np.ndarray]:
        self.state, observation, self.goal_observation = reset(self.task, seed, goal_offset)
        return observation, self.goal_observation

    def step(self, action) -> Tuple[np.ndarray, bool]:
        if self.state is None:
            raise ContractViolation("call reset(seed) before stepping the world")
        self.state, observation, success = step(self.task, self.state, action)
        return observation, success

    @property
    def done(self) -> bool:
        return self.state is not None and (self.state.success or self.state.steps >= self.task.horizon_limit)

    def goal_vector(self) -> np.ndarray:
        return goal_vector(self.task, self.state)
