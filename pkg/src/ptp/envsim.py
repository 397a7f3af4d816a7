"""Planar drawer / obstacle / object micro-world.

The table is the unit square. A drawer sits at the top edge; its handle slides
down along ``x = HANDLE_X`` as the drawer opens. An obstacle can sit in the
strip swept by the drawer front, in which case the drawer cannot be opened
until the obstacle is pushed aside. A graspable object can live on the table
or in the drawer's storage area (only reachable while the drawer is open).

Dynamics are deterministic; all randomness lives in :func:`reset` and in the
scripted demonstration generator.
"""
from __future__ import annotations

import gzip
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

STATE_DIM = 8
ACTION_DIM = 3

A_MAX = 0.05
R_GRASP = 0.04
R_PUSH = 0.06
COS_FRICTION_CONE = math.cos(math.pi / 4)

HANDLE_X = 0.5
HANDLE_Y_CLOSED = 0.75
DRAWER_TRAVEL = 0.3
# area swept by the drawer front while opening; an obstacle inside blocks it
PATH_RECT = (0.38, 0.40, 0.62, 0.75)
# drawer interior, reachable only when drawer_open >= STORAGE_ACCESS
STORAGE_RECT = (0.42, 0.80, 0.58, 0.95)
STORAGE_ACCESS = 0.5
# where the random blocking obstacle is dropped
BLOCK_RECT = (0.44, 0.48, 0.56, 0.62)


def _in_rect(xy, rect) -> bool:
    x0, y0, x1, y1 = rect
    return x0 <= xy[0] <= x1 and y0 <= xy[1] <= y1


def _clip01(v: float) -> float:
    return min(1.0, max(0.0, v))


def handle_xy(drawer_open: float) -> tuple[float, float]:
    return (HANDLE_X, HANDLE_Y_CLOSED - DRAWER_TRAVEL * drawer_open)


def path_blocked(obstacle_xy) -> bool:
    return _in_rect(obstacle_xy, PATH_RECT)


def in_storage(xy) -> bool:
    return _in_rect(xy, STORAGE_RECT)


@dataclass(frozen=True)
class EnvState:
    robot_xy: tuple[float, float]
    gripper: float
    drawer_open: float
    obstacle_xy: tuple[float, float]
    object_xy: tuple[float, float]

    @property
    def object_held(self) -> bool:
        # Held objects are snapped onto the robot, and a closed gripper resting
        # exactly on the object re-grasps it on the next step anyway, so the
        # flag is recoverable from the 8 stored coordinates.
        return self.gripper >= 0.5 and self.object_xy == self.robot_xy

    def flatten(self) -> np.ndarray:
        return np.array(
            [*self.robot_xy, self.gripper, self.drawer_open, *self.obstacle_xy, *self.object_xy],
            dtype=np.float64,
        )

    @classmethod
    def unflatten(cls, v: Sequence[float]) -> "EnvState":
        v = [float(x) for x in v]
        if len(v) != STATE_DIM:
            raise InputError(f"expected {STATE_DIM} values, got {len(v)}")
        return cls((v[0], v[1]), v[2], v[3], (v[4], v[5]), (v[6], v[7]))

    def validate(self) -> None:
        for name in ("robot_xy", "obstacle_xy", "object_xy"):
            xy = getattr(self, name)
            if not all(0.0 <= c <= 1.0 for c in xy):
                raise InputError(f"{name}={xy} outside the unit square")
        if not 0.0 <= self.drawer_open <= 1.0:
            raise InputError(f"drawer_open={self.drawer_open} outside [0, 1]")
        if self.gripper not in (0.0, 1.0):
            raise InputError(f"gripper must be 0 or 1, got {self.gripper}")


@dataclass(frozen=True)
class Action:
    delta_xy: tuple[float, float]
    grip_cmd: float

    def __post_init__(self):
        dx, dy = self.delta_xy
        for c in (dx, dy):
            if not (abs(c) <= A_MAX + 1e-12) or math.isnan(c):
                raise InputError(f"delta component {c} outside [-{A_MAX}, {A_MAX}]")
        if not (-1.0 <= self.grip_cmd <= 1.0):
            raise InputError(f"grip_cmd {self.grip_cmd} outside [-1, 1]")

    def to_array(self) -> np.ndarray:
        return np.array([*self.delta_xy, self.grip_cmd], dtype=np.float64)

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "Action":
        a = [float(x) for x in a]
        if len(a) != ACTION_DIM:
            raise InputError(f"expected {ACTION_DIM} action values, got {len(a)}")
        return cls((a[0], a[1]), a[2])


def step(s: EnvState, a: Action) -> EnvState:
    """Advance the world by one action.

    ``gripper`` reads 1 only while the fingers are closed on something: a
    close command (``grip_cmd >= 0``) that ends the step on neither the object
    nor the handle leaves it at 0. The handle is dragged only if the gripper
    was already closed on it before this step. Grasping is tested after the
    move, and a held object is carried through the step before an opening
    command releases it.
    """
    if not isinstance(a, Action):
        a = Action.from_array(a)
    dx, dy = a.delta_xy
    rx, ry = s.robot_xy
    close = a.grip_cmd >= 0

    drawer = s.drawer_open
    hx, hy = handle_xy(drawer)
    if s.gripper == 1.0 and math.hypot(rx - hx, ry - hy) < R_GRASP:
        change = -dy / DRAWER_TRAVEL
        if path_blocked(s.obstacle_xy):
            change = min(change, 0.0)
        drawer = _clip01(drawer + change)

    robot = (_clip01(rx + dx), _clip01(ry + dy))

    # obstacle: a push inside the friction cone carries it along with the robot;
    # a glancing push only passes on the component along the contact normal
    ox, oy = s.obstacle_xy
    obstacle = s.obstacle_xy
    gap = math.hypot(ox - rx, oy - ry)
    if 0.0 < gap < R_PUSH:
        nx, ny = (ox - rx) / gap, (oy - ry) / gap
        push = dx * nx + dy * ny
        if push > 0:
            if push >= COS_FRICTION_CONE * math.hypot(dx, dy):
                obstacle = (_clip01(ox + dx), _clip01(oy + dy))
            else:
                obstacle = (_clip01(ox + push * nx), _clip01(oy + push * ny))

    obj = s.object_xy
    held = False
    if s.object_held:
        obj = robot
        held = close
        if not close and in_storage(obj) and drawer < STORAGE_ACCESS:
            # dropped onto a closed drawer: it rolls off the front edge
            obj = (obj[0], STORAGE_RECT[1] - 0.03)
    elif close:
        near = math.hypot(obj[0] - robot[0], obj[1] - robot[1]) < R_GRASP
        if near and (not in_storage(obj) or drawer >= STORAGE_ACCESS):
            obj = robot
            held = True
    hx, hy = handle_xy(drawer)
    on_handle = math.hypot(robot[0] - hx, robot[1] - hy) < R_GRASP
    gripper = 1.0 if close and (held or on_handle) else 0.0
    return EnvState(robot, gripper, drawer, obstacle, obj)


# --------------------------------------------------------------------------- reset


@dataclass(frozen=True)
class RandomizationConfig:
    p_block: float = 0.3
    p_drawer_closed: float = 0.5
    drawer_open_range: tuple[float, float] = (0.3, 1.0)
    p_object_in_drawer: float = 0.25
    robot_range: tuple[float, float] = (0.1, 0.9)
    table_range: tuple[float, float] = (0.1, 0.9)
    min_separation: float = 0.1
    max_attempts: int = 1000


def _seed_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) % 2**64 for k in keys]))


def _uniform_in(rng: np.random.Generator, rect) -> tuple[float, float]:
    x0, y0, x1, y1 = rect
    return (float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)))


def reset(seed: int, randomization: RandomizationConfig = RandomizationConfig()) -> EnvState:
    """Draw a random initial state; identical arguments give identical states."""
    cfg = randomization
    rng = _seed_rng(seed)
    lo, hi = cfg.table_range
    table = (lo, lo, hi, hi)

    blocked = rng.random() < cfg.p_block
    if blocked:
        drawer = 0.0
    elif rng.random() < cfg.p_drawer_closed:
        drawer = 0.0
    else:
        drawer = float(rng.uniform(*cfg.drawer_open_range))
    in_drawer = rng.random() < cfg.p_object_in_drawer

    for _ in range(cfg.max_attempts):
        if blocked:
            obstacle = _uniform_in(rng, BLOCK_RECT)
        else:
            obstacle = _uniform_in(rng, table)
            if path_blocked(obstacle) or in_storage(obstacle):
                continue
        if in_drawer:
            obj = _uniform_in(rng, (0.45, 0.83, 0.55, 0.92))
        else:
            obj = _uniform_in(rng, table)
            if path_blocked(obj) or in_storage(obj):
                continue
            if math.dist(obj, obstacle) < cfg.min_separation:
                continue
        robot = (float(rng.uniform(*cfg.robot_range)), float(rng.uniform(*cfg.robot_range)))
        if math.dist(robot, obstacle) < cfg.min_separation or math.dist(robot, obj) < cfg.min_separation:
            continue
        if math.dist(robot, handle_xy(drawer)) < cfg.min_separation:
            continue
        return EnvState(robot, 0.0, drawer, obstacle, obj)
    raise ConfigError(
        f"no admissible placement after {cfg.max_attempts} attempts; "
        "table range and exclusion zones leave no room"
    )


# --------------------------------------------------------------------------- tasks


@dataclass(frozen=True)
class TaskSpec:
    """A target task: how to start, what goal to draw, and how to score it.

    ``tolerances`` maps a coordinate group to a radius. Only drawer_open,
    obstacle_xy and object_xy are allowed so the robot pose never counts.
    """

    name: str
    init: RandomizationConfig
    goal_sampler: Callable[[EnvState, np.random.Generator], EnvState]
    tolerances: dict = field(default_factory=dict)
    episode_horizon: int = 120

    def __post_init__(self):
        bad = set(self.tolerances) - {"drawer_open", "obstacle_xy", "object_xy"}
        if bad:
            raise ConfigError(f"success predicate may not use {sorted(bad)}")

    def initial_state(self, seed: int) -> EnvState:
        return reset(seed, self.init)

    def sample_goal(self, s0: EnvState, seed: int) -> EnvState:
        return self.goal_sampler(s0, _seed_rng(seed, 7919))

    def admits(self, s0: EnvState) -> bool:
        """Whether ``s0`` looks like a start state of this task."""
        return _TASK_PRECONDITIONS[self.name](s0)


def success(s_final: EnvState, goal: EnvState, task: TaskSpec) -> bool:
    for key, tol in task.tolerances.items():
        a, b = getattr(s_final, key), getattr(goal, key)
        dist = abs(a - b) if key == "drawer_open" else math.dist(a, b)
        if not dist <= tol:
            return False
    return True


def _goal_task_a(s0: EnvState, rng) -> EnvState:
    # obstacle pushed sideways out of the drawer path, then the drawer pulled open.
    # The side is the one facing away from the robot, so a straight push from
    # where it stands clears the path; a random side only when it is level.
    lead = s0.obstacle_xy[0] - s0.robot_xy[0]
    if abs(lead) >= SlideObstacle.clearance:
        side = 1.0 if lead > 0 else -1.0
    else:
        side = -1.0 if rng.random() < 0.5 else 1.0
    obstacle = (HANDLE_X + side * 0.2, s0.obstacle_xy[1])
    return EnvState(handle_xy(1.0), 0.0, 1.0, obstacle, s0.object_xy)


def _goal_task_b(s0: EnvState, rng) -> EnvState:
    spot = (float(rng.uniform(0.46, 0.54)), float(rng.uniform(0.84, 0.9)))
    return EnvState(spot, 0.0, 1.0, s0.obstacle_xy, spot)


def _goal_task_c(s0: EnvState, rng) -> EnvState:
    while True:
        spot = (float(rng.uniform(0.15, 0.35)), float(rng.uniform(0.6, 0.9)))
        if math.dist(spot, s0.obstacle_xy) > 0.1:
            break
    return EnvState(handle_xy(0.0), 0.0, 0.0, s0.obstacle_xy, spot)


_TASK_PRECONDITIONS = {
    "A": lambda s: path_blocked(s.obstacle_xy) and s.drawer_open == 0.0,
    "B": lambda s: s.drawer_open == 0.0 and not path_blocked(s.obstacle_xy) and not in_storage(s.object_xy),
    "C": lambda s: s.drawer_open == 1.0 and in_storage(s.object_xy) and not path_blocked(s.obstacle_xy),
}

_TOL = {"drawer_open": 0.15, "obstacle_xy": 0.06, "object_xy": 0.05}

TASKS = {
    "A": TaskSpec(
        "A",
        RandomizationConfig(p_block=1.0, p_object_in_drawer=0.0),
        _goal_task_a,
        dict(_TOL),
    ),
    "B": TaskSpec(
        "B",
        RandomizationConfig(p_block=0.0, p_drawer_closed=1.0, p_object_in_drawer=0.0),
        _goal_task_b,
        dict(_TOL),
    ),
    "C": TaskSpec(
        "C",
        RandomizationConfig(p_block=0.0, p_drawer_closed=0.0, drawer_open_range=(1.0, 1.0), p_object_in_drawer=1.0),
        _goal_task_c,
        dict(_TOL),
    ),
}


# --------------------------------------------------------------------------- scripted primitives


def _toward(src, dst, limit=A_MAX) -> tuple[float, float]:
    return (
        float(np.clip(dst[0] - src[0], -limit, limit)),
        float(np.clip(dst[1] - src[1], -limit, limit)),
    )


def _close(a, b, tol=1e-9) -> bool:
    return abs(a[0] - b[0]) <= tol and abs(a[1] - b[1]) <= tol


class Controller:
    """Scripted closed-loop controller; ``act`` returns None when finished.

    ``speed`` caps each per-axis move; demonstrations vary it to vary tempo.
    """

    speed: float = A_MAX

    def act(self, s: EnvState) -> Action | None:  # pragma: no cover - interface
        raise NotImplementedError


class GoTo(Controller):
    def __init__(self, target):
        self.target = target

    def act(self, s):
        if _close(s.robot_xy, self.target):
            return None
        return Action(_toward(s.robot_xy, self.target, self.speed), -1.0)


def _lands(src, dst, limit=A_MAX) -> bool:
    return abs(dst[0] - src[0]) <= limit and abs(dst[1] - src[1]) <= limit


CLOSE_RADIUS = 0.03  # scripts release once this near the place target
REACH_CLOSE_RADIUS = 0.1  # and start commanding a grasp once this near the object or handle


def _closing(src, dst, limit, radius=CLOSE_RADIUS) -> bool:
    return math.hypot(dst[0] - src[0], dst[1] - src[1]) < radius or _lands(src, dst, limit)


class GraspPlace(Controller):
    """Close once near the object, carry, open once near the target."""

    def __init__(self, target):
        self.target = target
        self.phase = "reach"

    def act(self, s):
        if self.phase == "reach":
            if s.object_held:
                self.phase = "carry"
            else:
                grip = 1.0 if _closing(s.robot_xy, s.object_xy, self.speed, REACH_CLOSE_RADIUS) else -1.0
                return Action(_toward(s.robot_xy, s.object_xy, self.speed), grip)
        if self.phase == "carry":
            if s.gripper == 0.0:
                return None
            grip = -1.0 if _closing(s.robot_xy, self.target, self.speed) else 1.0
            return Action(_toward(s.robot_xy, self.target, self.speed), grip)
        return None


class SlideObstacle(Controller):
    """Line up behind the obstacle, then push straight along an axis.

    The robot first backs off along -u to ``clearance`` behind the obstacle,
    slides sideways onto the push line, and only then moves along u, so
    contact is only ever made head-on.
    """

    standoff = 0.05
    clearance = R_PUSH + 0.01

    def __init__(self, target):
        self.target = target

    def act(self, s):
        obs = s.obstacle_xy
        gap = (self.target[0] - obs[0], self.target[1] - obs[1])
        dist = math.hypot(*gap)
        if dist <= 1e-9:
            return None
        u = (gap[0] / dist, gap[1] / dist)
        perp = (-u[1], u[0])
        rel = (s.robot_xy[0] - obs[0], s.robot_xy[1] - obs[1])
        ahead = rel[0] * u[0] + rel[1] * u[1]
        lat = rel[0] * perp[0] + rel[1] * perp[1]
        if abs(lat) <= 1e-9 and ahead < 0:
            behind = -ahead
            travel = behind - self.standoff if behind >= R_PUSH else dist
            step_len = min(self.speed, travel)
            return Action((u[0] * step_len, u[1] * step_len), -1.0)
        back = -self.clearance
        if ahead > back + 1e-9:
            way = (obs[0] + back * u[0] + lat * perp[0], obs[1] + back * u[1] + lat * perp[1])
        else:
            way = (obs[0] + back * u[0], obs[1] + back * u[1])
        return Action(_toward(s.robot_xy, way, self.speed), -1.0)


class MoveDrawer(Controller):
    """Close once near the handle, drag, open on the last drag step."""

    def __init__(self, target_open):
        self.target = target_open
        self.phase = "reach"

    def act(self, s):
        handle = handle_xy(s.drawer_open)
        if self.phase == "reach":
            if s.gripper == 1.0 and math.dist(s.robot_xy, handle) < R_GRASP:
                self.phase = "drag"
            else:
                grip = 1.0 if _closing(s.robot_xy, handle, self.speed, REACH_CLOSE_RADIUS) else -1.0
                return Action(_toward(s.robot_xy, handle, self.speed), grip)
        if self.phase == "drag":
            if s.gripper == 0.0:
                return None
            gap = self.target - s.drawer_open
            dy = float(np.clip(-gap * DRAWER_TRAVEL, -self.speed, self.speed))
            last = abs(gap * DRAWER_TRAVEL) <= self.speed
            return Action((0.0, dy), -1.0 if last else 1.0)
        return None


@dataclass(frozen=True)
class PrimitiveSpec:
    """A scripted skill: ``make(state, rng)`` builds a controller or returns None if infeasible."""

    name: str
    make: Callable[[EnvState, np.random.Generator], Controller | None]
    budget: int = 60


def _table_spot(rng, s: EnvState, avoid=()) -> tuple[float, float]:
    for _ in range(200):
        p = (float(rng.uniform(0.1, 0.9)), float(rng.uniform(0.1, 0.9)))
        if path_blocked(p) or in_storage(p):
            continue
        if all(math.dist(p, q) > 0.1 for q in avoid):
            return p
    return p


def _make_goto(s, rng):
    return GoTo((float(rng.uniform(0.1, 0.9)), float(rng.uniform(0.1, 0.9))))


def _make_grasp_place(s, rng):
    if in_storage(s.object_xy) and s.drawer_open < STORAGE_ACCESS:
        return None
    if not in_storage(s.object_xy) and s.drawer_open >= STORAGE_ACCESS and rng.random() < 0.5:
        target = (float(rng.uniform(0.45, 0.55)), float(rng.uniform(0.83, 0.92)))
    else:
        target = _table_spot(rng, s, avoid=(s.obstacle_xy, s.object_xy))
    return GraspPlace(target)


def _make_slide(s, rng):
    """Push along an axis direction with the robot already clear behind the obstacle.

    Requiring the robot to start at least ``SlideObstacle.clearance`` behind
    means the demonstration never has to back away before lining up.
    """
    obs = s.obstacle_xy
    rel = (s.robot_xy[0] - obs[0], s.robot_xy[1] - obs[1])
    axes = ((1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0))
    dirs = [u for u in axes if rel[0] * u[0] + rel[1] * u[1] <= -SlideObstacle.clearance]
    if not dirs:
        return None
    for _ in range(50):
        u = dirs[rng.integers(len(dirs))]
        d = float(rng.uniform(0.12, 0.25))
        target = (obs[0] + u[0] * d, obs[1] + u[1] * d)
        if 0.08 <= target[0] <= 0.92 and 0.08 <= target[1] <= 0.92 and not in_storage(target):
            return SlideObstacle(target)
    return None


def _make_open(s, rng):
    if path_blocked(s.obstacle_xy) or s.drawer_open > 0.7:
        return None
    lo = min(s.drawer_open + 0.3, 1.0)
    target = 1.0 if rng.random() < 0.5 else float(rng.uniform(lo, 1.0))
    return MoveDrawer(target)


def _make_close(s, rng):
    if s.drawer_open < 0.3:
        return None
    target = 0.0 if rng.random() < 0.5 else float(rng.uniform(0.0, s.drawer_open - 0.3))
    return MoveDrawer(target)


PRIMITIVES = (
    PrimitiveSpec("go-to", _make_goto),
    PrimitiveSpec("grasp-place", _make_grasp_place),
    PrimitiveSpec("slide-obstacle", _make_slide),
    PrimitiveSpec("open-drawer", _make_open),
    PrimitiveSpec("close-drawer", _make_close),
)


# --------------------------------------------------------------------------- trajectories


@dataclass
class Trajectory:
    states: list[EnvState]
    actions: list[Action]
    primitive_tag: str
    seed: int = 0

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1:
            raise InputError("a trajectory needs exactly one more state than actions")

    def __len__(self) -> int:
        return len(self.actions)

    def state_array(self) -> np.ndarray:
        return np.stack([s.flatten() for s in self.states])

    def action_array(self) -> np.ndarray:
        return np.stack([a.to_array() for a in self.actions]).reshape(-1, ACTION_DIM)

    def replays(self) -> bool:
        s = self.states[0]
        for a, nxt in zip(self.actions, self.states[1:]):
            s = step(s, a)
            if s != nxt:
                return False
        return True

    def to_record(self) -> dict:
        return {
            "states": [s.flatten().tolist() for s in self.states],
            "actions": [a.to_array().tolist() for a in self.actions],
            "primitive_tag": self.primitive_tag,
            "seed": self.seed,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Trajectory":
        return cls(
            [EnvState.unflatten(v) for v in rec["states"]],
            [Action.from_array(v) for v in rec["actions"]],
            rec["primitive_tag"],
            int(rec.get("seed", 0)),
        )


def _open_text(path: Path, mode: str):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def write_jsonl(records: Iterable[dict], path) -> None:
    with _open_text(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[dict]:
    with _open_text(path, "r") as f:
        return [json.loads(line) for line in f if line.strip()]


def save_trajectories(trajs: Sequence[Trajectory], path) -> None:
    write_jsonl((t.to_record() for t in trajs), path)


def load_trajectories(path) -> list[Trajectory]:
    return [Trajectory.from_record(r) for r in read_jsonl(path)]


def run_controller(s0: EnvState, ctrl: Controller, budget: int) -> tuple[list[EnvState], list[Action]] | None:
    states, actions = [s0], []
    s = s0
    for _ in range(budget + 1):
        a = ctrl.act(s)
        if a is None:
            return states, actions
        s = step(s, a)
        states.append(s)
        actions.append(a)
    return None


def _hold(s: EnvState) -> Action:
    return Action((0.0, 0.0), 1.0 if s.gripper == 1.0 else -1.0)


@dataclass(frozen=True)
class DatasetConfig:
    min_len: int = 10
    max_len: int = 100
    group_size: int = 4
    retries: int = 10
    speed_range: tuple[float, float] = (0.1, 1.0)  # fraction of A_MAX, log-uniform per trajectory
    randomization: RandomizationConfig = RandomizationConfig()


def generate_offline_dataset(
    n_traj: int,
    seed: int,
    primitives: Sequence[PrimitiveSpec] = PRIMITIVES,
    cfg: DatasetConfig = DatasetConfig(),
) -> list[Trajectory]:
    """Scripted single-skill demonstrations.

    Groups of ``cfg.group_size`` consecutive trajectories start from the same
    randomized state. Each trajectory runs one primitive to completion at a
    per-trajectory speed drawn from ``cfg.speed_range``, which spreads the
    lengths over ``[min_len, max_len]``; runs longer than ``max_len`` count as
    failures, and runs shorter than ``min_len`` are padded with hold steps. The primitive is the least-used one that is
    feasible from the group's start state (random tie-break), which keeps the
    tag histogram flat even though some skills are unavailable in some states.
    """
    if not primitives:
        raise ConfigError("at least one primitive is required")
    counts = {p.name: 0 for p in primitives}
    out: list[Trajectory] = []
    group = 0
    while len(out) < n_traj:
        s0 = reset(_seed_key(seed, group), cfg.randomization)
        for slot in range(cfg.group_size):
            if len(out) >= n_traj:
                break
            traj_seed = _seed_key(seed, group, slot)
            rng = _seed_rng(traj_seed)
            order = sorted(primitives, key=lambda p: (counts[p.name], rng.random()))
            traj = None
            for prim in order:
                traj = _demonstrate(s0, prim, rng, cfg)
                if traj is not None:
                    break
            if traj is None:
                raise ConfigError(f"no primitive could be demonstrated from group {group}")
            states, actions = traj
            while len(actions) < cfg.min_len:
                a = _hold(states[-1])
                actions.append(a)
                states.append(step(states[-1], a))
            counts[prim.name] += 1
            out.append(Trajectory(states, actions, prim.name, traj_seed))
        group += 1
    return out


def _seed_key(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) % 2**64 for k in keys]).generate_state(2, np.uint32).view(np.uint64)[0])


def _demonstrate(s0, prim: PrimitiveSpec, rng, cfg: DatasetConfig):
    for attempt in range(cfg.retries):
        ctrl = prim.make(s0, rng)
        if ctrl is None:
            return None
        lo, hi = np.log(cfg.speed_range)
        frac = float(np.exp(rng.uniform(lo, hi)))
        ctrl.speed = frac * A_MAX
        budget = min(cfg.max_len, math.ceil(prim.budget / frac))
        res = run_controller(s0, ctrl, budget)
        if res is not None and 0 < len(res[1]) <= cfg.max_len:
            return res
        log.debug("primitive %s failed attempt %d, retrying", prim.name, attempt)
    return None
