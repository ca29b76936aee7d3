"""Deterministic gridworlds with controllable spurious correlates.

Two environments live here:

* Traffic-World, a one-lane corridor. The agent starts at cell 0 behind a
  queue of vehicles and has to pass a traffic light to reach the goal in the
  last cell. A single "tile" bit in the observation turns yellow whenever the
  vehicle directly ahead of the agent is stopped. In demonstration data this
  bit predicts the expert's Wait action almost perfectly, but it has no causal
  effect on reward. Vehicles occasionally brake for a step and keep driving a
  few cells past the visible road, so the tile sometimes flashes while the
  road ahead of the agent is free; those rare transitions are the tail that
  separates the tile from the real cause of waiting.
* Confounded maze, a recursive-backtracking maze whose goal usually sits in
  the top-right corner. The corner is the spurious correlate.

Both environments are pure: ``step`` never mutates its input state, and all
randomness for an episode is drawn once at ``reset`` from the episode seed.
"""

from __future__ import annotations

import dataclasses
import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np


class EnvError(ValueError):
    pass


class EpisodeFinishedError(RuntimeError):
    """Raised when ``step`` is called on a state whose episode already ended."""


class DoneReason(enum.Enum):
    RUNNING = "running"
    GOAL = "goal"
    RED_VIOLATION = "red_violation"
    TIMEOUT = "timeout"


# Traffic-World actions
WAIT, FORWARD = 0, 1
# Maze actions
UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3

TRAFFIC_ACTIONS = ("wait", "forward")
MAZE_ACTIONS = ("up", "down", "left", "right")


@dataclass(frozen=True)
class TrafficWorldConfig:
    corridor_len: int = 12
    light_cell: Optional[int] = None  # None -> corridor_len - 3
    num_vehicles: tuple[int, int] = (0, 3)  # inclusive range
    # offsets of the queue's rear vehicle from the agent, inclusive range;
    # an offset of 1 would put a vehicle directly in front of the agent
    vehicle_offset: tuple[int, int] = (2, 3)
    p_red_max: float = 0.04
    p_red_min: float = 0.0
    # per-step chance that a rolling vehicle brakes for one step
    p_stall: float = 0.05
    # vehicles keep driving this many cells past the visible road before they leave
    offscreen_cells: int = 4
    red_duration: int = 5
    max_steps: int = 60
    spurious_tile_enabled: bool = True
    reward_goal: float = 1.0
    reward_red_violation: float = -1.0
    reward_collision: float = -1.0

    kind = "traffic"

    def __post_init__(self):
        if self.light_cell is None:
            object.__setattr__(self, "light_cell", self.corridor_len - 3)
        object.__setattr__(self, "num_vehicles", tuple(int(v) for v in self.num_vehicles))
        object.__setattr__(self, "vehicle_offset", tuple(int(v) for v in self.vehicle_offset))
        if not 0 < self.light_cell < self.corridor_len - 1:
            raise EnvError(
                f"light_cell must lie strictly inside the corridor, got {self.light_cell} "
                f"for corridor_len={self.corridor_len}"
            )
        if not 0.0 <= self.p_red_min <= self.p_red_max <= 1.0:
            raise EnvError("need 0 <= p_red_min <= p_red_max <= 1")
        if not 0.0 <= self.p_stall <= 1.0:
            raise EnvError("p_stall must lie in [0, 1]")
        if self.offscreen_cells < 0:
            raise EnvError("offscreen_cells must be >= 0")
        if self.max_steps <= self.corridor_len:
            raise EnvError("max_steps must exceed corridor_len")
        lo, hi = self.num_vehicles
        if not 0 <= lo <= hi:
            raise EnvError(f"bad num_vehicles range {self.num_vehicles}")
        if not 1 <= self.vehicle_offset[0] <= self.vehicle_offset[1]:
            raise EnvError(f"bad vehicle_offset range {self.vehicle_offset}")
        if self.red_duration < 1:
            raise EnvError("red_duration must be >= 1")

    @property
    def obs_dim(self) -> int:
        return 3 * self.corridor_len + 3

    @property
    def action_count(self) -> int:
        return 2

    @property
    def goal_cell(self) -> int:
        return self.corridor_len - 1

    @property
    def vehicle_exit(self) -> int:
        """First cell at which a vehicle is removed from the road."""
        return self.goal_cell + self.offscreen_cells

    def red_probability(self, agent_cell: int) -> float:
        """Per-step chance that a green light turns red; shrinks as the agent nears it."""
        d = max(self.light_cell - agent_cell, 0)
        return self.p_red_min + (self.p_red_max - self.p_red_min) * d / self.corridor_len


class GoalMode(enum.Enum):
    FIXED_TOP_RIGHT = "fixed_top_right"
    UNIFORM_RANDOM = "uniform_random"


@dataclass(frozen=True)
class ConfoundedMazeConfig:
    grid_size: int = 7
    wall_layout_seed: Optional[int] = None  # None -> new layout per episode seed
    goal_mode: GoalMode = GoalMode.FIXED_TOP_RIGHT
    reward_goal: float = 10.0
    max_steps: Optional[int] = None  # None -> 4 * grid_size**2

    kind = "maze"

    def __post_init__(self):
        if isinstance(self.goal_mode, str):
            object.__setattr__(self, "goal_mode", GoalMode(self.goal_mode))
        if self.max_steps is None:
            object.__setattr__(self, "max_steps", 4 * self.grid_size**2)
        if self.grid_size < 5 or self.grid_size % 2 == 0:
            raise EnvError("grid_size must be odd and >= 5")

    @property
    def obs_dim(self) -> int:
        return 3 * self.grid_size**2

    @property
    def action_count(self) -> int:
        return 4

    @property
    def start_cell(self) -> tuple[int, int]:
        return (self.grid_size - 2, 1)

    @property
    def top_right_cell(self) -> tuple[int, int]:
        return (1, self.grid_size - 2)


EnvConfig = Union[TrafficWorldConfig, ConfoundedMazeConfig]


# -- scenarios ---------------------------------------------------------------

GREEN, RED = "green", "red"
DERIVED = "derived"

SCENARIO_NAMES = (
    "simple-green-with-tile",
    "simple-red-no-tile",
    "traffic-light-switches-with-tile",
    "always-green-with-tile",
)


@dataclass(frozen=True)
class ScenarioSpec:
    """A fully scripted Traffic-World episode.

    ``forced_light_schedule[t]`` is the light phase visible in the state at
    time ``t``. ``forced_tile_schedule`` is either a per-step tuple of
    booleans or the string ``"derived"``, in which case the tile follows the
    leading vehicle as it does during data collection.
    """

    name: str
    forced_light_schedule: tuple[str, ...]
    forced_tile_schedule: Union[tuple[bool, ...], str]
    vehicle_init: tuple[int, ...]

    def light_at(self, t: int) -> str:
        sched = self.forced_light_schedule
        return sched[min(t, len(sched) - 1)]

    def tile_at(self, t: int) -> Optional[bool]:
        if self.forced_tile_schedule == DERIVED:
            return None
        sched = self.forced_tile_schedule
        return sched[min(t, len(sched) - 1)]


def scenario_suite(config: Optional[TrafficWorldConfig] = None) -> list[ScenarioSpec]:
    """The four evaluation episodes; the reported suite reward is their mean.

    The first three probe the tail of the demonstration data, the last one is
    the common case. Schedules are sized from ``config`` so that any policy
    that moves whenever it legally can is actually confronted with the red
    light it is meant to test.
    """
    config = config or TrafficWorldConfig()
    horizon = config.max_steps + 1
    light = config.light_cell
    hold = config.red_duration

    all_green = (GREEN,) * horizon
    # red from the start until well after a free-moving agent reaches the light
    red_first = (RED,) * (light + hold) + (GREEN,) * (horizon - light - hold)
    # the queue clears the light just before a free-moving agent arrives,
    # then the light stays red for a while
    red_len = hold + 3
    switches = (GREEN,) * light + (RED,) * red_len + (GREEN,) * (horizon - light - red_len)
    queue = tuple(c for c in (2, 3) if c < light)
    busy = tuple(c for c in (2, 3, 4) if c < light)
    return [
        ScenarioSpec("simple-green-with-tile", all_green, (True,) * horizon, ()),
        ScenarioSpec("simple-red-no-tile", red_first, (False,) * horizon, ()),
        ScenarioSpec("traffic-light-switches-with-tile", switches, DERIVED, queue),
        ScenarioSpec("always-green-with-tile", all_green, DERIVED, busy),
    ]


def get_scenario(name: str, config: Optional[TrafficWorldConfig] = None) -> ScenarioSpec:
    for spec in scenario_suite(config):
        if spec.name == name:
            return spec
    raise EnvError(f"unknown scenario {name!r}; valid names: {', '.join(SCENARIO_NAMES)}")


# -- Traffic-World -------------------------------------------------------------


@dataclass(frozen=True)
class TrafficWorldState:
    agent_cell: int
    vehicle_cells: tuple[int, ...]
    light: str  # GREEN or RED
    red_remaining: int  # steps of red left, 0 while green
    tile_yellow: bool
    t: int
    # per-step uniform draws for the light and vehicle braking, fixed at reset
    rng_stream: np.ndarray = field(repr=False, compare=False)
    scenario: Optional[ScenarioSpec] = field(default=None, repr=False)
    done: bool = False


@dataclass(frozen=True)
class StepOutcome:
    next_state: object
    reward: float
    done: bool
    done_reason: DoneReason

    def __post_init__(self):
        if (self.done_reason is DoneReason.RUNNING) == self.done:
            raise EnvError("done_reason must be RUNNING exactly when done is False")


def _traffic_reset(config: TrafficWorldConfig, seed: int, scenario: Optional[ScenarioSpec]):
    rng = np.random.default_rng(seed)
    if scenario is not None:
        if scenario.name not in SCENARIO_NAMES:
            raise EnvError(f"unknown scenario {scenario.name!r}; valid names: {', '.join(SCENARIO_NAMES)}")
        vehicles = tuple(sorted(scenario.vehicle_init))
        if any(v <= 0 or v >= config.goal_cell for v in vehicles):
            raise EnvError(f"scenario {scenario.name} vehicles do not fit the corridor")
        light = scenario.light_at(0)
        forced = scenario.tile_at(0)
        tile = bool(forced) if forced is not None else False
        return TrafficWorldState(
            agent_cell=0,
            vehicle_cells=vehicles,
            light=light,
            red_remaining=config.red_duration if light == RED else 0,
            tile_yellow=tile,
            t=0,
            rng_stream=np.zeros(0),
            scenario=scenario,
        )
    lo, hi = config.num_vehicles
    n = int(rng.integers(lo, hi + 1))
    offset = int(rng.integers(config.vehicle_offset[0], config.vehicle_offset[1] + 1))
    # the queue must fit in front of the light
    n = min(n, max(config.light_cell - offset + 1, 0))
    vehicles = tuple(range(offset, offset + n))
    # column 0 drives the light, column 1 + j the j-th vehicle from the rear
    stream = rng.random((config.max_steps + 1, 1 + max(hi, 1)))
    # vehicles start rolling, so nothing is stopped at t=0
    return TrafficWorldState(
        agent_cell=0,
        vehicle_cells=vehicles,
        light=GREEN,
        red_remaining=0,
        tile_yellow=False,
        t=0,
        rng_stream=stream,
    )


def _traffic_step(config: TrafficWorldConfig, state: TrafficWorldState, action: int) -> StepOutcome:
    if state.done:
        raise EpisodeFinishedError("episode already finished; call reset")
    if action not in (WAIT, FORWARD):
        raise EnvError(f"Traffic-World action must be 0 (wait) or 1 (forward), got {action}")
    scenario = state.scenario
    observed_light = state.light

    # (1) light update
    if scenario is not None:
        light = scenario.light_at(state.t + 1)
        red_remaining = 1 if light == RED else 0
    elif state.light == GREEN:
        if state.rng_stream[state.t, 0] < config.red_probability(state.agent_cell):
            light, red_remaining = RED, config.red_duration
        else:
            light, red_remaining = GREEN, 0
    else:
        red_remaining = state.red_remaining - 1
        light = RED if red_remaining > 0 else GREEN

    # (2) vehicles, front to back. A vehicle is blocked when the cell ahead
    # was occupied at the start of the step, so a stopped queue discharges
    # one vehicle per step after the light turns green.
    moved = []
    before = set(state.vehicle_cells)
    stalls = state.rng_stream[state.t, 1:] if state.rng_stream.size else np.ones(len(before))
    for j in reversed(range(len(state.vehicle_cells))):
        cell = state.vehicle_cells[j]
        stopped = (
            (cell == config.light_cell and light == RED)
            or (cell + 1) in before
            or stalls[j] < config.p_stall
        )
        new = cell if stopped else cell + 1
        if new >= config.vehicle_exit:
            continue  # leaves the road
        moved.append((new, stopped))
    moved.reverse()
    vehicles = tuple(c for c, _ in moved)
    lead_stopped = bool(moved) and moved[0][1]

    # (3) agent
    agent = state.agent_cell
    reward = 0.0
    reason = DoneReason.RUNNING
    if action == FORWARD:
        target = agent + 1
        if target in vehicles:
            reward = config.reward_collision
        elif agent == config.light_cell and observed_light == RED:
            agent = target
            reward = config.reward_red_violation
            reason = DoneReason.RED_VIOLATION
        else:
            agent = target
            if agent == config.goal_cell:
                reward = config.reward_goal
                reason = DoneReason.GOAL

    # (4) tile
    forced = scenario.tile_at(state.t + 1) if scenario is not None else None
    if forced is not None:
        tile = bool(forced)
    elif config.spurious_tile_enabled:
        tile = lead_stopped
    else:
        tile = False

    # (5) horizon
    t = state.t + 1
    if reason is DoneReason.RUNNING and t >= config.max_steps:
        reason = DoneReason.TIMEOUT
    done = reason is not DoneReason.RUNNING
    nxt = dataclasses.replace(
        state,
        agent_cell=agent,
        vehicle_cells=vehicles,
        light=light,
        red_remaining=red_remaining,
        tile_yellow=tile,
        t=t,
        done=done,
    )
    return StepOutcome(nxt, reward, done, reason)


def _traffic_observe(state: TrafficWorldState, config: TrafficWorldConfig) -> np.ndarray:
    n = config.corridor_len
    obs = np.zeros(3 * n + 3, dtype=np.float32)
    obs[state.agent_cell] = 1.0
    for v in state.vehicle_cells:
        if v < n:  # vehicles past the road end are out of view
            obs[n + v] = 1.0
    obs[2 * n + config.goal_cell] = 1.0
    obs[3 * n] = float(state.light == GREEN)
    obs[3 * n + 1] = float(state.light == RED)
    obs[3 * n + 2] = float(state.tile_yellow)
    return obs


def decode_traffic_obs(obs: np.ndarray, config: TrafficWorldConfig) -> dict:
    """Recover the symbolic fields from a batch of Traffic-World observations."""
    obs = np.atleast_2d(obs)
    n = config.corridor_len
    return {
        "agent_cell": obs[:, :n].argmax(axis=1),
        "vehicles": obs[:, n : 2 * n] > 0.5,
        "red": obs[:, 3 * n + 1] > 0.5,
        "tile": obs[:, 3 * n + 2] > 0.5,
    }


# -- confounded maze ------------------------------------------------------------


@dataclass(frozen=True)
class MazeState:
    walls: np.ndarray = field(repr=False, compare=False)  # bool grid, True = wall
    agent: tuple[int, int]
    goal: tuple[int, int]
    t: int
    done: bool = False


def generate_maze(grid_size: int, seed: int) -> np.ndarray:
    """Recursive-backtracking maze; rooms sit on odd coordinates."""
    rng = np.random.default_rng(seed)
    walls = np.ones((grid_size, grid_size), dtype=bool)
    start = (grid_size - 2, 1)
    walls[start] = False
    stack = [start]
    while stack:
        r, c = stack[-1]
        options = []
        for dr, dc in ((-2, 0), (2, 0), (0, -2), (0, 2)):
            nr, nc = r + dr, c + dc
            if 0 < nr < grid_size - 1 and 0 < nc < grid_size - 1 and walls[nr, nc]:
                options.append((nr, nc))
        if not options:
            stack.pop()
            continue
        nr, nc = options[int(rng.integers(len(options)))]
        walls[(r + nr) // 2, (c + nc) // 2] = False
        walls[nr, nc] = False
        stack.append((nr, nc))
    return walls


def bfs_distances(walls: np.ndarray, source: tuple[int, int]) -> np.ndarray:
    """Shortest path lengths from ``source`` to every open cell (-1 if unreachable)."""
    dist = np.full(walls.shape, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        r, c = queue.popleft()
        for dr, dc in _MOVES:
            nr, nc = r + dr, c + dc
            if 0 <= nr < walls.shape[0] and 0 <= nc < walls.shape[1]:
                if not walls[nr, nc] and dist[nr, nc] < 0:
                    dist[nr, nc] = dist[r, c] + 1
                    queue.append((nr, nc))
    return dist


_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))  # indexed by UP, DOWN, LEFT, RIGHT


def _maze_reset(config: ConfoundedMazeConfig, seed: int) -> MazeState:
    rng = np.random.default_rng(seed)
    layout_seed = config.wall_layout_seed
    if layout_seed is None:
        layout_seed = int(rng.integers(2**31))
    walls = generate_maze(config.grid_size, layout_seed)
    start = config.start_cell
    if config.goal_mode is GoalMode.FIXED_TOP_RIGHT:
        goal = config.top_right_cell
    else:
        open_cells = [tuple(int(x) for x in rc) for rc in np.argwhere(~walls) if tuple(rc) != start]
        goal = open_cells[int(rng.integers(len(open_cells)))]
    return MazeState(walls=walls, agent=start, goal=goal, t=0)


def _maze_step(config: ConfoundedMazeConfig, state: MazeState, action: int) -> StepOutcome:
    if state.done:
        raise EpisodeFinishedError("episode already finished; call reset")
    if not 0 <= action < 4:
        raise EnvError(f"maze action must be in 0..3, got {action}")
    dr, dc = _MOVES[action]
    r, c = state.agent[0] + dr, state.agent[1] + dc
    agent = state.agent if state.walls[r, c] else (r, c)
    reward = 0.0
    reason = DoneReason.RUNNING
    if agent == state.goal:
        reward = config.reward_goal
        reason = DoneReason.GOAL
    t = state.t + 1
    if reason is DoneReason.RUNNING and t >= config.max_steps:
        reason = DoneReason.TIMEOUT
    done = reason is not DoneReason.RUNNING
    return StepOutcome(dataclasses.replace(state, agent=agent, t=t, done=done), reward, done, reason)


def _maze_observe(state: MazeState, config: ConfoundedMazeConfig) -> np.ndarray:
    g = config.grid_size
    obs = np.zeros((3, g, g), dtype=np.float32)
    obs[0][state.agent] = 1.0
    obs[1] = state.walls
    obs[2][state.goal] = 1.0
    return obs.reshape(-1)


# -- dispatch -------------------------------------------------------------------


def reset(config: EnvConfig, seed: int, scenario: Union[ScenarioSpec, str, None] = None):
    """Start an episode. ``scenario`` (Traffic-World only) scripts the whole episode."""
    if isinstance(scenario, str):
        scenario = get_scenario(scenario, config)
    if isinstance(config, TrafficWorldConfig):
        return _traffic_reset(config, seed, scenario)
    if scenario is not None:
        raise EnvError("scenarios are only defined for Traffic-World")
    return _maze_reset(config, seed)


def step(config: EnvConfig, state, action: int) -> StepOutcome:
    if isinstance(config, TrafficWorldConfig):
        return _traffic_step(config, state, int(action))
    return _maze_step(config, state, int(action))


def observe(state, config: EnvConfig) -> np.ndarray:
    if isinstance(config, TrafficWorldConfig):
        return _traffic_observe(state, config)
    return _maze_observe(state, config)


def rollout(config: EnvConfig, policy, seed: int = 0, scenario=None) -> tuple[float, DoneReason, list]:
    """Run ``policy(obs, state) -> action`` to the end of one episode.

    Returns the undiscounted return, the termination reason and the visited
    states (including the final one).
    """
    state = reset(config, seed, scenario)
    states = [state]
    total = 0.0
    while True:
        out = step(config, state, policy(observe(state, config), state))
        total += out.reward
        state = out.next_state
        states.append(state)
        if out.done:
            return total, out.done_reason, states


def config_from_dict(kind: str, values: dict) -> EnvConfig:
    if kind == "traffic":
        return TrafficWorldConfig(**values)
    if kind == "maze":
        return ConfoundedMazeConfig(**values)
    raise EnvError(f"unknown env kind {kind!r}; expected 'traffic' or 'maze'")


def config_to_dict(config: EnvConfig) -> dict:
    out = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if isinstance(value, enum.Enum):
            value = value.value
        out[f.name] = value
    return out


def is_tile_forward(obs: np.ndarray, actions: Sequence[int], config: TrafficWorldConfig) -> np.ndarray:
    """Tail-case mask: tile is yellow but the demonstrated action is Forward."""
    tile = decode_traffic_obs(obs, config)["tile"]
    return tile & (np.asarray(actions) == FORWARD)
