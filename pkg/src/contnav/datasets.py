"""Scripted-expert datasets, HER-relabeled hierarchical batches, JSONL storage."""
from __future__ import annotations

import heapq
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .maze_sim import (
    BLOCKED, LOW, OBS_DIM, Action, AgentState, MazeSpec, OccupancyGrid, SimConfig,
    occupancy_grid, observe, reset, step, wrap_angle,
)

SCHEMA_VERSION = 1
WAYPOINT_REACHED = 0.5
JUMP_LOOKAHEAD = 1.0
STUCK_STEPS = 15
DEFAULT_EPISODES = {"SimpleTown": 250, "AmazeVille": 100}
DEFAULT_K = {"SimpleTown": 5, "AmazeVille": 10}
DEFAULT_TAU = {"SimpleTown": 15.0, "AmazeVille": 100.0}


class DatasetFormatError(ValueError):
    pass


class DatasetValidationError(ValueError):
    pass


# -- planning -----------------------------------------------------------------

def grid_path(grid: OccupancyGrid, start: Tuple[int, int], goal: Tuple[int, int]) -> List[Tuple[int, int]]:
    """4-connected A*; entering a low cell costs 2, a free cell 1. Empty if unreachable."""
    cells = grid.cells
    nx, ny = cells.shape
    if cells[start] == BLOCKED or cells[goal] == BLOCKED:
        return []
    gx, gy = goal
    g_cost = {start: 0.0}
    parent = {start: None}
    heap = [(abs(start[0] - gx) + abs(start[1] - gy), 0.0, start)]
    closed = set()
    while heap:
        _, g, c = heapq.heappop(heap)
        if c in closed:
            continue
        if c == goal:
            path = []
            while c is not None:
                path.append(c)
                c = parent[c]
            return path[::-1]
        closed.add(c)
        i, j = c
        for n in ((i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)):
            if not (0 <= n[0] < nx and 0 <= n[1] < ny) or n in closed:
                continue
            kind = cells[n]
            if kind == BLOCKED:
                continue
            ng = g + (2.0 if kind == LOW else 1.0)
            if ng < g_cost.get(n, math.inf):
                g_cost[n] = ng
                parent[n] = c
                heapq.heappush(heap, (ng + abs(n[0] - gx) + abs(n[1] - gy), ng, n))
    return []


def _line_clear(grid: OccupancyGrid, a, b) -> bool:
    length = math.hypot(b[0] - a[0], b[1] - a[1])
    n = max(2, int(length / (grid.res * 0.25)) + 1)
    t = np.linspace(0.0, 1.0, n)
    xs = a[0] + t * (b[0] - a[0])
    ys = a[1] + t * (b[1] - a[1])
    nx, ny = grid.cells.shape
    i = np.clip((xs // grid.res).astype(int), 0, nx - 1)
    j = np.clip((ys // grid.res).astype(int), 0, ny - 1)
    return not (grid.cells[i, j] == BLOCKED).any()


def plan_path(maze: MazeSpec, start, goal, grid: Optional[OccupancyGrid] = None) -> List[Tuple[float, float]]:
    """Waypoints from ``start`` to ``goal`` (start excluded, goal last); [] if unreachable."""
    grid = grid or occupancy_grid(maze)
    s = grid.nearest_open(grid.cell_of(start))
    g = grid.nearest_open(grid.cell_of(goal))
    if s is None or g is None:
        return []
    cells = grid_path(grid, s, g)
    if not cells:
        return []
    goal = (float(goal[0]), float(goal[1]))
    if len(cells) == 1:
        return [goal]
    pts = [grid.center(c) for c in cells]
    # greedy string pulling: extend each segment while line of sight holds
    out = []
    i = 0
    while i < len(pts) - 1:
        j = i + 1
        while j + 1 < len(pts) and _line_clear(grid, pts[i], pts[j + 1]):
            j += 1
        out.append(pts[j])
        i = j
    out[-1] = goal
    return out


def segment_hits_box(a, b, box) -> bool:
    """Segment a->b intersects the open box (xmin, ymin, xmax, ymax)."""
    t0, t1 = 0.0, 1.0
    for ax in (0, 1):
        d = b[ax] - a[ax]
        lo, hi = box[ax], box[ax + 2]
        if abs(d) < 1e-15:
            if not (lo < a[ax] < hi):
                return False
            continue
        ta, tb = (lo - a[ax]) / d, (hi - a[ax]) / d
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
        if t0 >= t1:
            return False
    return True


def expert_action(maze: MazeSpec, state: AgentState, waypoints, noise: float,
                  rng: np.random.Generator, config: SimConfig = SimConfig()) -> Action:
    """Proportional heading controller toward ``waypoints[0]``."""
    if not waypoints:
        raise ValueError("expert_action needs a nonempty waypoint list")
    x, y = state.position
    wx, wy = waypoints[0]
    err = wrap_angle(math.atan2(wy - y, wx - x) - state.heading)
    turn = max(-1.0, min(1.0, err / (config.turn_rate * config.dt)))
    forward = abs(err) < math.pi / 4
    jump = False
    dist = math.hypot(wx - x, wy - y)
    if dist > 0.0:
        s = min(1.0, JUMP_LOOKAHEAD / dist)
        end = (x + s * (wx - x), y + s * (wy - y))
        jump = any(segment_hits_box((x, y), end, b) for b in maze.geometry.low)
    bools = [forward, False, False, False, jump]
    if rng.random() < noise:
        bools = [bool(v) for v in rng.integers(0, 2, size=5)]
    return Action(*bools, turn=turn)


# -- episodes -----------------------------------------------------------------

@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: Action
    reward: float
    next_obs: np.ndarray
    achieved_point: Tuple[float, float]
    goal: Tuple[float, float]


@dataclass
class Episode:
    maze_name: str
    seed: int
    goal: Tuple[float, float]
    obs: np.ndarray       # (T+1, OBS_DIM): obs[t] = s_t
    actions: np.ndarray   # (T, 6)
    rewards: np.ndarray   # (T,)
    achieved: np.ndarray  # (T, 2): achieved[t] = position of s_{t+1}
    success: bool

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def transitions(self) -> List[Transition]:
        return [
            Transition(self.obs[t], Action.from_array(self.actions[t]), float(self.rewards[t]),
                       self.obs[t + 1], tuple(self.achieved[t]), self.goal)
            for t in range(len(self))
        ]

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        return (self.maze_name == other.maze_name and self.seed == other.seed
                and tuple(self.goal) == tuple(other.goal) and self.success == other.success
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("obs", "actions", "rewards", "achieved")))


@dataclass
class Dataset:
    maze_name: str
    episodes: List[Episode]
    generator: str = "ScriptedExpert"
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for ep in self.episodes:
            if ep.maze_name != self.maze_name:
                raise DatasetValidationError(
                    f"episode from {ep.maze_name!r} in dataset for {self.maze_name!r}")

    @property
    def n_transitions(self) -> int:
        return sum(len(e) for e in self.episodes)

    @property
    def success_rate(self) -> float:
        return float(np.mean([e.success for e in self.episodes])) if self.episodes else 0.0


class WaypointTracker:
    """Expert waypoint bookkeeping: pops reached waypoints, replans when stuck."""

    def __init__(self, maze: MazeSpec, start, goal):
        self.maze = maze
        self.goal = goal
        self.grid = occupancy_grid(maze)
        self.wps = plan_path(maze, start, goal, self.grid)
        self.best, self.since = math.inf, 0

    def update(self, pos):
        wps = self.wps
        while len(wps) > 1 and math.dist(pos, wps[0]) < WAYPOINT_REACHED:
            wps.pop(0)
            self.best, self.since = math.inf, 0
        if not wps:
            return wps
        d = math.dist(pos, wps[0])
        if d < self.best - 1e-3:
            self.best, self.since = d, 0
        else:
            self.since += 1
        if self.since > STUCK_STEPS:
            self.wps = plan_path(self.maze, pos, self.goal, self.grid) or wps
            self.best, self.since = math.inf, 0
        return self.wps


def rollout_expert(maze: MazeSpec, config: SimConfig, seed: int, noise: float) -> Episode:
    state, goal = reset(maze, config, seed)
    rng = np.random.default_rng([seed, 1])
    tracker = WaypointTracker(maze, state.position, goal)
    obs = [observe(maze, state)]
    acts, rews, ach = [], [], []
    done = False
    while not done:
        wps = tracker.update(state.position)
        action = expert_action(maze, state, wps, noise, rng, config) if wps else Action()
        state, o, r, done = step(maze, config, state, action, goal)
        obs.append(o)
        acts.append(action.to_array())
        rews.append(r)
        ach.append(state.position)
    return Episode(
        maze.name, int(seed), goal, np.array(obs), np.array(acts), np.array(rews),
        np.array(ach, dtype=np.float64), bool(rews[-1] == 1.0),
    )


class ExpertPolicy:
    """The scripted expert behind the batched policy interface.

    Pose is recovered from the observation (position, heading cos/sin, airborne flag).
    """

    def __init__(self, maze: MazeSpec, noise: float = 0.0, seed: int = 0, config: SimConfig = SimConfig()):
        self.maze, self.noise, self.seed, self.config = maze, noise, seed, config
        self.rng = np.random.default_rng([seed, 1])
        self.trackers = {}

    def reset(self, n: int) -> None:
        self.trackers = {}
        self.rng = np.random.default_rng([self.seed, 1])

    def act_batch(self, obs, goals, step_index: int, rows=None) -> np.ndarray:
        obs = np.atleast_2d(obs)
        rows = range(len(obs)) if rows is None else rows
        ext = self.maze.extent
        out = np.zeros((len(obs), 6))
        for i, (r, o, g) in enumerate(zip(rows, obs, np.atleast_2d(goals))):
            pos = (float(o[0] * ext[0]), float(o[1] * ext[1]))
            state = AgentState(pos, math.atan2(o[3], o[2]), int(o[4] > 0.5), step_index)
            if step_index == 0 or r not in self.trackers:
                self.trackers[r] = WaypointTracker(self.maze, pos, (float(g[0]), float(g[1])))
            wps = self.trackers[r].update(pos)
            if wps:
                out[i] = expert_action(self.maze, state, wps, self.noise, self.rng, self.config).to_array()
        return out


def episode_seed(seed: int, index: int) -> int:
    return int(seed) ^ int(index)


def generate_dataset(maze: MazeSpec, n_episodes: Optional[int] = None, noise: float = 0.05,
                     seed: int = 0, config: Optional[SimConfig] = None) -> Dataset:
    """Roll out the scripted expert from seeded resets (episode i uses seed XOR i)."""
    config = config or SimConfig()
    n = DEFAULT_EPISODES[maze.family] if n_episodes is None else int(n_episodes)
    if n <= 0:
        raise ValueError("n_episodes must be positive")
    eps = [rollout_expert(maze, config, episode_seed(seed, i), noise) for i in range(n)]
    snap = {"sim": config.to_dict(), "noise": float(noise), "n_episodes": n, "seed": int(seed)}
    return Dataset(maze.name, eps, "ScriptedExpert", snap)


# -- HER / batches ------------------------------------------------------------

def her_sample_offset(remaining, tau: float, rng: np.random.Generator):
    """Draw offsets in {1..remaining} with P(d) proportional to exp(-d / tau).

    Inverse-CDF of the truncated geometric law; ``remaining`` may be an array.
    """
    rem = np.asarray(remaining)
    if np.any(rem < 1) or not tau > 0:
        raise ValueError("her_sample_offset needs remaining >= 1 and tau > 0")
    u = rng.random(rem.shape)
    d = np.floor(-tau * np.log1p(u * np.expm1(-rem / tau))) + 1
    d = np.clip(d, 1, rem).astype(np.int64)
    return int(d) if d.ndim == 0 else d


class TransitionIndex:
    """Flat arrays over a set of episodes for vectorized batch sampling."""

    def __init__(self, episodes: Sequence[Episode]):
        episodes = list(episodes)
        if not episodes or sum(len(e) for e in episodes) == 0:
            raise ValueError("cannot sample from an empty dataset")
        lens = np.array([len(e) for e in episodes], dtype=np.int64)
        self.ep_len = lens
        self.ep_off = np.concatenate([[0], np.cumsum(lens)[:-1]])
        self.obs = np.concatenate([e.obs[:-1] for e in episodes])
        self.actions = np.concatenate([e.actions for e in episodes])
        self.achieved = np.concatenate([e.achieved for e in episodes])
        self.goals = np.array([e.goal for e in episodes], dtype=np.float64)
        self.ep_id = np.repeat(np.arange(len(episodes)), lens)
        self.t = np.concatenate([np.arange(n) for n in lens])

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def from_datasets(cls, datasets: Sequence[Dataset]) -> "TransitionIndex":
        return cls([e for d in datasets for e in d.episodes])


@dataclass
class HierBatch:
    obs: np.ndarray
    goal: np.ndarray           # final or HER-relabeled goal points
    high_subgoal: np.ndarray   # high-level target
    low_subgoal: np.ndarray    # low-level conditioning point
    action: np.ndarray
    relabeled: np.ndarray

    @property
    def batch_size(self) -> int:
        return len(self.obs)

    @property
    def high(self):
        return self.obs, self.goal, self.high_subgoal

    @property
    def low(self):
        return self.obs, self.low_subgoal, self.action


def _index_of(data) -> TransitionIndex:
    if isinstance(data, TransitionIndex):
        return data
    if isinstance(data, Dataset):
        cached = getattr(data, "_index", None)
        if cached is None:
            cached = TransitionIndex(data.episodes)
            data._index = cached
        return cached
    return TransitionIndex.from_datasets(data)


def sample_hier_batch(data: Union[Dataset, TransitionIndex], batch_size: int = 64, k: int = 5,
                      tau: float = 15.0, her_fraction: float = 0.5,
                      rng: Optional[np.random.Generator] = None) -> HierBatch:
    """Uniform (episode, t) draws; subgoal = achieved point k steps ahead, clamped.

    High-level samples get a hindsight goal with probability ``her_fraction``;
    their subgoal is then clamped to the relabeled goal's time step.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if rng is None:
        raise ValueError("sample_hier_batch requires an explicit random generator")
    ix = _index_of(data)
    idx = rng.integers(len(ix), size=batch_size)
    e = ix.ep_id[idx]
    t = ix.t[idx]
    T = ix.ep_len[e]
    off = ix.ep_off[e]
    her = rng.random(batch_size) < her_fraction
    goal_j = t + her_sample_offset(T - t, tau, rng)
    low_j = np.minimum(t + k, T)
    high_j = np.where(her, np.minimum(t + k, goal_j), low_j)
    goal = np.where(her[:, None], ix.achieved[off + goal_j - 1], ix.goals[e])
    return HierBatch(
        obs=ix.obs[idx], goal=goal, high_subgoal=ix.achieved[off + high_j - 1],
        low_subgoal=ix.achieved[off + low_j - 1], action=ix.actions[idx], relabeled=her,
    )


# -- storage ------------------------------------------------------------------

def _fmt(v: float) -> str:
    v = float(v)
    if not math.isfinite(v):
        raise ValueError(f"cannot serialize non-finite value {v}")
    return format(v, ".17g")


def _vec(a) -> str:
    return "[" + ",".join(_fmt(v) for v in a) + "]"


def dumps_episode(ep: Episode) -> str:
    steps = ",".join(
        '{"obs":%s,"act":%s,"rew":%s,"ach":%s}'
        % (_vec(ep.obs[t]), _vec(ep.actions[t]), _fmt(ep.rewards[t]), _vec(ep.achieved[t]))
        for t in range(len(ep))
    )
    return '{"seed":%d,"success":%s,"goal":%s,"steps":[%s],"final_obs":%s}' % (
        ep.seed, "true" if ep.success else "false", _vec(ep.goal), steps, _vec(ep.obs[-1]))


def dumps_dataset(ds: Dataset) -> str:
    header = json.dumps({"schema_version": SCHEMA_VERSION, "maze_name": ds.maze_name,
                         "generator": ds.generator, "config": ds.config}, sort_keys=True)
    return header + "\n" + "".join(dumps_episode(e) + "\n" for e in ds.episodes)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(dumps_dataset(ds))


def validate_episode(ep: Episode, eps_goal: float, extent: Optional[Tuple[float, float]] = None) -> None:
    """Chaining and reward-consistency checks; raises DatasetValidationError."""
    T = len(ep)
    if T == 0:
        raise DatasetValidationError("empty episode")
    if ep.obs.shape != (T + 1, OBS_DIM) or ep.actions.shape != (T, 6) or ep.achieved.shape != (T, 2):
        raise DatasetValidationError(f"episode {ep.seed}: inconsistent array shapes")
    if extent is not None:
        pos = ep.obs[1:, :2] * np.asarray(extent)
        bad = np.flatnonzero(np.abs(pos - ep.achieved).max(axis=1) > 1e-9)
        if bad.size:
            raise DatasetValidationError(
                f"episode {ep.seed}: chaining broken at step {bad[0]} (next obs does not match achieved point)")
    d = np.hypot(ep.achieved[:, 0] - ep.goal[0], ep.achieved[:, 1] - ep.goal[1])
    want = (d <= eps_goal).astype(np.float64)
    first = np.flatnonzero(want)
    # the episode stops at the first success, so only the last step may carry reward
    if not np.array_equal(ep.rewards, want) or (first.size and first[0] != T - 1):
        raise DatasetValidationError(f"episode {ep.seed}: rewards inconsistent with achieved points")
    if ep.success != bool(ep.rewards[-1] == 1.0):
        raise DatasetValidationError(f"episode {ep.seed}: success flag disagrees with rewards")


def _parse_episode(d: dict, maze_name: str) -> Episode:
    steps = d["steps"]
    obs = np.array([s["obs"] for s in steps] + [d["final_obs"]], dtype=np.float64)
    return Episode(
        maze_name, int(d["seed"]), (float(d["goal"][0]), float(d["goal"][1])), obs,
        np.array([s["act"] for s in steps], dtype=np.float64).reshape(-1, 6),
        np.array([s["rew"] for s in steps], dtype=np.float64),
        np.array([s["ach"] for s in steps], dtype=np.float64).reshape(-1, 2),
        bool(d["success"]),
    )


def loads_dataset(data: Union[str, bytes]) -> Dataset:
    from .maze_sim import FAMILY_EXTENT, get_maze

    raw = data.encode() if isinstance(data, str) else data
    offset = 0
    header = None
    episodes = []
    for lineno, line in enumerate(io.BytesIO(raw), start=1):
        text = line.decode()
        if text.strip():
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(
                    f"line {lineno}, byte offset {offset + e.pos}: {e.msg}") from e
            if header is None:
                if not isinstance(obj, dict) or obj.get("schema_version") != SCHEMA_VERSION:
                    raise DatasetFormatError(f"line {lineno}: missing or unsupported schema_version")
                header = obj
            else:
                try:
                    episodes.append(_parse_episode(obj, header["maze_name"]))
                except (KeyError, TypeError, ValueError, IndexError) as e:
                    raise DatasetFormatError(f"line {lineno}, byte offset {offset}: bad episode: {e!r}") from e
        offset += len(line)
    if header is None:
        raise DatasetFormatError("byte offset 0: empty dataset file")
    if not raw.endswith(b"\n"):
        raise DatasetFormatError(f"line {lineno}, byte offset {offset}: file truncated (no final newline)")
    cfg = header.get("config", {})
    want = cfg.get("n_episodes")
    if want is not None and want != len(episodes):
        raise DatasetFormatError(
            f"byte offset {offset}: header announces {want} episodes, file holds {len(episodes)}")
    eps_goal = cfg.get("sim", {}).get("eps_goal", 1.0)
    try:
        extent = get_maze(header["maze_name"]).extent
    except KeyError:
        extent = None
    for i, ep in enumerate(episodes):
        try:
            validate_episode(ep, eps_goal, extent)
        except DatasetValidationError as e:
            raise DatasetValidationError(f"line {i + 2}: {e}") from e
    return Dataset(header["maze_name"], episodes, header.get("generator", "External"), cfg)


def load_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_bytes())
