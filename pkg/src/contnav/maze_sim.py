"""Deterministic 2.5D kinematic maze simulator with a sparse goal reward.

The agent is a disc of radius ``AGENT_RADIUS`` moving on the ground plane.
Every obstacle is stored as an axis-aligned box already inflated by that
radius, so collision reduces to keeping a point outside open boxes. Low
blocks are solid only while the agent is on the ground; a jump keeps the
agent airborne for a fixed number of steps.
"""
from __future__ import annotations

import functools
import json
import math
import re
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

AGENT_RADIUS = 0.25
RAY_RANGE = 10.0
N_RAYS = 8
OBS_DIM = 5 + N_RAYS
GRID_RES = 0.5
PLAN_MARGIN = 0.25

FAMILY_EXTENT = {"SimpleTown": 20.0, "AmazeVille": 60.0}
FAMILY_HORIZON = {"SimpleTown": 200, "AmazeVille": 500}
BUILTIN_NAMES = (
    "S-BASE", "S-OOO", "S-OOX", "S-OXO", "S-XOO", "S-XXO", "S-XOX", "S-OXX",
    "A-HOOO", "A-HOOX", "A-HXOO", "A-HXOX", "A-LOOO", "A-LOOX", "A-LXOO", "A-LXOX",
)

Point = Tuple[float, float]
Rect = Tuple[float, float, float, float]  # x, y, w, h


class MazeParseError(ValueError):
    pass


class MazeValidationError(ValueError):
    def __init__(self, invariant: str, detail: str):
        super().__init__(f"{invariant}: {detail}")
        self.invariant = invariant


class SamplingError(RuntimeError):
    pass


def wrap_angle(a: float) -> float:
    """Map to [-pi, pi)."""
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class Door:
    rect: Rect
    open: bool


@dataclass(frozen=True)
class Block:
    rect: Rect
    height: str  # "low" | "high"


@dataclass(frozen=True)
class Region:
    points: Optional[Tuple[Point, ...]] = None
    rect: Optional[Rect] = None

    def __post_init__(self):
        if (self.points is None) == (self.rect is None):
            raise ValueError("region needs exactly one of points or rect")

    def sample(self, rng: np.random.Generator) -> Point:
        if self.points is not None:
            return self.points[int(rng.integers(len(self.points)))]
        x, y, w, h = self.rect
        return (x + w * float(rng.random()), y + h * float(rng.random()))


@dataclass(frozen=True)
class Geometry:
    """Inflated boxes (xmin, ymin, xmax, ymax) for collision and sensing."""

    solid: Tuple[Tuple[float, float, float, float], ...]
    low: Tuple[Tuple[float, float, float, float], ...]
    width: float
    height: float
    all_boxes: np.ndarray = field(repr=False, compare=False, default=None)
    low_boxes: np.ndarray = field(repr=False, compare=False, default=None)


def _inflate(xmin, ymin, xmax, ymax, r):
    return (xmin - r, ymin - r, xmax + r, ymax + r)


@dataclass(frozen=True)
class MazeSpec:
    name: str
    family: str
    extent: Tuple[float, float]
    walls: Tuple[Tuple[float, float, float, float], ...] = ()
    doors: Tuple[Door, ...] = ()
    blocks: Tuple[Block, ...] = ()
    start: Region = Region(points=((1.0, 1.0),))
    goal: Region = Region(points=((2.0, 2.0),))

    @functools.cached_property
    def geometry(self) -> Geometry:
        return self.inflated(AGENT_RADIUS)

    def inflated(self, r: float) -> Geometry:
        solid, low = [], []
        for x1, y1, x2, y2 in self.walls:
            solid.append(_inflate(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2), r))
        for d in self.doors:
            if not d.open:
                x, y, w, h = d.rect
                solid.append(_inflate(x, y, x + w, y + h, r))
        for b in self.blocks:
            x, y, w, h = b.rect
            (low if b.height == "low" else solid).append(_inflate(x, y, x + w, y + h, r))
        boxes = np.array(solid + low, dtype=np.float64).reshape(-1, 4)
        return Geometry(
            tuple(solid), tuple(low), float(self.extent[0]), float(self.extent[1]),
            all_boxes=boxes, low_boxes=np.array(low, dtype=np.float64).reshape(-1, 4),
        )


@dataclass(frozen=True)
class AgentState:
    position: Point
    heading: float
    airborne_steps_left: int = 0
    step_index: int = 0


@dataclass(frozen=True)
class Action:
    move_forward: bool = False
    move_backward: bool = False
    move_left: bool = False
    move_right: bool = False
    jump: bool = False
    turn: float = 0.0

    def clamped(self) -> "Action":
        t = float(self.turn)
        t = 0.0 if not math.isfinite(t) else min(1.0, max(-1.0, t))
        return Action(bool(self.move_forward), bool(self.move_backward), bool(self.move_left),
                      bool(self.move_right), bool(self.jump), t)

    def to_array(self) -> np.ndarray:
        return np.array([self.move_forward, self.move_backward, self.move_left,
                         self.move_right, self.jump, self.turn], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Action":
        a = [float(v) for v in a]
        return cls(a[0] > 0.5, a[1] > 0.5, a[2] > 0.5, a[3] > 0.5, a[4] > 0.5, a[5]).clamped()


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    speed: float = 3.0
    turn_rate: float = math.pi
    jump_duration_steps: int = 5
    eps_goal: float = 1.0
    max_steps: Optional[int] = None  # None: family default

    def __post_init__(self):
        for name in ("dt", "speed", "turn_rate", "jump_duration_steps", "eps_goal"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SimConfig.{name} must be strictly positive")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ValueError("SimConfig.max_steps must be strictly positive")

    def horizon(self, maze: MazeSpec) -> int:
        return self.max_steps if self.max_steps is not None else FAMILY_HORIZON[maze.family]

    def to_dict(self) -> dict:
        return {"dt": self.dt, "speed": self.speed, "turn_rate": self.turn_rate,
                "jump_duration_steps": self.jump_duration_steps, "eps_goal": self.eps_goal,
                "max_steps": self.max_steps}


# -- geometry queries -------------------------------------------------------

def _strictly_inside(p: Point, box, tol: float = 0.0) -> bool:
    x, y = p
    return box[0] + tol < x < box[2] - tol and box[1] + tol < y < box[3] - tol


def inside_closed_geometry(maze: MazeSpec, p: Point, airborne: bool = False, tol: float = 0.0) -> bool:
    """True if ``p`` penetrates an obstacle by more than ``tol``."""
    g = maze.geometry
    if any(_strictly_inside(p, b, tol) for b in g.solid):
        return True
    return (not airborne) and any(_strictly_inside(p, b, tol) for b in g.low)


def inside_low_block(maze: MazeSpec, p: Point) -> bool:
    return any(_strictly_inside(p, b) for b in maze.geometry.low)


def _sweep(lo_self, pos_other, delta, boxes, axis, lo_bound, hi_bound):
    """Move one coordinate by ``delta`` stopping at the first box face."""
    target = lo_self + delta
    if delta > 0.0:
        limit = hi_bound
        for b in boxes:
            if b[1 - axis] < pos_other < b[3 - axis] and b[axis] >= lo_self and b[axis] < limit:
                limit = b[axis]
        return min(target, limit) if target > lo_self else lo_self
    if delta < 0.0:
        limit = lo_bound
        for b in boxes:
            if b[1 - axis] < pos_other < b[3 - axis] and b[2 + axis] <= lo_self and b[2 + axis] > limit:
                limit = b[2 + axis]
        return max(target, limit) if target < lo_self else lo_self
    return lo_self


def move(maze: MazeSpec, pos: Point, disp: Tuple[float, float], airborne: bool) -> Point:
    """Axis-separated sliding: x first, then y."""
    g = maze.geometry
    boxes = g.solid if airborne else g.solid + g.low
    r = AGENT_RADIUS
    x, y = pos
    x = _sweep(x, y, disp[0], boxes, 0, r, g.width - r)
    y = _sweep(y, x, disp[1], boxes, 1, r, g.height - r)
    return (x, y)


def ray_distances(maze: MazeSpec, pos: Point, heading: float) -> np.ndarray:
    """Distance along 8 egocentric rays to the nearest box face or the extent edge."""
    g = maze.geometry
    ang = heading + np.arange(N_RAYS) * (2.0 * math.pi / N_RAYS)
    d = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    d = np.where(np.abs(d) < 1e-12, 1e-12, d)
    inv = 1.0 / d
    o = np.array(pos)
    # extent edges
    tb = np.maximum((0.0 - o) * inv, (np.array([g.width, g.height]) - o) * inv).min(axis=1)
    dist = np.minimum(tb, RAY_RANGE)
    boxes = g.all_boxes
    if len(boxes):
        t1 = (boxes[None, :, 0:2] - o) * inv[:, None, :]
        t2 = (boxes[None, :, 2:4] - o) * inv[:, None, :]
        tmin = np.minimum(t1, t2).max(axis=2)
        tmax = np.maximum(t1, t2).min(axis=2)
        hit = tmax >= np.maximum(tmin, 0.0)
        th = np.where(hit, np.maximum(tmin, 0.0), np.inf).min(axis=1)
        dist = np.minimum(dist, th)
    return np.maximum(dist, 0.0)


def observe(maze: MazeSpec, state: AgentState) -> np.ndarray:
    x, y = state.position
    obs = np.empty(OBS_DIM)
    obs[0] = x / maze.extent[0]
    obs[1] = y / maze.extent[1]
    obs[2] = math.cos(state.heading)
    obs[3] = math.sin(state.heading)
    obs[4] = 1.0 if state.airborne_steps_left > 0 else 0.0
    obs[5:] = ray_distances(maze, state.position, state.heading) / RAY_RANGE
    return obs


# -- dynamics ---------------------------------------------------------------

def check_success(state: AgentState, goal: Point, eps_goal: float) -> bool:
    return math.hypot(state.position[0] - goal[0], state.position[1] - goal[1]) <= eps_goal


def reset(maze: MazeSpec, config: SimConfig, seed: int):
    """Sample (start state, goal) deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        s = maze.start.sample(rng)
        g = maze.goal.sample(rng)
        if math.hypot(s[0] - g[0], s[1] - g[1]) <= config.eps_goal:
            continue
        if inside_closed_geometry(maze, s) or inside_closed_geometry(maze, g):
            continue
        heading = float(rng.uniform(-math.pi, math.pi))
        return AgentState((float(s[0]), float(s[1])), heading, 0, 0), (float(g[0]), float(g[1]))
    raise SamplingError(f"{maze.name}: no valid start/goal pair after 1000 attempts")


def step(maze: MazeSpec, config: SimConfig, state: AgentState, action: Action, goal: Point):
    """Advance one tick. Returns (state', observation, reward, done)."""
    a = action.clamped()
    heading = wrap_angle(state.heading + a.turn * config.turn_rate * config.dt)
    fwd = float(a.move_forward) - float(a.move_backward)
    side = float(a.move_right) - float(a.move_left)
    airborne = state.airborne_steps_left
    if a.jump and airborne == 0:
        airborne = config.jump_duration_steps
    pos = state.position
    if fwd != 0.0 or side != 0.0:
        norm = math.hypot(fwd, side)
        fwd, side = fwd / norm, side / norm
        c, s = math.cos(heading), math.sin(heading)
        # right of the heading direction is (sin, -cos)
        ux = fwd * c + side * s
        uy = fwd * s - side * c
        k = config.speed * config.dt
        pos = move(maze, pos, (k * ux, k * uy), airborne > 0)
    if airborne > 0:
        airborne -= 1
        # landing is deferred while the agent is above a low block
        if airborne == 0 and inside_low_block(maze, pos):
            airborne = 1
    new = AgentState(pos, heading, airborne, state.step_index + 1)
    reward = 1.0 if check_success(new, goal, config.eps_goal) else 0.0
    done = reward == 1.0 or new.step_index >= config.horizon(maze)
    return new, observe(maze, new), reward, done


# -- occupancy grid / connectivity ------------------------------------------

FREE, LOW, BLOCKED = 0, 1, 2


@dataclass(frozen=True)
class OccupancyGrid:
    cells: np.ndarray  # (nx, ny) of FREE/LOW/BLOCKED
    res: float

    def cell_of(self, p: Point) -> Tuple[int, int]:
        nx, ny = self.cells.shape
        i = min(max(int(p[0] // self.res), 0), nx - 1)
        j = min(max(int(p[1] // self.res), 0), ny - 1)
        return i, j

    def center(self, c: Tuple[int, int]) -> Point:
        return ((c[0] + 0.5) * self.res, (c[1] + 0.5) * self.res)

    def nearest_open(self, c: Tuple[int, int]) -> Optional[Tuple[int, int]]:
        """Breadth-first search for the closest non-blocked cell."""
        if self.cells[c] != BLOCKED:
            return c
        nx, ny = self.cells.shape
        seen = {c}
        q = deque([c])
        while q:
            i, j = q.popleft()
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                n = (i + di, j + dj)
                if 0 <= n[0] < nx and 0 <= n[1] < ny and n not in seen:
                    if self.cells[n] != BLOCKED:
                        return n
                    seen.add(n)
                    q.append(n)
        return None


def occupancy_grid(maze: MazeSpec, res: float = GRID_RES, margin: float = PLAN_MARGIN) -> OccupancyGrid:
    """Rasterize at cell centers; obstacles inflated by agent radius plus ``margin``."""
    return _occupancy_grid(maze, res, margin)


@functools.lru_cache(maxsize=64)
def _occupancy_grid(maze: MazeSpec, res: float, margin: float) -> OccupancyGrid:
    g = maze.inflated(AGENT_RADIUS + margin)
    nx = int(round(maze.extent[0] / res))
    ny = int(round(maze.extent[1] / res))
    xs = (np.arange(nx) + 0.5) * res
    ys = (np.arange(ny) + 0.5) * res
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    cells = np.zeros((nx, ny), dtype=np.int8)
    for b in g.low:
        cells[(X > b[0]) & (X < b[2]) & (Y > b[1]) & (Y < b[3])] = LOW
    for b in g.solid:
        cells[(X > b[0]) & (X < b[2]) & (Y > b[1]) & (Y < b[3])] = BLOCKED
    r = AGENT_RADIUS
    cells[(X < r) | (X > maze.extent[0] - r) | (Y < r) | (Y > maze.extent[1] - r)] = BLOCKED
    cells.setflags(write=False)
    return OccupancyGrid(cells, res)


def connected_components(grid: OccupancyGrid, allow_low: bool = True) -> np.ndarray:
    """Label 4-connected components of traversable cells (-1 for blocked)."""
    from scipy.ndimage import label

    passable = grid.cells == FREE
    if allow_low:
        passable |= grid.cells == LOW
    labels, _ = label(passable)
    return labels - 1


def _region_cells(grid: OccupancyGrid, region: Region) -> List[Tuple[int, int]]:
    if region.points is not None:
        cells = []
        for p in region.points:
            c = grid.nearest_open(grid.cell_of(p))
            if c is not None:
                cells.append(c)
        return cells
    x, y, w, h = region.rect
    out = []
    nx, ny = grid.cells.shape
    for i in range(nx):
        for j in range(ny):
            cx, cy = grid.center((i, j))
            if x <= cx <= x + w and y <= cy <= y + h and grid.cells[i, j] != BLOCKED:
                out.append((i, j))
    return out


# -- spec files ---------------------------------------------------------------

_NAME_RE = {"SimpleTown": re.compile(r"^S-(BASE|[OX]{3})$"), "AmazeVille": re.compile(r"^A-[HL][OX]{3}$")}


def _inside_extent(rect: Rect, extent) -> bool:
    x, y, w, h = rect
    return w >= 0 and h >= 0 and x >= 0 and y >= 0 and x + w <= extent[0] and y + h <= extent[1]


def validate_maze(maze: MazeSpec, check_connectivity: bool = True) -> MazeSpec:
    """Raise MazeValidationError naming the first violated invariant."""
    if maze.family not in FAMILY_EXTENT:
        raise MazeValidationError("family", f"unknown family {maze.family!r}")
    size = FAMILY_EXTENT[maze.family]
    if tuple(maze.extent) != (size, size):
        raise MazeValidationError("extent", f"{maze.family} requires {size}x{size}, got {maze.extent}")
    m = _NAME_RE[maze.family].match(maze.name)
    if not m:
        raise MazeValidationError("name", f"{maze.name!r} does not follow the naming convention")
    for x1, y1, x2, y2 in maze.walls:
        if not _inside_extent((min(x1, x2), min(y1, y2), abs(x2 - x1), abs(y2 - y1)), maze.extent):
            raise MazeValidationError("wall_in_extent", f"wall {(x1, y1, x2, y2)} leaves the extent")
    for d in maze.doors:
        if not _inside_extent(d.rect, maze.extent):
            raise MazeValidationError("door_in_extent", f"door {d.rect} leaves the extent")
    for b in maze.blocks:
        if b.height not in ("low", "high"):
            raise MazeValidationError("block_height", f"block height {b.height!r}")
        if not _inside_extent(b.rect, maze.extent):
            raise MazeValidationError("block_in_extent", f"block {b.rect} leaves the extent")
    flags = maze.name.split("-", 1)[1]
    if flags != "BASE":
        door_flags = flags[-3:]
        if len(maze.doors) != 3 or any((c == "O") != d.open for c, d in zip(door_flags, maze.doors)):
            raise MazeValidationError("name_doors", f"door states do not match {maze.name}")
        if maze.family == "AmazeVille":
            want = "high" if flags[0] == "H" else "low"
            if not maze.blocks or any(b.height != want for b in maze.blocks):
                raise MazeValidationError("name_blocks", f"block heights do not match {maze.name}")
    for label, region in (("start", maze.start), ("goal", maze.goal)):
        if region.points is not None:
            for p in region.points:
                if not _inside_extent((p[0], p[1], 0.0, 0.0), maze.extent):
                    raise MazeValidationError(f"{label}_in_extent", f"{p} outside extent")
                if inside_closed_geometry(maze, p):
                    raise MazeValidationError(f"{label}_free", f"{p} inside closed geometry")
        elif not _inside_extent(region.rect, maze.extent):
            raise MazeValidationError(f"{label}_in_extent", f"{region.rect} outside extent")
    if check_connectivity:
        grid = occupancy_grid(maze)
        labels = connected_components(grid, allow_low=True)
        starts = _region_cells(grid, maze.start)
        goals = _region_cells(grid, maze.goal)
        if not starts or not goals:
            raise MazeValidationError("connectivity", "empty start or goal region")
        comps = {int(labels[c]) for c in starts + goals}
        if len(comps) != 1:
            raise MazeValidationError("connectivity", f"{maze.name}: some start cannot reach some goal")
    return maze


def _rect(v, what) -> Rect:
    if not isinstance(v, (list, tuple)) or len(v) != 4:
        raise MazeParseError(f"{what}: expected [x, y, w, h], got {v!r}")
    return tuple(float(a) for a in v)


def _region(d, what) -> Region:
    if not isinstance(d, dict) or len(d) != 1 or not ({"points", "rect"} & set(d)):
        raise MazeParseError(f"{what}: expected {{points: ...}} or {{rect: ...}}")
    if "points" in d:
        pts = d["points"]
        if not pts:
            raise MazeParseError(f"{what}: empty point list")
        return Region(points=tuple((float(p[0]), float(p[1])) for p in pts))
    return Region(rect=_rect(d["rect"], what))


def maze_from_dict(d: dict) -> MazeSpec:
    keys = {"name", "family", "extent", "walls", "doors", "blocks", "start", "goal"}
    if not isinstance(d, dict) or set(d) != keys:
        got = sorted(d) if isinstance(d, dict) else type(d).__name__
        raise MazeParseError(f"maze spec must have exactly the fields {sorted(keys)}, got {got}")
    try:
        return MazeSpec(
            name=str(d["name"]),
            family=str(d["family"]),
            extent=(float(d["extent"][0]), float(d["extent"][1])),
            walls=tuple(tuple(float(a) for a in w) for w in d["walls"]),
            doors=tuple(Door(_rect(x["rect"], "door"), bool(x["open"])) for x in d["doors"]),
            blocks=tuple(Block(_rect(x["rect"], "block"), str(x["height"])) for x in d["blocks"]),
            start=_region(d["start"], "start"),
            goal=_region(d["goal"], "goal"),
        )
    except (KeyError, TypeError, IndexError) as e:
        raise MazeParseError(f"malformed maze spec: {e!r}") from e


def _r2(x: float) -> float:
    return round(float(x), 2)


def maze_to_dict(m: MazeSpec) -> dict:
    def region(r: Region):
        if r.points is not None:
            return {"points": [[_r2(p[0]), _r2(p[1])] for p in r.points]}
        return {"rect": [_r2(v) for v in r.rect]}

    return {
        "name": m.name,
        "family": m.family,
        "extent": [_r2(m.extent[0]), _r2(m.extent[1])],
        "walls": [[_r2(v) for v in w] for w in m.walls],
        "doors": [{"rect": [_r2(v) for v in d.rect], "open": d.open} for d in m.doors],
        "blocks": [{"rect": [_r2(v) for v in b.rect], "height": b.height} for b in m.blocks],
        "start": region(m.start),
        "goal": region(m.goal),
    }


def dumps_maze(maze: MazeSpec) -> str:
    """Canonical text: one top-level field per line, compact values."""
    d = maze_to_dict(maze)
    lines = [f"  {json.dumps(k)}: {json.dumps(v, separators=(', ', ': '))}" for k, v in d.items()]
    return "{\n" + ",\n".join(lines) + "\n}\n"


def save_maze(maze: MazeSpec, path) -> None:
    Path(path).write_text(dumps_maze(maze))


def load_maze(path) -> MazeSpec:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise MazeParseError(f"{path}: {e}") from e
    return validate_maze(maze_from_dict(d))


@functools.lru_cache(maxsize=None)
def _builtin() -> Tuple[MazeSpec, ...]:
    root = resources.files("contnav") / "mazes"
    return tuple(load_maze(root / f"{name}.json") for name in BUILTIN_NAMES)


def builtin_mazes() -> List[MazeSpec]:
    return list(_builtin())


def get_maze(name: str) -> MazeSpec:
    for m in _builtin():
        if m.name == name:
            return m
    raise KeyError(f"unknown maze {name!r}; valid names: {', '.join(BUILTIN_NAMES)}")
