"""Deterministic grid-world navigation environment.

Scenes are rectangular grids of semantic cell classes. The agent occupies a
cell and faces one of four headings; observations are egocentric k x k
patches of cell classes. A shortest-path follower serves as the expert and a
templated generator turns reference paths into instruction token ids.
"""
from __future__ import annotations

import enum
import hashlib
from collections import deque
from dataclasses import dataclass, field

import numpy as np

INF = float("inf")


class CellClass(enum.IntEnum):
    WALL = 0
    FLOOR = 1
    LANDMARK_A = 2
    LANDMARK_B = 3
    LANDMARK_C = 4
    LANDMARK_D = 5
    LANDMARK_E = 6
    LANDMARK_F = 7


NUM_CLASSES = len(CellClass)
LANDMARK_CLASSES = tuple(range(CellClass.LANDMARK_A, CellClass.LANDMARK_F + 1))

_CHAR_TO_CLASS = {"#": 0, ".": 1, "A": 2, "B": 3, "C": 4, "D": 5, "E": 6, "F": 7}
_CLASS_TO_CHAR = {v: k for k, v in _CHAR_TO_CLASS.items()}


class Action(enum.IntEnum):
    FWD = 0
    LEFT = 1
    RIGHT = 2
    STOP = 3


class Heading(enum.IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3


# (dx, dy) per heading; N decreases y.
HEADING_DELTAS = ((0, -1), (1, 0), (0, 1), (-1, 0))

Cell = tuple[int, int]


class SceneFormatError(ValueError):
    """Raised when a SCENE v1 document cannot be parsed."""


@dataclass(frozen=True)
class Scene:
    """Immutable semantic grid. ``cells[y, x]`` holds a CellClass id."""

    cells: np.ndarray
    id: str = "scene"

    def __post_init__(self):
        cells = np.array(self.cells, dtype=np.int8, copy=True)
        if cells.ndim != 2 or cells.size == 0:
            raise ValueError(f"scene grid must be a non-empty 2D array, got shape {cells.shape}")
        if cells.min() < 0 or cells.max() >= NUM_CLASSES:
            raise ValueError("scene grid contains an unknown cell class")
        if not (cells != CellClass.WALL).any():
            raise ValueError("scene has no walkable cell")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def cell(self, x: int, y: int) -> int:
        """Class at (x, y); anything outside the grid reads as WALL."""
        if not self.in_bounds(x, y):
            return int(CellClass.WALL)
        return int(self.cells[y, x])

    def walkable(self, x: int, y: int) -> bool:
        return self.cell(x, y) != CellClass.WALL

    def walkable_cells(self) -> list[Cell]:
        ys, xs = np.nonzero(self.cells != CellClass.WALL)
        return [(int(x), int(y)) for y, x in zip(ys, xs)]

    def with_cell(self, x: int, y: int, cls: int) -> "Scene":
        cells = self.cells.copy()
        cells[y, x] = cls
        return Scene(cells, self.id)

    def to_text(self) -> str:
        lines = [f"SCENE v1 {self.width} {self.height}"]
        for row in self.cells:
            lines.append("".join(_CLASS_TO_CHAR[int(c)] for c in row))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Pose:
    x: int
    y: int
    heading: Heading

    @property
    def cell(self) -> Cell:
        return (self.x, self.y)


def load_scene(text: str, scene_id: str = "scene") -> Scene:
    """Parse a SCENE v1 document."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines = lines[:-1]
    if not lines:
        raise SceneFormatError("line 1: empty document")
    header = lines[0].split()
    if len(header) != 4 or header[0] != "SCENE" or header[1] != "v1":
        raise SceneFormatError(f"line 1: expected 'SCENE v1 <W> <H>', got {lines[0]!r}")
    try:
        width, height = int(header[2]), int(header[3])
    except ValueError:
        raise SceneFormatError(f"line 1: non-integer dimensions in {lines[0]!r}") from None
    if width <= 0 or height <= 0:
        raise SceneFormatError(f"line 1: dimensions must be positive, got {width}x{height}")
    body = lines[1:]
    if len(body) != height:
        lineno = min(len(body), height) + 2
        raise SceneFormatError(f"line {lineno}: header declares {height} rows, body has {len(body)}")
    grid = np.zeros((height, width), dtype=np.int8)
    for r, row in enumerate(body):
        lineno = r + 2
        if len(row) != width:
            raise SceneFormatError(f"line {lineno}: expected {width} characters, got {len(row)}")
        for c, ch in enumerate(row):
            if ch not in _CHAR_TO_CLASS:
                raise SceneFormatError(f"line {lineno}: unknown character {ch!r} at column {c + 1}")
            grid[r, c] = _CHAR_TO_CLASS[ch]
    try:
        return Scene(grid, scene_id)
    except ValueError as exc:
        raise SceneFormatError(f"line 2: {exc}") from None


def step(scene: Scene, pose: Pose, action: Action) -> tuple[Pose, bool]:
    """Apply one action. Returns the new pose and whether a FWD move was blocked."""
    action = Action(action)
    if action == Action.FWD:
        dx, dy = HEADING_DELTAS[pose.heading]
        nx, ny = pose.x + dx, pose.y + dy
        if scene.walkable(nx, ny):
            return Pose(nx, ny, pose.heading), False
        return pose, True
    if action == Action.LEFT:
        return Pose(pose.x, pose.y, Heading((pose.heading - 1) % 4)), False
    if action == Action.RIGHT:
        return Pose(pose.x, pose.y, Heading((pose.heading + 1) % 4)), False
    return pose, False


def render_observation(scene: Scene, pose: Pose, k: int = 5) -> np.ndarray:
    """Egocentric k x k patch of cell classes.

    The agent sits at the bottom-center entry and its heading points up, so
    ``patch[k - 1 - f, k // 2 + s]`` is the cell ``f`` steps ahead and ``s``
    steps to the right.
    """
    if k < 1 or k % 2 == 0:
        raise ValueError(f"patch side must be odd and positive, got {k}")
    fx, fy = HEADING_DELTAS[pose.heading]
    rx, ry = HEADING_DELTAS[(pose.heading + 1) % 4]
    half = k // 2
    patch = np.empty((k, k), dtype=np.int8)
    for row in range(k):
        f = k - 1 - row
        for col in range(k):
            s = col - half
            patch[row, col] = scene.cell(pose.x + f * fx + s * rx, pose.y + f * fy + s * ry)
    return patch


def observed_cells(scene: Scene, pose: Pose, k: int = 5) -> set[Cell]:
    """In-bounds world cells covered by the patch rendered at ``pose``."""
    fx, fy = HEADING_DELTAS[pose.heading]
    rx, ry = HEADING_DELTAS[(pose.heading + 1) % 4]
    half = k // 2
    out = set()
    for f in range(k):
        for s in range(-half, half + 1):
            x, y = pose.x + f * fx + s * rx, pose.y + f * fy + s * ry
            if scene.in_bounds(x, y):
                out.add((x, y))
    return out


def geodesic_field(scene: Scene, sources) -> np.ndarray:
    """Multi-source BFS distance (in cells) over 4-connected walkable cells.

    Returns an (H, W) float array indexed ``[y, x]``; unreachable cells and
    walls hold ``inf``.
    """
    sources = list(sources)
    if not sources:
        raise ValueError("geodesic_field needs at least one source cell")
    dist = np.full((scene.height, scene.width), INF)
    queue = deque()
    for x, y in sources:
        if not scene.walkable(x, y):
            raise ValueError(f"source cell {(x, y)} is a wall or out of bounds")
        if dist[y, x] != 0:
            dist[y, x] = 0
            queue.append((x, y))
    while queue:
        x, y = queue.popleft()
        nd = dist[y, x] + 1
        for dx, dy in HEADING_DELTAS:
            nx, ny = x + dx, y + dy
            if scene.walkable(nx, ny) and dist[ny, nx] > nd:
                dist[ny, nx] = nd
                queue.append((nx, ny))
    return dist


def scene_diameter(scene: Scene) -> int:
    """Largest finite geodesic distance between two walkable cells."""
    best = 0
    for cell in scene.walkable_cells():
        d = geodesic_field(scene, [cell])
        finite = d[np.isfinite(d)]
        best = max(best, int(finite.max()))
    return best


class UnreachableError(ValueError):
    pass


def expert_action(scene: Scene, pose: Pose, field: np.ndarray, goal_region) -> Action:
    """Shortest-path follower over a distance-to-goal field."""
    here = field[pose.y, pose.x]
    if not np.isfinite(here):
        raise UnreachableError(f"pose {pose} cannot reach the goal")
    if pose.cell in goal_region:
        return Action.STOP
    fx, fy = HEADING_DELTAS[pose.heading]
    if scene.walkable(pose.x + fx, pose.y + fy) and field[pose.y + fy, pose.x + fx] < here:
        return Action.FWD
    best_h, best_d = None, INF
    for h, (dx, dy) in enumerate(HEADING_DELTAS):
        nx, ny = pose.x + dx, pose.y + dy
        if scene.walkable(nx, ny) and field[ny, nx] < best_d:
            best_h, best_d = h, field[ny, nx]
    if best_h is None:
        raise UnreachableError(f"pose {pose} has no walkable neighbour")
    turn = (best_h - pose.heading) % 4
    # turn == 2 (behind) is equidistant either way: LEFT.
    return Action.RIGHT if turn == 1 else Action.LEFT


def expert_path(scene: Scene, start: Pose, field: np.ndarray, goal_region, max_steps: int = 10_000):
    """Run the expert from ``start``; returns (actions, poses) with poses[0] = start."""
    pose = start
    actions, poses = [], [start]
    for _ in range(max_steps):
        a = expert_action(scene, pose, field, goal_region)
        actions.append(a)
        if a == Action.STOP:
            return actions, poses
        pose, _ = step(scene, pose, a)
        poses.append(pose)
    raise RuntimeError("expert did not terminate")


# ---------------------------------------------------------------- instructions

WORDS = ("go", "forward", "turn", "left", "right", "around", "stop", "at")
LANDMARK_WORDS = ("A", "B", "C", "D", "E", "F")
MAX_COUNT = 40
VOCAB = WORDS + LANDMARK_WORDS + tuple(str(n) for n in range(1, MAX_COUNT + 1))
VOCAB_SIZE = len(VOCAB)
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
assert VOCAB_SIZE <= 64


def decode_instruction(ids) -> str:
    return " ".join(VOCAB[i] for i in ids)


def _landmark_near(scene: Scene, cell: Cell) -> str | None:
    """Landmark on the cell, else the first 4-adjacent landmark (N, E, S, W order)."""
    x, y = cell
    c = scene.cell(x, y)
    if c in LANDMARK_CLASSES:
        return LANDMARK_WORDS[c - CellClass.LANDMARK_A]
    for dx, dy in HEADING_DELTAS:
        c = scene.cell(x + dx, y + dy)
        if c in LANDMARK_CLASSES:
            return LANDMARK_WORDS[c - CellClass.LANDMARK_A]
    return None


def _direction(a: Cell, b: Cell) -> int:
    delta = (b[0] - a[0], b[1] - a[1])
    try:
        return HEADING_DELTAS.index(delta)
    except ValueError:
        raise ValueError(f"path cells {a} and {b} are not 4-adjacent") from None


_TURN_WORDS = {1: ("turn", "right"), 2: ("turn", "around"), 3: ("turn", "left")}


def generate_instruction(reference_path, scene: Scene, start_heading: Heading | None = None) -> list[int]:
    """Templated instruction for a cell path.

    The path is split into straight runs; each run becomes ``forward <n>``,
    each direction change ``turn left|right [at X]`` and the end
    ``stop [at X]``, where X is a landmark on or next to the waypoint. With
    ``start_heading`` an initial turn is emitted when the first run does not
    point the way the agent faces.
    """
    path = [tuple(c) for c in reference_path]
    if not path:
        raise ValueError("empty reference path")
    words: list[str] = []
    runs: list[tuple[int, int]] = []  # (direction, length)
    for a, b in zip(path, path[1:]):
        d = _direction(a, b)
        if runs and runs[-1][0] == d:
            runs[-1] = (d, runs[-1][1] + 1)
        else:
            runs.append((d, 1))
    cursor = 0
    for i, (d, n) in enumerate(runs):
        if i == 0:
            if start_heading is not None and (d - start_heading) % 4:
                words.extend(_TURN_WORDS[(d - start_heading) % 4])
            words.append("go")
        else:
            words.extend(_TURN_WORDS[(d - runs[i - 1][0]) % 4])
            mark = _landmark_near(scene, path[cursor])
            if mark:
                words.extend(("at", mark))
        while n > 0:
            chunk = min(n, MAX_COUNT)
            words.extend(("forward", str(chunk)))
            n -= chunk
            cursor += chunk
    words.append("stop")
    mark = _landmark_near(scene, path[-1])
    if mark:
        words.extend(("at", mark))
    return [TOKEN_ID[w] for w in words]


# ---------------------------------------------------------------- episodes


@dataclass(frozen=True)
class EpisodeGenConfig:
    min_len: int = 4
    max_len: int | None = None
    r_goal: int = 0
    L_max: int = 24
    max_retries: int = 200


@dataclass
class EpisodeSpec:
    scene_id: str
    start: Pose
    goal: Cell
    goal_region: frozenset
    reference_path: list
    instruction: list
    seed: int
    episode_id: str = ""

    def __post_init__(self):
        if not self.episode_id:
            self.episode_id = f"{self.scene_id}:{self.seed}"

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "scene_id": self.scene_id,
            "start": [self.start.x, self.start.y, int(self.start.heading)],
            "goal": list(self.goal),
            "goal_region": sorted(list(c) for c in self.goal_region),
            "reference_path": [list(c) for c in self.reference_path],
            "instruction": list(self.instruction),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeSpec":
        x, y, h = d["start"]
        return cls(
            scene_id=d["scene_id"],
            start=Pose(x, y, Heading(h)),
            goal=tuple(d["goal"]),
            goal_region=frozenset(tuple(c) for c in d["goal_region"]),
            reference_path=[tuple(c) for c in d["reference_path"]],
            instruction=list(d["instruction"]),
            seed=d["seed"],
            episode_id=d["episode_id"],
        )


class EpisodeGenerationError(ValueError):
    pass


def _seed_for(scene: Scene, rng_seed: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{scene.id}|{rng_seed}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def goal_field(scene: Scene, goal: Cell) -> np.ndarray:
    return geodesic_field(scene, [goal])


def generate_episode(scene: Scene, rng_seed: int, config: EpisodeGenConfig = EpisodeGenConfig()) -> EpisodeSpec:
    """Sample a start pose and goal, then derive the expert reference path and instruction."""
    rng = _seed_for(scene, rng_seed)
    cells = scene.walkable_cells()
    if len(cells) < 2:
        raise EpisodeGenerationError("scene needs at least two walkable cells")
    for _ in range(config.max_retries):
        goal = cells[rng.integers(len(cells))]
        start_cell = cells[rng.integers(len(cells))]
        heading = Heading(int(rng.integers(4)))
        field = goal_field(scene, goal)
        dist = field[start_cell[1], start_cell[0]]
        if not np.isfinite(dist) or dist < config.min_len:
            continue
        if config.max_len is not None and dist > config.max_len:
            continue
        region = frozenset(c for c in cells if field[c[1], c[0]] <= config.r_goal)
        start = Pose(start_cell[0], start_cell[1], heading)
        _, poses = expert_path(scene, start, field, region)
        path = [poses[0].cell]
        for p in poses[1:]:
            if p.cell != path[-1]:
                path.append(p.cell)
        instr = generate_instruction(path, scene, heading)
        if len(instr) > config.L_max:
            continue
        return EpisodeSpec(scene.id, start, goal, region, path, instr, rng_seed)
    raise EpisodeGenerationError(
        f"no start/goal pair with geodesic distance >= {config.min_len} found in scene "
        f"{scene.id!r} after {config.max_retries} tries"
    )


class EnvSession:
    """Live episode state. Agents see only the current observation."""

    def __init__(self, scene: Scene, start: Pose, k: int = 5):
        self._scene = scene
        self._pose = start
        self._k = k
        self.collisions = 0

    def observe(self) -> np.ndarray:
        return render_observation(self._scene, self._pose, self._k)

    def act(self, action: Action) -> None:
        self._pose, collided = step(self._scene, self._pose, action)
        self.collisions += int(collided)

    @property
    def pose(self) -> Pose:
        return self._pose
