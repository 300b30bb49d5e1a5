"""Procedural gridworld houses, agent kinematics and synthetic egocentric views.

Houses are axis-aligned room partitions of a 0.25 m occupancy grid. Each room
carries a style vector that dominates every view rendered inside it; views
also encode heading, free-space ray lengths and a small deterministic
per-pose nuisance term.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from regnav import kernels

CELL = 0.25
N_HEADINGS = 12
TURN_DEG = 30
D_STYLE = 8
D_OBS = 32
MIN_STYLE_GAP = 0.5
BLANK_VAR_THRESHOLD = 1e-3
BLANK_WALL_DIST = 0.3

# Feature layout of an observation vector.
STYLE_SLICE = slice(0, 8)
HEADING_SLICE = slice(8, 20)
RAY_SLICE = slice(20, 28)
NOISE_SLICE = slice(28, 32)

HEADING_KAPPA = 4.0
HEADING_AMP = 0.4
RAY_FOV = 90.0
RAY_MAX = 4.0
RAY_SCALE = 0.5
RAY_STEP = 0.05
NOISE_AMP = 0.05

_RAY_OFFSETS = np.linspace(-RAY_FOV / 2, RAY_FOV / 2, 8)
_HEADING_CENTERS = np.arange(N_HEADINGS) * (2 * math.pi / N_HEADINGS)
_COS = [math.cos(math.radians(TURN_DEG * k)) for k in range(N_HEADINGS)]
_SIN = [math.sin(math.radians(TURN_DEG * k)) for k in range(N_HEADINGS)]
_ROOM_CHARS = "0123456789ab"

DIFFICULTY_BANDS = {
    "easy": (1.5, 3.0),
    "medium": (3.0, 5.0),
    "hard": (5.0, 10.0),
}
DIFFICULTIES = tuple(DIFFICULTY_BANDS)


class HouseGenerationError(RuntimeError):
    pass


class InvalidPoseError(ValueError):
    pass


class EpisodeSamplingError(RuntimeError):
    pass


class Action(enum.IntEnum):
    MOVE_FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    STOP = 3


@dataclass(frozen=True)
class Room:
    room_id: int
    style: np.ndarray
    cells: np.ndarray  # (n, 2) int array of (row, col)


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: int = 0

    @property
    def cell(self) -> tuple[int, int]:
        return int(math.floor(self.y / CELL)), int(math.floor(self.x / CELL))

    @classmethod
    def at_cell(cls, r: int, c: int, heading: int = 0) -> "Pose":
        return cls((c + 0.5) * CELL, (r + 0.5) * CELL, heading)


@dataclass(frozen=True)
class Episode:
    episode_id: int
    scene_id: str
    start: Pose
    goal: Pose
    difficulty: str
    geodesic_start_goal: float


def in_band(distance: float, difficulty: str) -> bool:
    lo, hi = DIFFICULTY_BANDS[difficulty]
    if difficulty == "hard":
        return lo <= distance <= hi
    return lo <= distance < hi


@dataclass(frozen=True, eq=False)
class House:
    scene_id: str
    room_of: np.ndarray  # int16 (rows, cols); -1 = wall
    rooms: tuple[Room, ...]
    seed: int
    doors: tuple[tuple[int, int], ...] = ()
    _fields: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def grid(self) -> np.ndarray:
        """Occupancy as uint8: 1 traversable, 0 wall."""
        g = self._fields.get("grid")
        if g is None:
            g = np.ascontiguousarray(self.room_of >= 0, dtype=np.uint8)
            g.setflags(write=False)
            self._fields["grid"] = g
        return g

    @property
    def shape(self) -> tuple[int, int]:
        return self.room_of.shape

    @property
    def n_rooms(self) -> int:
        return len(self.rooms)

    def is_free(self, r: int, c: int) -> bool:
        rows, cols = self.room_of.shape
        return 0 <= r < rows and 0 <= c < cols and self.room_of[r, c] >= 0

    def room_at(self, pose: Pose) -> int:
        r, c = pose.cell
        if not self.is_free(r, c):
            raise InvalidPoseError(f"pose {pose} is not on a traversable cell of {self.scene_id}")
        return int(self.room_of[r, c])

    def free_cells(self) -> np.ndarray:
        cells = self._fields.get("free")
        if cells is None:
            cells = np.argwhere(self.room_of >= 0)
            self._fields["free"] = cells
        return cells

    def distance_field(self, r: int, c: int) -> np.ndarray:
        """BFS step counts to cell (r, c) from every cell (-1 unreachable)."""
        cache = self._fields.setdefault("bfs", {})
        key = (r, c)
        d = cache.get(key)
        if d is None:
            if len(cache) >= 4096:
                cache.clear()
            d = kernels.bfs_field(self.grid, r, c)
            d.setflags(write=False)
            cache[key] = d
        return d

    def adjacency(self) -> dict[int, set[int]]:
        adj: dict[int, set[int]] = {room.room_id: set() for room in self.rooms}
        for a, b in self.doors:
            adj[a].add(b)
            adj[b].add(a)
        return adj

    # serialization -----------------------------------------------------------

    def to_dict(self) -> dict:
        rows = []
        for line in self.room_of:
            rows.append("".join("#" if v < 0 else _ROOM_CHARS[v] for v in line))
        return {
            "scene_id": self.scene_id,
            "seed": int(self.seed),
            "cell_size": CELL,
            "grid": rows,
            "rooms": [{"room_id": rm.room_id, "style": [float(v) for v in rm.style]} for rm in self.rooms],
            "doors": [list(d) for d in self.doors],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "House":
        if data.get("cell_size", CELL) != CELL:
            raise ValueError(f"unsupported cell size {data['cell_size']}")
        grid = data["grid"]
        room_of = np.full((len(grid), len(grid[0])), -1, dtype=np.int16)
        for r, line in enumerate(grid):
            for c, ch in enumerate(line):
                if ch != "#":
                    room_of[r, c] = _ROOM_CHARS.index(ch)
        rooms = []
        for spec in data["rooms"]:
            rid = int(spec["room_id"])
            rooms.append(Room(rid, _frozen(np.array(spec["style"], dtype=np.float64)), _frozen(np.argwhere(room_of == rid))))
        room_of.setflags(write=False)
        doors = tuple(tuple(int(v) for v in d) for d in data.get("doors", []))
        return cls(data["scene_id"], room_of, tuple(rooms), int(data["seed"]), doors)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "House":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


# generation --------------------------------------------------------------------


def _split_rects(rng: np.random.Generator, h: int, w: int, n_rooms: int, min_side: int):
    """Binary space partition of an h x w interior into n_rooms rectangles.

    Rectangles are (r0, c0, r1, c1) half-open in interior coordinates and are
    separated by one-cell walls. Returns None if a split is impossible.
    """
    rects = [(0, 0, h, w)]
    while len(rects) < n_rooms:
        order = sorted(range(len(rects)), key=lambda i: -(rects[i][2] - rects[i][0]) * (rects[i][3] - rects[i][1]))
        for i in order:
            r0, c0, r1, c1 = rects[i]
            rh, rw = r1 - r0, c1 - c0
            vertical = rw > rh or (rw == rh and rng.random() < 0.5)
            span = rw if vertical else rh
            if span < 2 * min_side + 1:
                vertical = not vertical
                span = rw if vertical else rh
                if span < 2 * min_side + 1:
                    continue
            lo = max(min_side, int(round(span * 0.35)))
            hi = min(span - min_side - 1, int(round(span * 0.65)))
            if hi < lo:
                lo, hi = min_side, span - min_side - 1
            cut = int(rng.integers(lo, hi + 1))
            if vertical:
                a, b = (r0, c0, r1, c0 + cut), (r0, c0 + cut + 1, r1, c1)
            else:
                a, b = (r0, c0, r0 + cut, c1), (r0 + cut + 1, c0, r1, c1)
            rects[i : i + 1] = [a, b]
            break
        else:
            return None
    return rects


def _shared_walls(rects):
    """Candidate door sites: (i, j, cells along the shared wall) for adjacent rects."""
    sites = []
    for i, (a0, b0, a1, b1) in enumerate(rects):
        for j in range(i + 1, len(rects)):
            c0, d0, c1, d1 = rects[j]
            if a1 + 1 == c0 or c1 + 1 == a0:
                wall_r = a1 if a1 + 1 == c0 else c1
                lo, hi = max(b0, d0), min(b1, d1)
                if hi - lo >= 3:
                    sites.append((i, j, [(wall_r, c) for c in range(lo, hi)]))
            elif b1 + 1 == d0 or d1 + 1 == b0:
                wall_c = b1 if b1 + 1 == d0 else d1
                lo, hi = max(a0, c0), min(a1, c1)
                if hi - lo >= 3:
                    sites.append((i, j, [(r, wall_c) for r in range(lo, hi)]))
    return sites


def _sample_styles(rng: np.random.Generator, n: int, gap: float, tries: int = 2000) -> np.ndarray:
    styles: list[np.ndarray] = []
    for _ in range(tries):
        cand = rng.random(D_STYLE)
        if all(np.linalg.norm(cand - s) >= gap for s in styles):
            styles.append(cand)
            if len(styles) == n:
                return np.array(styles)
    raise HouseGenerationError(f"could not place {n} styles with gap {gap}")


def generate_house(
    seed: int,
    n_rooms: int,
    width_m: float | None = None,
    height_m: float | None = None,
    min_style_gap: float = MIN_STYLE_GAP,
    max_retries: int = 50,
) -> House:
    """Generate a connected multi-room house, deterministically in ``seed``.

    Default footprint targets roughly 9 m^2 per room. Explicit ``width_m`` /
    ``height_m`` include the one-cell outer wall.
    """
    if not 2 <= n_rooms <= 12:
        raise ValueError(f"n_rooms must be in [2, 12], got {n_rooms}")
    rng = np.random.default_rng([int(seed), int(n_rooms), 0x5EED])
    for _ in range(max_retries):
        if width_m is None or height_m is None:
            area = n_rooms * 144 * rng.uniform(0.8, 1.2)
            aspect = rng.uniform(0.75, 1.33)
            h = int(round(math.sqrt(area / aspect)))
            w = int(round(area / h))
        else:
            h = int(round(height_m / CELL)) - 2
            w = int(round(width_m / CELL)) - 2
        min_side = 6 if min(h, w) >= 13 else max(1, min(3, (min(h, w) - 1) // 2))
        rects = _split_rects(rng, h, w, n_rooms, min_side)
        if rects is None:
            continue
        sites = _shared_walls(rects)
        # random spanning tree over door sites, plus a few loops
        parent = list(range(n_rooms))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        chosen = []
        for idx in rng.permutation(len(sites)):
            i, j, cells = sites[idx]
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[ri] = rj
                chosen.append(sites[idx])
            elif rng.random() < 0.25:
                chosen.append(sites[idx])
        if len({find(i) for i in range(n_rooms)}) != 1:
            continue
        room_of = np.full((h + 2, w + 2), -1, dtype=np.int16)
        for k, (r0, c0, r1, c1) in enumerate(rects):
            room_of[r0 + 1 : r1 + 1, c0 + 1 : c1 + 1] = k
        doors = []
        for i, j, cells in sorted(chosen, key=lambda s: (s[0], s[1], s[2][0])):
            width = 3 if len(cells) >= 5 else 2
            start = int(rng.integers(1, len(cells) - width)) if len(cells) - width > 1 else 0
            owner = i if rng.random() < 0.5 else j
            for r, c in cells[start : start + width]:
                room_of[r + 1, c + 1] = owner
            doors.append((i, j))
        try:
            styles = _sample_styles(rng, n_rooms, min_style_gap)
        except HouseGenerationError:
            continue
        room_of.setflags(write=False)
        rooms = tuple(
            Room(k, _frozen(styles[k].copy()), _frozen(np.argwhere(room_of == k))) for k in range(n_rooms)
        )
        return House(f"h{seed:05d}r{n_rooms}", room_of, rooms, int(seed), tuple(sorted(set(doors))))
    raise HouseGenerationError(f"house generation failed for seed={seed}, n_rooms={n_rooms}")


# kinematics ------------------------------------------------------------------------


def check_pose(house: House, pose: Pose) -> None:
    r, c = pose.cell
    if not house.is_free(r, c):
        raise InvalidPoseError(f"pose {pose} is not on a traversable cell of {house.scene_id}")
    if pose.heading % TURN_DEG or not 0 <= pose.heading < 360:
        raise InvalidPoseError(f"heading must be a multiple of {TURN_DEG} in [0, 360), got {pose.heading}")


def step(house: House, pose: Pose, action: Action | int) -> Pose:
    """Apply one action. TURN_LEFT is -30 degrees; blocked moves leave the pose unchanged."""
    action = Action(action)
    if action == Action.STOP:
        return pose
    if action == Action.TURN_LEFT:
        return Pose(pose.x, pose.y, (pose.heading - TURN_DEG) % 360)
    if action == Action.TURN_RIGHT:
        return Pose(pose.x, pose.y, (pose.heading + TURN_DEG) % 360)
    k = pose.heading // TURN_DEG
    nx = pose.x + CELL * _COS[k]
    ny = pose.y + CELL * _SIN[k]
    r0, c0 = pose.cell
    r1, c1 = int(math.floor(ny / CELL)), int(math.floor(nx / CELL))
    if not house.is_free(r1, c1):
        return pose
    # no squeezing diagonally between two walls
    if r1 != r0 and c1 != c0 and not (house.is_free(r0, c1) and house.is_free(r1, c0)):
        return pose
    return Pose(nx, ny, pose.heading)


def geodesic(house: House, a: Pose, b: Pose) -> float:
    """Shortest 4-connected grid path between the cells of ``a`` and ``b``, in meters."""
    ra, ca = a.cell
    rb, cb = b.cell
    for r, c, p in ((ra, ca, a), (rb, cb, b)):
        if not house.is_free(r, c):
            raise InvalidPoseError(f"pose {p} is not on a traversable cell of {house.scene_id}")
    steps = int(house.distance_field(rb, cb)[ra, ca])
    if steps < 0:
        raise RuntimeError(f"cells {(ra, ca)} and {(rb, cb)} are disconnected in {house.scene_id}")
    return steps * CELL


def heading_gap(h1: int, h2: int) -> float:
    """Absolute heading difference in radians, in [0, pi]."""
    d = abs(h1 - h2) % 360
    return math.radians(min(d, 360 - d))


def sample_episode(
    house: House, difficulty: str, seed: int, episode_id: int = 0, max_tries: int = 200
) -> Episode:
    if difficulty not in DIFFICULTY_BANDS:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    lo, hi = DIFFICULTY_BANDS[difficulty]
    rng = np.random.default_rng([int(seed), int(episode_id), 0xE915])
    cells = house.free_cells()
    for _ in range(max_tries):
        r, c = cells[rng.integers(len(cells))]
        d = house.distance_field(int(r), int(c)) * CELL
        if difficulty == "hard":
            mask = (d >= lo) & (d <= hi)
        else:
            mask = (d >= lo) & (d < hi)
        cand = np.argwhere(mask)
        if len(cand) == 0:
            continue
        gr, gc = cand[rng.integers(len(cand))]
        start = Pose.at_cell(int(r), int(c), TURN_DEG * int(rng.integers(N_HEADINGS)))
        goal = Pose.at_cell(int(gr), int(gc), TURN_DEG * int(rng.integers(N_HEADINGS)))
        return Episode(episode_id, house.scene_id, start, goal, difficulty, float(d[gr, gc]))
    raise EpisodeSamplingError(f"no {difficulty} start/goal pair found in {house.scene_id}")


# rendering ---------------------------------------------------------------------------


def _mix(*vals: int) -> int:
    """Small splitmix64-style integer hash."""
    h = 0x9E3779B97F4A7C15
    for v in vals:
        h ^= (v & 0xFFFFFFFFFFFFFFFF) + 0x9E3779B97F4A7C15 + ((h << 6) & 0xFFFFFFFFFFFFFFFF) + (h >> 2)
        h &= 0xFFFFFFFFFFFFFFFF
        h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
        h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
        h ^= h >> 31
    return h


def _pose_noise(house: House, pose: Pose, render_seed: int, n: int) -> np.ndarray:
    r, c = pose.cell
    h = _mix(house.seed, r, c, pose.heading, render_seed)
    out = np.empty(n)
    for i in range(n):
        h = _mix(h, i)
        out[i] = (h >> 11) * (1.0 / (1 << 53))
    return 2.0 * out - 1.0


def heading_code(heading: int) -> np.ndarray:
    theta = math.radians(heading)
    return np.exp(HEADING_KAPPA * (np.cos(theta - _HEADING_CENTERS) - 1.0))


def render(house: House, pose: Pose, render_seed: int = 0) -> np.ndarray:
    """Synthetic egocentric view: 32-dim feature vector.

    Layout: room style (8) | smoothed heading code (12) | ray lengths over a
    90 degree field of view (8) | deterministic pose noise (4). Facing a wall
    closer than 0.3 m yields a near-constant "blank" view.
    """
    check_pose(house, pose)
    grid = house.grid
    centre = kernels.cast_rays(grid, pose.x, pose.y, np.array([float(pose.heading)]), CELL, RAY_MAX, RAY_STEP)[0]
    noise = _pose_noise(house, pose, render_seed, D_OBS + 1)
    if centre < BLANK_WALL_DIST:
        level = 1.0 if noise[-1] > 0 else 0.0
        return level + 0.005 * noise[:D_OBS]
    obs = np.empty(D_OBS)
    obs[STYLE_SLICE] = house.rooms[house.room_of[pose.cell]].style
    obs[HEADING_SLICE] = HEADING_AMP * heading_code(pose.heading)
    rays = kernels.cast_rays(grid, pose.x, pose.y, pose.heading + _RAY_OFFSETS, CELL, RAY_MAX, RAY_STEP)
    obs[RAY_SLICE] = RAY_SCALE * rays / RAY_MAX
    obs[NOISE_SLICE] = NOISE_AMP * noise[: NOISE_SLICE.stop - NOISE_SLICE.start]
    return obs


def is_blank(features: np.ndarray, threshold: float = BLANK_VAR_THRESHOLD) -> bool:
    return float(np.var(features)) < threshold
