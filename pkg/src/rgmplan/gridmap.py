"""Occupancy-grid world model.

Coordinates are continuous cell units: a point ``(x, y)`` lies in the cell
``(row, col) = (floor(y), floor(x))``.  Occupancy arrays are indexed
``[row, col]`` and ``True`` marks an obstacle.
"""
from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

Point = tuple[float, float]

DEFAULT_SEGMENT_STEP = 0.25


class MapType(str, enum.Enum):
    RANDOM_RECTS = "RandomRects"
    WALLS = "Walls"
    MAZE = "Maze"
    BUG_TRAP = "BugTrap"
    NARROW_GAPS = "NarrowGaps"

    @classmethod
    def parse(cls, value: "MapType | str") -> "MapType":
        if isinstance(value, MapType):
            return value
        for member in cls:
            if value.lower() in (member.value.lower(), member.name.lower()):
                return member
        raise ValueError(f"unknown map type {value!r}")


class MapGenerationError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GridMap:
    width: int
    height: int
    occupancy: np.ndarray
    map_type: MapType | None = None
    seed: int = 0
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError(f"map must be at least 8x8, got {self.width}x{self.height}")
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.shape != (self.height, self.width):
            raise ValueError(f"occupancy shape {occ.shape} != ({self.height}, {self.width})")
        occ = occ.copy()
        occ.flags.writeable = False
        object.__setattr__(self, "occupancy", occ)

    @classmethod
    def from_occupancy(cls, occupancy, **kwargs) -> "GridMap":
        occ = np.asarray(occupancy, dtype=bool)
        return cls(width=occ.shape[1], height=occ.shape[0], occupancy=occ, **kwargs)

    @classmethod
    def empty(cls, width: int, height: int | None = None) -> "GridMap":
        height = width if height is None else height
        return cls(width, height, np.zeros((height, width), dtype=bool))

    @property
    def free(self) -> np.ndarray:
        return ~self.occupancy

    @property
    def free_fraction(self) -> float:
        return float(self.free.mean())

    def in_bounds(self, p: Point) -> bool:
        return 0.0 <= p[0] < self.width and 0.0 <= p[1] < self.height

    def __eq__(self, other):
        if not isinstance(other, GridMap):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and bool(
            np.array_equal(self.occupancy, other.occupancy)
        )

    __hash__ = None


@dataclass(frozen=True)
class PlanProblem:
    map: GridMap
    start: Point
    goal: Point

    def __post_init__(self):
        start = (float(self.start[0]), float(self.start[1]))
        goal = (float(self.goal[0]), float(self.goal[1]))
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "goal", goal)
        for name, p in (("start", start), ("goal", goal)):
            if not is_free(self.map, p):
                raise ValueError(f"{name} {p} is not in free space")
        if start == goal:
            raise ValueError("start and goal coincide")


def cell_of(p: Point) -> tuple[int, int]:
    return int(math.floor(p[1])), int(math.floor(p[0]))


def cell_center(row: int, col: int) -> Point:
    return (col + 0.5, row + 0.5)


def is_free(gmap: GridMap, p: Point) -> bool:
    if not gmap.in_bounds(p):
        raise ValueError(f"point {p} outside {gmap.width}x{gmap.height} map")
    r, c = cell_of(p)
    return not gmap.occupancy[r, c]


def segment_points(a: Point, b: Point, step: float = DEFAULT_SEGMENT_STEP) -> np.ndarray:
    """Sample points along ``a -> b`` at arc-length multiples of ``step``.

    Endpoints are put in lexicographic order first so the sample set does not
    depend on direction, and the far endpoint is always included.  Returns an
    ``(n, 2)`` array of ``(x, y)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if (b[0], b[1]) < (a[0], a[1]):
        a, b = b, a
    dx, dy = b[0] - a[0], b[1] - a[1]
    length = math.hypot(dx, dy)
    n = int(length // step)
    t = np.arange(n + 1, dtype=float) * step
    if length > 0:
        t /= length
    pts = np.empty((n + 2, 2))
    pts[:-1, 0] = a[0] + t * dx
    pts[:-1, 1] = a[1] + t * dy
    pts[-1] = b
    return pts


def segment_free(gmap: GridMap, a: Point, b: Point, step: float = DEFAULT_SEGMENT_STEP) -> bool:
    if not (gmap.in_bounds(a) and gmap.in_bounds(b)):
        raise ValueError(f"segment {a} -> {b} leaves the map")
    pts = segment_points(a, b, step)
    cols = np.floor(pts[:, 0]).astype(np.intp)
    rows = np.floor(pts[:, 1]).astype(np.intp)
    return not gmap.occupancy[rows, cols].any()


def segment_cells(a: Point, b: Point, step: float = DEFAULT_SEGMENT_STEP) -> np.ndarray:
    """Unique ``(row, col)`` cells visited by the collision-check samples."""
    pts = segment_points(a, b, step)
    cells = np.stack([np.floor(pts[:, 1]), np.floor(pts[:, 0])], axis=1).astype(np.intp)
    return np.unique(cells, axis=0)


# --------------------------------------------------------------------------
# map families


def generate_map(map_type: MapType | str, width: int, height: int, seed: int, **params) -> GridMap:
    """Build a map of the given family; a pure function of its arguments."""
    map_type = MapType.parse(map_type)
    if width < 8 or height < 8:
        raise MapGenerationError(f"map must be at least 8x8, got {width}x{height}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _FAMILY_SALT[map_type]]))
    occ, meta = _GENERATORS[map_type](rng, width, height, **params)
    if occ.all():
        raise MapGenerationError(f"{map_type.value} parameters {params} leave no free space")
    return GridMap(width, height, occ, map_type=map_type, seed=int(seed), meta=meta)


def _scale(width: int, height: int, frac: float, lo: int = 1) -> int:
    return max(lo, int(round(min(width, height) * frac)))


def _random_rects(rng, width, height, n_rects=None, min_frac=0.06, max_frac=0.2):
    if n_rects is None:
        n_rects = max(3, int(round(width * height / 400)))
    if not (0 < min_frac <= max_frac):
        raise MapGenerationError("need 0 < min_frac <= max_frac")
    occ = np.zeros((height, width), dtype=bool)
    lo, hi = _scale(width, height, min_frac), _scale(width, height, max_frac)
    for _ in range(int(n_rects)):
        w = int(rng.integers(lo, hi + 1))
        h = int(rng.integers(lo, hi + 1))
        x0 = int(rng.integers(0, max(1, width - w + 1)))
        y0 = int(rng.integers(0, max(1, height - h + 1)))
        occ[y0 : y0 + h, x0 : x0 + w] = True
    return occ, {"n_rects": int(n_rects)}


def _walls(rng, width, height, thickness=None, door_frac=0.12, doors_per_wall=2):
    """One vertical and one horizontal spanning wall, each pierced by doors."""
    t = thickness or _scale(width, height, 1 / 40)
    occ = np.zeros((height, width), dtype=bool)
    door = _scale(width, height, door_frac, lo=2)
    wx = int(rng.integers(width // 3, 2 * width // 3))
    wy = int(rng.integers(height // 3, 2 * height // 3))
    occ[:, wx : wx + t] = True
    occ[wy : wy + t, :] = True
    doors = []
    # a door in each of the four wall arms keeps every room reachable
    arms = [
        ("v", 0, wy),
        ("v", wy + t, height),
        ("h", 0, wx),
        ("h", wx + t, width),
    ]
    for kind, lo, hi in arms[: 2 * doors_per_wall]:
        if hi - lo <= door:
            start = lo
        else:
            start = int(rng.integers(lo, hi - door + 1))
        if kind == "v":
            occ[start : start + door, wx : wx + t] = False
        else:
            occ[wy : wy + t, start : start + door] = False
        doors.append((kind, start, door))
    return occ, {"wall_x": wx, "wall_y": wy, "doors": doors}


def _maze(rng, width, height, corridor=None, wall=1):
    c = corridor or max(1, min(width, height) // 16)
    pitch = c + wall
    nx = (width - wall) // pitch
    ny = (height - wall) // pitch
    if nx < 1 or ny < 1:
        raise MapGenerationError(f"corridor {c} too wide for {width}x{height}")
    occ = np.ones((height, width), dtype=bool)

    def carve_cell(i, j):
        y0, x0 = wall + j * pitch, wall + i * pitch
        occ[y0 : y0 + c, x0 : x0 + c] = False

    visited = np.zeros((ny, nx), dtype=bool)
    start = (int(rng.integers(nx)), int(rng.integers(ny)))
    stack = [start]
    visited[start[1], start[0]] = True
    carve_cell(*start)
    while stack:
        i, j = stack[-1]
        nbrs = [
            (i + di, j + dj)
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1))
            if 0 <= i + di < nx and 0 <= j + dj < ny and not visited[j + dj, i + di]
        ]
        if not nbrs:
            stack.pop()
            continue
        ni, nj = nbrs[int(rng.integers(len(nbrs)))]
        visited[nj, ni] = True
        carve_cell(ni, nj)
        # knock out the wall between the two lattice cells
        y0 = wall + min(j, nj) * pitch
        x0 = wall + min(i, ni) * pitch
        if ni != i:
            occ[y0 : y0 + c, x0 + c : x0 + pitch] = False
        else:
            occ[y0 + c : y0 + pitch, x0 : x0 + c] = False
        stack.append((ni, nj))
    return occ, {"corridor": c, "wall": wall, "lattice": (nx, ny)}


_SIDES = ("left", "right", "top", "bottom")


def _bug_trap(rng, width, height, size_frac=(0.35, 0.5), thickness=None, opening_frac=0.1, side=None):
    """A square enclosure with a single opening on one side."""
    t = thickness or _scale(width, height, 1 / 40)
    gap = _scale(width, height, opening_frac, lo=2)
    lo = _scale(width, height, size_frac[0], lo=2 * t + gap + 2)
    hi = max(lo, _scale(width, height, size_frac[1]))
    size = int(rng.integers(lo, hi + 1))
    if size + 4 > min(width, height):
        raise MapGenerationError("trap does not fit inside the map")
    x0 = int(rng.integers(2, width - size - 1))
    y0 = int(rng.integers(2, height - size - 1))
    x1, y1 = x0 + size, y0 + size
    occ = np.zeros((height, width), dtype=bool)
    occ[y0:y1, x0:x1] = True
    occ[y0 + t : y1 - t, x0 + t : x1 - t] = False
    side = side or _SIDES[int(rng.integers(4))]
    inner = size - 2 * t
    g0 = t + int(rng.integers(0, inner - gap + 1))
    if side == "left":
        occ[y0 + g0 : y0 + g0 + gap, x0 : x0 + t] = False
    elif side == "right":
        occ[y0 + g0 : y0 + g0 + gap, x1 - t : x1] = False
    elif side == "top":
        occ[y0 : y0 + t, x0 + g0 : x0 + g0 + gap] = False
    elif side == "bottom":
        occ[y1 - t : y1, x0 + g0 : x0 + g0 + gap] = False
    else:
        raise MapGenerationError(f"unknown side {side!r}")
    return occ, {"trap_box": (x0, y0, x1, y1), "thickness": t, "opening_side": side, "opening": gap}


def _narrow_gaps(rng, width, height, n_walls=2, gap=None, thickness=None):
    """Full-height vertical walls, each with one narrow gap."""
    t = thickness or _scale(width, height, 1 / 40)
    gap = gap or max(1, min(width, height) // 32)
    if gap >= height:
        raise MapGenerationError("gap wider than the map")
    occ = np.zeros((height, width), dtype=bool)
    spacing = width / (n_walls + 1)
    gaps = []
    for k in range(n_walls):
        x = int(round(spacing * (k + 1))) - t // 2
        g = int(rng.integers(1, height - gap))
        occ[:, x : x + t] = True
        occ[g : g + gap, x : x + t] = False
        gaps.append((x, g))
    return occ, {"gaps": gaps, "gap": gap}


_GENERATORS = {
    MapType.RANDOM_RECTS: _random_rects,
    MapType.WALLS: _walls,
    MapType.MAZE: _maze,
    MapType.BUG_TRAP: _bug_trap,
    MapType.NARROW_GAPS: _narrow_gaps,
}
_FAMILY_SALT = {m: i + 1 for i, m in enumerate(MapType)}


# --------------------------------------------------------------------------
# image I/O (binary netpbm)

_HEADER = re.compile(rb"\A(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def _parse_netpbm(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    m = _HEADER.match(data)
    if m is None or m.group(1) != magic:
        raise ImageFormatError(f"not a binary {magic.decode()} image")
    w, h, maxval = (int(g) for g in m.group(2, 3, 4))
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}")
    payload = data[m.end() :]
    need = w * h * channels
    if len(payload) != need:
        raise ImageFormatError(f"payload has {len(payload)} bytes, expected {need}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def save_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("save_ppm expects an (H, W, 3) uint8 image")
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def load_ppm(data: bytes) -> np.ndarray:
    return _parse_netpbm(data, b"P6", 3)


def save_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("save_pgm expects an (H, W) uint8 image")
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def load_pgm(data: bytes) -> np.ndarray:
    return _parse_netpbm(data, b"P5", 1)


def map_to_pgm(gmap: GridMap) -> bytes:
    return save_pgm(np.where(gmap.occupancy, 255, 0).astype(np.uint8))


def map_from_pgm(data: bytes, **kwargs) -> GridMap:
    return GridMap.from_occupancy(load_pgm(data) >= 128, **kwargs)


def write_map(gmap: GridMap, path: str | Path) -> None:
    Path(path).write_bytes(map_to_pgm(gmap))


def read_map(path: str | Path) -> GridMap:
    return map_from_pgm(Path(path).read_bytes())


def map_image(gmap: GridMap) -> np.ndarray:
    """RGB rendering: white free space, black obstacles."""
    img = np.full((gmap.height, gmap.width, 3), 255, dtype=np.uint8)
    img[gmap.occupancy] = 0
    return img


def map_from_image(img: np.ndarray) -> GridMap:
    return GridMap.from_occupancy(np.asarray(img).mean(axis=2) < 128)
