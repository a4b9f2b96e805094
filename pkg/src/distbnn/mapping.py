"""Synthetic 2D floor plans, range sensing and occupancy samples.

World coordinates are meters with the origin at the grid's lower-left
corner; cell ``(row, col)`` covers ``[col*res, (col+1)*res) x [row*res,
(row+1)*res)``. Samples fed to the network are normalized to ``[-1, 1]^2``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

MIN_FREE_FRACTION = 0.3


class MapError(ValueError):
    pass


@dataclass(frozen=True)
class MapConfig:
    width: int = 64
    height: int = 64
    resolution: float = 0.125
    room_count: int = 4
    door_width: int = 3

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise MapError("width and height must be >= 16")
        if self.room_count < 1:
            raise MapError("room_count must be >= 1")
        if self.door_width < 1 or not self.resolution > 0:
            raise MapError("door_width must be >= 1 and resolution positive")


@dataclass(frozen=True)
class SensorConfig:
    n_rays: int = 360
    max_range: float = 8.0
    noise_sigma: float = 0.02
    pose_spacing: float = 0.25
    free_points_per_ray: int = 4


@dataclass
class OccupancyGrid:
    cells: np.ndarray  # bool, (height, width), True = occupied
    resolution: float
    rooms: list = field(default_factory=list)  # (col0, row0, col1, row1) inclusive free rectangles

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def extent(self) -> tuple[float, float]:
        return self.width * self.resolution, self.height * self.resolution

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(y / self.resolution)), int(math.floor(x / self.resolution))

    def occupied_at(self, x, y) -> np.ndarray:
        """Vectorized lookup; points outside the grid count as occupied."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        col = np.floor(x / self.resolution).astype(int)
        row = np.floor(y / self.resolution).astype(int)
        inside = (row >= 0) & (row < self.height) & (col >= 0) & (col < self.width)
        out = np.ones(x.shape, dtype=bool)
        out[inside] = self.cells[row[inside], col[inside]]
        return out

    def free_fraction(self) -> float:
        return float((~self.cells).mean())

    def check_invariants(self) -> None:
        c = self.cells
        if not (c[0].all() and c[-1].all() and c[:, 0].all() and c[:, -1].all()):
            raise MapError("outer boundary is not fully occupied")
        labels, n = ndimage.label(~c)
        if n == 0:
            raise MapError("no free space")
        largest = np.bincount(labels.ravel())[1:].max()
        if largest < MIN_FREE_FRACTION * c.size:
            raise MapError("largest free region covers less than 30% of cells")


# ---------------------------------------------------------------------------
# floor plans

def _try_floorplan(rng: np.random.Generator, cfg: MapConfig) -> OccupancyGrid:
    cells = np.zeros((cfg.height, cfg.width), dtype=bool)
    cells[0, :] = cells[-1, :] = cells[:, 0] = cells[:, -1] = True
    rooms = [(1, 1, cfg.width - 2, cfg.height - 2)]
    doors: list[tuple[int, int]] = []  # door cells (row, col)
    min_side = cfg.door_width + 4

    while len(rooms) < cfg.room_count:
        # split the largest splittable room along its longer side
        order = sorted(range(len(rooms)), key=lambda i: -((rooms[i][2] - rooms[i][0] + 1) * (rooms[i][3] - rooms[i][1] + 1)))
        for i in order:
            c0, r0, c1, r1 = rooms[i]
            w, h = c1 - c0 + 1, r1 - r0 + 1
            vertical = w >= h  # wall is a column
            span = w if vertical else h
            if span >= 2 * 3 + 1 and (h if vertical else w) >= min_side:
                break
        else:
            raise MapError("no room large enough to split")
        rooms.pop(i)
        lo, hi = (c0, c1) if vertical else (r0, r1)
        candidates = [p for p in range(lo + 3, hi - 2)]
        # never place a wall flush against an existing door opening
        if vertical:
            candidates = [p for p in candidates if (r0 - 1, p) not in doors and (r1 + 1, p) not in doors]
        else:
            candidates = [p for p in candidates if (p, c0 - 1) not in doors and (p, c1 + 1) not in doors]
        if not candidates:
            raise MapError("no admissible wall position")
        pos = int(rng.choice(candidates))
        along_lo, along_hi = (r0, r1) if vertical else (c0, c1)
        door_start = int(rng.integers(along_lo, along_hi - cfg.door_width + 2))
        door = range(door_start, door_start + cfg.door_width)
        for a in range(along_lo, along_hi + 1):
            if a in door:
                doors.append((a, pos) if vertical else (pos, a))
                continue
            if vertical:
                cells[a, pos] = True
            else:
                cells[pos, a] = True
        if vertical:
            rooms += [(c0, r0, pos - 1, r1), (pos + 1, r0, c1, r1)]
        else:
            rooms += [(c0, r0, c1, pos - 1), (c0, pos + 1, c1, r1)]

    grid = OccupancyGrid(cells, cfg.resolution, sorted(rooms))
    grid.check_invariants()
    labels, n = ndimage.label(~cells)
    if n != 1:
        raise MapError("free space is not connected")
    return grid


def generate_floorplan(seed: int, cfg: MapConfig = MapConfig()) -> OccupancyGrid:
    """Recursive axis-aligned subdivision into ``room_count`` rooms joined by doors."""
    rng = np.random.default_rng(seed)
    last = None
    for _ in range(100):
        try:
            return _try_floorplan(rng, cfg)
        except MapError as exc:
            last = exc
    raise MapError(f"could not build a valid floor plan in 100 attempts: {last}")


# ---------------------------------------------------------------------------
# trajectories

@dataclass(frozen=True)
class Trajectory:
    agent: int
    waypoints: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not self.waypoints:
            raise MapError("trajectory needs at least one waypoint")

    def length(self) -> float:
        w = np.asarray(self.waypoints)
        return float(np.linalg.norm(np.diff(w, axis=0), axis=1).sum()) if len(w) > 1 else 0.0

    def resample(self, spacing: float) -> np.ndarray:
        """Poses every ``spacing`` meters of arc length, starting at the first waypoint."""
        w = np.asarray(self.waypoints, dtype=np.float64)
        if len(w) == 1:
            return w.copy()
        seg = np.linalg.norm(np.diff(w, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        s = np.arange(0.0, cum[-1] + 1e-12, spacing)
        return np.column_stack([np.interp(s, cum, w[:, 0]), np.interp(s, cum, w[:, 1])])


def segment_visible(grid: OccupancyGrid, a, b, step: float | None = None) -> bool:
    step = step or grid.resolution / 4
    a, b = np.asarray(a, float), np.asarray(b, float)
    n = max(2, int(np.linalg.norm(b - a) / step) + 2)
    t = np.linspace(0.0, 1.0, n)
    pts = a[None, :] + t[:, None] * (b - a)[None, :]
    return not grid.occupied_at(pts[:, 0], pts[:, 1]).any()


def validate_trajectory(grid: OccupancyGrid, traj: Trajectory) -> None:
    for p in traj.waypoints:
        if grid.occupied_at(p[0], p[1]):
            raise MapError(f"agent {traj.agent}: waypoint {p} is not in free space")
    for a, b in zip(traj.waypoints, traj.waypoints[1:]):
        if not segment_visible(grid, a, b):
            raise MapError(f"agent {traj.agent}: waypoints {a} and {b} are not mutually visible")


def room_loop_trajectories(grid: OccupancyGrid, agent_count: int, inset_cells: float = 1.5) -> list[Trajectory]:
    """One closed rectangular loop per agent, agents assigned to rooms round-robin.

    When agents outnumber rooms, later laps in the same room use a deeper
    inset so no two agents share a path.
    """
    res = grid.resolution
    rooms = grid.rooms or [(1, 1, grid.width - 2, grid.height - 2)]
    trajs = []
    for agent in range(agent_count):
        c0, r0, c1, r1 = rooms[agent % len(rooms)]
        lap = agent // len(rooms)
        inset = (inset_cells + 1.5 * lap) * res
        x0, x1 = c0 * res + inset, (c1 + 1) * res - inset
        y0, y1 = r0 * res + inset, (r1 + 1) * res - inset
        if x1 - x0 < res or y1 - y0 < res:
            cx, cy = (c0 + c1 + 1) * res / 2, (r0 + r1 + 1) * res / 2
            wps = ((cx, cy),)
        else:
            wps = ((x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0))
        t = Trajectory(agent, wps)
        validate_trajectory(grid, t)
        trajs.append(t)
    return trajs


# ---------------------------------------------------------------------------
# range sensing

@dataclass
class Scan:
    pose: tuple[float, float]
    angles: np.ndarray
    ranges: np.ndarray
    hit_flags: np.ndarray
    max_range: float
    extent: tuple[float, float]

    def __post_init__(self):
        if not (len(self.angles) == len(self.ranges) == len(self.hit_flags)):
            raise MapError("angles, ranges and hit_flags differ in length")
        if (np.asarray(self.ranges) < 0).any():
            raise MapError("negative range")


def cast_rays(grid: OccupancyGrid, pose, angles, max_range: float) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free grid traversal for many rays from one pose.

    Returns the distance to the boundary of the first occupied cell (or
    ``max_range``) and whether that boundary lies within ``max_range``.
    """
    x, y = float(pose[0]), float(pose[1])
    if grid.occupied_at(x, y):
        raise MapError(f"pose {pose} is inside an occupied cell")
    res = grid.resolution
    angles = np.asarray(angles, dtype=np.float64).reshape(-1)
    dx, dy = np.cos(angles), np.sin(angles)
    n = angles.size
    row0, col0 = grid.cell_of(x, y)
    col = np.full(n, col0)
    row = np.full(n, row0)
    step_c = np.sign(dx).astype(int)
    step_r = np.sign(dy).astype(int)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta_c = np.where(dx != 0, res / np.abs(dx), np.inf)
        t_delta_r = np.where(dy != 0, res / np.abs(dy), np.inf)
        t_max_c = np.where(dx > 0, ((col0 + 1) * res - x) / dx, np.where(dx < 0, (col0 * res - x) / dx, np.inf))
        t_max_r = np.where(dy > 0, ((row0 + 1) * res - y) / dy, np.where(dy < 0, (row0 * res - y) / dy, np.inf))
    dist = np.full(n, max_range)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    while active.any():
        idx = np.flatnonzero(active)
        use_c = t_max_c[idx] < t_max_r[idx]
        t = np.where(use_c, t_max_c[idx], t_max_r[idx])
        ic, ir = idx[use_c], idx[~use_c]
        col[ic] += step_c[ic]
        t_max_c[ic] += t_delta_c[ic]
        row[ir] += step_r[ir]
        t_max_r[ir] += t_delta_r[ir]
        beyond = t > max_range
        inside = (row[idx] >= 0) & (row[idx] < grid.height) & (col[idx] >= 0) & (col[idx] < grid.width)
        occ = np.ones(idx.size, dtype=bool)
        occ[inside] = grid.cells[row[idx][inside], col[idx][inside]]
        stop_hit = occ & ~beyond
        dist[idx[stop_hit]] = t[stop_hit]
        hit[idx[stop_hit]] = True
        active[idx[stop_hit | beyond]] = False
    return dist, hit


def raycast(grid: OccupancyGrid, pose, angle: float, max_range: float, noise_sigma: float = 0.0, rng=None):
    d, h = cast_rays(grid, pose, [angle], max_range)
    r = float(d[0])
    if noise_sigma > 0:
        r = float(np.clip(r + rng.normal(0.0, noise_sigma), 0.0, max_range))
    return r, bool(h[0])


def take_scan(grid: OccupancyGrid, pose, sensor: SensorConfig, rng: np.random.Generator) -> Scan:
    angles = np.linspace(0.0, 2 * np.pi, sensor.n_rays, endpoint=False)
    dist, hit = cast_rays(grid, pose, angles, sensor.max_range)
    if sensor.noise_sigma > 0:
        dist = np.clip(dist + rng.normal(0.0, sensor.noise_sigma, dist.shape), 0.0, sensor.max_range)
    return Scan((float(pose[0]), float(pose[1])), angles, dist, hit, sensor.max_range, grid.extent)


# ---------------------------------------------------------------------------
# samples

@dataclass
class SampleSet:
    points: np.ndarray  # (N, 2), normalized to [-1, 1]
    labels: np.ndarray  # (N,), 0 free / 1 occupied

    def __len__(self) -> int:
        return self.labels.shape[0]

    @classmethod
    def concat(cls, sets) -> "SampleSet":
        sets = list(sets)
        if not sets:
            return cls(np.zeros((0, 2)), np.zeros(0, dtype=np.int8))
        return cls(np.concatenate([s.points for s in sets]), np.concatenate([s.labels for s in sets]))

    def subset(self, mask) -> "SampleSet":
        return SampleSet(self.points[mask], self.labels[mask])

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "label"])
            for (x, y), lab in zip(self.points, self.labels):
                w.writerow([repr(float(x)), repr(float(y)), int(lab)])

    @classmethod
    def from_csv(cls, path) -> "SampleSet":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, :2].copy(), data[:, 2].astype(np.int8))


def normalize(xy, extent) -> np.ndarray:
    xy = np.asarray(xy, dtype=np.float64)
    scale = np.asarray(extent, dtype=np.float64)
    return np.clip(2.0 * xy / scale - 1.0, -1.0, 1.0)


def denormalize(points, extent) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) + 1.0) * np.asarray(extent, dtype=np.float64) / 2.0


def scan_to_samples(scan: Scan, free_points_per_ray: int = 4) -> SampleSet:
    """Free points evenly inside each ray, plus the endpoint of every hit ray."""
    if free_points_per_ray < 1:
        raise MapError("free_points_per_ray must be >= 1")
    k = free_points_per_ray
    frac = np.arange(1, k + 1) / (k + 1)
    ranges = np.asarray(scan.ranges, dtype=np.float64)
    dirs = np.column_stack([np.cos(scan.angles), np.sin(scan.angles)])
    origin = np.asarray(scan.pose, dtype=np.float64)
    pts, labels = [], []
    for i in range(ranges.size):
        d = ranges[i] * frac
        pts.append(origin + d[:, None] * dirs[i])
        labels.append(np.zeros(k, dtype=np.int8))
        if scan.hit_flags[i]:
            pts.append((origin + ranges[i] * dirs[i])[None, :])
            labels.append(np.ones(1, dtype=np.int8))
    world = np.concatenate(pts) if pts else np.zeros((0, 2))
    return SampleSet(normalize(world, scan.extent), np.concatenate(labels) if labels else np.zeros(0, np.int8))


def validation_points(grid: OccupancyGrid, n: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """``n x n`` regular lattice of sub-cell centers; row-major with y outermost."""
    w, h = grid.extent
    xs = (np.arange(n) + 0.5) * w / n
    ys = (np.arange(n) + 0.5) * h / n
    X, Y = np.meshgrid(xs, ys)
    labels = grid.occupied_at(X.ravel(), Y.ravel()).astype(np.int8)
    return normalize(np.column_stack([X.ravel(), Y.ravel()]), grid.extent), labels


@dataclass
class Datasets:
    agents: list[SampleSet]
    validation: SampleSet
    validation_shape: tuple[int, int]


def build_agent_datasets(
    grid: OccupancyGrid,
    trajectories: list[Trajectory],
    sensor: SensorConfig,
    rng: np.random.Generator,
    validation_size: int = 64,
) -> Datasets:
    agents = []
    for traj in trajectories:
        validate_trajectory(grid, traj)
        scans = [take_scan(grid, pose, sensor, rng) for pose in traj.resample(sensor.pose_spacing)]
        agents.append(SampleSet.concat(scan_to_samples(s, sensor.free_points_per_ray) for s in scans))
    pts, labels = validation_points(grid, validation_size)
    return Datasets(agents, SampleSet(pts, labels), (validation_size, validation_size))


# ---------------------------------------------------------------------------
# plain-text graymap I/O (P2). Row 0 of the file is grid row 0 (y = 0).

def write_pgm(path, values: np.ndarray, maxval: int = 255) -> None:
    values = np.asarray(values)
    h, w = values.shape
    lines = ["P2", f"{w} {h}", str(maxval)]
    lines += [" ".join(str(int(v)) for v in row) for row in values]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0]
        tokens += line.split()
    if not tokens or tokens[0] != "P2":
        raise MapError(f"{path}: not a plain P2 graymap")
    w, h, _maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if data.size != w * h:
        raise MapError(f"{path}: expected {w * h} pixels, found {data.size}")
    return data.reshape(h, w)


def save_grid(grid: OccupancyGrid, path) -> None:
    """Write ``path`` (P2, 0 free / 255 occupied) and ``path + '.meta'`` with the resolution."""
    write_pgm(path, np.where(grid.cells, 255, 0))
    meta = [f"resolution={float(grid.resolution)!r}"]
    meta += [f"room={c0},{r0},{c1},{r1}" for c0, r0, c1, r1 in grid.rooms]
    Path(str(path) + ".meta").write_text("\n".join(meta) + "\n")


def load_grid(path) -> OccupancyGrid:
    cells = read_pgm(path) >= 128
    res, rooms = None, []
    for line in Path(str(path) + ".meta").read_text().splitlines():
        key, _, val = line.partition("=")
        if key == "resolution":
            res = float(val)
        elif key == "room":
            rooms.append(tuple(int(v) for v in val.split(",")))
    if res is None:
        raise MapError(f"{path}.meta: missing resolution")
    return OccupancyGrid(cells, res, rooms)
