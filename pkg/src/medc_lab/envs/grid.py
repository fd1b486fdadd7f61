"""Grid geometry shared by the environments: moves, BFS distances, sensor model."""
from __future__ import annotations

import math
from collections import deque

import numpy as np

# 0 = stay, then the eight compass moves clockwise from north.
ACTION_NAMES = ("stay", "N", "NE", "E", "SE", "S", "SW", "W", "NW")
MOVES = np.array([(0, 0), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)])
N_ACTIONS = len(MOVES)

UNREACHABLE = math.inf


def opposite_action(action: int) -> int:
    """Reverse movement direction; stay maps to itself."""
    if action == 0:
        return 0
    return (action - 1 + 4) % 8 + 1


def apply_move(pos: tuple, action: int, walls: np.ndarray) -> tuple:
    """Move one cell; off-grid or wall destinations leave the agent in place."""
    dr, dc = MOVES[action]
    r, c = pos[0] + int(dr), pos[1] + int(dc)
    h, w = walls.shape
    if 0 <= r < h and 0 <= c < w and not walls[r, c]:
        return (r, c)
    return pos


def bfs_distance_map(walls: np.ndarray, source: tuple) -> np.ndarray:
    """8-connected step distance from ``source`` to every cell; -1 where unreachable or walled."""
    h, w = walls.shape
    dist = np.full((h, w), -1, dtype=np.int64)
    if walls[source]:
        return dist
    dist[source] = 0
    queue = deque([source])
    while queue:
        r, c = queue.popleft()
        d = dist[r, c] + 1
        for dr, dc in MOVES[1:]:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and dist[nr, nc] < 0 and not walls[nr, nc]:
                dist[nr, nc] = d
                queue.append((nr, nc))
    return dist


def bfs_distance(walls: np.ndarray, start: tuple, goal: tuple):
    """Shortest 8-connected wall-avoiding path length, or ``UNREACHABLE``."""
    if tuple(start) == tuple(goal):
        return 0
    d = bfs_distance_map(walls, tuple(start))[tuple(goal)]
    return UNREACHABLE if d < 0 else int(d)


def _segment_hits_cell(p0, p1, cell) -> bool:
    """True when the segment p0->p1 passes through the interior of the unit square at ``cell``."""
    lo = (cell[0] - 0.5, cell[1] - 0.5)
    hi = (cell[0] + 0.5, cell[1] + 0.5)
    t0, t1 = 0.0, 1.0
    for axis in (0, 1):
        d = p1[axis] - p0[axis]
        if d == 0.0:
            if not (lo[axis] < p0[axis] < hi[axis]):
                return False
            continue
        ta = (lo[axis] - p0[axis]) / d
        tb = (hi[axis] - p0[axis]) / d
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
        if t1 - t0 <= 1e-12:
            return False
    return True


def walls_crossed(walls: np.ndarray, source: tuple, query: tuple) -> int:
    """Number of wall cells the straight segment between two cell centres passes through."""
    if tuple(source) == tuple(query):
        return 0
    return int(sum(_segment_hits_cell(source, query, tuple(cell)) for cell in np.argwhere(walls)))


def sensor_field(target_pos: tuple, walls: np.ndarray, query_pos: tuple,
                 strength: float = 100.0, attenuation: float = 0.5) -> float:
    """Reading at ``query_pos``: strength / (1 + d^2) * attenuation ** walls_crossed."""
    d2 = float((target_pos[0] - query_pos[0]) ** 2 + (target_pos[1] - query_pos[1]) ** 2)
    return strength / (1.0 + d2) * attenuation ** walls_crossed(walls, target_pos, query_pos)


def sensor_map(target_pos: tuple, walls: np.ndarray, strength: float = 100.0,
               attenuation: float = 0.5) -> np.ndarray:
    h, w = walls.shape
    rr, cc = np.mgrid[0:h, 0:w]
    field = strength / (1.0 + (rr - target_pos[0]) ** 2 + (cc - target_pos[1]) ** 2)
    wall_cells = [tuple(x) for x in np.argwhere(walls)]
    if wall_cells:
        for r in range(h):
            for c in range(w):
                if (r, c) == tuple(target_pos):
                    continue
                hits = sum(_segment_hits_cell(target_pos, (r, c), cell) for cell in wall_cells)
                if hits:
                    field[r, c] *= attenuation ** hits
    return field


def shaped_reward(prev_positions, new_positions, target: tuple, walls: np.ndarray,
                  beta: float = 0.01, dist_map: np.ndarray | None = None) -> float:
    """+beta for each agent whose BFS distance to the target strictly decreased."""
    if dist_map is None:
        dist_map = bfs_distance_map(walls, tuple(target))
    total = 0.0
    for old, new in zip(prev_positions, new_positions):
        d_old, d_new = dist_map[tuple(old)], dist_map[tuple(new)]
        if d_old >= 0 and d_new >= 0 and d_new < d_old:
            total += beta
    return total


def maze_generate(seed, height: int, width: int) -> np.ndarray:
    """Randomised depth-first carving. Returns a boolean wall map.

    Rooms sit on even coordinates; passages are carved between neighbouring
    rooms, so every free cell is reachable from every other.
    """
    if height < 1 or width < 1:
        raise ValueError("maze dimensions must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    walls = np.ones((height, width), dtype=bool)
    rooms_r, rooms_c = (height + 1) // 2, (width + 1) // 2
    visited = np.zeros((rooms_r, rooms_c), dtype=bool)
    start = (int(rng.integers(rooms_r)), int(rng.integers(rooms_c)))
    visited[start] = True
    walls[2 * start[0], 2 * start[1]] = False
    stack = [start]
    steps = ((-1, 0), (0, 1), (1, 0), (0, -1))
    while stack:
        r, c = stack[-1]
        options = [(r + dr, c + dc) for dr, dc in steps
                   if 0 <= r + dr < rooms_r and 0 <= c + dc < rooms_c and not visited[r + dr, c + dc]]
        if not options:
            stack.pop()
            continue
        nr, nc = options[int(rng.integers(len(options)))]
        visited[nr, nc] = True
        walls[2 * nr, 2 * nc] = False
        walls[r + nr, c + nc] = False  # passage cell midway between rooms
        stack.append((nr, nc))
    return walls


def is_connected(walls: np.ndarray) -> bool:
    free = np.argwhere(~walls)
    if len(free) == 0:
        return True
    dist = bfs_distance_map(walls, tuple(free[0]))
    return bool(np.all(dist[~walls] >= 0))
