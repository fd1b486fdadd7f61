from __future__ import annotations

import numpy as np

from medc_lab.envs.base import EnvConfig, EnvError, GridEnv
from medc_lab.envs.grid import apply_move, bfs_distance_map, sensor_map


class TargetLocalizationEnv(GridEnv):
    """Agents search for a hidden target; readings fall off with distance and walls.

    Observation channels: own location, teammate locations, readings
    (latest reading of each visited cell, scaled by 1/strength), visit
    counts (divided by the current maximum), walls.
    """

    def __init__(self, cfg: EnvConfig):
        if cfg.kind != "target_localization":
            raise EnvError(f"config kind {cfg.kind!r} is not target_localization")
        cells = cfg.height * cfg.width
        if cfg.n_walls + cfg.n_agents + 1 > cells:
            raise EnvError(
                f"infeasible layout: {cfg.n_walls} walls + {cfg.n_agents} agents + target "
                f"exceed {cells} cells")
        super().__init__(cfg)
        self.walls = np.zeros((cfg.height, cfg.width), dtype=bool)
        self.positions: list[tuple] = []
        self.target = (0, 0)

    def _reset(self) -> None:
        cfg = self.cfg
        self.walls = np.zeros((cfg.height, cfg.width), dtype=bool)
        for cell in self._place(cfg.n_walls, self.walls):
            self.walls[cell] = True
        placed = self._place(cfg.n_agents + 1, self.walls)
        self.target, self.positions = placed[0], placed[1:]
        self.field = sensor_map(self.target, self.walls, cfg.sensor_strength, cfg.wall_attenuation)
        self.dist_map = bfs_distance_map(self.walls, self.target) if cfg.reward_mode == "shaped" else None
        self.visits = np.zeros((cfg.height, cfg.width))
        self.readings = np.zeros((cfg.height, cfg.width))
        self._record_positions()

    def _record_positions(self) -> None:
        for cell in self.positions:
            self.visits[cell] += 1.0
            self.readings[cell] = self.field[cell] / self.cfg.sensor_strength

    def _step(self, actions):
        prev = list(self.positions)
        self.positions = [apply_move(p, a, self.walls) for p, a in zip(self.positions, actions)]
        self._record_positions()
        localized = any(p == self.target for p in self.positions)
        reward = self.cfg.terminal_reward if localized else 0.0
        if self.cfg.reward_mode == "shaped":
            for old, new in zip(prev, self.positions):
                d_old, d_new = self.dist_map[old], self.dist_map[new]
                if d_old >= 0 and d_new >= 0 and d_new < d_old:
                    reward += self.cfg.shaping_beta
        return reward, localized, {"localized": localized}

    def observe(self) -> np.ndarray:
        n = self.cfg.n_agents
        own, team = self._agent_maps()
        peak = self.visits.max()
        visits = self.visits / peak if peak > 0 else self.visits
        obs = np.empty((n, 5, self.cfg.height, self.cfg.width))
        obs[:, 0] = own
        obs[:, 1] = team
        obs[:, 2] = self.readings
        obs[:, 3] = visits
        obs[:, 4] = self.walls
        return obs
