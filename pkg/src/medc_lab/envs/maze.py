from __future__ import annotations

import numpy as np

from medc_lab.envs.base import EnvConfig, EnvError, GridEnv
from medc_lab.envs.grid import apply_move, maze_generate


class MazeEnv(GridEnv):
    """Agents clean a freshly generated, initially fully dirty maze.

    A cell becomes clean when an agent occupies it after a step. Observation
    channels: own location, teammate locations, dirty cells, walls, visit
    counts (divided by the current maximum).
    """

    def __init__(self, cfg: EnvConfig):
        if cfg.kind != "maze":
            raise EnvError(f"config kind {cfg.kind!r} is not maze")
        rooms = ((cfg.height + 1) // 2) * ((cfg.width + 1) // 2)
        if rooms < cfg.n_agents:
            raise EnvError("maze too small for the number of agents")
        super().__init__(cfg)
        self.walls = np.zeros((cfg.height, cfg.width), dtype=bool)
        self.positions: list[tuple] = []

    def _reset(self) -> None:
        cfg = self.cfg
        self.walls = maze_generate(self.rng, cfg.height, cfg.width)
        self.dirty = ~self.walls
        self.positions = self._place(cfg.n_agents, self.walls)
        self.visits = np.zeros((cfg.height, cfg.width))
        for cell in self.positions:
            self.visits[cell] += 1.0

    def dirty_fraction(self) -> float:
        return float(self.dirty.sum() / (~self.walls).sum())

    def _step(self, actions):
        cfg = self.cfg
        self.positions = [apply_move(p, a, self.walls) for p, a in zip(self.positions, actions)]
        cleaned = 0
        for cell in self.positions:
            self.visits[cell] += 1.0
            if self.dirty[cell]:
                self.dirty[cell] = False
                cleaned += 1
        reward = cleaned * cfg.clean_reward - cfg.step_cost
        finished = not self.dirty.any()
        return reward, finished, {"cleaned": cleaned, "dirty_left": int(self.dirty.sum())}

    def observe(self) -> np.ndarray:
        cfg = self.cfg
        own, team = self._agent_maps()
        peak = self.visits.max()
        obs = np.empty((cfg.n_agents, 5, cfg.height, cfg.width))
        obs[:, 0] = own
        obs[:, 1] = team
        obs[:, 2] = self.dirty
        obs[:, 3] = self.walls
        obs[:, 4] = self.visits / peak if peak > 0 else self.visits
        return obs
