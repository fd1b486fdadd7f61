from __future__ import annotations

import numpy as np

from medc_lab.envs.base import EnvConfig, EnvError, GridEnv
from medc_lab.envs.grid import apply_move

WAITING, CARRIED, DELIVERED = 0, 1, 2


class FleetEnv(GridEnv):
    """Vehicles pick customers up and drop them at their destinations.

    Observation channels: own location, teammate locations, waiting
    customers, destinations of waiting customers, destinations of the
    customers this vehicle carries.
    """

    def __init__(self, cfg: EnvConfig):
        if cfg.kind != "fleet":
            raise EnvError(f"config kind {cfg.kind!r} is not fleet")
        if cfg.n_agents + cfg.n_customers > cfg.height * cfg.width:
            raise EnvError("infeasible layout: more vehicles and customers than cells")
        super().__init__(cfg)
        self.walls = np.zeros((cfg.height, cfg.width), dtype=bool)
        self.positions: list[tuple] = []

    def _reset(self) -> None:
        cfg = self.cfg
        placed = self._place(cfg.n_agents + cfg.n_customers, self.walls)
        self.positions = placed[:cfg.n_agents]
        self.pickups = placed[cfg.n_agents:]
        self.destinations = []
        for p in self.pickups:
            mask = np.zeros_like(self.walls)
            mask[p] = True
            self.destinations.append(self._place(1, mask)[0])
        self.status = [WAITING] * cfg.n_customers
        self.carrier = [-1] * cfg.n_customers
        self.loads = [0] * cfg.n_agents

    def _step(self, actions):
        cfg = self.cfg
        self.positions = [apply_move(p, a, self.walls) for p, a in zip(self.positions, actions)]
        reward = -cfg.step_cost
        picked = dropped = 0
        for v, pos in enumerate(self.positions):
            for i in range(cfg.n_customers):
                if self.status[i] == CARRIED and self.carrier[i] == v and self.destinations[i] == pos:
                    self.status[i] = DELIVERED
                    self.loads[v] -= 1
                    dropped += 1
            for i in range(cfg.n_customers):
                if self.loads[v] >= cfg.capacity:
                    break
                if self.status[i] == WAITING and self.pickups[i] == pos:
                    self.status[i] = CARRIED
                    self.carrier[i] = v
                    self.loads[v] += 1
                    picked += 1
                    reward += cfg.pickup_reward
        delivered = sum(s == DELIVERED for s in self.status)
        finished = delivered == cfg.n_customers
        if finished:
            reward += cfg.terminal_reward
        return reward, finished, {"picked": picked, "dropped": dropped, "delivered": delivered,
                                  "loads": list(self.loads)}

    def observe(self) -> np.ndarray:
        cfg = self.cfg
        own, team = self._agent_maps()
        waiting = np.zeros((cfg.height, cfg.width))
        waiting_dest = np.zeros((cfg.height, cfg.width))
        carried = np.zeros((cfg.n_agents, cfg.height, cfg.width))
        for i, s in enumerate(self.status):
            if s == WAITING:
                waiting[self.pickups[i]] = 1.0
                waiting_dest[self.destinations[i]] = 1.0
            elif s == CARRIED:
                carried[self.carrier[i]][self.destinations[i]] = 1.0
        obs = np.empty((cfg.n_agents, 5, cfg.height, cfg.width))
        obs[:, 0] = own
        obs[:, 1] = team
        obs[:, 2] = waiting
        obs[:, 3] = waiting_dest
        obs[:, 4] = carried
        return obs
