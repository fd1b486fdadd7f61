from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from medc_lab.envs.grid import N_ACTIONS

KINDS = ("target_localization", "fleet", "maze")
SHORTHAND = re.compile(r"^A(\d+)W(\d+)$")


class EnvError(ValueError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    kind: str = "target_localization"
    height: int = 10
    width: int = 10
    n_agents: int = 1
    n_walls: int = 0
    n_customers: int = 8
    capacity: int = 2
    max_episode_length: int = 100
    reward_mode: str = "sparse"  # "sparse" or "shaped" (target localization only)
    terminal_reward: float = 1.0
    pickup_reward: float = 0.1
    clean_reward: float = 0.01
    step_cost: float = 0.005
    shaping_beta: float = 0.01
    sensor_strength: float = 100.0
    wall_attenuation: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise EnvError(f"unknown environment kind {self.kind!r}; expected one of {KINDS}")
        if self.height < 4 or self.width < 4:
            raise EnvError(f"grid must be at least 4x4, got {self.height}x{self.width}")
        if self.n_agents < 1:
            raise EnvError("need at least one agent")
        if self.n_walls < 0:
            raise EnvError("wall count must be non-negative")
        if self.max_episode_length < 1:
            raise EnvError("max episode length must be >= 1")
        if self.reward_mode not in ("sparse", "shaped"):
            raise EnvError(f"unknown reward mode {self.reward_mode!r}")
        if self.kind == "fleet" and (self.n_customers < 1 or self.capacity < 1):
            raise EnvError("fleet needs at least one customer and capacity >= 1")

    @classmethod
    def from_shorthand(cls, text: str, **overrides) -> "EnvConfig":
        """Parse ``AyWz``: target localization with y agents and z walls."""
        m = SHORTHAND.match(text.strip())
        if not m:
            raise EnvError(f"invalid environment shorthand {text!r}; expected e.g. 'A3W2'")
        return cls(kind="target_localization", n_agents=int(m.group(1)), n_walls=int(m.group(2)),
                   **overrides)

    @property
    def shorthand(self) -> str:
        return f"A{self.n_agents}W{self.n_walls}"

    def with_seed(self, seed: int) -> "EnvConfig":
        return replace(self, seed=int(seed))

    def environment_details(self) -> tuple:
        """Registry attribute tuple for this environment's application schema."""
        if self.kind == "target_localization":
            return (self.n_agents, 1, self.n_walls)
        if self.kind == "fleet":
            return (self.n_agents, self.n_customers, self.capacity)
        return (self.n_agents, self.height, self.width)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepResult:
    obs: np.ndarray  # (n_agents, C, H, W)
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


class GridEnv:
    """Shared reset/step plumbing. Subclasses implement ``_reset`` and ``_step``."""

    n_channels = 5
    n_actions = N_ACTIONS

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.t = 0
        self.done = True
        self.episode = 0
        self.trace: list | None = None

    @property
    def obs_shape(self) -> tuple:
        return (self.n_channels, self.cfg.height, self.cfg.width)

    def enable_trace(self) -> None:
        self.trace = []

    def reset(self) -> np.ndarray:
        self.t = 0
        self.done = False
        self.episode += 1
        self._reset()
        if self.trace is not None:
            self.trace.append({"episode": self.episode, "step": 0, "positions": self._positions(),
                               "actions": None, "reward": 0.0, "flag": 0})
        return self.observe()

    def step(self, actions) -> StepResult:
        if self.done:
            raise EnvError("step() called on a finished episode; call reset() first")
        actions = [int(a) for a in np.asarray(actions).reshape(-1)]
        if len(actions) != self.cfg.n_agents:
            raise EnvError(f"expected {self.cfg.n_agents} actions, got {len(actions)}")
        for a in actions:
            if not 0 <= a < N_ACTIONS:
                raise EnvError(f"action {a} out of range [0, {N_ACTIONS - 1}]")
        self.t += 1
        reward, finished, info = self._step(actions)
        truncated = not finished and self.t >= self.cfg.max_episode_length
        self.done = finished or truncated
        info.update(t=self.t, truncated=truncated)
        if self.trace is not None:
            self.trace.append({"episode": self.episode, "step": self.t, "positions": self._positions(),
                               "actions": actions, "reward": reward, "flag": int(self.done)})
        return StepResult(self.observe(), float(reward), self.done, info)

    def write_trace(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.trace or []:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    def _positions(self) -> list:
        return [list(p) for p in self.positions]

    def _place(self, n: int, exclude: np.ndarray) -> list[tuple]:
        """Sample ``n`` distinct cells where ``exclude`` is False."""
        free = np.flatnonzero(~exclude.ravel())
        if len(free) < n:
            raise EnvError(f"cannot place {n} entities: only {len(free)} free cells")
        picks = self.rng.choice(free, size=n, replace=False)
        w = self.cfg.width
        return [(int(p) // w, int(p) % w) for p in picks]

    def _agent_maps(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-agent one-hot own-location maps and teammate-presence maps."""
        n, h, w = self.cfg.n_agents, self.cfg.height, self.cfg.width
        own = np.zeros((n, h, w))
        counts = np.zeros((h, w))
        for k, (r, c) in enumerate(self.positions):
            own[k, r, c] = 1.0
            counts[r, c] += 1.0
        team = (counts[None] - own) > 0
        return own, team.astype(np.float64)

    # subclass hooks
    def _reset(self) -> None:
        raise NotImplementedError

    def _step(self, actions: list[int]) -> tuple[float, bool, dict]:
        raise NotImplementedError

    def observe(self) -> np.ndarray:
        raise NotImplementedError
