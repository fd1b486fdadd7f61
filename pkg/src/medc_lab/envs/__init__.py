from medc_lab.envs.base import EnvConfig, EnvError, GridEnv, StepResult
from medc_lab.envs.fleet import FleetEnv
from medc_lab.envs.grid import (
    ACTION_NAMES,
    N_ACTIONS,
    UNREACHABLE,
    bfs_distance,
    bfs_distance_map,
    is_connected,
    maze_generate,
    opposite_action,
    sensor_field,
    shaped_reward,
    walls_crossed,
)
from medc_lab.envs.maze import MazeEnv
from medc_lab.envs.target import TargetLocalizationEnv

_KINDS = {"target_localization": TargetLocalizationEnv, "fleet": FleetEnv, "maze": MazeEnv}


def make_env(cfg: EnvConfig) -> GridEnv:
    return _KINDS[cfg.kind](cfg)


__all__ = [
    "ACTION_NAMES", "N_ACTIONS", "UNREACHABLE", "EnvConfig", "EnvError", "FleetEnv", "GridEnv",
    "MazeEnv", "StepResult", "TargetLocalizationEnv", "bfs_distance", "bfs_distance_map",
    "is_connected", "make_env", "maze_generate", "opposite_action", "sensor_field",
    "shaped_reward", "walls_crossed",
]
