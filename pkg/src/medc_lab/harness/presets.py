"""Scaled scenario batches mirroring the published comparisons.

Every preset works on a 10x10 grid. Scenario output directories are named
after their configuration and live under one root, so presets sharing a
scenario (e.g. the sparse A2W2 baseline) reuse the same completed runs.
"""
from __future__ import annotations

import csv
import io
from pathlib import Path

from medc_lab.envs import EnvConfig
from medc_lab.medc import MedcConfig
from medc_lab.trainer import PpoConfig

from .config import ConfigError, ScenarioConfig
from .runner import RunOutcome, _write_atomic, run_scenario

PRESETS = ("fig5", "fig7", "fig8-frl", "fig8-il", "fleet", "maze")
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
BIASED_ACTIONS = (1, 3, 5, 7, 2)  # one fixed direction per biased expert
FRL_USERS = ("A1W0", "A1W1", "A1W2", "A2W0", "A2W1", "A3W0", "A3W2")  # plus the A2W2 focus user


def _scenario(root: Path, name: str, baseline: str, env: EnvConfig, ppo: PpoConfig, seeds,
              sources=(), users=()) -> ScenarioConfig:
    return ScenarioConfig(name=name, baseline=baseline, env=env, ppo=ppo, medc=MedcConfig(),
                          expert_sources=list(sources), seeds=list(seeds), output=str(root / name),
                          users=list(users))


def _ppo(total_steps: int, overrides) -> PpoConfig:
    return PpoConfig(**{**(overrides or {}), "total_steps": total_steps})


def expert_stage(name: str, root, expert_steps: int = 2_000_000, ppo_overrides=None) -> ScenarioConfig:
    """Single-agent run whose seed-0 package becomes the proper expert."""
    root = Path(root)
    envs = {"fleet": EnvConfig(kind="fleet", n_agents=1, n_customers=8),
            "maze": EnvConfig(kind="maze", n_agents=1)}
    env = envs.get(name, EnvConfig.from_shorthand("A1W0"))
    tag = {"fleet": "fleet-a1", "maze": "maze-a1"}.get(name, "a1w0")
    return _scenario(root, f"expert-{tag}", "sparse", env, _ppo(expert_steps, ppo_overrides), [0])


def preset_scenarios(name: str, root, seeds=DEFAULT_SEEDS, total_steps: int = 500_000,
                     expert: str | None = None, ppo_overrides=None) -> list[ScenarioConfig]:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    root = Path(root)
    if expert is None:
        expert = str(Path(expert_stage(name, root).output) / "model_seed0.medc")
    ppo = _ppo(total_steps, ppo_overrides)
    proper = [f"file:{expert}"]
    if name == "fleet":
        env = EnvConfig(kind="fleet", n_agents=3, n_customers=8)
        return [_scenario(root, "fleet-a3-sparse", "sparse", env, ppo, seeds),
                _scenario(root, "fleet-a3-medc", "medc", env, ppo, seeds, proper)]
    if name == "maze":
        env = EnvConfig(kind="maze", n_agents=3)
        return [_scenario(root, "maze-a3-sparse", "sparse", env, ppo, seeds),
                _scenario(root, "maze-a3-medc", "medc", env, ppo, seeds, proper)]
    env = EnvConfig.from_shorthand("A2W2")
    sparse = _scenario(root, "a2w2-sparse", "sparse", env, ppo, seeds)
    medc = _scenario(root, "a2w2-medc-proper", "medc", env, ppo, seeds, proper)
    if name == "fig5":
        return [sparse, medc]
    if name == "fig7":
        return [sparse, medc,
                _scenario(root, "a2w2-medc-random", "medc", env, ppo, seeds, ["random"] * 5),
                _scenario(root, "a2w2-medc-biased", "medc", env, ppo, seeds,
                          [f"biased:{a}" for a in BIASED_ACTIONS]),
                _scenario(root, "a2w2-medc-malicious", "medc", env, ppo, seeds,
                          [f"malicious:file:{expert}"] * 5)]
    if name == "fig8-frl":
        users = [EnvConfig.from_shorthand(u) for u in FRL_USERS]
        return [sparse, medc, _scenario(root, "a2w2-frl", "frl", env, ppo, seeds, users=users)]
    return [sparse, medc, _scenario(root, "a2w2-il", "il", env, ppo, seeds, proper)]


def comparison_csv(outcomes: dict, path) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("scenario", "step", "median_episode_length", "median_return"))
    for name, outcome in outcomes.items():
        with open(outcome.aggregate_path, newline="") as fh:
            for row in csv.DictReader(fh):
                w.writerow((name, row["step"], row["mean_episode_length"], row["mean_return"]))
    path = Path(path)
    _write_atomic(path, buf.getvalue().encode())
    return path


def replicate_figure(name: str, root, seeds=DEFAULT_SEEDS, total_steps: int = 500_000,
                     expert: str | None = None, expert_steps: int = 2_000_000,
                     resume: bool = True, ppo_overrides=None) -> dict[str, RunOutcome]:
    """Run a preset batch (training its expert first if none is given)."""
    root = Path(root)
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    outcomes = {}
    if expert is None:
        stage = expert_stage(name, root, expert_steps, ppo_overrides)
        outcomes[stage.name] = run_scenario(stage, resume)
        expert = str(outcomes[stage.name].seeds[0].package_path)
    for cfg in preset_scenarios(name, root, seeds, total_steps, expert, ppo_overrides):
        outcomes[cfg.name] = run_scenario(cfg, resume)
    comparison_csv({k: v for k, v in outcomes.items() if not k.startswith("expert-")},
                   root / f"{name}-comparison.csv")
    return outcomes
