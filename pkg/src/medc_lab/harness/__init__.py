from .config import (BASELINES, ConfigError, ScenarioConfig, expand_sources, parse_env, parse_scenario,
                     parse_scenario_text)
from .experts import expert_identity, resolve_experts
from .presets import DEFAULT_SEEDS, PRESETS, expert_stage, preset_scenarios, replicate_figure
from .runner import CSV_HEADER, RunOutcome, SeedOutcome, aggregate, read_curve, run_scenario, run_seed
