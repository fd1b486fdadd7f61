"""Scenario files: sectioned ``key = value`` text parsed with configparser.

Grammar (every key optional unless noted)::

    [scenario]
    name = fig5-medc
    baseline = medc            # sparse | medc | frl | rs | il   (required)
    environment = A2W2         # AyWz shorthand, or target_localization | fleet | maze
    seeds = 0, 1, 2, 3, 4
    output = runs/fig5-medc
    users = A1W0, A2W1, ...    # frl only: the other federated users
    workers = 1                # seeds run in parallel processes when > 1

    [environment]              # EnvConfig field overrides
    height = 10
    n_customers = 8

    [ppo]                      # PpoConfig field overrides
    total_steps = 500000

    [medc]
    expert_rate = 0.1
    q_threshold = 0.05

    [experts]
    sources = file:experts/a1w0.medc, random*5, biased:3, malicious:file:x.medc*2
    registry = registry-dir     # needed by cid: sources

Relative paths resolve against the scenario file's directory.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from medc_lab.envs import EnvConfig, EnvError
from medc_lab.envs.base import KINDS, SHORTHAND
from medc_lab.medc import MedcConfig
from medc_lab.trainer import PpoConfig

BASELINES = ("sparse", "medc", "frl", "rs", "il")
SECTIONS = ("scenario", "environment", "ppo", "medc", "experts")
SCENARIO_KEYS = ("name", "baseline", "environment", "seeds", "output", "users", "workers")
EXPERT_KEYS = ("sources", "registry")
ENV_KEYS = tuple(f.name for f in fields(EnvConfig) if f.name not in ("kind", "seed", "reward_mode"))
PPO_KEYS = tuple(f.name for f in fields(PpoConfig) if f.name != "seed")
MEDC_KEYS = tuple(f.name for f in fields(MedcConfig))
_SOURCE = re.compile(r"^(?P<body>.+?)(?:\*(?P<count>\d+))?$")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = f"{path or '<scenario>'}" + (f":{line}" if line else "")
        super().__init__(f"{where}: {message}")
        self.line = line


@dataclass
class ScenarioConfig:
    name: str
    baseline: str
    env: EnvConfig
    ppo: PpoConfig = field(default_factory=PpoConfig)
    medc: MedcConfig = field(default_factory=MedcConfig)
    expert_sources: list = field(default_factory=list)
    registry_dir: str | None = None
    seeds: list = field(default_factory=lambda: [0])
    output: str = "runs"
    users: list = field(default_factory=list)
    workers: int = 1

    def __post_init__(self):
        if self.baseline not in BASELINES:
            raise ConfigError(f"unknown baseline {self.baseline!r}; expected one of {', '.join(BASELINES)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"duplicate seeds in {self.seeds}")
        if self.baseline in ("medc", "il") and not self.expert_sources:
            raise ConfigError(f"baseline {self.baseline} needs [experts] sources")
        if self.baseline == "frl" and not self.users:
            raise ConfigError("baseline frl needs a users list")
        if self.baseline == "rs" and self.env.kind != "target_localization":
            raise ConfigError("reward shaping is defined for target localization only")

    def run_env(self) -> EnvConfig:
        """Environment as trained (the rs baseline switches on shaped reward)."""
        return replace(self.env, reward_mode="shaped" if self.baseline == "rs" else "sparse")

    def to_dict(self) -> dict:
        return {
            "name": self.name, "baseline": self.baseline, "env": self.env.to_dict(),
            "ppo": self.ppo.__dict__.copy(), "medc": self.medc.__dict__.copy(),
            "expert_sources": list(self.expert_sources), "registry_dir": self.registry_dir,
            "seeds": list(self.seeds), "output": self.output,
            "users": [u.to_dict() for u in self.users], "workers": self.workers,
        }


def _line_index(text: str) -> dict:
    """(section, key) -> 1-based line number, plus (section, None) for headers."""
    index, section = {}, None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"^\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            index.setdefault((section, None), no)
            continue
        m = re.match(r"^([^=:]+?)\s*[=:]", line)
        if m and section is not None:
            index.setdefault((section, m.group(1).strip().lower()), no)
    return index


def _coerce(value: str, template, key: str):
    if isinstance(template, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key} expects a boolean, got {value!r}")
    if isinstance(template, int):
        try:
            return int(value)
        except ValueError:
            f = float(value)  # allows 5e5
            if not f.is_integer():
                raise ValueError(f"{key} expects an integer, got {value!r}") from None
            return int(f)
    if isinstance(template, float):
        return float(value)
    return value


def parse_env(text: str) -> EnvConfig:
    text = text.strip()
    if SHORTHAND.match(text):
        return EnvConfig.from_shorthand(text)
    if text in KINDS:
        return EnvConfig(kind=text)
    raise EnvError(f"invalid environment {text!r}; expected AyWz shorthand or one of {', '.join(KINDS)}")


def _split_list(value: str) -> list[str]:
    return [v.strip() for v in re.split(r"[,\n]", value) if v.strip()]


def expand_sources(value) -> list[str]:
    """``random*5`` -> five ``random`` entries; order is preserved."""
    items = _split_list(value) if isinstance(value, str) else list(value)
    out = []
    for item in items:
        m = _SOURCE.match(item)
        count = int(m.group("count")) if m.group("count") else 1
        if count < 1:
            raise ConfigError(f"repeat count must be positive in {item!r}")
        out.extend([m.group("body").strip()] * count)
    return out


def parse_scenario_text(text: str, base_dir: str | Path = ".", path: str | None = None) -> ScenarioConfig:
    base = Path(base_dir)
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None,
                                   strict=True, empty_lines_in_values=False)
    try:
        cp.read_string(text, source=path or "<scenario>")
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None), path) from None
    lines = _line_index(text)

    def err(msg, section, key=None):
        return ConfigError(msg, lines.get((section, key)) or lines.get((section, None)), path)

    allowed = {"scenario": SCENARIO_KEYS, "environment": ENV_KEYS, "ppo": PPO_KEYS,
               "medc": MEDC_KEYS, "experts": EXPERT_KEYS}
    for section in cp.sections():
        if section not in allowed:
            raise err(f"unknown section [{section}]; expected one of {', '.join(SECTIONS)}", section)
        for key in cp[section]:
            if key not in allowed[section]:
                raise err(f"unknown key {key!r} in [{section}]", section, key)
    if "scenario" not in cp or "baseline" not in cp["scenario"]:
        raise ConfigError("missing required key 'baseline' in [scenario]", lines.get(("scenario", None)), path)

    sc = cp["scenario"]
    try:
        env = parse_env(sc.get("environment", "A1W0"))
    except EnvError as exc:
        raise err(str(exc), "scenario", "environment") from None

    def overrides(section, template_obj):
        out = {}
        if section not in cp:
            return out
        for key, value in cp[section].items():
            try:
                out[key] = _coerce(value, getattr(template_obj, key), key)
            except ValueError as exc:
                raise err(f"bad value for {key}: {exc}", section, key) from None
        return out

    try:
        env = replace(env, **overrides("environment", env))
    except EnvError as exc:
        raise err(str(exc), "environment") from None
    try:
        ppo = replace(PpoConfig(), **overrides("ppo", PpoConfig()))
    except ValueError as exc:
        raise err(str(exc), "ppo") from None
    try:
        medc = MedcConfig(**overrides("medc", MedcConfig()))
    except ValueError as exc:
        raise err(str(exc), "medc") from None

    try:
        seeds = [int(s) for s in _split_list(sc.get("seeds", "0"))]
    except ValueError:
        raise err(f"seeds must be integers, got {sc.get('seeds')!r}", "scenario", "seeds") from None
    users = []
    for u in _split_list(sc.get("users", "")):
        try:
            users.append(replace(parse_env(u), height=env.height, width=env.width,
                                 max_episode_length=env.max_episode_length))
        except EnvError as exc:
            raise err(str(exc), "scenario", "users") from None

    sources, registry = [], None
    if "experts" in cp:
        try:
            sources = expand_sources(cp["experts"].get("sources", ""))
        except ConfigError as exc:
            raise err(str(exc), "experts", "sources") from None
        sources = [_resolve_source_path(s, base) for s in sources]
        if "registry" in cp["experts"]:
            registry = str(base / cp["experts"]["registry"])

    try:
        workers = int(sc.get("workers", "1"))
    except ValueError:
        raise err("workers must be an integer", "scenario", "workers") from None
    try:
        return ScenarioConfig(
            name=sc.get("name", Path(path).stem if path else "scenario"),
            baseline=sc["baseline"].strip(), env=env, ppo=ppo, medc=medc,
            expert_sources=sources, registry_dir=registry, seeds=seeds,
            output=str(base / sc.get("output", "runs")), users=users, workers=max(1, workers))
    except ConfigError as exc:
        raise err(str(exc).split(": ", 1)[1], "scenario", "baseline") from None


def _resolve_source_path(source: str, base: Path) -> str:
    prefix, _, rest = source.partition(":")
    if prefix == "file":
        return f"file:{base / rest}"
    if prefix == "malicious" and rest.startswith("file:"):
        return f"malicious:file:{base / rest[5:]}"
    return source


def parse_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read scenario: {exc.strerror}", None, str(path)) from None
    return parse_scenario_text(text, path.parent, str(path))
