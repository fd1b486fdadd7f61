"""Run a scenario: one training run per seed, curve CSVs, a median CSV and final packages."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from medc_lab.medc import IlHook, MedcHook, il_hook_factory, medc_hook_factory, train_frl
from medc_lab.package import ModelPackage, write_package
from medc_lab.registry import canonical_json
from medc_lab.trainer import EvalReport, TrainResult, spec_for_env, train

from .config import ScenarioConfig
from .experts import expert_identity, resolve_experts

log = logging.getLogger(__name__)

CSV_HEADER = ("step", "mean_episode_length", "mean_return", "episodes", "seed")
GUIDANCE_HEADER = ("update", "guided_agent_steps", "top_passed", "expert_used", "violations")
MANIFEST_VERSION = 1
# modules whose behaviour determines training outputs; editing any of them invalidates cached seeds
CORE_MODULES = ("autodiff.py", "network.py", "optim.py", "trainer.py", "medc.py", "package.py",
                "envs/base.py", "envs/grid.py", "envs/target.py", "envs/fleet.py", "envs/maze.py")


def code_digest() -> str:
    root = Path(__file__).resolve().parent.parent
    h = hashlib.sha256()
    for name in CORE_MODULES:
        h.update(name.encode() + b"\0" + (root / name).read_bytes())
    return h.hexdigest()


@dataclass
class SeedOutcome:
    seed: int
    csv_path: Path
    package_path: Path
    reports: list
    guidance_path: Path | None = None
    reused: bool = False


@dataclass
class RunOutcome:
    config: ScenarioConfig
    seeds: list = field(default_factory=list)
    aggregate_path: Path | None = None

    def final_lengths(self) -> list[float]:
        return [s.reports[-1].mean_episode_length for s in self.seeds if s.reports]


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def curve_row(report: EvalReport, seed) -> list[str]:
    return [str(report.step), _fmt(report.mean_episode_length), _fmt(report.mean_return),
            str(report.episodes), str(seed)]


def read_curve(path) -> list[EvalReport]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EvalReport(int(r["step"]), float(r["mean_episode_length"]), float(r["mean_return"]),
                       int(float(r["episodes"]))) for r in rows]


def seed_paths(out: Path, seed: int) -> dict:
    return {"csv": out / f"curve_seed{seed}.csv", "package": out / f"model_seed{seed}.medc",
            "guidance": out / f"guidance_seed{seed}.csv", "manifest": out / f"manifest_seed{seed}.json"}


def run_key(cfg: ScenarioConfig, seed: int, experts) -> str:
    """Digest of everything that determines a seed's outputs."""
    d = cfg.to_dict()
    for k in ("output", "workers", "seeds", "name", "expert_sources", "registry_dir"):
        d.pop(k)
    d["seed"] = seed
    d["experts"] = expert_identity(experts)
    d["manifest_version"] = MANIFEST_VERSION
    d["code"] = code_digest()
    return hashlib.sha256(canonical_json(d).encode()).hexdigest()


def guidance_table(hook, horizon: int) -> list[tuple]:
    """Per-update counts from a MEDC hook's log."""
    a = hook.log.arrays()
    if a["step"].size == 0:
        return []
    bins = a["step"] // horizon
    rows = []
    for u in np.unique(bins):
        m = bins == u
        viol = a["expert_used"][m] & (a["own_prob"][m] < hook.log.threshold)
        rows.append((int(u), int(m.sum()), int(a["top_passed"][m].sum()),
                     int(a["expert_used"][m].sum()), int(viol.sum())))
    return rows


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _train(cfg: ScenarioConfig, seed: int, experts, sink) -> TrainResult:
    ppo = cfg.ppo.__class__(**{**cfg.ppo.__dict__, "seed": seed})
    env = cfg.run_env()
    if cfg.baseline in ("sparse", "rs"):
        return train(env, ppo, sink=sink)
    if cfg.baseline == "medc":
        return train(env, ppo, medc_hook_factory(experts, cfg.medc), sink=sink)
    if cfg.baseline == "il":
        return train(env, ppo, il_hook_factory(experts, cfg.medc), sink=sink)
    return train_frl([env] + list(cfg.users), ppo, focus=0, sink=sink)


def run_seed(cfg: ScenarioConfig, seed: int, experts=None, resume: bool = True) -> SeedOutcome:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    paths = seed_paths(out, seed)
    if experts is None:
        experts = resolve_experts(cfg.expert_sources, cfg.env, cfg.registry_dir) \
            if cfg.baseline in ("medc", "il") else []
    key = run_key(cfg, seed, experts)
    if resume and paths["manifest"].exists():
        manifest = json.loads(paths["manifest"].read_text())
        if manifest.get("key") == key and manifest.get("status") == "complete" \
                and paths["csv"].exists() and paths["package"].exists():
            log.info("%s seed %d: reusing completed run", cfg.name, seed)
            return SeedOutcome(seed, paths["csv"], paths["package"], read_curve(paths["csv"]),
                               paths["guidance"] if paths["guidance"].exists() else None, True)

    reports = []
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        fh.flush()

        def sink(report):
            reports.append(report)
            writer.writerow(curve_row(report, seed))
            fh.flush()

        try:
            result = _train(cfg, seed, experts, sink)
        except BaseException as exc:
            fh.flush()
            paths["manifest"].write_text(json.dumps(
                {"key": key, "seed": seed, "status": "failed", "error": repr(exc),
                 "reports": len(reports)}, sort_keys=True, indent=1) + "\n")
            raise

    env = cfg.run_env()
    spec = spec_for_env(env)
    meta = {"application": env.kind, "environment_details": list(env.environment_details()),
            "description": f"{cfg.name} seed {seed} ({cfg.baseline})", "network_spec": spec.to_dict(),
            "training_steps": len(result.updates) * cfg.ppo.horizon, "baseline": cfg.baseline,
            "seed": seed}
    cid = write_package(paths["package"], ModelPackage(result.params, meta))
    guidance = None
    if isinstance(result.hook, MedcHook) and not isinstance(result.hook, IlHook):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(GUIDANCE_HEADER)
        w.writerows(guidance_table(result.hook, cfg.ppo.horizon))
        _write_atomic(paths["guidance"], buf.getvalue().encode())
        guidance = paths["guidance"]
    paths["manifest"].write_text(json.dumps(
        {"key": key, "seed": seed, "status": "complete", "package_cid": cid, "reports": len(reports)},
        sort_keys=True, indent=1) + "\n")
    return SeedOutcome(seed, paths["csv"], paths["package"], reports, guidance)


def _run_seed_star(args):
    return run_seed(*args)


def aggregate(outcomes, path) -> Path:
    """Median across seeds at every step all seeds reported."""
    by_step = {}
    for o in outcomes:
        for r in o.reports:
            by_step.setdefault(r.step, []).append(r)
    rows = []
    for step in sorted(by_step):
        group = by_step[step]
        if len(group) != len(outcomes):
            continue
        rows.append([str(step), _fmt(statistics.median(r.mean_episode_length for r in group)),
                     _fmt(statistics.median(r.mean_return for r in group)),
                     _fmt(statistics.median(r.episodes for r in group)), "median"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(rows)
    path = Path(path)
    _write_atomic(path, buf.getvalue().encode())
    return path


def run_scenario(cfg: ScenarioConfig, resume: bool = True) -> RunOutcome:
    experts = resolve_experts(cfg.expert_sources, cfg.env, cfg.registry_dir) \
        if cfg.baseline in ("medc", "il") else []
    Path(cfg.output).mkdir(parents=True, exist_ok=True)
    outcome = RunOutcome(cfg)
    jobs = [(cfg, s, experts, resume) for s in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            outcome.seeds = list(pool.map(_run_seed_star, jobs))
    else:
        outcome.seeds = [run_seed(*job) for job in jobs]
    outcome.aggregate_path = aggregate(outcome.seeds, Path(cfg.output) / "curve_median.csv")
    return outcome
