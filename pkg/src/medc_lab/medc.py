"""Multi-expert demonstration cloning and the federated / behavioural-cloning baselines."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from medc_lab.envs import EnvConfig
from medc_lab.envs.grid import N_ACTIONS, opposite_action
from medc_lab.network import (
    NetworkError,
    NetworkSpec,
    ParamSet,
    bc_loss,
    check_compatible,
    gradients,
    policy_forward,
)
from medc_lab.optim import AdamState, clip_grad_norm, optimizer_step
from medc_lab.package import ModelPackage
from medc_lab.trainer import PpoConfig, TrainResult, Trainer, sample_actions

EXPERT_KINDS = ("trained", "random", "biased", "malicious")


class ExpertError(ValueError):
    pass


@dataclass(frozen=True)
class MedcConfig:
    expert_rate: float = 0.1
    q_threshold: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.expert_rate <= 1.0:
            raise ValueError("expert_rate must lie in [0, 1]")
        if not 0.0 <= self.q_threshold <= 1.0:
            raise ValueError("q_threshold must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class ExpertHandle:
    kind: str
    params: ParamSet | None = None
    spec: NetworkSpec | None = None
    fixed_action: int | None = None
    similarity: float = 1.0
    application: str = "target_localization"
    environment_details: tuple = ()
    source: str = ""

    def __post_init__(self):
        if self.kind not in EXPERT_KINDS:
            raise ExpertError(f"unknown expert kind {self.kind!r}")
        if not np.isfinite(self.similarity) or self.similarity < 0:
            raise ExpertError(f"similarity must be finite and non-negative, got {self.similarity}")
        if self.kind in ("trained", "malicious"):
            if self.params is None or self.spec is None:
                raise ExpertError(f"{self.kind} expert needs parameters and a network spec")
            check_compatible(self.params, self.spec)
        if self.kind == "biased" and not (self.fixed_action is not None
                                          and 0 <= self.fixed_action < N_ACTIONS):
            raise ExpertError(f"biased expert needs a fixed action in [0, {N_ACTIONS - 1}]")

    @classmethod
    def trained(cls, params: ParamSet, spec: NetworkSpec, **kw) -> "ExpertHandle":
        return cls("trained", params=params, spec=spec, **kw)

    @classmethod
    def random(cls, **kw) -> "ExpertHandle":
        return cls("random", **kw)

    @classmethod
    def biased(cls, action: int, **kw) -> "ExpertHandle":
        return cls("biased", fixed_action=int(action), **kw)

    @classmethod
    def malicious(cls, base: "ExpertHandle", **kw) -> "ExpertHandle":
        if base.kind != "trained":
            raise ExpertError("a malicious expert wraps a trained expert")
        kw.setdefault("application", base.application)
        kw.setdefault("environment_details", base.environment_details)
        kw.setdefault("source", base.source)
        return cls("malicious", params=base.params, spec=base.spec, **kw)

    @classmethod
    def from_package(cls, pkg: ModelPackage, similarity: float = 1.0, source: str = "",
                     channels: int = 5) -> "ExpertHandle":
        spec = pkg.network_spec
        if spec.in_channels != channels:
            raise ExpertError(
                f"expert expects {spec.in_channels} input channels; consumer provides {channels}")
        meta = pkg.metadata
        return cls.trained(pkg.params, spec, similarity=similarity,
                           application=meta.get("application", "target_localization"),
                           environment_details=tuple(meta.get("environment_details", ())),
                           source=source)

    def with_similarity(self, similarity: float) -> "ExpertHandle":
        return ExpertHandle(self.kind, self.params, self.spec, self.fixed_action, similarity,
                            self.application, self.environment_details, self.source)


@dataclass(frozen=True)
class EpisodeMode:
    name: str  # "MDRL" or "MEDC"
    expert: ExpertHandle | None = None

    @property
    def guided(self) -> bool:
        return self.name == "MEDC"


MDRL = EpisodeMode("MDRL")


def roulette_select(experts, rng: np.random.Generator) -> ExpertHandle:
    """Pick expert i with probability R_S(i) / sum(R_S); uniform if every weight is zero."""
    if not experts:
        raise ExpertError("roulette selection needs at least one expert")
    weights = np.array([e.similarity for e in experts], dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        return experts[int(rng.integers(len(experts)))]
    spin = rng.random() * total
    idx = int(np.searchsorted(np.cumsum(weights), spin, side="right"))
    return experts[min(idx, len(experts) - 1)]


def draw_mode(cfg: MedcConfig, experts, rng: np.random.Generator) -> EpisodeMode:
    """Per-episode gate: guided with probability R_E, falling back to MDRL with no experts."""
    check = rng.random()
    if check < cfg.expert_rate and experts:
        return EpisodeMode("MEDC", roulette_select(experts, rng))
    return MDRL


def rank_actions_batch(expert: ExpertHandle, obs: np.ndarray,
                       rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Rank all actions for each observation in ``obs`` (N, C, H, W).

    Returns (rankings (N, A) best first, scores (N, A) aligned with action ids).
    """
    obs = np.asarray(obs, dtype=np.float64)
    n = obs.shape[0]
    if expert.kind in ("trained", "malicious"):
        if obs.shape[1:] != expert.spec.input_shape:
            raise ExpertError(f"observation shape {obs.shape[1:]} incompatible with expert input "
                              f"{expert.spec.input_shape}")
        try:
            scores = policy_forward(expert.params, expert.spec, obs)
        except NetworkError as exc:
            raise ExpertError(str(exc)) from exc
        rankings = np.argsort(-scores, axis=1, kind="stable")
        if expert.kind == "malicious":
            for k in range(n):
                top = opposite_action(int(rankings[k, 0]))
                rest = [a for a in rankings[k] if a != top]
                rankings[k] = [top] + rest
        return rankings, scores
    if expert.kind == "random":
        if rng is None:
            raise ExpertError("random expert needs a generator")
        rankings = np.stack([rng.permutation(N_ACTIONS) for _ in range(n)])
        scores = np.full((n, N_ACTIONS), 1.0 / N_ACTIONS)
        return rankings, scores
    # biased
    order = [expert.fixed_action] + [a for a in range(N_ACTIONS) if a != expert.fixed_action]
    scores = np.zeros((n, N_ACTIONS))
    scores[:, expert.fixed_action] = 1.0
    return np.tile(order, (n, 1)), scores


def expert_rank_actions(expert: ExpertHandle, obs: np.ndarray,
                        rng: np.random.Generator | None = None) -> tuple[list[int], np.ndarray]:
    """Ranking (best first) and per-action scores for one observation stack."""
    rankings, scores = rank_actions_batch(expert, np.asarray(obs)[None], rng)
    return [int(a) for a in rankings[0]], scores[0]


def q_filter(ranked_actions, own_dist: np.ndarray, q: float,
             rng: np.random.Generator | None = None) -> tuple[int, bool]:
    """Highest-ranked action whose own-policy probability is at least ``q``.

    Returns (action, from_expert). When nothing qualifies the action is drawn
    from ``own_dist`` instead.
    """
    for a in ranked_actions:
        if own_dist[a] >= q:
            return int(a), True
    if rng is None:
        raise ExpertError("no expert action passes the threshold and no generator to sample with")
    return int(sample_actions(np.asarray(own_dist)[None], rng)[0]), False


@dataclass
class GuidanceLog:
    """Per agent-step record of guided decisions (only steps in MEDC episodes)."""

    step: list = field(default_factory=list)
    top_passed: list = field(default_factory=list)
    expert_used: list = field(default_factory=list)
    own_prob: list = field(default_factory=list)
    threshold: float = 0.0

    def arrays(self) -> dict:
        return {"step": np.asarray(self.step, dtype=np.int64),
                "top_passed": np.asarray(self.top_passed, dtype=bool),
                "expert_used": np.asarray(self.expert_used, dtype=bool),
                "own_prob": np.asarray(self.own_prob, dtype=np.float64)}

    def violations(self) -> int:
        """Executed expert actions whose own-policy probability was below the threshold."""
        a = self.arrays()
        return int(np.sum(a["expert_used"] & (a["own_prob"] < self.threshold)))


class MedcHook:
    """Action-selection hook for ``collect_horizon`` implementing the MEDC switch."""

    def __init__(self, experts, cfg: MedcConfig, rng: np.random.Generator):
        self.experts = list(experts)
        self.cfg = cfg
        self.rng = rng
        self.mode = MDRL
        self.started = False
        self.ppo_usable = True
        self.t = 0
        self.episodes = 0
        self.guided_episodes = 0
        self.log = GuidanceLog(threshold=cfg.q_threshold)

    def begin_episode(self) -> None:
        self.started = True
        self.mode = draw_mode(self.cfg, self.experts, self.rng)
        self.episodes += 1
        self.guided_episodes += self.mode.guided

    def select(self, obs, probs, policy_rng):
        self.t += 1
        n = probs.shape[0]
        if not self.mode.guided:
            return sample_actions(probs, policy_rng), np.zeros(n, dtype=bool), None
        rankings, _ = rank_actions_batch(self.mode.expert, obs, self.rng)
        actions = np.empty(n, dtype=np.int64)
        used = np.zeros(n, dtype=bool)
        for k in range(n):
            a, from_expert = q_filter(rankings[k], probs[k], self.cfg.q_threshold, self.rng)
            actions[k], used[k] = a, from_expert
            self.log.step.append(self.t - 1)
            self.log.top_passed.append(bool(probs[k, rankings[k, 0]] >= self.cfg.q_threshold))
            self.log.expert_used.append(from_expert)
            self.log.own_prob.append(float(probs[k, a]))
        return actions, used, None

    @property
    def guided_fraction(self) -> float:
        return self.guided_episodes / self.episodes if self.episodes else 0.0


def medc_hook_factory(experts, cfg: MedcConfig):
    def build(rng, trainer=None):
        return MedcHook(experts, cfg, rng)
    return build


def medc_collect(rollout, params, spec, experts, cfg: MedcConfig, buffer, policy_rng, hook=None):
    """``collect_horizon`` with MEDC action selection; returns (buffer, hook)."""
    from medc_lab.trainer import collect_horizon

    hook = hook or MedcHook(experts, cfg, policy_rng)
    collect_horizon(rollout, params, spec, buffer, policy_rng, hook)
    return buffer, hook


# --- baselines ---------------------------------------------------------------

def frl_average(param_sets) -> ParamSet:
    """Elementwise mean of parameter sets sharing one architecture."""
    param_sets = list(param_sets)
    if not param_sets:
        raise ExpertError("nothing to average")
    first = param_sets[0]
    for other in param_sets[1:]:
        if other.names != first.names or other.shapes() != first.shapes():
            raise NetworkError("cannot average parameter sets of different architectures")
    arrays = [np.mean(np.stack(group), axis=0) for group in zip(*(p.arrays for p in param_sets))]
    return ParamSet(first.names, arrays, max(p.version for p in param_sets))


def bc_step(params: ParamSet, spec: NetworkSpec, opt: AdamState, obs, labels,
            max_grad_norm: float | None = 0.5) -> float:
    """One Adam step on mean cross-entropy to hard labels; returns the pre-step loss."""
    loss, leaves = bc_loss(params, spec, obs, labels)
    grads = gradients(loss, leaves, params)
    clip_grad_norm(grads, max_grad_norm)
    optimizer_step(params, grads, opt)
    return float(loss.data)


def bc_update(params: ParamSet, spec: NetworkSpec, opt: AdamState, expert: ExpertHandle, obs,
              rng: np.random.Generator | None = None, max_grad_norm: float | None = 0.5) -> float:
    """Clone ``expert``'s top-ranked action on ``obs`` with one gradient step."""
    rankings, _ = rank_actions_batch(expert, obs, rng)
    return bc_step(params, spec, opt, obs, rankings[:, 0], max_grad_norm)


class IlHook(MedcHook):
    """IL-assisted baseline: guided episodes follow the expert and are cloned, not reinforced."""

    def begin_episode(self) -> None:
        super().begin_episode()
        self.ppo_usable = not self.mode.guided

    def select(self, obs, probs, policy_rng):
        self.t += 1
        n = probs.shape[0]
        if not self.mode.guided:
            return sample_actions(probs, policy_rng), np.zeros(n, dtype=bool), None
        rankings, _ = rank_actions_batch(self.mode.expert, obs, self.rng)
        actions = rankings[:, 0].copy()
        return actions, np.ones(n, dtype=bool), actions

    def after_update(self, trainer: Trainer, buf) -> None:
        """Behavioural cloning over the horizon's guided samples, one pass per PPO epoch."""
        mask = buf.labels[:buf.size] >= 0
        if not mask.any():
            return
        obs = buf.obs[:buf.size][mask]
        labels = buf.labels[:buf.size][mask]
        mb = trainer.cfg.minibatch_size * buf.n_agents
        for _ in range(trainer.cfg.epochs):
            order = trainer.shuffle_rng.permutation(len(labels))
            for start in range(0, len(order), mb):
                idx = order[start:start + mb]
                bc_step(trainer.params, trainer.spec, trainer.opt, obs[idx], labels[idx],
                        trainer.cfg.max_grad_norm)


def il_hook_factory(experts, cfg: MedcConfig):
    def build(rng, trainer=None):
        return IlHook(experts, cfg, rng)
    return build


def train_frl(user_envs: list[EnvConfig], ppo_cfg: PpoConfig, focus: int = 0, sink=None,
              spec: NetworkSpec | None = None) -> TrainResult:
    """Federated baseline: every user trains locally and parameters are averaged after each update.

    Evaluation reports are produced from the perspective of ``user_envs[focus]``.
    """
    seeds = np.random.SeedSequence(ppo_cfg.seed).spawn(len(user_envs))
    trainers = []
    for env_cfg, seq in zip(user_envs, seeds):
        cfg = PpoConfig(**{**ppo_cfg.__dict__, "seed": int(seq.generate_state(1)[0])})
        trainers.append(Trainer(env_cfg, cfg, spec))
    specs = {t.spec for t in trainers}
    if len(specs) != 1:
        raise NetworkError("federated users must share one network architecture")
    start = frl_average([t.params for t in trainers])
    for t in trainers:
        t.params = start.copy()
    lead = trainers[focus]
    while not lead.done:
        for t in trainers:
            t.update(t.collect())
        avg = frl_average([t.params for t in trainers])
        for t in trainers:
            t.params = avg.copy()
        lead.evaluate_due(sink)
    return lead.result()
