"""PPO with a shared actor-critic: rollouts, GAE, clipped updates, greedy evaluation."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from medc_lab.envs import EnvConfig, GridEnv, make_env
from medc_lab.network import (
    NetworkError,
    NetworkSpec,
    ParamSet,
    build_network,
    default_spec,
    gradients,
    policy_and_value,
    ppo_loss,
)
from medc_lab.optim import AdamState, clip_grad_norm, optimizer_step

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PpoConfig:
    lr: float = 3e-4
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    gamma: float = 0.99
    gae_lambda: float = 0.95
    horizon: int = 4000
    epochs: int = 20
    total_steps: int = 400_000
    minibatch_size: int = 500
    value_coef: float = 0.5
    max_grad_norm: float | None = 0.5
    eval_every: int = 40_000
    eval_steps: int = 4_000
    checkpoint_every: int = 0  # in updates; 0 disables
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if self.horizon < 1 or self.minibatch_size < 1:
            raise ValueError("horizon and minibatch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.total_steps < 0 or self.eval_every < 1 or self.eval_steps < 1:
            raise ValueError("step counts must be positive")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class EvalReport:
    step: int
    mean_episode_length: float
    mean_return: float
    episodes: int


class SeedStreams:
    """Independent, reproducible PRNG streams derived from one seed."""

    NAMES = ("init", "train_env", "eval_env", "policy", "shuffle", "medc")

    def __init__(self, seed: int):
        children = np.random.SeedSequence(int(seed)).spawn(len(self.NAMES))
        self._seqs = dict(zip(self.NAMES, children))

    def int_seed(self, name: str) -> int:
        return int(self._seqs[name].generate_state(1)[0])

    def rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self._seqs[name])


class TrajectoryBuffer:
    """Fixed-capacity record of one horizon across all agents."""

    def __init__(self, capacity: int, n_agents: int, obs_shape: tuple):
        self.capacity = capacity
        self.n_agents = n_agents
        self.obs = np.zeros((capacity, n_agents) + tuple(obs_shape))
        self.actions = np.zeros((capacity, n_agents), dtype=np.int64)
        self.logp = np.zeros((capacity, n_agents))
        self.values = np.zeros((capacity, n_agents))
        self.rewards = np.zeros(capacity)
        self.flags = np.zeros(capacity, dtype=np.int64)
        self.usable = np.ones(capacity, dtype=bool)  # False for steps excluded from PPO (IL episodes)
        self.expert = np.zeros((capacity, n_agents), dtype=bool)
        self.labels = np.full((capacity, n_agents), -1, dtype=np.int64)
        self.bootstrap = np.zeros(n_agents)
        self.size = 0

    def clear(self) -> None:
        self.size = 0
        self.usable[:] = True
        self.expert[:] = False
        self.labels[:] = -1
        self.bootstrap[:] = 0.0

    @property
    def full(self) -> bool:
        return self.size == self.capacity

    def add(self, obs, actions, logp, values, reward, flag) -> int:
        if self.size >= self.capacity:
            raise TrainingError("trajectory buffer overflow")
        t = self.size
        self.obs[t] = obs
        self.actions[t] = actions
        self.logp[t] = logp
        self.values[t] = values
        self.rewards[t] = reward
        self.flags[t] = flag
        self.size += 1
        return t

    def view(self) -> "TrajectoryBuffer":
        """The filled prefix (shares memory)."""
        if self.size == self.capacity:
            return self
        out = TrajectoryBuffer.__new__(TrajectoryBuffer)
        out.__dict__.update({k: (v[:self.size] if isinstance(v, np.ndarray) and k != "bootstrap" else v)
                             for k, v in self.__dict__.items()})
        out.capacity = self.size
        return out


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of ``probs`` via the inverse CDF."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    return np.minimum((cdf <= u[:, None]).sum(axis=1), probs.shape[1] - 1)


class Rollout:
    """An environment plus the current observation and running episode statistics."""

    def __init__(self, env: GridEnv):
        self.env = env
        self.obs = env.reset()
        self.ep_len = 0
        self.ep_return = 0.0
        self.finished: list[tuple[int, float]] = []


def collect_horizon(rollout: Rollout, params: ParamSet, spec: NetworkSpec, buffer: TrajectoryBuffer,
                    rng: np.random.Generator, hook=None, steps: int | None = None) -> TrajectoryBuffer:
    """Fill ``buffer`` with ``steps`` (default: capacity) environment timesteps.

    ``hook`` optionally overrides action choice; see ``medc.MedcHook``. Stored
    log-probabilities are always those of the acting (own) policy.
    """
    if buffer.size != 0:
        raise TrainingError("collect_horizon needs an empty buffer")
    steps = buffer.capacity if steps is None else steps
    env = rollout.env
    if hook is not None and not hook.started:
        hook.begin_episode()
    for _ in range(steps):
        obs = rollout.obs
        probs, values = policy_and_value(params, spec, obs)
        if hook is None:
            actions = sample_actions(probs, rng)
            expert = None
        else:
            actions, expert, labels = hook.select(obs, probs, rng)
        logp = np.log(probs[np.arange(len(actions)), actions])
        result = env.step(actions)
        t = buffer.add(obs, actions, logp, values, result.reward, int(result.done))
        if hook is not None:
            buffer.expert[t] = expert
            buffer.usable[t] = hook.ppo_usable
            if labels is not None:
                buffer.labels[t] = labels
        rollout.ep_len += 1
        rollout.ep_return += result.reward
        if result.done:
            rollout.finished.append((rollout.ep_len, rollout.ep_return))
            rollout.ep_len, rollout.ep_return = 0, 0.0
            rollout.obs = env.reset()
            if hook is not None:
                hook.begin_episode()
        else:
            rollout.obs = result.obs
    if buffer.size and buffer.flags[buffer.size - 1] == 0:
        _, buffer.bootstrap[:] = policy_and_value(params, spec, rollout.obs)
    return buffer


def compute_gae(rewards, values, flags, bootstrap_value, gamma: float, lam: float):
    """Generalized advantage estimates and returns.

    ``values`` may be (T,) or (T, N) (one column per agent sharing the team
    reward). A flag of 1 at step t means the episode ended after t, so the
    next-state value is zero and accumulation stops there.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    flags = np.asarray(flags)
    if len(rewards) != len(values) or len(rewards) != len(flags):
        raise ValueError(f"length mismatch: rewards {len(rewards)}, values {len(values)}, "
                         f"flags {len(flags)}")
    if np.any((flags != 0) & (flags != 1)):
        raise ValueError("flags must be 0 or 1")
    extra = values.shape[1:]
    adv = np.zeros_like(values)
    next_value = np.broadcast_to(np.asarray(bootstrap_value, dtype=np.float64), extra).copy()
    running = np.zeros(extra)
    for t in range(len(rewards) - 1, -1, -1):
        live = 1.0 - flags[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


@dataclass
class UpdateStats:
    first_ratio: float = float("nan")
    mean_ratio: float = float("nan")
    clip_fraction: float = 0.0
    entropy: float = float("nan")
    policy_loss: float = float("nan")
    value_loss: float = float("nan")
    epoch_clip_fractions: list = field(default_factory=list)
    minibatches: int = 0


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    if std < 1e-8:
        return adv - adv.mean()
    return (adv - adv.mean()) / std


def ppo_update(params: ParamSet, spec: NetworkSpec, opt: AdamState, buffer: TrajectoryBuffer,
               advantages: np.ndarray, returns: np.ndarray, cfg: PpoConfig,
               rng: np.random.Generator) -> UpdateStats:
    """Epochs of shuffled minibatch Adam steps on the PPO loss. Updates ``params`` in place."""
    stats = UpdateStats()
    idx = np.flatnonzero(buffer.usable[:buffer.size])
    if cfg.epochs == 0 or len(idx) == 0:
        return stats
    n = buffer.n_agents
    obs = buffer.obs[:buffer.size]
    adv = advantages.copy()
    adv[idx] = normalize_advantages(advantages[idx])
    ratios, entropies, plosses, vlosses = [], [], [], []
    for epoch in range(cfg.epochs):
        order = rng.permutation(idx)
        clipped = []
        for start in range(0, len(order), cfg.minibatch_size):
            mb = order[start:start + cfg.minibatch_size]
            try:
                loss, parts, leaves = ppo_loss(
                    params, spec, obs[mb].reshape((len(mb) * n,) + obs.shape[2:]),
                    buffer.actions[mb].ravel(), buffer.logp[mb].ravel(), adv[mb].ravel(),
                    returns[mb].ravel(), cfg.clip_eps, cfg.value_coef, cfg.entropy_coef)
            except NetworkError as exc:
                raise TrainingError(
                    f"PPO update aborted at epoch {epoch}, minibatch {start // cfg.minibatch_size}: "
                    f"{exc}; param version {params.version}") from exc
            grads = gradients(loss, leaves, params)
            clip_grad_norm(grads, cfg.max_grad_norm)
            optimizer_step(params, grads, opt)
            if stats.minibatches == 0:
                stats.first_ratio = parts.mean_ratio
            stats.minibatches += 1
            ratios.append(parts.mean_ratio)
            clipped.append(parts.clip_fraction)
            entropies.append(parts.entropy)
            plosses.append(parts.policy)
            vlosses.append(parts.value)
        stats.epoch_clip_fractions.append(float(np.mean(clipped)))
    stats.mean_ratio = float(np.mean(ratios))
    stats.clip_fraction = float(np.mean(stats.epoch_clip_fractions))
    stats.entropy = float(np.mean(entropies))
    stats.policy_loss = float(np.mean(plosses))
    stats.value_loss = float(np.mean(vlosses))
    return stats


def evaluate_greedy(env: GridEnv, params: ParamSet, spec: NetworkSpec, steps: int,
                    step_index: int = 0) -> EvalReport:
    """Run argmax actions for ``steps`` timesteps; average over completed episodes."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    obs = env.reset()
    lengths, returns = [], []
    ep_len, ep_ret = 0, 0.0
    for _ in range(steps):
        probs, _ = policy_and_value(params, spec, obs)
        result = env.step(np.argmax(probs, axis=1))
        ep_len += 1
        ep_ret += result.reward
        if result.done:
            lengths.append(ep_len)
            returns.append(ep_ret)
            ep_len, ep_ret = 0, 0.0
            obs = env.reset()
        else:
            obs = result.obs
    if not lengths:  # nothing finished: report the censored partial episode
        lengths, returns = [ep_len], [ep_ret]
        completed = 0
    else:
        completed = len(lengths)
    return EvalReport(step_index, float(np.mean(lengths)), float(np.mean(returns)), completed)


@dataclass
class TrainResult:
    params: ParamSet
    reports: list
    updates: list
    train_episodes: list
    hook: object = None


def spec_for_env(env_cfg: EnvConfig) -> NetworkSpec:
    return default_spec(env_cfg.height, env_cfg.width, channels=5)


class Trainer:
    """Stateful PPO loop; ``train`` drives it to completion.

    Kept as an object so the federated baseline can interleave several
    trainers and average their parameters between updates.
    """

    def __init__(self, env_cfg: EnvConfig, cfg: PpoConfig, spec: NetworkSpec | None = None,
                 hook_factory: Callable | None = None, init_params: ParamSet | None = None):
        self.env_cfg = env_cfg
        self.cfg = cfg
        self.spec = spec or spec_for_env(env_cfg)
        self.seeds = SeedStreams(cfg.seed)
        self.params = init_params.copy() if init_params is not None else \
            build_network(self.spec, self.seeds.int_seed("init"))
        self.opt = AdamState.for_params(self.params, lr=cfg.lr)
        self.rollout = Rollout(make_env(env_cfg.with_seed(self.seeds.int_seed("train_env"))))
        self.policy_rng = self.seeds.rng("policy")
        self.shuffle_rng = self.seeds.rng("shuffle")
        self.hook = hook_factory(self.seeds.rng("medc"), self) if hook_factory else None
        env = self.rollout.env
        self.buffer = TrajectoryBuffer(cfg.horizon, env_cfg.n_agents, env.obs_shape)
        self.steps = 0
        self.updates: list[UpdateStats] = []
        self.reports: list[EvalReport] = []
        self.next_eval = cfg.eval_every

    @property
    def done(self) -> bool:
        return self.steps >= self.cfg.total_steps

    def collect(self) -> TrajectoryBuffer:
        self.buffer.clear()
        n = min(self.cfg.horizon, self.cfg.total_steps - self.steps)
        collect_horizon(self.rollout, self.params, self.spec, self.buffer, self.policy_rng,
                        self.hook, steps=n)
        self.steps += n
        return self.buffer.view()

    def update(self, buf: TrajectoryBuffer) -> UpdateStats:
        adv, ret = compute_gae(buf.rewards, buf.values, buf.flags, buf.bootstrap,
                               self.cfg.gamma, self.cfg.gae_lambda)
        stats = ppo_update(self.params, self.spec, self.opt, buf, adv, ret, self.cfg, self.shuffle_rng)
        if self.hook is not None and hasattr(self.hook, "after_update"):
            self.hook.after_update(self, buf)
        self.updates.append(stats)
        return stats

    def evaluate_due(self, sink=None) -> list[EvalReport]:
        out = []
        while self.next_eval <= self.steps:
            # evaluation always scores the unshaped task
            eval_cfg = replace(self.env_cfg, reward_mode="sparse", seed=self.seeds.int_seed("eval_env"))
            env = make_env(eval_cfg)
            report = evaluate_greedy(env, self.params, self.spec, self.cfg.eval_steps, self.next_eval)
            self.reports.append(report)
            out.append(report)
            if sink is not None:
                sink(report)
            log.info("step %d: eval length %.2f return %.3f (%d episodes)", report.step,
                     report.mean_episode_length, report.mean_return, report.episodes)
            self.next_eval += self.cfg.eval_every
        return out

    def run_iteration(self, sink=None) -> None:
        self.update(self.collect())
        self.evaluate_due(sink)

    def result(self) -> TrainResult:
        return TrainResult(self.params, self.reports, self.updates, self.rollout.finished, self.hook)


def train(env_cfg: EnvConfig, ppo_cfg: PpoConfig, hook_factory: Callable | None = None,
          sink: Callable | None = None, spec: NetworkSpec | None = None,
          init_params: ParamSet | None = None, checkpoint: Callable | None = None) -> TrainResult:
    """Alternate horizon collection and PPO updates until ``total_steps``.

    ``hook_factory(rng, trainer)`` builds an action hook (MEDC / IL);
    ``sink(report)`` receives each EvalReport; ``checkpoint(params, n_updates)``
    is called every ``checkpoint_every`` updates.
    """
    trainer = Trainer(env_cfg, ppo_cfg, spec, hook_factory, init_params)
    while not trainer.done:
        trainer.run_iteration(sink)
        if checkpoint and ppo_cfg.checkpoint_every and len(trainer.updates) % ppo_cfg.checkpoint_every == 0:
            checkpoint(trainer.params, len(trainer.updates))
    return trainer.result()


def config_dict(cfg: PpoConfig) -> dict:
    return asdict(cfg)


def with_overrides(cfg: PpoConfig, **kw) -> PpoConfig:
    return replace(cfg, **kw)
