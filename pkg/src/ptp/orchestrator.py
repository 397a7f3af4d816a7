"""Offline pretraining, planned fine-tuning episodes, evaluation and the epoch loop."""
from __future__ import annotations

import csv
import logging
import math
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import encoder, envsim, gcrl, planner
from .encoder import NormalizerStats
from .envsim import EnvState, TaskSpec
from .errors import ConfigError, PlanningError, PtpError
from .gcrl import AgentParams, ReplayBuffer
from .planner import LatentPlanBuffer, PlanConfig, SubgoalPlan
from .subgoal_cvae import CvaeModel, CvaeTrainConfig, train_level

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "epoch", "phase", "success_rate", "mean_episode_return", "subgoal_reach_rate",
    "cvae_holdout_mse", "value_loss", "critic_loss", "policy_loss", "plan_cost_best",
)


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for a named purpose under one root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode()), *map(int, keys)]))


def subseed(seed: int, name: str, *keys: int) -> int:
    return int(substream(seed, name, *keys).integers(2**62))


@dataclass
class RunConfig:
    pretrain_epochs: int = 30
    finetune_epochs: int = 30
    env_steps_per_epoch: int = 600
    train_iters_per_epoch: int = 600
    eval_episodes_per_epoch: int = 5
    episode_horizon: int = 120
    subgoal_budget: int = 5
    eps_reach: float = 0.5
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    batch_size: int = 256
    p_relabel: float = 0.7
    online_fraction: float = 0.5
    planning: bool = True
    primitive_horizon: int = 60

    def __post_init__(self):
        counts = ("env_steps_per_epoch", "train_iters_per_epoch", "episode_horizon", "subgoal_budget", "batch_size", "primitive_horizon")
        for name in counts:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("pretrain_epochs", "finetune_epochs", "eval_episodes_per_epoch"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must not be negative")
        if self.eps_reach <= 0:
            raise ConfigError("eps_reach must be positive")
        if not self.seeds:
            raise ConfigError("at least one seed is required")


@dataclass
class PlannerBundle:
    """What an episode needs besides the agent: encoder, CVAE levels and plan buffers."""

    stats: NormalizerStats
    models: list
    plan_cfg: PlanConfig = field(default_factory=PlanConfig)
    buffers: LatentPlanBuffer | None = None
    enabled: bool = True
    dtype: type = np.float32  # precision of the networks during planning

    def __post_init__(self):
        if self.buffers is None:
            self.buffers = LatentPlanBuffer(self.plan_cfg.L, self.plan_cfg.buffer_capacity)
        if self.enabled:
            planner.check_models(self.models, self.plan_cfg)
        self._fast = planner.cast_models(self.models, self.dtype)

    def subgoals(self, h0, hg, agent, rng) -> tuple[np.ndarray, SubgoalPlan | None]:
        """The subgoal sequence to execute, plus the plan it came from (None without planning)."""
        if not self.enabled:
            return np.asarray(hg)[None], None
        view = planner.ValueView(agent, self.dtype)
        p = planner.plan(h0, hg, self._fast, view, self.buffers, self.plan_cfg, rng)
        return p.flattened, p


# --------------------------------------------------------------------------- offline stage


def encode_dataset(stats: NormalizerStats, dataset: Sequence[envsim.Trajectory]) -> tuple[ReplayBuffer, list]:
    """Offline replay buffer (goals default to each trajectory's last state) and per-trajectory latents."""
    latents = [encoder.encode(stats, t.state_array()) for t in dataset]
    buf = ReplayBuffer(stats.d_h, capacity=sum(len(t) for t in dataset) or 1)
    for h, t in zip(latents, dataset):
        buf.add_trajectory(h, t.action_array(), truncated=False)
    return buf, latents


def train_cvae_levels(models: Sequence[CvaeModel], latents, epochs: int, seed: int, cfg: CvaeTrainConfig = CvaeTrainConfig()):
    """Train every level; returns (models, per-level held-out MSE histories)."""
    out, histories = [], []
    for m in models:
        hist: list = []
        out.append(train_level(m, latents, epochs, subseed(seed, "cvae", m.level_index), cfg, hist))
        histories.append(hist)
    return out, histories


@dataclass
class Checkpointer:
    directory: Path | None = None

    def __call__(self, tag: str, agent: AgentParams) -> None:
        if self.directory is not None:
            agent.save(Path(self.directory) / tag)


def pretrain(
    dataset: Sequence[envsim.Trajectory],
    agent: AgentParams,
    cvae_models: Sequence[CvaeModel],
    cfg: RunConfig,
    *,
    stats: NormalizerStats | None = None,
    seed: int = 0,
    cvae_epochs: int = 0,
    cvae_cfg: CvaeTrainConfig = CvaeTrainConfig(),
    cvae_histories: list | None = None,
    checkpoint: Checkpointer | None = None,
    metrics: list | None = None,
) -> tuple[AgentParams, list]:
    """Offline stage: CVAE levels first, then ``pretrain_epochs * train_iters_per_epoch`` IQL updates.

    Goals are the trajectory-final states, relabeled to future states with
    probability ``cfg.p_relabel``. One metrics row per epoch is appended to
    ``metrics`` with epoch indices ``-pretrain_epochs .. -1``; its success rate
    is measured on single-primitive goals. With ``cvae_epochs=0`` the models
    are taken as already trained and ``cvae_histories`` (if given) fills the
    held-out MSE column.
    """
    if not dataset:
        raise ConfigError("the offline dataset is empty")
    stats = stats or encoder.fit(dataset)
    buf, latents = encode_dataset(stats, dataset)
    models, histories = train_cvae_levels(cvae_models, latents, cvae_epochs, seed, cvae_cfg)
    if cvae_epochs <= 0 and cvae_histories is not None:
        histories = cvae_histories
    rng = substream(seed, "rl")
    E = cfg.pretrain_epochs
    for e in range(E):
        losses = []
        for _ in range(cfg.train_iters_per_epoch):
            batch = gcrl.relabel_batch(buf.sample(rng, cfg.batch_size), buf, cfg.p_relabel, rng)
            agent, m = gcrl.update(agent, gcrl.with_rewards(batch, cfg.eps_reach))
            losses.append(m)
        if checkpoint is not None:
            checkpoint("agent_latest", agent)
        if metrics is not None:
            row = _loss_means(losses)
            row.update(
                epoch=e - E,
                phase="offline",
                success_rate=evaluate_primitives(agent, stats, cfg.eval_episodes_per_epoch, subseed(seed, "offline-eval"), cfg.primitive_horizon),
                cvae_holdout_mse=_history_at(histories, (e + 1) / E),
            )
            metrics.append(row)
        log.info("pretrain epoch %d/%d done", e + 1, E)
    return agent, models


def _history_at(histories, frac: float) -> float:
    if not histories or not histories[0]:
        return math.nan
    vals = [h[min(len(h) - 1, int(round(frac * (len(h) - 1))))] for h in histories]
    return float(np.mean(vals))


def _loss_means(rows: list) -> dict:
    if not rows:
        return {}
    return {k: float(np.mean([r[k] for r in rows])) for k in ("value_loss", "critic_loss", "policy_loss")}


def primitive_goal(seed: int, horizon: int = 40, primitives=None) -> tuple[EnvState, EnvState, str] | None:
    """Start state and a goal one scripted skill reaches from it within ``horizon`` steps, or None."""
    prims = primitives or [p for p in envsim.PRIMITIVES if p.name != "go-to"]
    rng = substream(seed, "primitive-goal")
    s0 = envsim.reset(subseed(seed, "primitive-reset"))
    prim = prims[int(rng.integers(len(prims)))]
    ctrl = prim.make(s0, rng)
    if ctrl is None:
        return None
    out = envsim.run_controller(s0, ctrl, horizon)
    if out is None:
        return None
    return s0, out[0][-1], prim.name


def evaluate_primitives(agent: AgentParams, stats: NormalizerStats, episodes: int, seed: int, rollout: int = 60, goal_horizon: int = 40, by_skill: dict | None = None) -> float:
    """Deterministic success on goals reachable by one scripted skill in ``goal_horizon`` steps."""
    if episodes <= 0:
        return 0.0
    tol = envsim.TaskSpec("primitive", envsim.RandomizationConfig(), lambda s, r: s, dict(envsim.TASKS["A"].tolerances))
    wins, n, i = 0, 0, 0
    while n < episodes:
        i += 1
        found = primitive_goal(subseed(seed, "episode", i), goal_horizon)
        if found is None:
            continue
        s, goal, name = found
        hg = encoder.encode(stats, goal)
        for _ in range(rollout):
            a = gcrl.select_action(agent, encoder.encode(stats, s), hg)
            s = envsim.step(s, gcrl.to_env_action(a))
        ok = envsim.success(s, goal, tol)
        wins += ok
        n += 1
        if by_skill is not None:
            by_skill.setdefault(name, []).append(bool(ok))
    return wins / episodes


# --------------------------------------------------------------------------- online stage


def subgoal_switch(k: int, t: int, h_next, plan_subgoals, delta_t: int, eps: float, K_total: int) -> int:
    """Advance the 1-based subgoal index on the step budget or when the current subgoal is reached."""
    reached = np.linalg.norm(np.asarray(h_next) - np.asarray(plan_subgoals)[k - 1]) < eps
    if t % delta_t == 0 or reached:
        return min(k + 1, K_total)
    return k


@dataclass
class EpisodeLog:
    seed: int
    success: bool
    episode_return: float
    subgoals_reached: int
    subgoals_total: int
    plan_cost: float
    k_trace: list
    aborted: bool = False


def run_episode(
    agent: AgentParams,
    bundle: PlannerBundle,
    task: TaskSpec,
    cfg: RunConfig,
    seed: int,
    mode: str,
) -> tuple[dict | None, EpisodeLog, SubgoalPlan | None]:
    """One episode: reset, plan once, follow the subgoals for T steps.

    Returns the transition record (None if planning failed), the log and the plan.
    """
    rng = substream(seed, "episode")
    s = task.initial_state(subseed(seed, "reset"))
    goal = task.sample_goal(s, subseed(seed, "goal"))
    h0, hg = encoder.encode(bundle.stats, s), encoder.encode(bundle.stats, goal)
    try:
        subgoals, plan_ = bundle.subgoals(h0, hg, agent, substream(seed, "planner"))
    except PtpError as exc:  # planning or numeric failure aborts the episode
        log.warning("episode %d aborted: %s", seed, exc)
        return None, EpisodeLog(seed, False, 0.0, 0, 0, math.nan, [], aborted=True), None
    K_total = len(subgoals)
    k, latents, actions, goals, trace = 1, [h0], [], [], []
    reached, ret, h = set(), 0.0, h0
    for t in range(1, cfg.episode_horizon + 1):
        a = gcrl.select_action(agent, h, subgoals[k - 1], mode, rng)
        a = np.clip(a, -gcrl.ACTION_BOUND, gcrl.ACTION_BOUND)
        s = envsim.step(s, gcrl.to_env_action(a))
        h = encoder.encode(bundle.stats, s)
        actions.append(a)
        goals.append(subgoals[k - 1])
        latents.append(h)
        ret += encoder.reward(h, hg, cfg.eps_reach)
        if np.linalg.norm(h - subgoals[k - 1]) < cfg.eps_reach:
            reached.add(k)
        trace.append(k)
        k = subgoal_switch(k, t, h, subgoals, cfg.subgoal_budget, cfg.eps_reach, K_total)
    record = {"latents": np.asarray(latents), "actions": np.asarray(actions), "goals": np.asarray(goals)}
    cost = plan_.cost if plan_ is not None else float(np.linalg.norm(hg - h0))
    ok = envsim.success(s, goal, task)
    return record, EpisodeLog(seed, bool(ok), ret, len(reached), K_total, cost, trace), plan_


def finetune_episode(agent, bundle: PlannerBundle, task: TaskSpec, cfg: RunConfig, seed: int, online: ReplayBuffer | None = None):
    """Stochastic collection episode; stores its transitions and commits the plan to the buffers."""
    record, ep, plan_ = run_episode(agent, bundle, task, cfg, seed, "stochastic")
    if record is None:
        return None, ep
    if online is not None:
        online.add_trajectory(record["latents"], record["actions"], record["goals"], truncated=True)
    if plan_ is not None:
        planner.buffer_commit(bundle.buffers, plan_)
    return record, ep


def evaluate(agent, bundle: PlannerBundle, task: TaskSpec, episodes: int, seed: int, cfg: RunConfig, logs: list | None = None) -> float:
    """Deterministic success rate over fixed episode seeds; reads but never writes the plan buffers."""
    if episodes <= 0:
        warnings.warn("evaluate called with zero episodes; reporting 0.0", stacklevel=2)
        return 0.0
    wins = 0
    for i in range(episodes):
        _, ep, _ = run_episode(agent, bundle, task, cfg, subseed(seed, "eval", i), "deterministic")
        wins += ep.success
        if logs is not None:
            logs.append(ep)
    return wins / episodes


def finetune(
    agent: AgentParams,
    bundle: PlannerBundle,
    offline: ReplayBuffer,
    task: TaskSpec,
    cfg: RunConfig,
    seed: int,
    *,
    metrics: list | None = None,
    checkpoint: Checkpointer | None = None,
    online: ReplayBuffer | None = None,
) -> tuple[AgentParams, ReplayBuffer]:
    """The online loop: an epoch-0 evaluation, then per epoch collect, train and evaluate.

    Each epoch takes exactly ``env_steps_per_epoch`` environment steps (the
    last episode of an epoch is cut short if needed) and
    ``train_iters_per_epoch`` updates on 50/50 offline/online batches.
    """
    online = online if online is not None else ReplayBuffer(offline.d_h, capacity=cfg.env_steps_per_epoch * max(1, cfg.finetune_epochs))
    rng = substream(seed, "rl-online")
    eval_seed = subseed(seed, "eval-set")

    def eval_row(epoch, extra):
        logs: list = []
        sr = evaluate(agent, bundle, task, cfg.eval_episodes_per_epoch, eval_seed, cfg, logs)
        row = {"epoch": epoch, "phase": "online", "success_rate": sr}
        row.update(extra)
        if metrics is not None:
            metrics.append(row)
        log.info("epoch %d success %.3f", epoch, sr)
        return row

    eval_row(0, {})
    for epoch in range(1, cfg.finetune_epochs + 1):
        steps, episode, eps_logs = 0, 0, []
        while steps < cfg.env_steps_per_epoch:
            horizon = min(cfg.episode_horizon, cfg.env_steps_per_epoch - steps)
            ep_cfg = cfg if horizon == cfg.episode_horizon else _with_horizon(cfg, horizon)
            _, ep = finetune_episode(agent, bundle, task, ep_cfg, subseed(seed, "train", epoch, episode), online)
            eps_logs.append(ep)
            steps += horizon
            episode += 1
        losses = []
        for _ in range(cfg.train_iters_per_epoch):
            batch = gcrl.sample_mixed_batch(offline, online, cfg.batch_size, cfg.online_fraction, rng)
            batch = gcrl.relabel_batch(batch, [offline, online], cfg.p_relabel, rng)
            agent, m = gcrl.update(agent, gcrl.with_rewards(batch, cfg.eps_reach))
            losses.append(m)
        if checkpoint is not None:
            checkpoint("agent_latest", agent)
        done = [e for e in eps_logs if not e.aborted]
        extra = _loss_means(losses)
        extra["mean_episode_return"] = float(np.mean([e.episode_return for e in done])) if done else math.nan
        total = sum(e.subgoals_total for e in done)
        extra["subgoal_reach_rate"] = sum(e.subgoals_reached for e in done) / total if total else math.nan
        extra["plan_cost_best"] = float(min(e.plan_cost for e in done)) if done else math.nan
        eval_row(epoch, extra)
    return agent, online


def _with_horizon(cfg: RunConfig, horizon: int) -> RunConfig:
    from dataclasses import replace

    return replace(cfg, episode_horizon=horizon)


# --------------------------------------------------------------------------- metrics files


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def write_metrics(rows: Sequence[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in METRIC_COLUMNS])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        d = {}
        for k, v in r.items():
            if k == "phase":
                d[k] = v
            elif k == "epoch":
                d[k] = int(v)
            else:
                d[k] = float(v) if v != "" else math.nan
        out.append(d)
    return out
