"""Goal-conditioned implicit Q-learning with hindsight relabeling.

Everything here works in latent space. Actions are stored in environment
units and divided by ``ACTION_SCALE`` before they touch a network.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import approx
from .approx import AdamState, Mlp
from .encoder import reward
from .envsim import A_MAX, ACTION_DIM, Action
from .errors import InputError, NumericError, StateError

# Headroom over the action bounds keeps the exact +-1 gripper commands and
# full-speed moves off the flat ends of tanh; to_env_action clips back.
ACTION_HEADROOM = 1.25
ACTION_BOUND = np.array([A_MAX, A_MAX, 1.0])
ACTION_SCALE = ACTION_HEADROOM * ACTION_BOUND
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


def goal_features(h: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Network input for a (state, goal) pair: the state and the offset to the goal.

    A fixed invertible linear map of concat(h, g), so the networks still see
    exactly the state and goal; the offset form makes "how far is the goal in
    each coordinate" available to the first layer without learning it.
    """
    return np.concatenate([h, g - h], axis=-1)


def expectile_loss(u, tau: float):
    """|tau - 1[u < 0]| * u**2, elementwise."""
    u = np.asarray(u, dtype=np.float64)
    w = np.where(u < 0, 1.0 - tau, tau)
    out = w * u * u
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------- replay


@dataclass
class GcTransition:
    h: np.ndarray
    a: np.ndarray
    h_next: np.ndarray
    h_goal: np.ndarray
    traj_id: int
    index: int
    done: bool


@dataclass
class Batch:
    """Struct-of-arrays view of a list of transitions."""

    h: np.ndarray
    a: np.ndarray
    h_next: np.ndarray
    goal: np.ndarray
    traj: np.ndarray
    idx: np.ndarray
    done: np.ndarray
    source: np.ndarray  # which buffer each row came from
    relabeled: np.ndarray | None = None
    r: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.h)

    def transitions(self) -> list[GcTransition]:
        return [
            GcTransition(self.h[i], self.a[i], self.h_next[i], self.goal[i], int(self.traj[i]), int(self.idx[i]), bool(self.done[i]))
            for i in range(len(self))
        ]

    @staticmethod
    def concat(parts: Sequence["Batch"]) -> "Batch":
        def cat(name):
            vals = [getattr(p, name) for p in parts]
            return None if any(v is None for v in vals) else np.concatenate(vals)

        return Batch(*(cat(n) for n in ("h", "a", "h_next", "goal", "traj", "idx", "done", "source", "relabeled", "r")))


class ReplayBuffer:
    """Transitions grouped by trajectory so future states can be looked up.

    Rewards are never stored; see :func:`with_rewards`.
    """

    def __init__(self, d_h: int = 8, capacity: int = 1024):
        self.d_h = d_h
        self._n = 0
        self._alloc(capacity)
        self.traj_start: list[int] = []
        self.traj_len: list[int] = []

    def _alloc(self, cap):
        old = getattr(self, "_h", None)
        arrays = {
            "_h": (cap, self.d_h), "_a": (cap, ACTION_DIM), "_hn": (cap, self.d_h), "_g": (cap, self.d_h),
            "_traj": (cap,), "_idx": (cap,), "_done": (cap,),
        }
        dtypes = {"_traj": np.int64, "_idx": np.int64, "_done": bool}
        for name, shape in arrays.items():
            new = np.zeros(shape, dtype=dtypes.get(name, np.float64))
            if old is not None:
                new[: self._n] = getattr(self, name)[: self._n]
            setattr(self, name, new)

    def __len__(self) -> int:
        return self._n

    @property
    def n_trajectories(self) -> int:
        return len(self.traj_len)

    def add_trajectory(self, latents: np.ndarray, actions: np.ndarray, goals: np.ndarray | None = None, truncated: bool = True) -> int:
        """Store a trajectory of ``T + 1`` latent states and ``T`` actions.

        ``goals`` are the commanded goals per step; by default every step is
        labelled with the trajectory's final state. ``done`` is set on the
        last transition when the episode was cut off.
        """
        latents = np.asarray(latents, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64).reshape(-1, ACTION_DIM)
        T = len(actions)
        if len(latents) != T + 1 or T == 0:
            raise InputError("need T >= 1 actions and T + 1 states")
        if goals is None:
            goals = np.repeat(latents[-1:], T, axis=0)
        goals = np.asarray(goals, dtype=np.float64)
        while self._n + T > len(self._h):
            self._alloc(2 * len(self._h))
        sl = slice(self._n, self._n + T)
        tid = len(self.traj_len)
        self._h[sl], self._a[sl], self._hn[sl], self._g[sl] = latents[:-1], actions, latents[1:], goals
        self._traj[sl] = tid
        self._idx[sl] = np.arange(T)
        self._done[sl] = False
        self._done[self._n + T - 1] = truncated
        self.traj_start.append(self._n)
        self.traj_len.append(T)
        self._n += T
        return tid

    def gather(self, rows: np.ndarray, source: int = 0) -> Batch:
        rows = np.asarray(rows, dtype=np.int64)
        return Batch(
            self._h[rows].copy(), self._a[rows].copy(), self._hn[rows].copy(), self._g[rows].copy(),
            self._traj[rows].copy(), self._idx[rows].copy(), self._done[rows].copy(),
            np.full(len(rows), source, dtype=np.int64),
        )

    def sample(self, rng: np.random.Generator, n: int, source: int = 0) -> Batch:
        if self._n == 0:
            raise StateError("cannot sample from an empty buffer")
        return self.gather(rng.integers(self._n, size=n), source)

    def future_state(self, traj: np.ndarray, index: np.ndarray) -> np.ndarray:
        """Latent state ``index`` steps into trajectory ``traj`` (1 <= index <= T)."""
        start = np.asarray(self.traj_start)[traj]
        return self._hn[start + index - 1]

    def trajectory_latents(self, tid: int) -> np.ndarray:
        s, T = self.traj_start[tid], self.traj_len[tid]
        return np.concatenate([self._h[s : s + 1], self._hn[s : s + T]])

    # persistence -----------------------------------------------------------

    def to_records(self, decode_fn=None) -> list[dict]:
        out = []
        for tid in range(self.n_trajectories):
            s, T = self.traj_start[tid], self.traj_len[tid]
            states = self.trajectory_latents(tid)
            if decode_fn is not None:
                states = decode_fn(states)
            out.append({
                "states": states.tolist(),
                "actions": self._a[s : s + T].tolist(),
                "primitive_tag": "policy",
                "seed": tid,
                "commanded_goals": self._g[s : s + T].tolist(),
                "truncated": bool(self._done[s + T - 1]),
            })
        return out

    @classmethod
    def from_records(cls, records: Sequence[dict], encode_fn=None, d_h: int = 8) -> "ReplayBuffer":
        buf = cls(d_h)
        for rec in records:
            states = np.asarray(rec["states"], dtype=np.float64)
            if encode_fn is not None:
                states = encode_fn(states)
            goals = rec.get("commanded_goals")
            buf.add_trajectory(states, rec["actions"], None if goals is None else np.asarray(goals), rec.get("truncated", True))
        return buf


def relabel_batch(batch: Batch, buffers, p_relabel: float, rng: np.random.Generator) -> Batch:
    """Future-state hindsight relabeling.

    Each row independently, with probability ``p_relabel``, gets as goal a
    state drawn uniformly from the strictly later part of its own trajectory.
    ``buffers`` is a buffer or a sequence indexed by ``batch.source``.
    """
    if not 0.0 <= p_relabel <= 1.0:
        raise InputError("p_relabel must lie in [0, 1]")
    if isinstance(buffers, ReplayBuffer):
        buffers = [buffers]
    n = len(batch)
    flip = rng.random(n) < p_relabel
    u = rng.random(n)
    goal = batch.goal.copy()
    for src, buf in enumerate(buffers):
        rows = np.nonzero(flip & (batch.source == src))[0]
        if rows.size == 0:
            continue
        T = np.asarray(buf.traj_len)[batch.traj[rows]]
        lo = batch.idx[rows] + 1  # strictly after the transition's own state
        future = lo + np.floor(u[rows] * (T - lo + 1)).astype(np.int64)
        goal[rows] = buf.future_state(batch.traj[rows], future)
    return replace(batch, goal=goal, relabeled=flip, r=None)


def with_rewards(batch: Batch, eps: float) -> Batch:
    return replace(batch, r=reward(batch.h_next, batch.goal, eps))


def sample_mixed_batch(
    offline: ReplayBuffer, online: ReplayBuffer | None, batch_size: int, online_fraction: float, rng: np.random.Generator
) -> Batch:
    """floor(online_fraction * batch_size) rows from ``online``, the rest from ``offline``."""
    have_off = offline is not None and len(offline) > 0
    have_on = online is not None and len(online) > 0
    if not have_off and not have_on:
        raise StateError("both replay buffers are empty")
    n_on = int(np.floor(online_fraction * batch_size)) if have_on else 0
    if not have_off:
        n_on = batch_size
    parts = []
    if batch_size - n_on:
        parts.append(offline.sample(rng, batch_size - n_on, source=0))
    if n_on:
        parts.append(online.sample(rng, n_on, source=1))
    return Batch.concat(parts)


# --------------------------------------------------------------------------- agent


@dataclass
class IqlConfig:
    gamma: float = 0.99
    expectile_tau: float = 0.7
    awr_beta: float = 3.0
    weight_clip: float = 100.0
    polyak: float = 0.005
    lr: float = 3e-4
    hidden: tuple = (128, 128)


@dataclass
class AgentParams:
    policy: Mlp
    log_std: np.ndarray
    q1: Mlp
    q2: Mlp
    v: Mlp
    q1_target: Mlp
    q2_target: Mlp
    cfg: IqlConfig = field(default_factory=IqlConfig)
    opt: dict = field(default_factory=dict, repr=False)

    @property
    def d_h(self) -> int:
        return self.v.layer_sizes[0] // 2

    def networks(self) -> dict[str, Mlp]:
        return {"policy": self.policy, "q1": self.q1, "q2": self.q2, "v": self.v, "q1_target": self.q1_target, "q2_target": self.q2_target}

    def value(self, h: np.ndarray, g: np.ndarray) -> np.ndarray:
        return self.v(goal_features(h, g))[..., 0]

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name, net in self.networks().items():
            approx.save_mlp(net, d / f"agent_{name}.bin")
        manifest = {"hyperparameters": self.cfg.__dict__ | {"hidden": list(self.cfg.hidden)}, "log_std": self.log_std.tolist(), "d_h": self.d_h}
        (d / "agent.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory) -> "AgentParams":
        d = Path(directory)
        manifest = json.loads((d / "agent.json").read_text())
        hp = manifest["hyperparameters"]
        cfg = IqlConfig(**{**hp, "hidden": tuple(hp["hidden"])})
        nets = {name: approx.load_mlp(d / f"agent_{name}.bin") for name in ("policy", "q1", "q2", "v", "q1_target", "q2_target")}
        agent = cls(log_std=np.asarray(manifest["log_std"]), cfg=cfg, **nets)
        agent.opt = _fresh_optimizers(agent)
        return agent


def _fresh_optimizers(agent: AgentParams) -> dict:
    lr = agent.cfg.lr
    return {
        "policy": approx.AdamState.zeros_like(agent.policy.arrays() + [agent.log_std], lr=lr),
        "q1": approx.adam_for(agent.q1, lr),
        "q2": approx.adam_for(agent.q2, lr),
        "v": approx.adam_for(agent.v, lr),
    }


def init_agent(rng: np.random.Generator, d_h: int = 8, cfg: IqlConfig = IqlConfig()) -> AgentParams:
    hid = list(cfg.hidden)
    policy = approx.init_mlp([2 * d_h, *hid, ACTION_DIM], rng)
    q1 = approx.init_mlp([2 * d_h + ACTION_DIM, *hid, 1], rng)
    q2 = approx.init_mlp([2 * d_h + ACTION_DIM, *hid, 1], rng)
    v = approx.init_mlp([2 * d_h, *hid, 1], rng)
    agent = AgentParams(policy, np.zeros(ACTION_DIM), q1, q2, v, q1.copy(), q2.copy(), cfg)
    agent.opt = _fresh_optimizers(agent)
    return agent


def normalize_actions(a: np.ndarray) -> np.ndarray:
    return np.asarray(a) / ACTION_SCALE


def gaussian_log_prob(a_n: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (a_n - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - _HALF_LOG_2PI, axis=-1)


def value_loss_and_grad(agent: AgentParams, h, g, q_target_min):
    """Expectile regression of V towards the target critics; returns (loss, grads, v)."""
    v, cache = approx.forward(agent.v, goal_features(h, g))
    u = q_target_min - v[:, 0]
    tau = agent.cfg.expectile_tau
    weight = np.where(u < 0, 1.0 - tau, tau)
    loss = float(np.mean(weight * u * u))
    grads = approx.backward(agent.v, cache, (-2.0 * weight * u / len(u))[:, None])
    return loss, grads, v[:, 0]


def critic_loss_and_grad(net: Mlp, x_q, y):
    q, cache = approx.forward(net, x_q)
    err = q[:, 0] - y
    loss = float(np.mean(err * err))
    grads = approx.backward(net, cache, (2.0 * err / len(err))[:, None])
    return loss, grads, q[:, 0]


def policy_loss_and_grad(agent: AgentParams, x_pi, a_n, weights):
    """Advantage-weighted negative log-likelihood; grads for the MLP and log_std."""
    m, cache = approx.forward(agent.policy, x_pi)
    mean = np.tanh(m)
    log_std = agent.log_std
    inv_var = np.exp(-2.0 * log_std)
    diff = a_n - mean
    logp = gaussian_log_prob(a_n, mean, log_std)
    n = len(a_n)
    loss = float(-np.mean(weights * logp))
    d_mean = -(weights[:, None] * diff * inv_var) / n
    grads = approx.backward(agent.policy, cache, d_mean * (1.0 - mean * mean))
    d_log_std = -np.sum(weights[:, None] * (diff * diff * inv_var - 1.0), axis=0) / n
    return loss, grads, d_log_std


def update(agent: AgentParams, batch: Batch) -> tuple[AgentParams, dict]:
    """One IQL step: value expectile, twin critics, AWR policy, Polyak targets.

    The input agent is never modified; a non-finite loss raises before any
    new parameters are returned.
    """
    if batch.r is None:
        raise InputError("batch has no rewards; call with_rewards first")
    cfg = agent.cfg
    h, g, hn = batch.h, batch.goal, batch.h_next
    a_n = normalize_actions(batch.a)
    x_v = goal_features(h, g)
    x_q = np.concatenate([x_v, a_n], axis=1)

    q_bar = np.minimum(agent.q1_target(x_q)[:, 0], agent.q2_target(x_q)[:, 0])
    v_loss, v_grads, _ = value_loss_and_grad(agent, h, g, q_bar)
    v_arrays, v_opt = approx.adam_update(agent.v.arrays(), v_grads.arrays(), agent.opt["v"])
    v_new = Mlp.from_arrays(v_arrays)

    y = batch.r + cfg.gamma * (1.0 - batch.done) * v_new(goal_features(hn, g))[:, 0]
    q1_loss, q1_grads, _ = critic_loss_and_grad(agent.q1, x_q, y)
    q2_loss, q2_grads, _ = critic_loss_and_grad(agent.q2, x_q, y)
    q1_arrays, q1_opt = approx.adam_update(agent.q1.arrays(), q1_grads.arrays(), agent.opt["q1"])
    q2_arrays, q2_opt = approx.adam_update(agent.q2.arrays(), q2_grads.arrays(), agent.opt["q2"])
    q1_new, q2_new = Mlp.from_arrays(q1_arrays), Mlp.from_arrays(q2_arrays)

    adv = np.minimum(q1_new(x_q)[:, 0], q2_new(x_q)[:, 0]) - v_new(x_v)[:, 0]
    weights = np.minimum(np.exp(np.minimum(cfg.awr_beta * adv, 50.0)), cfg.weight_clip)
    pi_loss, pi_grads, d_log_std = policy_loss_and_grad(agent, x_v, a_n, weights)
    losses = {"value_loss": v_loss, "critic_loss": 0.5 * (q1_loss + q2_loss), "policy_loss": pi_loss}
    for k, val in losses.items():
        if not np.isfinite(val):
            raise NumericError(f"{k} is not finite")
    pi_arrays, pi_opt = approx.adam_update(
        agent.policy.arrays() + [agent.log_std], pi_grads.arrays() + [d_log_std], agent.opt["policy"]
    )
    new = AgentParams(
        Mlp.from_arrays(pi_arrays[:-1]),
        np.clip(pi_arrays[-1], LOG_STD_MIN, LOG_STD_MAX),
        q1_new,
        q2_new,
        v_new,
        approx.polyak(agent.q1_target, q1_new, cfg.polyak),
        approx.polyak(agent.q2_target, q2_new, cfg.polyak),
        cfg,
        {"policy": pi_opt, "q1": q1_opt, "q2": q2_opt, "v": v_opt},
    )
    metrics = dict(losses, mean_advantage=float(np.mean(adv)), mean_weight=float(np.mean(weights)))
    return new, metrics


def policy_mean(agent: AgentParams, h: np.ndarray, g: np.ndarray) -> np.ndarray:
    return agent.policy(goal_features(h, g))


def select_action(agent: AgentParams, h, h_goal, mode: str = "deterministic", rng: np.random.Generator | None = None) -> np.ndarray:
    """Bounded action(s) in environment units. Stochastic mode squashes a Gaussian sample."""
    m = policy_mean(agent, np.asarray(h, dtype=np.float64), np.asarray(h_goal, dtype=np.float64))
    if mode == "stochastic":
        if rng is None:
            raise InputError("stochastic action selection needs an rng")
        m = m + np.exp(agent.log_std) * rng.standard_normal(m.shape)
    elif mode != "deterministic":
        raise InputError(f"unknown mode {mode!r}")
    return np.clip(np.tanh(m) * ACTION_SCALE, -ACTION_BOUND, ACTION_BOUND)


def to_env_action(a: np.ndarray) -> Action:
    a = np.clip(a, -ACTION_BOUND, ACTION_BOUND)
    return Action.from_array(a)
