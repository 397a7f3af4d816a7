"""Coarse-to-fine subgoal planning in the CVAE latent space with MPPI refinement."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InputError, PlanningError
from .gcrl import goal_features
from .subgoal_cvae import CvaeModel, generate_sequence

LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class PlanConfig:
    L: int = 3
    K: int = 8
    M: int = 2
    N: int = 1024
    mppi_iters: int = 5
    eta1: float = 0.001
    eta2: float = 0.01
    mppi_lambda: float = 1.0
    mppi_sigma: float = 0.3
    buffer_fraction: float = 0.5
    buffer_capacity: int = 64

    def __post_init__(self):
        if self.L < 1 or self.K < 1 or self.M < 2 or self.N < 2:
            raise ConfigError("need L >= 1, K >= 1, M >= 2 and N >= 2")
        if self.eta1 < 0 or self.eta2 < 0:
            raise ConfigError("Lagrange weights must be non-negative")
        if self.mppi_lambda <= 0 or self.mppi_sigma < 0 or not 0 <= self.buffer_fraction <= 1:
            raise ConfigError("invalid MPPI temperature, noise or buffer fraction")

    def plan_length(self) -> int:
        return self.K * self.M ** (self.L - 1)


def prior_logpdf(z) -> np.ndarray | float:
    """Standard normal log-density over the last axis."""
    z = np.asarray(z, dtype=np.float64)
    out = -0.5 * z.shape[-1] * LOG_2PI - 0.5 * np.sum(z * z, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def plan_cost(h0, hg, z_seq, subgoal_seq, value_fn: Callable | None, cfg: PlanConfig):
    """Lagrangian plan cost; batched over any leading axes of ``z_seq``/``subgoal_seq``.

    terminal distance - sum_i (eta1 * V(s_{i-1}, s_i) + eta2 * log p(z_i)),
    with s_0 = h0. ``value_fn(states, goals)`` may be None when ``eta1 == 0``.
    """
    z_seq = np.asarray(z_seq, dtype=np.float64)
    subgoal_seq = np.asarray(subgoal_seq, dtype=np.float64)
    if z_seq.shape[-2] != subgoal_seq.shape[-2] or z_seq.shape[-2] == 0:
        raise InputError("z sequence and subgoal sequence must have the same non-zero length")
    terminal = np.linalg.norm(np.asarray(hg) - subgoal_seq[..., -1, :], axis=-1)
    prior_term = cfg.eta2 * np.sum(prior_logpdf(z_seq), axis=-1)
    value_term = 0.0
    if cfg.eta1 != 0.0:
        if value_fn is None:
            raise InputError("eta1 > 0 needs a value function")
        h0 = np.broadcast_to(np.asarray(h0, dtype=np.float64), subgoal_seq[..., :1, :].shape)
        prev = np.concatenate([h0, subgoal_seq[..., :-1, :]], axis=-2)
        flat_prev = prev.reshape(-1, prev.shape[-1])
        flat_next = subgoal_seq.reshape(-1, subgoal_seq.shape[-1])
        v = np.asarray(value_fn(flat_prev, flat_next)).reshape(subgoal_seq.shape[:-1])
        value_term = cfg.eta1 * np.sum(v, axis=-1)
    return terminal - value_term - prior_term


class LatentPlanBuffer:
    """Per-level FIFO stores of previously selected z-sequences."""

    def __init__(self, levels: int, capacity: int = 64):
        self.capacity = capacity
        self.levels = {lvl: deque(maxlen=capacity) for lvl in range(1, levels + 1)}

    def __getitem__(self, level: int) -> deque:
        return self.levels[level]

    def sizes(self) -> dict[int, int]:
        return {lvl: len(q) for lvl, q in self.levels.items()}

    def snapshot(self) -> dict:
        return {lvl: [z.copy() for z in q] for lvl, q in self.levels.items()}

    def to_json(self) -> dict:
        return {str(lvl): [z.tolist() for z in q] for lvl, q in self.levels.items()}

    @classmethod
    def from_json(cls, d: dict, capacity: int = 64) -> "LatentPlanBuffer":
        buf = cls(len(d), capacity)
        for lvl, seqs in d.items():
            for z in seqs:
                buf[int(lvl)].append(np.asarray(z, dtype=np.float64))
        return buf


def sample_candidates(
    h0, model: CvaeModel, entries: Sequence[np.ndarray], K: int, N: int, rng: np.random.Generator,
    buffer_fraction: float = 0.5, segment: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """N candidate z-sequences (part replayed from ``entries``, rest from the prior) and their rollouts.

    Buffer entries at recursive levels hold the concatenation of all segments;
    segment ``segment`` of each entry is the one reused here.
    """
    if N < 2:
        raise InputError("need at least two candidates")
    n_buf = int(round(buffer_fraction * N)) if len(entries) else 0
    z = rng.standard_normal((N, K, model.d_z))
    if n_buf:
        picks = rng.integers(len(entries), size=n_buf)
        for row, p in enumerate(picks):
            e = entries[p]
            z[row] = e[segment * K : (segment + 1) * K] if len(e) > K else e
    return z, generate_sequence(model, np.broadcast_to(h0, (N, len(h0))), z)


@dataclass
class MppiResult:
    z: np.ndarray
    subgoals: np.ndarray
    cost: float
    best_history: list


def mppi_refine(
    z_init: np.ndarray,
    evaluate: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    cfg: PlanConfig,
    rng: np.random.Generator,
) -> MppiResult:
    """Importance-weighted refinement of whole z-sequences with an elite carried over.

    ``evaluate(z)`` maps a (n, K, d_z) batch to (subgoals, costs). The returned
    plan is the cheapest one seen, so ``best_history`` never increases.
    """
    z = np.asarray(z_init, dtype=np.float64)
    if len(z) == 0:
        raise PlanningError("no candidates to refine")
    n = len(z)
    subgoals, costs = evaluate(z)
    costs = np.where(np.isfinite(costs), costs, np.inf)
    if not np.isfinite(costs).any():
        raise PlanningError("every candidate has a non-finite cost")
    b = int(np.argmin(costs))
    best_z, best_s, best_c = z[b].copy(), subgoals[b].copy(), float(costs[b])
    history = [best_c]
    for _ in range(cfg.mppi_iters):
        finite = np.isfinite(costs)
        w = np.zeros(n)
        w[finite] = np.exp(-(costs[finite] - costs[finite].min()) / cfg.mppi_lambda)
        w /= w.sum()
        nominal = np.tensordot(w, z, axes=1)
        noise = cfg.mppi_sigma * rng.standard_normal((n - 2, *nominal.shape))
        z = np.concatenate([nominal[None], nominal[None] + noise, best_z[None]])
        subgoals, costs = evaluate(z)
        costs = np.where(np.isfinite(costs), costs, np.inf)
        b = int(np.argmin(costs))
        if costs[b] < best_c:
            best_z, best_s, best_c = z[b].copy(), subgoals[b].copy(), float(costs[b])
        history.append(best_c)
    return MppiResult(best_z, best_s, best_c, history)


@dataclass
class SubgoalPlan:
    """Output of :func:`plan`.

    ``per_level`` runs from the coarsest level (index 0) to the finest; each
    entry concatenates the segments planned at that level in time order.
    """

    per_level: list[dict]
    flattened: np.ndarray
    delta_t_finest: int
    cost: float

    def to_json(self, cfg: PlanConfig | None = None) -> dict:
        out = {
            "per_level": [
                {"level": d["level"], "z": d["z"].tolist(), "subgoals": d["subgoals"].tolist(), "costs": list(d["costs"])}
                for d in self.per_level
            ],
            "flattened": self.flattened.tolist(),
            "delta_t_finest": self.delta_t_finest,
            "cost": self.cost,
        }
        if cfg is not None:
            out["config"] = asdict(cfg)
        return out


def cast_models(models: Sequence[CvaeModel], dtype) -> list[CvaeModel]:
    """Inference-only copies with weights in ``dtype`` (float32 roughly triples planning speed)."""
    return [CvaeModel(m.level_index, m.delta_t, m.encoder.astype(dtype), m.decoder.astype(dtype), m.beta_kl) for m in models]


class ValueView:
    """Read-only value function V(h, g) from an agent, optionally in another precision."""

    def __init__(self, agent, dtype=np.float64):
        self.v = agent.v.astype(dtype)

    def value(self, h, g) -> np.ndarray:
        return self.v(goal_features(h, g))[..., 0].astype(np.float64)


def check_models(models: Sequence[CvaeModel], cfg: PlanConfig) -> None:
    if len(models) < cfg.L:
        raise ConfigError(f"planning with L={cfg.L} needs {cfg.L} CVAE levels, got {len(models)}")
    for lower, upper in zip(models[: cfg.L - 1], models[1 : cfg.L]):
        if upper.delta_t != cfg.M * lower.delta_t:
            raise ConfigError(f"delta_t {upper.delta_t} is not {cfg.M} x {lower.delta_t}")


def plan(h0, hg, models: Sequence[CvaeModel], agent, buffers: LatentPlanBuffer | None, cfg: PlanConfig, rng: np.random.Generator) -> SubgoalPlan:
    """Hierarchical plan from ``h0`` to ``hg``.

    ``models[l - 1]`` serves level ``l``; level ``cfg.L`` is the coarsest. The
    top level plans ``K`` subgoals, and every adjacent pair (starting from
    ``h0``) is refined into ``M`` subgoals one level down. Buffers are read,
    never written.
    """
    if cfg.L < 1:
        raise InputError("need at least one level")
    check_models(models, cfg)
    h0 = np.asarray(h0, dtype=np.float64)
    hg = np.asarray(hg, dtype=np.float64)
    value_fn = agent.value if agent is not None else None
    found = {lvl: [] for lvl in range(1, cfg.L + 1)}

    def solve(start, goal, level, K, segment):
        model = models[level - 1]
        entries = buffers[level] if buffers is not None else ()
        z0, _ = sample_candidates(start, model, entries, K, cfg.N, rng, cfg.buffer_fraction, segment)

        def evaluate(z):
            s = generate_sequence(model, np.broadcast_to(start, (len(z), len(start))), z)
            return s, plan_cost(start, goal, z, s, value_fn, cfg)

        res = mppi_refine(z0, evaluate, cfg, rng)
        found[level].append((res.z, res.subgoals, res.cost))
        if level == 1:
            return res.cost
        prev = start
        for i in range(K):
            solve(prev, res.subgoals[i], level - 1, cfg.M, segment * K + i)
            prev = res.subgoals[i]
        return res.cost

    top_cost = solve(h0, hg, cfg.L, cfg.K, 0)
    per_level = []
    for lvl in range(cfg.L, 0, -1):
        parts = found[lvl]
        per_level.append({
            "level": lvl,
            "z": np.concatenate([p[0] for p in parts]),
            "subgoals": np.concatenate([p[1] for p in parts]),
            "costs": [p[2] for p in parts],
        })
    return SubgoalPlan(per_level, per_level[-1]["subgoals"], models[0].delta_t, top_cost)


def buffer_commit(buffers: LatentPlanBuffer, plan_: SubgoalPlan) -> LatentPlanBuffer:
    for d in plan_.per_level:
        buffers[d["level"]].append(d["z"].copy())
    return buffers
