"""Affine state encoder and the sparse latent goal-reaching reward."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .envsim import STATE_DIM, EnvState, Trajectory
from .errors import InputError, StateError

SCALE_FLOOR = 1e-3


@dataclass(frozen=True)
class NormalizerStats:
    mean: np.ndarray
    scale: np.ndarray

    @property
    def d_h(self) -> int:
        return int(self.mean.shape[0])

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist(), "d_h": self.d_h}

    @classmethod
    def from_json(cls, d: dict) -> "NormalizerStats":
        stats = cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["scale"], dtype=np.float64))
        if stats.d_h != d.get("d_h", stats.d_h):
            raise InputError("d_h does not match the stored vectors")
        return stats

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "NormalizerStats":
        return cls.from_json(json.loads(Path(path).read_text()))


def fit(trajectories: Iterable[Trajectory], scale_floor: float = SCALE_FLOOR) -> NormalizerStats:
    arrays = [t.state_array() for t in trajectories]
    if not arrays:
        raise StateError("cannot fit normalizer statistics on an empty dataset")
    states = np.concatenate(arrays)
    mean = states.mean(axis=0)
    scale = np.maximum(states.std(axis=0), scale_floor)
    return NormalizerStats(mean, scale)


def _raw(s) -> np.ndarray:
    if isinstance(s, EnvState):
        return s.flatten()
    arr = np.asarray(s, dtype=np.float64)
    if arr.shape[-1] != STATE_DIM:
        raise InputError(f"state vectors must have {STATE_DIM} entries, got shape {arr.shape}")
    return arr


def encode(stats: NormalizerStats | None, s) -> np.ndarray:
    """Map an EnvState (or array of flattened states) into the latent space."""
    if stats is None:
        raise StateError("normalizer is not fitted")
    return (_raw(s) - stats.mean) / stats.scale


def decode(stats: NormalizerStats, h: np.ndarray) -> np.ndarray:
    return np.asarray(h) * stats.scale + stats.mean


def reward(h_next: np.ndarray, h_goal: np.ndarray, eps: float) -> np.ndarray | float:
    """0 inside the open eps-ball around the goal, -1 outside. Broadcasts over rows."""
    dist = np.linalg.norm(np.asarray(h_next) - np.asarray(h_goal), axis=-1)
    r = np.where(dist < eps, 0.0, -1.0)
    return float(r) if r.ndim == 0 else r
