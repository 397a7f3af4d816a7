"""Conditional VAE over reachable future latent states, one model per time scale."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import approx
from .approx import AdamState, Mlp
from .errors import ConfigError, InputError, NumericError

log = logging.getLogger(__name__)

D_Z = 8
LOGVAR_MIN, LOGVAR_MAX = -10.0, 4.0


@dataclass
class CvaeModel:
    """Encoder q(z | h, h') and decoder g(h, z) for one temporal offset.

    The decoder predicts the change from ``h``: g(h, z) = h + net([h, z]).
    """

    level_index: int
    delta_t: int
    encoder: Mlp
    decoder: Mlp
    beta_kl: float = 1.0
    enc_opt: AdamState | None = field(default=None, repr=False)
    dec_opt: AdamState | None = field(default=None, repr=False)

    @property
    def d_h(self) -> int:
        return self.decoder.layer_sizes[-1]

    @property
    def d_z(self) -> int:
        return self.decoder.layer_sizes[0] - self.d_h

    def copy(self) -> "CvaeModel":
        return CvaeModel(self.level_index, self.delta_t, self.encoder.copy(), self.decoder.copy(), self.beta_kl)

    def save(self, directory, stem: str | None = None) -> None:
        d = Path(directory)
        stem = stem or f"cvae_level{self.level_index}"
        approx.save_mlp(self.encoder, d / f"{stem}_encoder.bin")
        approx.save_mlp(self.decoder, d / f"{stem}_decoder.bin")
        meta = {"level_index": self.level_index, "delta_t": self.delta_t, "d_z": self.d_z, "beta_kl": self.beta_kl}
        (d / f"{stem}.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory, level_index: int) -> "CvaeModel":
        d = Path(directory)
        stem = f"cvae_level{level_index}"
        meta = json.loads((d / f"{stem}.json").read_text())
        enc = approx.load_mlp(d / f"{stem}_encoder.bin")
        dec = approx.load_mlp(d / f"{stem}_decoder.bin")
        return cls(meta["level_index"], meta["delta_t"], enc, dec, meta["beta_kl"])


def init_cvae(level_index: int, delta_t: int, rng, d_h: int = 8, d_z: int = D_Z, hidden=(128, 128), beta_kl=1.0, lr=3e-4):
    enc = approx.init_mlp([2 * d_h, *hidden, 2 * d_z], rng)
    dec = approx.init_mlp([d_h + d_z, *hidden, d_h], rng)
    return CvaeModel(level_index, delta_t, enc, dec, beta_kl, approx.adam_for(enc, lr), approx.adam_for(dec, lr))


@dataclass(frozen=True)
class TransitionPair:
    h_t: np.ndarray
    h_tau: np.ndarray
    delta_t_actual: int

    def __post_init__(self):
        if self.delta_t_actual <= 0:
            raise InputError("the future state must lie strictly after the context state")


def decode(model: CvaeModel, h: np.ndarray, z: np.ndarray) -> np.ndarray:
    return h + model.decoder(np.concatenate([h, z], axis=-1))


def generate_sequence(model: CvaeModel, h_start: np.ndarray, z_seq) -> np.ndarray:
    """Roll the decoder forward: s_1 = g(h_start, z_1), s_i = g(s_{i-1}, z_i).

    ``h_start`` may be ``(d_h,)`` or ``(B, d_h)`` with ``z_seq`` of shape
    ``(K, d_z)`` or ``(B, K, d_z)``; the output has the matching shape.
    """
    z_seq = np.asarray(z_seq, dtype=np.float64)
    h = np.asarray(h_start, dtype=np.float64)
    if z_seq.size == 0:
        return np.zeros((*h.shape[:-1], 0, h.shape[-1]))
    if z_seq.shape[-1] != model.d_z:
        raise InputError(f"z vectors must have {model.d_z} entries")
    out = []
    for i in range(z_seq.shape[-2]):
        h = decode(model, h, z_seq[..., i, :])
        out.append(h)
    return np.stack(out, axis=-2)


def _encode_posterior(model: CvaeModel, h: np.ndarray, h_next: np.ndarray):
    out, cache = approx.forward(model.encoder, np.concatenate([h, h_next], axis=-1))
    mu, raw = out[..., : model.d_z], out[..., model.d_z :]
    logvar = np.clip(raw, LOGVAR_MIN, LOGVAR_MAX)
    return mu, logvar, raw, cache


def kl_standard_normal(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=-1)


def _check_finite(**arrays) -> None:
    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite values in {name}")


def elbo_terms(model: CvaeModel, h: np.ndarray, h_next: np.ndarray, xi: np.ndarray, with_grads: bool = False):
    """Per-row reconstruction and KL terms using z = mu + exp(logvar / 2) * xi.

    With ``with_grads`` also returns encoder/decoder gradients of
    ``mean(recon + beta_kl * kl)`` and the reconstructions themselves.
    """
    h = np.atleast_2d(h)
    h_next = np.atleast_2d(h_next)
    xi = np.atleast_2d(xi)
    mu, logvar, raw, enc_cache = _encode_posterior(model, h, h_next)
    std = np.exp(0.5 * logvar)
    z = mu + std * xi
    delta, dec_cache = approx.forward(model.decoder, np.concatenate([h, z], axis=-1))
    recon_h = h + delta
    err = h_next - recon_h
    recon = np.sum(err * err, axis=-1)
    kl = kl_standard_normal(mu, logvar)
    _check_finite(mu=mu, logvar=logvar, reconstruction=recon_h)
    if not with_grads:
        return recon, kl, recon_h
    n = h.shape[0]
    g_dec = approx.backward(model.decoder, dec_cache, -2.0 * err / n)
    dz = g_dec.x[:, model.d_h :]
    beta = model.beta_kl
    dmu = dz + beta * mu / n
    dlogvar = dz * xi * std * 0.5 + beta * 0.5 * (np.exp(logvar) - 1.0) / n
    dlogvar = np.where((raw > LOGVAR_MIN) & (raw < LOGVAR_MAX), dlogvar, 0.0)
    g_enc = approx.backward(model.encoder, enc_cache, np.concatenate([dmu, dlogvar], axis=-1))
    return recon, kl, recon_h, g_enc, g_dec


def elbo_loss(model: CvaeModel, pair: TransitionPair, xi: np.ndarray | None = None, rng=None):
    """Single-sample ELBO estimate for one pair: (loss, {"recon", "kl"})."""
    if xi is None:
        rng = rng if rng is not None else np.random.default_rng()
        xi = rng.standard_normal(model.d_z)
    if np.shape(pair.h_t)[-1] != model.d_h or np.shape(pair.h_tau)[-1] != model.d_h:
        raise InputError("pair dimension does not match the model")
    recon, kl, _ = elbo_terms(model, pair.h_t, pair.h_tau, xi)
    recon, kl = float(recon[0]), float(kl[0])
    return recon + model.beta_kl * kl, {"recon": recon, "kl": kl}


# --------------------------------------------------------------------------- training


@dataclass
class CvaeTrainConfig:
    batch_size: int = 256
    batches_per_epoch: int = 100
    chain_length: int = 3
    spread: float = 0.25
    holdout_fraction: float = 0.1
    holdout_pairs: int = 2000


def offset_range(delta_t: int, spread: float = 0.25) -> tuple[int, int]:
    return max(1, int(round((1 - spread) * delta_t))), max(1, int(round((1 + spread) * delta_t)))


class ChainSampler:
    """Draws chains of future offsets from encoded trajectories.

    Only trajectories with at least ``chain_length * delta_t + 1`` states are
    used. Links that would run past the end of a trajectory are dropped, so a
    chain always has its first link and possibly fewer than ``chain_length``.
    """

    def __init__(self, latents: Sequence[np.ndarray], delta_t: int, chain_length: int, spread: float, level: int = 0):
        need = chain_length * delta_t + 1
        self.trajs = [h for h in latents if len(h) >= need]
        if not self.trajs:
            raise ConfigError(f"level {level} (delta_t={delta_t}): no trajectory has the required {need} states")
        self.lo, self.hi = offset_range(delta_t, spread)
        self.chain_length = chain_length
        self._flat = np.concatenate(self.trajs)
        lens = np.array([len(h) for h in self.trajs])
        self._start = np.concatenate([[0], np.cumsum(lens)[:-1]])
        self._last = lens - 1

    def sample(self, rng: np.random.Generator, n: int):
        """Returns (states, valid) with states (chain_length + 1, n, d_h) and valid (chain_length, n)."""
        idx = rng.integers(len(self.trajs), size=n)
        offs = rng.integers(self.lo, self.hi + 1, size=(n, self.chain_length))
        u = rng.random(n)
        last = self._last[idx]
        cum = np.cumsum(offs, axis=1)
        links = np.sum(cum <= last[:, None], axis=1)
        rows = np.arange(n)
        t = (u * (last - cum[rows, links - 1] + 1)).astype(np.int64)
        pos = np.concatenate([t[:, None], t[:, None] + cum], axis=1)
        j = np.arange(self.chain_length + 1)
        pos = np.where(j[None, :] <= links[:, None], pos, pos[rows, links][:, None])
        states = self._flat[self._start[idx][:, None] + pos].transpose(1, 0, 2)
        valid = j[None, 1:] <= links[:, None]
        return np.ascontiguousarray(states), np.ascontiguousarray(valid.T)


def holdout_mse(model: CvaeModel, h: np.ndarray, h_next: np.ndarray, xi: np.ndarray) -> float:
    recon, _, _ = elbo_terms(model, h, h_next, xi)
    return float(np.mean(recon))


def split_holdout(latents: Sequence[np.ndarray], fraction: float, rng) -> tuple[list, list]:
    order = rng.permutation(len(latents))
    n_hold = int(round(fraction * len(latents)))
    hold = set(order[:n_hold].tolist())
    train = [h for i, h in enumerate(latents) if i not in hold]
    held = [h for i, h in enumerate(latents) if i in hold]
    return train, held


def train_level(
    model: CvaeModel,
    latents: Sequence[np.ndarray],
    epochs: int,
    seed: int,
    cfg: CvaeTrainConfig = CvaeTrainConfig(),
    history: list | None = None,
) -> CvaeModel:
    """Fit one level on encoded trajectories (each an array of latent states).

    Each batch draws chains of successive future states; link ``j > 1`` uses
    the (stop-gradient) reconstruction from link ``j - 1`` as its context.
    Held-out reconstruction MSE is appended to ``history`` once before
    training and after every epoch.
    """
    if epochs <= 0:
        return model
    rng = np.random.default_rng(np.random.SeedSequence([seed, model.level_index]))
    train, held = split_holdout(latents, cfg.holdout_fraction, rng)
    sampler = ChainSampler(train, model.delta_t, cfg.chain_length, cfg.spread, model.level_index)
    hold_sampler = ChainSampler(held or train, model.delta_t, 1, cfg.spread, model.level_index)
    hold_rng = np.random.default_rng(np.random.SeedSequence([seed, model.level_index, 1]))
    hs, _ = hold_sampler.sample(hold_rng, cfg.holdout_pairs)
    hold_xi = hold_rng.standard_normal((cfg.holdout_pairs, model.d_z))

    model = CvaeModel(
        model.level_index, model.delta_t, model.encoder, model.decoder, model.beta_kl,
        model.enc_opt or approx.adam_for(model.encoder), model.dec_opt or approx.adam_for(model.decoder),
    )
    if history is not None:
        history.append(holdout_mse(model, hs[0], hs[1], hold_xi))
    for epoch in range(epochs):
        for _ in range(cfg.batches_per_epoch):
            states, valid = sampler.sample(rng, cfg.batch_size)
            xi = rng.standard_normal((cfg.chain_length, cfg.batch_size, model.d_z))
            model, _ = chain_step(model, states, valid, xi)
        mse = holdout_mse(model, hs[0], hs[1], hold_xi)
        if history is not None:
            history.append(mse)
        log.info("cvae level %d epoch %d holdout mse %.4f", model.level_index, epoch + 1, mse)
    return model


def chain_step(model: CvaeModel, states: np.ndarray, valid: np.ndarray, xi: np.ndarray):
    """One Adam step on the mean ELBO over all valid links of a batch of chains."""
    total = int(valid.sum())
    enc_g = [np.zeros_like(a) for a in model.encoder.arrays()]
    dec_g = [np.zeros_like(a) for a in model.decoder.arrays()]
    context = states[0]
    loss = 0.0
    for j in range(valid.shape[0]):
        rows = valid[j]
        if not rows.any():
            break
        n = int(rows.sum())
        recon, kl, recon_h, g_enc, g_dec = elbo_terms(model, context[rows], states[j + 1][rows], xi[j][rows], True)
        w = n / total
        loss += w * float(np.mean(recon + model.beta_kl * kl))
        for acc, g in zip(enc_g, g_enc.arrays()):
            acc += w * g
        for acc, g in zip(dec_g, g_dec.arrays()):
            acc += w * g
        context = context.copy()
        context[rows] = recon_h
    enc_new, enc_opt = approx.adam_update(model.encoder.arrays(), enc_g, model.enc_opt)
    dec_new, dec_opt = approx.adam_update(model.decoder.arrays(), dec_g, model.dec_opt)
    new = CvaeModel(
        model.level_index, model.delta_t, Mlp.from_arrays(enc_new), Mlp.from_arrays(dec_new),
        model.beta_kl, enc_opt, dec_opt,
    )
    return new, loss
