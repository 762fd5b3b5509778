"""Forward noising on token embeddings, reconstruction losses and sampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tensor
from .text import TokenSequence, stack

DEFAULT_SIGMA0 = 1e-4


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule for t = 1..T; arrays are indexed by t - 1."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.shape != (self.T,) or self.T < 1:
            raise ValueError(f"expected {self.T} betas, got shape {b.shape}")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "alphas", 1.0 - b)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - b))

    def alpha_bar(self, t) -> np.ndarray:
        """Cumulative product at step(s) t; t = 0 gives 1."""
        t = np.asarray(t)
        self.check_t(t, allow_zero=True)
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]

    def check_t(self, t, allow_zero: bool = False) -> None:
        t = np.asarray(t)
        lo = 0 if allow_zero else 1
        if np.any(t < lo) or np.any(t > self.T):
            raise ValueError(f"diffusion step out of range [{lo}, {self.T}]: {t}")


def linear_beta_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be at least 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        return NoiseSchedule(1, np.array([beta_start]))
    t = np.arange(T, dtype=np.float64)
    return NoiseSchedule(T, beta_start + t / (T - 1) * (beta_end - beta_start))


@dataclass
class LatentBatch:
    x0: Tensor
    x_t: Tensor
    t: np.ndarray
    eps: np.ndarray


@dataclass
class ReconLossBreakdown:
    """Per-sentence, per-word averaged losses."""

    l_d: np.ndarray
    l_c: np.ndarray

    @property
    def l_recon(self) -> np.ndarray:
        return self.l_d + self.l_c


def embed_tokens(ids: np.ndarray, E: Tensor, sigma0: float = DEFAULT_SIGMA0, noise: np.ndarray | None = None) -> Tensor:
    """Gather embeddings and add ``sigma0 * noise`` (standard normal, same shape)."""
    x = tn.embedding(E, ids)
    if sigma0 == 0 or noise is None:
        return x
    return tn.add(x, Tensor(sigma0 * noise))


def forward_noise(x0: Tensor, t, schedule: NoiseSchedule, eps: np.ndarray) -> Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` is a scalar or one step per batch row."""
    schedule.check_t(t)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise tn.ShapeError("forward_noise", x0.shape, eps.shape)
    ab = schedule.alpha_bar(t)
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    a = np.sqrt(ab)
    s = np.sqrt(1.0 - ab)
    return tn.add(tn.mul(x0, Tensor(a)), Tensor(s * eps))


def diffusion_loss(x0: Tensor, x0_hat: Tensor, mask) -> Tensor:
    """Mean over real positions of ||x0 - x0_hat||^2 / d."""
    return tn.mse(x0_hat, x0, mask)


def rounding_logits(x0_hat: Tensor, E: Tensor) -> Tensor:
    return tn.matmul(x0_hat, tn.transpose(E))


def rounding_loss(x0_hat: Tensor, ids: np.ndarray, E: Tensor, mask) -> Tensor:
    """Mean over real positions of -log softmax(x0_hat E^T)[true token]."""
    return tn.cross_entropy(rounding_logits(x0_hat, E), ids, mask)


def _draw(rng: np.random.Generator, shape) -> tuple[np.ndarray, np.ndarray]:
    # embedding jitter first, then diffusion noise; order is part of the determinism contract
    return rng.standard_normal(shape), rng.standard_normal(shape)


def noised_batch(ids: np.ndarray, E: Tensor, schedule: NoiseSchedule, t, rngs: Sequence[np.random.Generator],
                 sigma0: float = DEFAULT_SIGMA0) -> LatentBatch:
    B, n = ids.shape
    d = E.shape[1]
    jit = np.empty((B, n, d))
    eps = np.empty((B, n, d))
    for i, r in enumerate(rngs):
        jit[i], eps[i] = _draw(r, (n, d))
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,)).copy()
    x0 = embed_tokens(ids, E, sigma0, jit)
    x_t = forward_noise(x0, t, schedule, eps)
    return LatentBatch(x0, x_t, t, eps)


def recon_objective(model, ids: np.ndarray, mask: np.ndarray, schedule: NoiseSchedule, t,
                    rngs: Sequence[np.random.Generator], sigma0: float = DEFAULT_SIGMA0) -> tuple[Tensor, Tensor]:
    """Batch-level (l_d, l_c) tensors, each averaged over all real positions in the batch."""
    lb = noised_batch(ids, model.E, schedule, t, rngs, sigma0)
    x0_hat = model.denoise(lb.x_t, lb.t)
    return diffusion_loss(lb.x0, x0_hat, mask), rounding_loss(x0_hat, ids, model.E, mask)


def _per_sentence(x0: np.ndarray, x0_hat: np.ndarray, logits: np.ndarray, ids: np.ndarray, mask: np.ndarray):
    x0 = x0.astype(np.float64)
    x0_hat = x0_hat.astype(np.float64)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("sentence with no real positions")
    sq = ((x0 - x0_hat) ** 2).mean(axis=-1)
    l_d = (sq * mask).sum(axis=1) / counts
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = -np.take_along_axis(logp, ids[..., None], axis=-1)[..., 0]
    l_c = (nll * mask).sum(axis=1) / counts
    return l_d, l_c, logp


def recon_loss(seqs: Sequence[TokenSequence], model, schedule: NoiseSchedule, t,
               rngs: Sequence[np.random.Generator], sigma0: float = DEFAULT_SIGMA0) -> ReconLossBreakdown:
    """Per-sentence reconstruction losses at step ``t`` with one noise draw per sentence."""
    ids, mask = stack(seqs)
    with tn.no_grad():
        lb = noised_batch(ids, model.E, schedule, t, rngs, sigma0)
        x0_hat = model.denoise(lb.x_t, lb.t)
        logits = rounding_logits(x0_hat, model.E)
    l_d, l_c, _ = _per_sentence(lb.x0.data, x0_hat.data, logits.data, ids, mask)
    return ReconLossBreakdown(l_d, l_c)


@dataclass
class Reconstruction:
    ids: np.ndarray
    correct: np.ndarray

    @property
    def accuracy(self) -> float:
        return float(self.correct.mean()) if self.correct.size else 0.0


def reconstruct(seqs: Sequence[TokenSequence], model, schedule: NoiseSchedule, t,
                rngs: Sequence[np.random.Generator], sigma0: float = DEFAULT_SIGMA0) -> list[Reconstruction]:
    """One denoiser pass; argmax rounding with per-position correctness over real positions."""
    ids, mask = stack(seqs)
    with tn.no_grad():
        lb = noised_batch(ids, model.E, schedule, t, rngs, sigma0)
        logits = rounding_logits(model.denoise(lb.x_t, lb.t), model.E).data
    pred = logits.argmax(axis=-1)
    out = []
    for i, s in enumerate(seqs):
        out.append(Reconstruction(pred[i], pred[i, : s.length] == ids[i, : s.length]))
    return out


def sample(model, schedule: NoiseSchedule, num: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Ancestral sampling with the x0-parameterized DDPM posterior; returns (num, n) token ids."""
    d = model.E.shape[1]
    x = rng.standard_normal((num, n, d))
    with tn.no_grad():
        for t in range(schedule.T, 0, -1):
            x0_hat = model.denoise(Tensor(x), np.full(num, t)).data.astype(np.float64)
            if t == 1:
                x = x0_hat
                break
            ab_t = schedule.alpha_bars[t - 1]
            ab_prev = schedule.alpha_bars[t - 2]
            beta = schedule.betas[t - 1]
            c0 = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
            ct = np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab_t)
            var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
            x = c0 * x0_hat + ct * x + np.sqrt(var) * rng.standard_normal(x.shape)
        logits = rounding_logits(Tensor(x), model.E).data
    return logits.argmax(axis=-1)
