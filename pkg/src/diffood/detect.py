"""OOD detector scores, the threshold rule and threshold-free metrics.

Every score follows one convention: higher means more out-of-distribution.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import tensor as tn
from .diffusion import DEFAULT_SIGMA0, NoiseSchedule
from .model import DenoiserModel, masked_positions
from .rng import stream
from .text import BOS_ID, EOS_ID, MASK_ID, TokenSequence, stack
from .trainer import recon_scores

DETECTORS = ("cosine", "mlm", "msp", "energy", "maha", "diffusion", "diffusion+maha")


# --------------------------------------------------------------- metrics
def _check_sides(id_scores, ood_scores) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both ID and OOD score sets must be non-empty")
    return a, b


def auroc(id_scores, ood_scores) -> float:
    """P(OOD score > ID score) with ties counted one half (Mann-Whitney U / (n m))."""
    a, b = _check_sides(id_scores, ood_scores)
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[a.size:].sum() - b.size * (b.size + 1) / 2.0
    return float(u / (a.size * b.size))


def id_threshold(id_scores, tpr: int = 95) -> float:
    """Smallest ID score gamma with at least ``tpr`` percent of ID scores <= gamma."""
    a = np.sort(np.asarray(id_scores, dtype=np.float64).ravel())
    if a.size == 0:
        raise ValueError("empty ID score set")
    k = (tpr * a.size + 99) // 100
    return float(a[max(k, 1) - 1])


def far95(id_scores, ood_scores) -> float:
    """Fraction of OOD scores accepted as ID at the threshold that keeps 95% of ID."""
    a, b = _check_sides(id_scores, ood_scores)
    gamma = id_threshold(a, 95)
    return float(np.count_nonzero(b <= gamma) / b.size)


def decide(f, gamma: float):
    """0 (ID) where f <= gamma, else 1 (OOD)."""
    out = (np.asarray(f) > gamma).astype(np.int64)
    return int(out) if out.ndim == 0 else out


@dataclass
class DetectionMetrics:
    auroc: float
    far95: float
    n_id: int
    n_ood: int

    @classmethod
    def compute(cls, id_scores, ood_scores) -> "DetectionMetrics":
        return cls(auroc(id_scores, ood_scores), far95(id_scores, ood_scores), len(id_scores), len(ood_scores))


# ----------------------------------------------------------- mahalanobis
@dataclass
class MahalanobisStats:
    mu: np.ndarray
    sigma: np.ndarray
    sigma_pinv: np.ndarray
    counts: np.ndarray

    @property
    def class_count(self) -> int:
        return len(self.mu)

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def pinv_sym(a: np.ndarray, rel_cutoff: float = 1e-6) -> np.ndarray:
    """Pseudo-inverse of a symmetric PSD matrix, dropping eigenvalues below rel_cutoff * max."""
    w, v = np.linalg.eigh((a + a.T) / 2.0)
    top = w.max() if w.size else 0.0
    keep = w > rel_cutoff * top if top > 0 else np.zeros_like(w, dtype=bool)
    inv = (v[:, keep] / w[keep]) @ v[:, keep].T
    return (inv + inv.T) / 2.0


def maha_fit(reprs, labels=None, rel_cutoff: float = 1e-6) -> MahalanobisStats:
    """Per-class (or single global) means and the shared covariance pseudo-inverse."""
    h = np.asarray(reprs, dtype=np.float64)
    if h.ndim != 2 or len(h) < 2:
        raise ValueError("maha_fit needs at least 2 samples of shape (N, d)")
    if labels is None:
        groups = [np.arange(len(h))]
    else:
        labels = np.asarray(labels)
        if labels.shape != (len(h),):
            raise ValueError("labels must have one entry per sample")
        groups = [np.flatnonzero(labels == c) for c in np.unique(labels)]
    mu = np.stack([h[g].mean(axis=0) for g in groups])
    centered = np.concatenate([h[g] - m for g, m in zip(groups, mu)])
    sigma = centered.T @ centered / len(h)
    return MahalanobisStats(mu, sigma, pinv_sym(sigma, rel_cutoff), np.array([len(g) for g in groups]))


def maha_score(h, stats: MahalanobisStats) -> np.ndarray:
    """min over class means of (h - mu)^T Sigma^+ (h - mu); a single mean gives the class-free form."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    if h.shape[1] != stats.mu.shape[1]:
        raise ValueError(f"representation dimension {h.shape[1]} != fitted {stats.mu.shape[1]}")
    diff = h[:, None, :] - stats.mu[None, :, :]
    q = np.einsum("bcd,de,bce->bc", diff, stats.sigma_pinv, diff)
    return np.maximum(q.min(axis=1), 0.0)


# ---------------------------------------------------------- baselines
def cosine_similarity_max(h, dev_reprs) -> np.ndarray:
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    ref = np.asarray(dev_reprs, dtype=np.float64)
    hn = np.linalg.norm(h, axis=1)
    rn = np.linalg.norm(ref, axis=1)
    if np.any(hn == 0) or np.any(rn == 0):
        raise ValueError("cosine score of a zero-norm vector")
    return ((h / hn[:, None]) @ (ref / rn[:, None]).T).max(axis=1)


def cosine_score(h, dev_reprs) -> np.ndarray:
    """Negated max cosine similarity to the ID dev representations."""
    return -cosine_similarity_max(h, dev_reprs)


def msp_score(probs) -> np.ndarray:
    return 1.0 - np.asarray(probs, dtype=np.float64).max(axis=-1)


def energy_score(logits) -> np.ndarray:
    """-log sum_j exp(logit_j), max-shifted."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1)
    return -(m + np.log(np.exp(z - m[..., None]).sum(axis=-1)))


def mlm_score(seqs: Sequence[TokenSequence], model: DenoiserModel, R: int = 10, seed: int = 0, key: str = "",
              rate: float = 0.15, batch_size: int = 256) -> np.ndarray:
    """Mean masked-LM loss per sentence over ``R`` random masking patterns."""
    total = np.zeros(len(seqs))
    for lo in range(0, len(seqs), batch_size):
        chunk = seqs[lo : lo + batch_size]
        ids, mask = stack(chunk)
        words = (mask > 0) & (ids != BOS_ID) & (ids != EOS_ID)
        for r in range(R):
            masked = np.concatenate([
                masked_positions(mask[i : i + 1], words[i : i + 1], rate, stream(seed, key, lo + i, r))
                for i in range(len(chunk))
            ])
            with tn.no_grad():
                z = model.mlm_logits(np.where(masked, MASK_ID, ids)).data.astype(np.float64)
            z -= z.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            nll = -np.take_along_axis(logp, ids[..., None], axis=-1)[..., 0]
            total[lo : lo + len(chunk)] += (nll * masked).sum(axis=1) / masked.sum(axis=1)
    return total / R


def recon_score(seqs: Sequence[TokenSequence], model: DenoiserModel, schedule: NoiseSchedule, t_eval: int,
                K: int = 10, seed: int = 0, key: str = "", kind: str = "recon",
                sigma0: float = DEFAULT_SIGMA0) -> np.ndarray:
    """Mean over ``K`` noise draws of the per-word reconstruction loss at ``t_eval``.

    ``kind="l_c"`` scores with the rounding cross-entropy alone.
    """
    l_d, l_c = recon_scores(model, schedule, seqs, t_eval, K, seed, key, sigma0)
    if kind == "recon":
        return l_d + l_c
    if kind == "l_c":
        return l_c
    raise ValueError(f"unknown reconstruction score kind {kind!r}")


@dataclass
class Standardizer:
    mean: float
    std: float

    @classmethod
    def fit(cls, x) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        return cls(float(x.mean()), float(x.std()) or 1.0)

    def __call__(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


def combined_score(l_recon, d, lam: float = 0.99, recon_norm: Standardizer | None = None,
                   maha_norm: Standardizer | None = None) -> np.ndarray:
    """lam * L_recon + (1 - lam) * d(x); optional z-standardization of each part."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    r = np.asarray(l_recon, dtype=np.float64)
    m = np.asarray(d, dtype=np.float64)
    if recon_norm is not None:
        r = recon_norm(r)
    if maha_norm is not None:
        m = maha_norm(m)
    if lam == 1.0:
        return r.copy()
    if lam == 0.0:
        return m.copy()
    return lam * r + (1.0 - lam) * m


# -------------------------------------------------------------- reports
@dataclass
class ScoreReport:
    scores: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)  # domain -> detector -> scores
    provenance: dict = field(default_factory=dict)

    def add(self, domain: str, detector: str, values) -> None:
        values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise ValueError(f"non-finite {detector} scores for {domain}")
        slot = self.scores.setdefault(domain, {})
        if detector in slot:
            raise ValueError(f"{detector} already scored for {domain}")
        slot[detector] = values

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "domain", "detector", "score"])
            for domain, dets in self.scores.items():
                for det, vals in dets.items():
                    for i, v in enumerate(vals):
                        w.writerow([i, domain, det, repr(float(v))])


METRIC_FIELDS = ["id_domain", "ood_domain", "detector", "auroc", "far95", "n_id", "n_ood"]


def write_metrics_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if isinstance(r[k], float) else r[k]) for k in METRIC_FIELDS})


def standard_error(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
