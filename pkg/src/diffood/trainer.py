"""Training loops, checkpoints and the reconstruction-loss evaluation table.

Checkpoint layout (a directory)::

    manifest.json   UTF-8 JSON, keys sorted, 2-space indent, trailing LF.
                    {"format": "diffood-checkpoint/1",
                     "model_config": {...}, "train_config": {...} | null,
                     "step": int, "history": [[step, loss, lr], ...],
                     "buffers": [{"name", "shape", "offset", "nbytes"}, ...]}
    params.bin      the buffers back to back, in manifest order, each a
                    C-order little-endian float32 array; offsets in bytes.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .diffusion import DEFAULT_SIGMA0, NoiseSchedule, linear_beta_schedule, recon_loss, recon_objective
from .model import DenoiserModel, ModelConfig, masked_positions
from .rng import stream
from .text import BOS_ID, EOS_ID, TokenSequence, stack

log = logging.getLogger(__name__)

FORMAT = "diffood-checkpoint/1"
OBJECTIVES = ("diffusion", "mlm", "classifier")


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 16
    lr: float = 5e-5
    lr_decay: bool = True
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma0: float = DEFAULT_SIGMA0
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 50
    objective: str = "diffusion"
    mask_rate: float = 0.15
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.steps < 0 or self.batch_size <= 0:
            raise ValueError("steps must be >= 0 and batch_size > 0")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")

    def schedule(self) -> NoiseSchedule:
        return linear_beta_schedule(self.T, self.beta_start, self.beta_end)

    def lr_at(self, step: int) -> float:
        if not self.lr_decay or self.steps == 0:
            return self.lr
        return self.lr * (1.0 - step / self.steps)


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict | None
    step: int
    params: dict[str, np.ndarray]
    history: list = field(default_factory=list)

    def model(self) -> DenoiserModel:
        m = DenoiserModel(ModelConfig(**self.model_config))
        assign_params(m, self.params)
        return m

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()[:16]


def snapshot(model: DenoiserModel, step: int, train_config: TrainConfig | None = None, history=()) -> Checkpoint:
    return Checkpoint(
        model.cfg.to_dict(),
        asdict(train_config) if train_config is not None else None,
        step,
        {k: v.data.astype(np.float32, copy=True) for k, v in model.params.items()},
        [list(h) for h in history],
    )


def assign_params(model: DenoiserModel, params: dict[str, np.ndarray]) -> None:
    """Copy named buffers into ``model``; names and shapes must match exactly."""
    for name, p in model.params.items():
        if name not in params:
            raise CheckpointError(f"missing buffer {name!r}")
        arr = params[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"buffer {name!r}: shape {arr.shape} does not match model {p.shape}")
        p.data = np.array(arr, dtype=p.data.dtype)
        p.zero_grad()
    extra = set(params) - set(model.params)
    if extra:
        raise CheckpointError(f"unexpected buffers {sorted(extra)}")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    buffers, blobs, offset = [], [], 0
    for name, arr in ckpt.params.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        buffers.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format": FORMAT,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "step": ckpt.step,
        "history": ckpt.history,
        "buffers": buffers,
    }
    (path / "params.bin").write_bytes(b"".join(blobs))
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    raw = (path / "params.bin").read_bytes()
    params = {}
    end = 0
    for b in manifest["buffers"]:
        name, shape = b["name"], tuple(b["shape"])
        want = 4 * int(np.prod(shape, dtype=np.int64))
        if b["nbytes"] != want:
            raise CheckpointError(f"buffer {name!r}: manifest says {b['nbytes']} bytes, shape needs {want}")
        lo, hi = b["offset"], b["offset"] + b["nbytes"]
        if hi > len(raw):
            raise CheckpointError(f"buffer {name!r}: params.bin truncated ({len(raw)} bytes, need {hi})")
        params[name] = np.frombuffer(raw[lo:hi], dtype="<f4").reshape(shape).astype(np.float32)
        end = max(end, hi)
    if end != len(raw):
        raise CheckpointError(f"params.bin has {len(raw) - end} trailing bytes")
    ckpt = Checkpoint(manifest["model_config"], manifest["train_config"], manifest["step"], params, manifest["history"])
    expected = DenoiserModel(ModelConfig(**ckpt.model_config)).params
    for name, p in expected.items():
        if name not in params:
            raise CheckpointError(f"missing buffer {name!r}")
        if params[name].shape != p.shape:
            raise CheckpointError(f"buffer {name!r}: shape {params[name].shape} does not match config {p.shape}")
    return ckpt


# --------------------------------------------------------------- training
def _batches(n_items: int, batch_size: int, seed: int):
    """Endless stream of index batches from per-epoch permutations."""
    epoch = 0
    while True:
        perm = stream(seed, "epoch", epoch).permutation(n_items)
        for lo in range(0, n_items - batch_size + 1, batch_size):
            yield perm[lo : lo + batch_size]
        epoch += 1


def _word_positions(ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return (mask > 0) & (ids != BOS_ID) & (ids != EOS_ID)


def step_loss(model: DenoiserModel, cfg: TrainConfig, batch: Sequence[TokenSequence], step: int,
              schedule: NoiseSchedule) -> tn.Tensor:
    ids, mask = stack(batch)
    if cfg.objective == "diffusion":
        # one step t per batch, uniform on {1..T}
        t = np.full(len(batch), stream(cfg.seed, "t", step).integers(1, schedule.T + 1))
        rngs = [stream(cfg.seed, "noise", step, i) for i in range(len(batch))]
        l_d, l_c = recon_objective(model, ids, mask, schedule, t, rngs, cfg.sigma0)
        return tn.add(l_d, l_c)
    if cfg.objective == "mlm":
        masked = masked_positions(mask, _word_positions(ids, mask), cfg.mask_rate, stream(cfg.seed, "mask", step))
        return model.mlm_loss(ids, masked)
    labels = np.array([s.label for s in batch])
    if any(s.label is None for s in batch):
        raise TrainingError("classifier objective needs labelled data")
    return tn.cross_entropy(model.class_logits(ids, mask), labels)


def _clip(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads


def train(cfg: TrainConfig, model: DenoiserModel, data: Sequence[TokenSequence],
          curve_path: str | Path | None = None, checkpoint_dir: str | Path | None = None) -> list[Checkpoint]:
    """Optimize ``model`` in place; returns the checkpoint series (initial, every ``checkpoint_every``, final)."""
    if not data:
        raise TrainingError("no training data")
    schedule = cfg.schedule()
    params = model.parameters()
    state = tn.AdamState(lr=cfg.lr)
    history: list[list] = []
    ckpts = [snapshot(model, 0, cfg, history)]
    batches = _batches(len(data), min(cfg.batch_size, len(data)), cfg.seed)
    for step in range(cfg.steps):
        lr = cfg.lr_at(step)
        batch = [data[i] for i in next(batches)]
        model.zero_grad()
        try:
            # overflow surfaces as a non-finite loss or gradient below, not as warnings
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                loss = step_loss(model, cfg, batch, step, schedule)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise tn.NonFiniteError("loss")
                tn.backward(loss)
                if not all(np.isfinite(p.grad).all() for p in params):
                    raise tn.NonFiniteError("gradient")
        except tn.NonFiniteError as exc:
            raise TrainingError(f"non-finite loss at step {step} (lr={lr:.3g}): {exc}") from None
        grads = [p.grad for p in params]
        if cfg.max_grad_norm:
            grads = _clip(grads, cfg.max_grad_norm)
        tn.adam_step(params, grads, state, lr=lr)
        done = step + 1
        if done % cfg.log_every == 0 or done == cfg.steps:
            history.append([done, value, lr])
            log.debug("step %d loss %.4f lr %.3g", done, value, lr)
        if (cfg.checkpoint_every and done % cfg.checkpoint_every == 0) or done == cfg.steps:
            if done != ckpts[-1].step:
                ckpts.append(snapshot(model, done, cfg, history))
    if curve_path is not None:
        write_curve(history, curve_path)
    if checkpoint_dir is not None:
        for c in ckpts:
            save_checkpoint(c, Path(checkpoint_dir) / f"step{c.step:07d}")
    return ckpts


def write_curve(history, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in history:
            w.writerow([step, repr(float(loss)), repr(float(lr))])


# -------------------------------------------------------------- evaluation
def recon_scores(model: DenoiserModel, schedule: NoiseSchedule, seqs: Sequence[TokenSequence], t: int,
                 K: int = 10, seed: int = 0, key: str = "", sigma0: float = DEFAULT_SIGMA0,
                 batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Per-sentence (l_d, l_c), each averaged over ``K`` noise draws at step ``t``.

    Draw k of sentence i uses the stream (seed, key, i, k), so scores do not
    depend on batching or on which other sentences are scored.
    """
    l_d = np.zeros(len(seqs))
    l_c = np.zeros(len(seqs))
    for k in range(K):
        for lo in range(0, len(seqs), batch_size):
            chunk = seqs[lo : lo + batch_size]
            rngs = [stream(seed, key, lo + i, k) for i in range(len(chunk))]
            br = recon_loss(chunk, model, schedule, t, rngs, sigma0)
            l_d[lo : lo + len(chunk)] += br.l_d
            l_c[lo : lo + len(chunk)] += br.l_c
    return l_d / K, l_c / K


@dataclass
class LossTable:
    steps: list[int]
    datasets: list[str]
    t_values: list[int]
    mean: np.ndarray
    stderr: np.ndarray
    l_d: np.ndarray
    l_c: np.ndarray


def eval_loop(checkpoints: Sequence[Checkpoint], datasets: dict[str, Sequence[TokenSequence]],
              t_list: Sequence[int], K: int = 10, seed: int = 0, schedule: NoiseSchedule | None = None,
              sigma0: float = DEFAULT_SIGMA0) -> LossTable:
    """Mean per-word L_recon over (checkpoint x dataset x t)."""
    if not checkpoints or not datasets or not t_list:
        raise ValueError("eval_loop needs at least one checkpoint, dataset and t")
    if schedule is None:
        tc = checkpoints[0].train_config or {}
        schedule = linear_beta_schedule(tc.get("T", 1000), tc.get("beta_start", 1e-4), tc.get("beta_end", 0.02))
    shape = (len(checkpoints), len(datasets), len(t_list))
    mean, se, ld, lc = (np.zeros(shape) for _ in range(4))
    for ci, ck in enumerate(checkpoints):
        model = ck.model()
        for di, (name, seqs) in enumerate(datasets.items()):
            for ti, t in enumerate(t_list):
                d_, c_ = recon_scores(model, schedule, seqs, t, K, seed, name, sigma0)
                r = d_ + c_
                mean[ci, di, ti] = r.mean()
                se[ci, di, ti] = r.std(ddof=1) / math.sqrt(len(r)) if len(r) > 1 else 0.0
                ld[ci, di, ti] = d_.mean()
                lc[ci, di, ti] = c_.mean()
    return LossTable([c.step for c in checkpoints], list(datasets), list(t_list), mean, se, ld, lc)
