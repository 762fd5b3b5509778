"""Bidirectional transformer used as denoiser, masked LM and sentence classifier."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor
from .text import MASK_ID, TokenSequence, stack


@dataclass
class ModelConfig:
    d: int = 64
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    n: int = 32
    vocab_size: int = 0
    size_tag: str = "base-analog"
    num_classes: int = 0
    init_std: float = 0.02
    emb_std: float = 0.02

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def preset(cls, size_tag: str, **kw) -> "ModelConfig":
        sizes = {"base-analog": dict(d=64, layers=2, heads=4), "large-analog": dict(d=128, layers=4, heads=8)}
        if size_tag not in sizes:
            raise ValueError(f"unknown size tag {size_tag!r}")
        return cls(size_tag=size_tag, **{**sizes[size_tag], **kw})


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(emb), 1))], axis=-1)
    return emb


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return tn.add(tn.matmul(x, w), b)


class DenoiserModel:
    """Parameters live in ``self.params`` (ordered name -> Tensor)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        if cfg.vocab_size < 6:
            raise ValueError("vocab_size must cover the special tokens")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, f = cfg.d, cfg.d * cfg.ffn_mult
        p: dict[str, Tensor] = {}

        def normal(name, *shape, std=cfg.init_std):
            p[name] = Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)

        def const(name, value, *shape):
            p[name] = Tensor(np.full(shape, value), requires_grad=True, name=name)

        normal("E", cfg.vocab_size, d, std=cfg.emb_std)
        normal("pos", cfg.n, d)
        normal("in.w", d, d)
        const("in.b", 0.0, d)
        normal("time.w1", d, d)
        const("time.b1", 0.0, d)
        normal("time.w2", d, d)
        const("time.b2", 0.0, d)
        for i in range(cfg.layers):
            k = f"block{i}."
            const(k + "ln1.g", 1.0, d)
            const(k + "ln1.b", 0.0, d)
            normal(k + "qkv.w", d, 3 * d)
            const(k + "qkv.b", 0.0, 3 * d)
            normal(k + "proj.w", d, d)
            const(k + "proj.b", 0.0, d)
            const(k + "ln2.g", 1.0, d)
            const(k + "ln2.b", 0.0, d)
            normal(k + "ff1.w", d, f)
            const(k + "ff1.b", 0.0, f)
            normal(k + "ff2.w", f, d)
            const(k + "ff2.b", 0.0, d)
        const("lnf.g", 1.0, d)
        const("lnf.b", 0.0, d)
        normal("out.w", d, d)
        const("out.b", 0.0, d)
        normal("mlm.w", d, d)
        const("mlm.b", 0.0, d)
        const("mlm.ln.g", 1.0, d)
        const("mlm.ln.b", 0.0, d)
        const("mlm.bias", 0.0, cfg.vocab_size)
        if cfg.num_classes:
            normal("cls.w", d, cfg.num_classes)
            const("cls.b", 0.0, cfg.num_classes)
        self.params = p

    @property
    def E(self) -> Tensor:
        return self.params["E"]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        tn.zero_grad(self.params.values())

    # --------------------------------------------------------------- trunk
    def _block(self, h: Tensor, i: int) -> Tensor:
        p, cfg = self.params, self.cfg
        k = f"block{i}."
        B, n, d = h.shape
        H, dh = cfg.heads, d // cfg.heads
        a = tn.layer_norm(h, p[k + "ln1.g"], p[k + "ln1.b"])
        qkv = _linear(a, p[k + "qkv.w"], p[k + "qkv.b"])
        qkv = tn.transpose(tn.reshape(qkv, (B, n, 3, H, dh)), (2, 0, 3, 1, 4))
        qkv_flat = tn.reshape(qkv, (3, B * H, n, dh))
        q, kk, v = (tn.reshape(tn.slice0(qkv_flat, j, j + 1), (B * H, n, dh)) for j in range(3))
        scores = tn.mul(tn.matmul(q, tn.swapaxes(kk, -1, -2)), 1.0 / math.sqrt(dh))
        att = tn.matmul(tn.softmax(scores, axis=-1), v)
        att = tn.transpose(tn.reshape(att, (B, H, n, dh)), (0, 2, 1, 3))
        att = tn.reshape(att, (B, n, d))
        h = tn.add(h, _linear(att, p[k + "proj.w"], p[k + "proj.b"]))
        m = tn.layer_norm(h, p[k + "ln2.g"], p[k + "ln2.b"])
        m = _linear(tn.gelu(_linear(m, p[k + "ff1.w"], p[k + "ff1.b"])), p[k + "ff2.w"], p[k + "ff2.b"])
        return tn.add(h, m)

    def trunk(self, x: Tensor, t) -> Tensor:
        """Final (layer-normed) hidden states for inputs ``x`` of shape (B, n, d) at step(s) ``t``."""
        p, cfg = self.params, self.cfg
        if x.ndim != 3 or x.shape[1] > cfg.n or x.shape[2] != cfg.d:
            raise tn.ShapeError("denoiser_forward", x.shape, (None, cfg.n, cfg.d))
        B, n, _ = x.shape
        t = np.broadcast_to(np.asarray(t), (B,))
        temb = Tensor(timestep_embedding(t, cfg.d))
        temb = _linear(tn.gelu(_linear(temb, p["time.w1"], p["time.b1"])), p["time.w2"], p["time.b2"])
        pos = p["pos"] if n == cfg.n else tn.slice0(p["pos"], 0, n)
        h = _linear(x, p["in.w"], p["in.b"])
        h = tn.add(h, pos)
        h = tn.add(h, tn.reshape(temb, (B, 1, cfg.d)))
        for i in range(cfg.layers):
            h = self._block(h, i)
        return tn.layer_norm(h, p["lnf.g"], p["lnf.b"])

    # ------------------------------------------------------------ heads
    def denoise(self, x_t: Tensor, t) -> Tensor:
        """Predict x0 from x_t; output shape equals input shape."""
        return _linear(self.trunk(x_t, t), self.params["out.w"], self.params["out.b"])

    def hidden(self, ids: np.ndarray) -> Tensor:
        """Clean-input final hidden states, step-0 conditioning."""
        return self.trunk(tn.embedding(self.E, ids), np.zeros(len(ids), dtype=np.int64))

    def hidden_repr(self, seqs: list[TokenSequence]) -> np.ndarray:
        """Mean over real positions of the clean-input final hidden states, shape (B, d)."""
        if any(s.length == 0 for s in seqs):
            raise ValueError("hidden_repr of an empty sentence")
        ids, mask = stack(seqs)
        with tn.no_grad():
            h = self.hidden(ids).data.astype(np.float64)
        return (h * mask[..., None]).sum(axis=1) / mask.sum(axis=1, keepdims=True)

    def pooled(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        h = self.hidden(ids)
        w = mask / mask.sum(axis=1, keepdims=True)
        return tn.sum_(tn.mul(h, Tensor(w[..., None])), axis=1)

    def mlm_logits(self, ids_masked: np.ndarray) -> Tensor:
        p = self.params
        h = self.hidden(ids_masked)
        h = tn.layer_norm(tn.gelu(_linear(h, p["mlm.w"], p["mlm.b"])), p["mlm.ln.g"], p["mlm.ln.b"])
        return tn.add(tn.matmul(h, tn.transpose(self.E)), p["mlm.bias"])

    def mlm_loss(self, ids: np.ndarray, masked: np.ndarray) -> Tensor:
        """Cross-entropy at positions where ``masked`` is set, inputs replaced by the mask token."""
        masked = np.asarray(masked, dtype=bool)
        if not masked.any():
            raise ValueError("mlm_loss: no masked positions")
        inp = np.where(masked, MASK_ID, ids)
        return tn.cross_entropy(self.mlm_logits(inp), ids, masked.astype(np.float64))

    def class_logits(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        if "cls.w" not in self.params:
            raise ValueError("model has no classifier head")
        return _linear(self.pooled(ids, mask), self.params["cls.w"], self.params["cls.b"])

    def classify(self, seqs: list[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
        """Class probabilities and pre-softmax logits, each (B, C)."""
        ids, mask = stack(seqs)
        with tn.no_grad():
            z = self.class_logits(ids, mask).data.astype(np.float64)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True), z


def masked_positions(seq_mask: np.ndarray, words: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Pick ``rate`` of the candidate positions per row (at least one).

    Candidates are word positions; rows without words fall back to all real positions.
    """
    if rate <= 0:
        raise ValueError("mask rate must be positive")
    out = np.zeros(seq_mask.shape, dtype=bool)
    for i in range(len(seq_mask)):
        cand = np.flatnonzero(words[i])
        if cand.size == 0:
            cand = np.flatnonzero(seq_mask[i])
        if cand.size == 0:
            raise ValueError("sequence has no maskable positions")
        k = max(1, int(round(rate * cand.size)))
        out[i, rng.choice(cand, size=k, replace=False)] = True
    return out
