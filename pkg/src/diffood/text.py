"""Whitespace tokenization, vocabularies, corpus files and splits.

Corpus file formats
-------------------
plain
    UTF-8, one sentence per line. Lines end in LF or CRLF; a trailing
    newline at end of file is optional. Every line (including empty lines)
    is one sentence.
jsonl
    UTF-8, one JSON object per non-blank line with a string ``"text"`` key
    and an optional integer ``"label"`` key. Other keys are ignored.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, BOS, EOS, MASK = "<pad>", "<unk>", "<s>", "</s>", "<mask>"
SPECIALS = (PAD, UNK, BOS, EOS, MASK)
PAD_ID, UNK_ID, BOS_ID, EOS_ID, MASK_ID = range(5)


class CorpusError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class Vocab:
    itos: list[str]
    stoi: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise CorpusError("duplicate tokens in vocabulary")
        if tuple(self.itos[: len(SPECIALS)]) != SPECIALS:
            raise CorpusError("vocabulary must start with the special tokens")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    @property
    def words(self) -> list[str]:
        return self.itos[len(SPECIALS):]


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocab:
    """Count whitespace tokens; frequent ones get ids by descending count, ties lexicographic."""
    counts: Counter[str] = Counter()
    n = 0
    for sentence in corpus:
        counts.update(tokenize(sentence))
        n += 1
    if n == 0:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    kept = [tok for tok, c in counts.items() if c >= min_freq and tok not in SPECIALS]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return Vocab(list(SPECIALS) + kept)


@dataclass
class TokenSequence:
    ids: np.ndarray
    length: int
    domain: str = ""
    label: int | None = None

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(len(self.ids), dtype=bool)
        m[: self.length] = True
        return m


def encode(text: str, vocab: Vocab, n: int, domain: str = "", label: int | None = None) -> TokenSequence:
    """BOS + tokens + EOS, truncated to ``n`` (EOS kept last) and PAD-filled."""
    if n < 2:
        raise ValueError("padded length n must be at least 2")
    body = [vocab.id(tok) for tok in tokenize(text)][: n - 2]
    ids = [BOS_ID, *body, EOS_ID]
    out = np.full(n, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    return TokenSequence(out, len(ids), domain, label)


def decode(ids: Sequence[int], vocab: Vocab) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i == EOS_ID:
            break
        if i in (PAD_ID, BOS_ID):
            continue
        words.append(vocab.itos[i])
    return " ".join(words)


def encode_corpus(corpus: "Corpus", vocab: Vocab, n: int) -> list[TokenSequence]:
    labels = corpus.labels or [None] * len(corpus.sentences)
    return [encode(s, vocab, n, corpus.domain, lab) for s, lab in zip(corpus.sentences, labels)]


def stack(seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Batch ids (B, n) and float mask (B, n) of real positions."""
    ids = np.stack([s.ids for s in seqs])
    mask = np.zeros(ids.shape, dtype=np.float64)
    for i, s in enumerate(seqs):
        mask[i, : s.length] = 1.0
    return ids, mask


@dataclass
class CorpusStats:
    vocab_size: int
    avg_len: float
    token_overlap: float


def avg_len(sentences: Sequence[str]) -> float:
    if not sentences:
        raise CorpusError("empty corpus")
    return float(np.mean([len(tokenize(s)) for s in sentences]))


def corpus_stats(id_corpus: Sequence[str], ood_corpus: Sequence[str], vocab: Vocab | None = None) -> CorpusStats:
    """Vocabulary size of the ID corpus, OOD average length and OOD token overlap.

    ``token_overlap`` is the fraction of distinct OOD tokens present in the
    ID vocabulary.
    """
    if not ood_corpus:
        raise CorpusError("empty OOD corpus")
    if vocab is None:
        vocab = build_vocab(id_corpus)
    ood_tokens = {tok for s in ood_corpus for tok in tokenize(s)}
    if not ood_tokens:
        raise CorpusError("OOD corpus has no tokens")
    hit = sum(1 for tok in ood_tokens if tok in vocab.stoi and tok not in SPECIALS)
    return CorpusStats(len(vocab.words), avg_len(ood_corpus), hit / len(ood_tokens))


@dataclass
class Corpus:
    sentences: list[str]
    labels: list[int] | None = None
    domain: str = ""

    def __len__(self) -> int:
        return len(self.sentences)

    def subset(self, idx: Sequence[int]) -> "Corpus":
        labels = [self.labels[i] for i in idx] if self.labels is not None else None
        return Corpus([self.sentences[i] for i in idx], labels, self.domain)


def load_corpus(path: str | Path, format: str | None = None, domain: str | None = None) -> Corpus:
    path = Path(path)
    if format is None:
        format = "jsonl" if path.suffix in (".jsonl", ".json") else "plain"
    raw = path.read_bytes().decode("utf-8")
    lines = raw.replace("\r\n", "\n").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    domain = path.stem if domain is None else domain
    if format == "plain":
        return Corpus(lines, None, domain)
    if format != "jsonl":
        raise CorpusError(f"unknown corpus format {format!r}")
    sentences, labels = [], []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            text = obj["text"]
            if not isinstance(text, str):
                raise TypeError("text is not a string")
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CorpusError(f"{path}:{lineno}: malformed jsonl record ({exc})") from None
        sentences.append(text)
        labels.append(obj.get("label"))
    if all(lab is None for lab in labels):
        return Corpus(sentences, None, domain)
    if any(lab is None for lab in labels):
        raise CorpusError(f"{path}: labels present on some records but not others")
    return Corpus(sentences, [int(lab) for lab in labels], domain)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    path = Path(path)
    if path.suffix == ".jsonl":
        rows = []
        for i, s in enumerate(corpus.sentences):
            rec = {"text": s}
            if corpus.labels is not None:
                rec["label"] = corpus.labels[i]
            rows.append(json.dumps(rec, ensure_ascii=False))
        text = "\n".join(rows) + "\n"
    else:
        text = "\n".join(corpus.sentences) + "\n"
    path.write_bytes(text.encode("utf-8"))


def split(corpus: Corpus, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> list[Corpus]:
    """Deterministic shuffled partition; sizes are rounded with the remainder going to the first part."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise CorpusError(f"split fractions must sum to 1, got {sum(fractions)}")
    n = len(corpus)
    perm = np.random.default_rng(seed).permutation(n)
    sizes = [int(round(f * n)) for f in fractions]
    sizes[0] += n - sum(sizes)
    if any(s <= 0 for s in sizes):
        raise CorpusError(f"split of {n} sentences by {tuple(fractions)} leaves an empty part")
    parts, start = [], 0
    for s in sizes:
        parts.append(corpus.subset(perm[start : start + s].tolist()))
        start += s
    return parts
