"""Deterministic synthetic text domains standing in for real benchmark corpora.

Each domain draws words from a pool shared by every domain plus a private,
themed pool. The shared pool is sized so that, once every word has been
used, the fraction of one domain's distinct tokens found in another
domain's vocabulary equals ``overlap``. Sentences are built from clause
templates (sequences of word categories); templates and preferred words are
tied to a class label so classifiers have something to learn.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream
from .text import Corpus, avg_len, corpus_stats, save_corpus

FUNCTION_WORDS = (
    "the a of and to in is it what that for on with as was at by this be from or are an which "
    "how who where when not but all can one has have there their its if more no"
).split()

CATEGORIES = ("N", "V", "A", "F")


@dataclass
class ToyDomainSpec:
    name: str
    sentences: int = 2000
    avg_len: float = 10.0
    clause_len: tuple[int, int] = (7, 13)
    num_classes: int = 4
    words: int = 240
    seed: int = 0


DEFAULT_DOMAINS = {
    "questions": dict(avg_len=10.0, clause_len=(7, 13), num_classes=6),
    "captions": dict(avg_len=14.0, clause_len=(11, 17), num_classes=4),
    "reviews": dict(avg_len=25.0, clause_len=(6, 11), num_classes=2),
    "news": dict(avg_len=200.0, clause_len=(8, 12), num_classes=4),
}


@dataclass
class ToyUniverse:
    """Word pools shared by all generated domains."""

    overlap: float = 0.4
    words_per_domain: int = 240
    seed: int = 0
    shared: list[str] = field(init=False)

    def __post_init__(self):
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must be in [0, 1]")
        self._made: set[str] = set(FUNCTION_WORDS)
        n_shared = int(round(self.overlap * self.words_per_domain))
        fw = list(FUNCTION_WORDS[:n_shared])
        self.shared = fw + self._pseudo_words(n_shared - len(fw), "shared")

    def _pseudo_words(self, count: int, key: str) -> list[str]:
        rng = stream(self.seed, "words", key)
        cons, vows = "bdfgklmnprstvz", "aeiou"
        out: list[str] = []
        while len(out) < count:
            syl = rng.integers(2, 4)
            w = "".join(cons[rng.integers(len(cons))] + vows[rng.integers(len(vows))] for _ in range(syl))
            if w not in self._made:
                self._made.add(w)
                out.append(w)
        return out

    def domain_words(self, name: str) -> list[str]:
        return self.shared + self._pseudo_words(self.words_per_domain - len(self.shared), name)


class DomainGenerator:
    def __init__(self, spec: ToyDomainSpec, universe: ToyUniverse):
        self.spec = spec
        rng = stream(spec.seed, "domain", spec.name)
        words = universe.domain_words(spec.name)
        perm = rng.permutation(len(words))
        # round-robin category assignment keeps shared and private words in every category
        self.cats = {c: [words[i] for i in perm[k :: len(CATEGORIES)]] for k, c in enumerate(CATEGORIES)}
        self.weights = {}
        for c, ws in self.cats.items():
            base = 1.0 / np.arange(1, len(ws) + 1) ** 0.6
            per_class = []
            for y in range(spec.num_classes):
                w = base[rng.permutation(len(ws))].copy()
                fav = rng.choice(len(ws), size=max(1, len(ws) // spec.num_classes), replace=False)
                w[fav] *= 4.0
                per_class.append(w / w.sum())
            self.weights[c] = per_class
        lo, hi = spec.clause_len
        self.templates = []
        for y in range(spec.num_classes):
            ts = []
            for _ in range(3):
                length = int(rng.integers(lo, hi + 1))
                ts.append([CATEGORIES[j] for j in rng.choice(len(CATEGORIES), size=length, p=[0.35, 0.2, 0.2, 0.25])])
            self.templates.append(ts)
        self.clause_mean = (lo + hi) / 2

    def sentence(self, rng: np.random.Generator) -> tuple[str, int]:
        spec = self.spec
        y = int(rng.integers(spec.num_classes))
        n_clauses = max(1, int(round(spec.avg_len / self.clause_mean)))
        if n_clauses > 1:
            spread = max(1, n_clauses // 4)
            n_clauses = int(rng.integers(n_clauses - spread, n_clauses + spread + 1))
        out: list[str] = []
        for _ in range(n_clauses):
            tmpl = self.templates[y][rng.integers(len(self.templates[y]))]
            if n_clauses == 1:
                tmpl = self._resize(tmpl, rng)
            for c in tmpl:
                ws = self.cats[c]
                out.append(ws[rng.choice(len(ws), p=self.weights[c][y])])
        return " ".join(out), y

    def _resize(self, tmpl: list[str], rng: np.random.Generator) -> list[str]:
        # single-clause domains: jitter the template length around the target
        lo, hi = self.spec.clause_len
        target = int(rng.integers(lo, hi + 1))
        if target <= len(tmpl):
            return tmpl[:target]
        return tmpl + [tmpl[i % len(tmpl)] for i in range(target - len(tmpl))]

    def corpus(self) -> Corpus:
        rng = stream(self.spec.seed, "sentences", self.spec.name)
        pairs = [self.sentence(rng) for _ in range(self.spec.sentences)]
        return Corpus([s for s, _ in pairs], [y for _, y in pairs], self.spec.name)


def make_domains(sentences: dict[str, int] | None = None, overlap: float = 0.4, seed: int = 0,
                 words_per_domain: int = 240, profiles: dict | None = None) -> dict[str, Corpus]:
    """Generate the toy domains in memory. ``sentences`` maps domain name to size."""
    profiles = {**DEFAULT_DOMAINS, **(profiles or {})}
    sentences = sentences or {name: 2000 for name in profiles}
    universe = ToyUniverse(overlap, words_per_domain, seed)
    out = {}
    for name in sorted(sentences):
        spec = ToyDomainSpec(name=name, sentences=sentences[name], words=words_per_domain, seed=seed,
                             **profiles[name])
        out[name] = DomainGenerator(spec, universe).corpus()
    return out


def gen_toy_domains(out_dir: str | Path, sentences: dict[str, int] | None = None, overlap: float = 0.4,
                    seed: int = 0, words_per_domain: int = 240) -> dict:
    """Write ``<domain>.txt`` and ``<domain>.jsonl`` per domain plus ``manifest.json`` of realized stats."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpora = make_domains(sentences, overlap, seed, words_per_domain)
    manifest = {"seed": seed, "overlap": overlap, "words_per_domain": words_per_domain, "domains": {}}
    for name, c in corpora.items():
        save_corpus(c, out_dir / f"{name}.txt")
        save_corpus(c, out_dir / f"{name}.jsonl")
        manifest["domains"][name] = {
            "sentences": len(c),
            "target_avg_len": DEFAULT_DOMAINS[name]["avg_len"],
            "avg_len": round(avg_len(c.sentences), 4),
            "num_classes": DEFAULT_DOMAINS[name]["num_classes"],
        }
    pairs = {}
    for a, ca in corpora.items():
        for b, cb in corpora.items():
            if a != b:
                pairs[f"{a}->{b}"] = round(corpus_stats(ca.sentences, cb.sentences).token_overlap, 4)
    manifest["overlap_realized"] = pairs
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest
